#include "mmclip/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>
#include <string_view>

#include "mmclip/binary_io.hpp"
#include "mmclip/error.hpp"

namespace mmclip {

Dataset::Dataset(Shape sample_shape, std::size_t num_classes)
    : sample_shape_(std::move(sample_shape)),
      dim_(shape_size(sample_shape_)),
      num_classes_(num_classes) {
  if (sample_shape_.empty() || dim_ == 0) throw DataError("dataset sample shape is empty");
  if (num_classes_ < 2) throw DataError("dataset needs at least two classes");
}

void Dataset::push(std::span<const double> x, int label, bool poisoned) {
  if (x.size() != dim_)
    throw DataError("sample has " + std::to_string(x.size()) + " values, expected " +
                    std::to_string(dim_));
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes_)
    throw DataError("label " + std::to_string(label) + " outside [0," +
                    std::to_string(num_classes_) + ")");
  features_.insert(features_.end(), x.begin(), x.end());
  labels_.push_back(label);
  poisoned_.push_back(poisoned ? 1 : 0);
}

void Dataset::set_sample(std::size_t i, std::span<const double> x) {
  if (x.size() != dim_) throw DataError("set_sample: wrong sample size");
  std::copy(x.begin(), x.end(), features_.begin() + static_cast<std::ptrdiff_t>(i * dim_));
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes_, 0);
  for (int y : labels_) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

std::vector<std::size_t> Dataset::rows_of_class(int c) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] == c) rows.push_back(i);
  return rows;
}

std::size_t Dataset::poisoned_count() const {
  return static_cast<std::size_t>(std::count(poisoned_.begin(), poisoned_.end(), 1));
}

Tensor Dataset::inputs() const {
  if (empty()) throw DataError("inputs() of an empty dataset");
  Shape s{size()};
  s.insert(s.end(), sample_shape_.begin(), sample_shape_.end());
  return Tensor(std::move(s), features_);
}

Tensor Dataset::inputs(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw DataError("inputs() of an empty row selection");
  Shape s{rows.size()};
  s.insert(s.end(), sample_shape_.begin(), sample_shape_.end());
  std::vector<double> data;
  data.reserve(rows.size() * dim_);
  for (std::size_t r : rows) {
    auto x = sample(r);
    data.insert(data.end(), x.begin(), x.end());
  }
  return Tensor(std::move(s), std::move(data));
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out(sample_shape_, num_classes_);
  out.features_.reserve(rows.size() * dim_);
  for (std::size_t r : rows) out.push(sample(r), labels_[r], poisoned_[r] != 0);
  return out;
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < features_.size(); ++i)
    if (!(features_[i] >= 0.0 && features_[i] <= 1.0))
      throw DataError("sample " + std::to_string(i / dim_) + " has a value outside [0,1]");
  for (int y : labels_)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes_)
      throw DataError("label " + std::to_string(y) + " out of range");
}

CleanSet::CleanSet(Dataset data) : data_(std::move(data)) {
  const auto counts = data_.class_counts();
  per_class_ = counts.empty() ? 0 : counts[0];
  if (per_class_ == 0 ||
      std::any_of(counts.begin(), counts.end(), [&](std::size_t n) { return n != per_class_; }))
    throw DataError("clean set must hold the same nonzero number of samples per class");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void scale_into_unit(std::vector<double>& values) {
  if (values.empty()) return;
  for (double v : values)
    if (!std::isfinite(v)) throw DataError("dataset holds a non-finite value");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo >= 0.0 && *hi <= 1.0) return;
  const double a = *lo, span = *hi - *lo;
  for (double& v : values) v = span > 0.0 ? (v - a) / span : 0.0;
}

}  // namespace

std::string encode_csv(const Dataset& ds) {
  std::string out = "label";
  for (std::size_t j = 0; j < ds.dim(); ++j) out += ",f" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += std::to_string(ds.label(i));
    for (double v : ds.sample(i)) out += ',' + format_double(v);
    out += '\n';
  }
  return out;
}

Dataset decode_csv(const std::string& text, std::size_t num_classes, Shape sample_shape) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0, dim = 0;
  bool header = false;
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line.rfind("label", 0) != 0)
        throw DataError("csv line " + std::to_string(line_no) + ": expected header 'label,f0,...'");
      dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
      if (dim == 0) throw DataError("csv header declares no features");
      header = true;
      continue;
    }
    std::string_view rest(line);
    std::size_t field = 0;
    while (true) {
      const auto comma = rest.find(',');
      const std::string_view tok = rest.substr(0, comma);
      if (field == 0) {
        long long y = 0;
        auto r = std::from_chars(tok.data(), tok.data() + tok.size(), y);
        if (r.ec != std::errc() || r.ptr != tok.data() + tok.size())
          throw DataError("csv line " + std::to_string(line_no) + ": malformed label");
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
          throw DataError("csv line " + std::to_string(line_no) + ": label " +
                          std::to_string(y) + " outside [0," + std::to_string(num_classes) + ")");
        labels.push_back(static_cast<int>(y));
      } else {
        double v = 0.0;
        auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (r.ec != std::errc() || r.ptr != tok.data() + tok.size())
          throw DataError("csv line " + std::to_string(line_no) + ": malformed value '" +
                          std::string(tok) + "'");
        values.push_back(v);
      }
      ++field;
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (field != dim + 1)
      throw DataError("csv line " + std::to_string(line_no) + ": expected " +
                      std::to_string(dim + 1) + " fields, got " + std::to_string(field));
  }
  if (!header) throw DataError("csv has no header");
  if (sample_shape.empty()) sample_shape = {dim};
  if (shape_size(sample_shape) != dim)
    throw DataError("csv rows have " + std::to_string(dim) + " features, shape " +
                    shape_string(sample_shape) + " needs " +
                    std::to_string(shape_size(sample_shape)));
  scale_into_unit(values);
  Dataset ds(std::move(sample_shape), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    ds.push(std::span<const double>(values).subspan(i * dim, dim), labels[i]);
  return ds;
}

std::string encode_raw(const Dataset& ds) {
  binary::Writer w;
  w.bytes("MMDATA");
  w.u8(1);
  w.u32(static_cast<std::uint32_t>(ds.num_classes()));
  w.u32(static_cast<std::uint32_t>(ds.sample_shape().size()));
  for (std::size_t d : ds.sample_shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u64(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u32(static_cast<std::uint32_t>(ds.label(i)));
    w.u8(ds.poisoned(i) ? 1 : 0);
    for (double v : ds.sample(i)) w.f64(v);
  }
  return w.data();
}

Dataset decode_raw(const std::string& bytes) {
  binary::Reader r(bytes);
  std::string magic;
  if (!r.bytes(6, magic) || magic != "MMDATA") throw DataError("not a raw dataset (bad magic)");
  std::uint8_t version = 0;
  std::uint32_t classes = 0, rank = 0;
  if (!r.u8(version)) throw DataError("raw dataset truncated");
  if (version != 1) throw DataError("raw dataset version " + std::to_string(version) + " unsupported");
  if (!r.u32(classes) || !r.u32(rank)) throw DataError("raw dataset truncated");
  if (rank == 0 || rank > 8) throw DataError("raw dataset has a bad sample rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = 0;
    if (!r.u32(d)) throw DataError("raw dataset truncated");
    shape.push_back(d);
  }
  std::uint64_t count = 0;
  if (!r.u64(count)) throw DataError("raw dataset truncated");
  Dataset ds(shape, classes);
  const std::size_t dim = ds.dim();
  if (r.remaining() != count * (5 + 8 * dim)) throw DataError("raw dataset size does not match its header");
  std::vector<double> values(count * dim);
  std::vector<std::uint32_t> labels(count);
  std::vector<std::uint8_t> flags(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    r.u32(labels[i]);
    r.u8(flags[i]);
    for (std::size_t j = 0; j < dim; ++j) r.f64(values[i * dim + j]);
    if (labels[i] >= classes)
      throw DataError("raw dataset label " + std::to_string(labels[i]) + " out of range");
  }
  scale_into_unit(values);
  for (std::uint64_t i = 0; i < count; ++i)
    ds.push(std::span<const double>(values).subspan(i * dim, dim), static_cast<int>(labels[i]),
            flags[i] != 0);
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path, DataFormat format) {
  binary::write_file(path, format == DataFormat::csv ? encode_csv(ds) : encode_raw(ds));
}

Dataset load_external(const std::string& path, DataFormat format, std::size_t num_classes,
                      Shape sample_shape) {
  const std::string bytes = binary::read_file(path);
  if (format == DataFormat::csv) return decode_csv(bytes, num_classes, std::move(sample_shape));
  return decode_raw(bytes);
}

}  // namespace mmclip
