#include "mmclip/csv.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include "mmclip/binary_io.hpp"
#include "mmclip/error.hpp"

namespace mmclip {

namespace {

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void check_cell(const std::string& cell) {
  if (cell.find_first_of(",\n\r") != std::string::npos)
    throw InvalidArgument("CSV cells must not contain commas or newlines: '" + cell + "'");
}

constexpr const char* kFooter = "# config_hash=";

}  // namespace

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {
  for (const auto& h : header_) check_cell(h);
}

void CsvTable::add(std::vector<std::string> row) {
  if (row.size() != header_.size())
    throw InvalidArgument("CSV row has " + std::to_string(row.size()) + " cells, header has " +
                          std::to_string(header_.size()));
  for (const auto& c : row) check_cell(c);
  rows_.push_back(std::move(row));
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header_.size(); ++i)
    if (header_[i] == name) return i;
  throw InvalidArgument("CSV has no column '" + name + "'");
}

const std::string& CsvTable::at(std::size_t row, const std::string& name) const {
  return rows_.at(row).at(column(name));
}

double CsvTable::number(std::size_t row, const std::string& name) const {
  const std::string& s = at(row, name);
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw DataError("CSV column '" + name + "': '" + s + "' is not a number");
  return v;
}

std::string CsvTable::str(const std::string& config_hash) const {
  std::string out;
  auto line = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  if (!config_hash.empty()) out += std::string(kFooter) + config_hash + "\n";
  return out;
}

void CsvTable::save(const std::string& path, const std::string& config_hash) const {
  binary::write_file(path, str(config_hash));
}

CsvTable CsvTable::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  CsvTable t;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!have_header) {
      t.header_ = split_row(line);
      have_header = true;
    } else {
      auto row = split_row(line);
      if (row.size() != t.header_.size())
        throw DataError("CSV row '" + line + "' does not match the header width");
      t.rows_.push_back(std::move(row));
    }
  }
  if (!have_header) throw DataError("CSV text has no header row");
  return t;
}

CsvTable CsvTable::load(const std::string& path) { return parse(binary::read_file(path)); }

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(std::size_t v) { return std::to_string(v); }

std::string csv_config_hash(const std::string& text) {
  const auto pos = text.rfind(kFooter);
  if (pos == std::string::npos) return {};
  const auto start = pos + std::string(kFooter).size();
  const auto end = text.find('\n', start);
  return text.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

}  // namespace mmclip
