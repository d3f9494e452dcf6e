#include "mmclip/datagen.hpp"

#include <algorithm>
#include <cmath>

#include "mmclip/error.hpp"
#include "mmclip/random.hpp"

namespace mmclip {

namespace {

struct ImageGeometry {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t size() const { return channels * height * width; }
};

ImageGeometry geometry_of(const Shape& shape) {
  if (shape.size() == 1) return {1, 1, shape[0]};
  if (shape.size() == 3) return {shape[0], shape[1], shape[2]};
  throw InvalidArgument("sample shape " + shape_string(shape) + " is neither {d} nor {C,H,W}");
}

std::size_t round_half_up(double v) { return static_cast<std::size_t>(std::floor(v + 0.5)); }

}  // namespace

Dataset synth_classes(const SynthSpec& spec) {
  if (!(spec.separation > 0.0)) throw InvalidArgument("synth_classes: separation must be > 0");
  if (spec.modes == 0) throw InvalidArgument("synth_classes: need at least one mode");
  const ImageGeometry g = geometry_of(spec.sample_shape);
  const std::size_t cell_h = g.height > 1 ? 2 : 1, cell_w = 2;
  const std::size_t rows = (g.height + cell_h - 1) / cell_h;
  const std::size_t cols = (g.width + cell_w - 1) / cell_w;
  const std::size_t cells = g.channels * rows * cols;
  auto cell_of = [&](std::size_t c, std::size_t r, std::size_t s) {
    return (c * rows + r / cell_h) * cols + s / cell_w;
  };

  Rng rng(spec.seed);
  std::vector<std::vector<double>> prototypes(spec.num_classes * spec.modes,
                                              std::vector<double>(cells));
  for (auto& proto : prototypes)
    for (double& v : proto) v = 0.5 + spec.separation * rng.normal();

  if (spec.sample_seed) rng = Rng(*spec.sample_seed);
  Dataset ds(spec.sample_shape, spec.num_classes);
  std::vector<double> nuisance(cells), x(g.size());
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const auto& proto = prototypes[c * spec.modes + rng.index(spec.modes)];
      for (double& v : nuisance) v = spec.noise * rng.normal();
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < g.channels; ++ch)
        for (std::size_t r = 0; r < g.height; ++r)
          for (std::size_t s = 0; s < g.width; ++s, ++k) {
            const std::size_t cell = cell_of(ch, r, s);
            const double v = proto[cell] + nuisance[cell] + spec.pixel_noise * rng.normal();
            x[k] = std::clamp(v, 0.0, 1.0);
          }
      ds.push(x, static_cast<int>(c));
    }
  return ds;
}

double ImbalanceSpec::mu_exponential(std::size_t num_classes) const {
  if (num_classes < 2) return 1.0;
  return std::pow(gamma, -1.0 / static_cast<double>(num_classes - 1));
}

std::vector<std::size_t> ImbalanceSpec::class_sizes(std::size_t num_classes) const {
  if (!(gamma >= 1.0)) throw InvalidArgument("imbalance ratio gamma must be >= 1");
  if (n0 == 0) throw InvalidArgument("imbalance n0 must be positive");
  const double n = static_cast<double>(n0);
  std::vector<std::size_t> sizes(num_classes);
  if (kind == ImbalanceKind::lt) {
    const double mu = mu_exponential(num_classes);
    for (std::size_t i = 0; i < num_classes; ++i)
      sizes[i] = round_half_up(n * std::pow(mu, static_cast<double>(i)));
    // Pin the rarest class so the realized ratio is exactly gamma.
    sizes.back() = round_half_up(n / gamma);
  } else {
    for (std::size_t i = 0; i < num_classes; ++i)
      sizes[i] = 2 * i < num_classes ? n0 : round_half_up(mu_step() * n);
  }
  if (std::find(sizes.begin(), sizes.end(), 0u) != sizes.end())
    throw InvalidArgument("imbalance spec leaves a class with no samples");
  return sizes;
}

Dataset apply_imbalance(const Dataset& ds, const ImbalanceSpec& spec, std::uint64_t seed) {
  const auto sizes = spec.class_sizes(ds.num_classes());
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    auto rows = ds.rows_of_class(static_cast<int>(c));
    if (rows.size() < sizes[c])
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                      " samples, imbalance needs " + std::to_string(sizes[c]));
    rng.shuffle(rows);
    keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(sizes[c]));
  }
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

double TriggerSpec::delta_norm() const {
  double s = 0.0;
  for (std::size_t i = 0; i < pattern.size(); ++i)
    if (kind == TriggerKind::additive_global || (i < mask.size() && mask[i]))
      s += pattern[i] * pattern[i];
  return std::sqrt(s);
}

TriggerSpec chessboard_trigger(const Shape& sample_shape, double amplitude, int target) {
  const ImageGeometry g = geometry_of(sample_shape);
  TriggerSpec t;
  t.kind = TriggerKind::additive_global;
  t.target = target;
  t.pattern.reserve(g.size());
  for (std::size_t ch = 0; ch < g.channels; ++ch)
    for (std::size_t r = 0; r < g.height; ++r)
      for (std::size_t s = 0; s < g.width; ++s)
        t.pattern.push_back((r + s) % 2 == 0 ? amplitude : -amplitude);
  return t;
}

TriggerSpec patch_trigger(const Shape& sample_shape, std::size_t size, std::size_t row,
                          std::size_t col, double alpha, int target) {
  const ImageGeometry g = geometry_of(sample_shape);
  if (size == 0 || row + size > g.height || col + size > g.width)
    throw InvalidArgument("trigger mask outside geometry " + shape_string(sample_shape));
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("blend alpha must be in (0,1]");
  TriggerSpec t;
  t.kind = alpha < 1.0 ? TriggerKind::patch_blend : TriggerKind::patch_replace;
  t.alpha = alpha;
  t.target = target;
  t.pattern.assign(g.size(), 0.0);
  t.mask.assign(g.size(), 0);
  for (std::size_t ch = 0; ch < g.channels; ++ch)
    for (std::size_t u = 0; u < size; ++u)
      for (std::size_t v = 0; v < size; ++v) {
        const std::size_t idx = (ch * g.height + row + u) * g.width + col + v;
        t.mask[idx] = 1;
        t.pattern[idx] = (u + v) % 2 == 0 ? 1.0 : 0.0;
      }
  return t;
}

std::vector<double> embed_trigger(std::span<const double> x, const TriggerSpec& spec) {
  if (spec.pattern.size() != x.size() ||
      (spec.kind != TriggerKind::additive_global && spec.mask.size() != x.size()))
    throw InvalidArgument("trigger mask outside geometry: pattern has " +
                          std::to_string(spec.pattern.size()) + " values, sample has " +
                          std::to_string(x.size()));
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (spec.kind) {
      case TriggerKind::additive_global:
        out[i] = x[i] + spec.pattern[i];
        break;
      case TriggerKind::patch_replace:
        if (spec.mask[i]) out[i] = spec.pattern[i];
        break;
      case TriggerKind::patch_blend:
        if (spec.mask[i]) out[i] = (1.0 - spec.alpha) * x[i] + spec.alpha * spec.pattern[i];
        break;
    }
    out[i] = std::clamp(out[i], 0.0, 1.0);
  }
  return out;
}

Dataset embed_all(const Dataset& ds, const TriggerSpec& spec) {
  Dataset out = ds;
  for (std::size_t i = 0; i < ds.size(); ++i) out.set_sample(i, embed_trigger(ds.sample(i), spec));
  return out;
}

Dataset poison(const Dataset& ds, const TriggerSpec& spec, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0)) throw InvalidArgument("poison rate must be in (0,1)");
  if (spec.target < 0 || static_cast<std::size_t>(spec.target) >= ds.num_classes())
    throw InvalidArgument("poison target class out of range");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.label(i) != spec.target) eligible.push_back(i);
  const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(eligible.size())));
  if (count == 0) throw InvalidArgument("poison rate yields zero poisoned samples");
  Rng rng(seed);
  rng.shuffle(eligible);
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());
  Dataset out = ds;
  for (std::size_t i : eligible) {
    out.set_sample(i, embed_trigger(ds.sample(i), spec));
    out.set_label(i, spec.target);
    out.set_poisoned(i, true);
  }
  return out;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& source, std::size_t per_class,
                                            std::uint64_t seed) {
  if (per_class == 0) throw InvalidArgument("per_class must be positive");
  Rng rng(seed);
  std::vector<std::size_t> held;
  std::vector<std::uint8_t> taken(source.size(), 0);
  for (std::size_t c = 0; c < source.num_classes(); ++c) {
    auto rows = source.rows_of_class(static_cast<int>(c));
    if (rows.size() < per_class)
      throw DataError("insufficient samples in class " + std::to_string(c) + ": need " +
                      std::to_string(per_class) + ", have " + std::to_string(rows.size()));
    rng.shuffle(rows);
    rows.resize(per_class);
    std::sort(rows.begin(), rows.end());
    for (std::size_t r : rows) taken[r] = 1;
    held.insert(held.end(), rows.begin(), rows.end());
  }
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < source.size(); ++i)
    if (!taken[i]) rest.push_back(i);
  return {source.subset(held), source.subset(rest)};
}

CleanSplit split_clean_set(const Dataset& source, std::size_t per_class, std::uint64_t seed) {
  auto [held, rest] = split_per_class(source, per_class, seed);
  return {CleanSet(std::move(held)), std::move(rest)};
}

}  // namespace mmclip
