#pragma once

// Synthetic class-conditional data, class-prior subsampling, and backdoor
// poisoning.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mmclip/dataset.hpp"

namespace mmclip {

/// Images whose class structure and nuisance variation are both piecewise
/// constant on 2x2 cells, plus faint per-pixel noise.
struct SynthSpec {
  std::size_t num_classes = 10;
  Shape sample_shape{1, 8, 8};  // CxHxW, or {d} for a 1xd strip
  std::size_t per_class = 500;
  std::size_t modes = 2;         // prototypes per class
  double separation = 0.3;       // spread of prototype cells around 0.5
  double noise = 0.25;           // std of the cell-level nuisance
  double pixel_noise = 0.01;     // std of the per-pixel noise
  std::uint64_t seed = 0;
  /// Draw the samples from their own stream; prototypes still come from
  /// `seed`, so files with one `seed` and different sample seeds share a task.
  std::optional<std::uint64_t> sample_seed = std::nullopt;
};

Dataset synth_classes(const SynthSpec& spec);

enum class ImbalanceKind { lt, step };

struct ImbalanceSpec {
  ImbalanceKind kind = ImbalanceKind::lt;
  double gamma = 100.0;   // largest / smallest class size
  std::size_t n0 = 500;   // size of the most frequent class

  double mu_exponential(std::size_t num_classes) const;
  double mu_step() const { return 1.0 / gamma; }
  /// Target size of every class.
  std::vector<std::size_t> class_sizes(std::size_t num_classes) const;
};

/// Keeps class_sizes()[i] samples of class i, drawn without replacement.
Dataset apply_imbalance(const Dataset& ds, const ImbalanceSpec& spec, std::uint64_t seed);

enum class TriggerKind { additive_global, patch_replace, patch_blend };

struct TriggerSpec {
  TriggerKind kind = TriggerKind::additive_global;
  std::vector<double> pattern;    // additive: delta; patches: replacement values
  std::vector<std::uint8_t> mask;  // patches only, 1 inside the patch
  double alpha = 1.0;              // blend weight of the pattern
  int target = 0;

  double delta_norm() const;
};

/// Alternating +amplitude / -amplitude over the whole image.
TriggerSpec chessboard_trigger(const Shape& sample_shape, double amplitude, int target);
/// size x size patch with its top-left corner at (row, col) of every channel;
/// pattern is a fixed checkerboard of 1s and 0s. alpha < 1 blends.
TriggerSpec patch_trigger(const Shape& sample_shape, std::size_t size, std::size_t row,
                          std::size_t col, double alpha, int target);

/// Embeds the trigger; the result stays in [0,1].
std::vector<double> embed_trigger(std::span<const double> x, const TriggerSpec& spec);
/// Triggered copy of every sample, labels left unchanged.
Dataset embed_all(const Dataset& ds, const TriggerSpec& spec);

/// Triggers round(rate * eligible) random non-target samples and relabels
/// them to the target class.
Dataset poison(const Dataset& ds, const TriggerSpec& spec, double rate, std::uint64_t seed);

struct CleanSplit {
  CleanSet clean;
  Dataset rest;
};

/// Moves per_class random samples of every class into a CleanSet.
CleanSplit split_clean_set(const Dataset& source, std::size_t per_class, std::uint64_t seed);

/// Same as split_clean_set but returns plain datasets (held-out, rest).
std::pair<Dataset, Dataset> split_per_class(const Dataset& source, std::size_t per_class,
                                            std::uint64_t seed);

}  // namespace mmclip
