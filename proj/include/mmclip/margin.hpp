#pragma once

// Maximum classification margin of a (bounded) network over the input box
// [0,1]^d, found by multi-restart projected gradient ascent.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mmclip/dataset.hpp"
#include "mmclip/network.hpp"

namespace mmclip {

struct AscentConfig {
  std::size_t steps = 50;
  double step_size = 0.1;
  /// Restarts per class; 0 means one per clean sample of that class.
  std::size_t restarts = 0;
  std::uint64_t seed = 0;
};

struct MarginEstimate {
  int cls = 0;
  std::vector<double> point;  // in [0,1]^d
  double margin = 0.0;        // f_c(point) - max_{k != c} f_k(point)
  std::size_t restart = 0;
  std::size_t trace_length = 0;  // iterates evaluated
  bool converged = false;        // last projected step was (near) stationary
  bool aborted = false;          // a non-finite gradient stopped this restart
};

/// Per-row margins f_c - max_{k != c} f_k of a batch, classes given per row.
std::vector<double> margins(const Network& net, const BoundVectors& bounds,
                            const Tensor& batch, std::span<const int> classes);

/// Runs projected ascent from every estimate's current point in place,
/// keeping the best iterate. Rows are processed in parallel chunks.
void ascend(const Network& net, const BoundVectors& bounds, std::vector<MarginEstimate>& rows,
            const AscentConfig& cfg);

MarginEstimate ascend_margin(const Network& net, const BoundVectors& bounds, int cls,
                             std::span<const double> x_init, const AscentConfig& cfg);

/// `restarts` ascents from uniform random points, sorted by margin, best first.
/// Restart j always starts from the same point for a given seed.
std::vector<MarginEstimate> estimate_class_margins(const Network& net, const BoundVectors& bounds,
                                                   int cls, std::size_t restarts,
                                                   std::uint64_t seed, AscentConfig cfg = {});

/// Uniform starting point of restart `restart` for class `cls`.
std::vector<double> restart_point(std::size_t dim, std::uint64_t seed, int cls,
                                  std::size_t restart);

/// Exact maximum over a regular grid of [0,1]^d with `resolution` points per
/// axis. Only for d <= 3.
double brute_force_margin(const Network& net, const BoundVectors& bounds, int cls,
                          std::size_t resolution);

/// delta . grad_x (f_t - f_s) at each row of `batch`.
std::vector<double> directional_overfit_stats(const Network& net, const BoundVectors* bounds,
                                              std::span<const double> delta, const Tensor& batch,
                                              int source, int target);
double directional_overfit_stat(const Network& net, std::span<const double> delta,
                                std::span<const double> x_source, int source, int target);

/// ||grad_x f_cls|| per row.
std::vector<double> logit_gradient_norms(const Network& net, const BoundVectors* bounds,
                                         const Tensor& batch, int cls);

struct MarginFloor {
  double tau = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  bool partial() const { return correct < total; }
};

/// Smallest training margin f_y - max_{k != y} f_k over correctly classified
/// samples.
MarginFloor margin_floor(const Network& net, const Dataset& ds);

struct LogitPreservation {
  std::vector<double> mse;                   // per class: mean (fbar_c - f_c)^2 over D
  std::vector<double> gradient_norm_ratio;  // per class: mean ||grad fbar_c|| / ||grad f_c||
};

LogitPreservation logit_preservation_report(const Network& net, const BoundVectors& bounds,
                                            const CleanSet& clean);

}  // namespace mmclip
