#pragma once

// Learning activation upper bounds that suppress maximum margins.
//
// Both objectives share a penalty on the mean maximum margin per class,
// evaluated at margin points found by ascent; they differ in the data term:
//   mmac: mean squared difference between bounded and original logits on D
//   mmom: cross-entropy of the bounded network on D
// Optimization alternates margin ascent (bounds fixed) with one descent step
// on the bounds (margin points fixed).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmclip/dataset.hpp"
#include "mmclip/error.hpp"
#include "mmclip/margin.hpp"
#include "mmclip/network.hpp"

namespace mmclip {

enum class Objective { mmac, mmom };

std::string objective_name(Objective o);
Objective parse_objective(const std::string& name);

/// Step rule on the normalized bounds u = z / z0.
///   adam:       per-coordinate adaptive steps of about bound_step
///   normalized: gradient direction, rescaled so its RMS coordinate is bound_step
enum class BoundUpdate { adam, normalized };

std::string update_name(BoundUpdate u);
BoundUpdate parse_update(const std::string& name);

struct MitigationConfig {
  Objective objective = Objective::mmac;
  double lambda = 1e-5;
  std::size_t max_iterations = 300;
  double tolerance = 1e-4;     // stop when |loss_t - loss_{t-1}| falls below
  double bound_step = 0.01;    // per-iteration step on bounds relative to their initial values
  double beta = 2.0;           // initial bounds = beta * clean maxima
  BoundUpdate update = BoundUpdate::adam;
  AscentConfig ascent;         // restarts == 0 -> one per clean sample
};

struct LossTerms {
  double total = 0.0;
  double data = 0.0;    // logit MSE (mmac) or cross-entropy (mmom)
  double margin = 0.0;  // lambda-free mean of per-class mean margins
};

/// Margin points of all classes, J per class, stored class-major.
struct MarginPoints {
  std::vector<MarginEstimate> rows;
  std::size_t per_class = 0;
};

LossTerms loss_mmac(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                    const MarginPoints& points, double lambda);
LossTerms loss_mmom(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                    const MarginPoints& points, double lambda);

struct ObjectiveValue {
  LossTerms terms;
  std::vector<Tensor> gradient;  // d total / d bounds, per clippable layer
};

/// Loss and its gradient with respect to the bounds. `original_logits` are
/// the unbounded network's logits on the clean set (used by mmac only).
ObjectiveValue evaluate_objective(const Network& net, const BoundVectors& bounds,
                                  const CleanSet& clean, const Tensor& original_logits,
                                  const MarginPoints& points, Objective objective, double lambda);

struct IterationRecord {
  std::size_t iteration = 0;
  LossTerms terms;
  std::vector<double> class_margins;  // mean margin per class at this iterate
};

struct MitigationResult {
  BoundVectors bounds;
  BoundVectors initial_bounds;
  std::vector<IterationRecord> history;
  MarginPoints points;
  bool converged = false;
};

class MitigationError : public Error {
 public:
  MitigationError(const std::string& what, std::vector<IterationRecord> history)
      : Error(what), history_(std::move(history)) {}
  const std::vector<IterationRecord>& history() const { return history_; }

 private:
  std::vector<IterationRecord> history_;
};

/// Initial margin points: restart_point() for every class and restart.
MarginPoints initial_margin_points(const Network& net, std::size_t per_class, std::uint64_t seed);

MitigationResult run_mitigation(const Network& net, const CleanSet& clean,
                                const MitigationConfig& cfg);

}  // namespace mmclip
