#pragma once

// Sample-level defense combining an original model f with its clipped
// counterpart fbar. A sample is flagged when the two disagree, or when f is
// anomalously more confident than fbar under a Gaussian null fitted on D.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmclip/dataset.hpp"
#include "mmclip/network.hpp"

namespace mmclip {

struct NullModel {
  static constexpr std::size_t kMinSamples = 30;
  static constexpr double kMinStd = 1e-9;

  double mean = 0.0;
  double std = 1.0;
  double theta = 0.005;

  /// Throws InvalidArgument unless std > 0 and theta is in (0, 0.5).
  void validate() const;
};

/// Gaussian fit (sample mean, n-1 standard deviation) of raw statistics.
/// Throws on fewer than two values or a degenerate spread.
NullModel fit_gaussian(const std::vector<double>& stats, double theta = 0.005);

/// conf_f(x) - conf_fbar(x) per row, conf = max softmax probability.
std::vector<double> confidence_differences(const Network& net, const BoundVectors& bounds,
                                           const Tensor& batch);

/// Null of the confidence difference over the clean set (at least 30 samples).
NullModel fit_null(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                   double theta = 0.005);

/// Upper-tail probability of s under the null.
double p_value(const NullModel& null, double s);

enum class FlagReason { none, disagreement, anomalous_confidence };
std::string reason_name(FlagReason r);

/// Label given to a sample flagged for anomalous confidence only.
///   mitigated: fbar's label (which equals f's label here)
///   runner_up: fbar's best class other than the one both models chose
enum class Correction { mitigated, runner_up };
std::string correction_name(Correction c);
Correction parse_correction(const std::string& name);

struct DefenseVerdict {
  int label = 0;
  int original_label = 0;
  int mitigated_label = 0;
  bool flagged = false;
  FlagReason reason = FlagReason::none;
  double statistic = 0.0;
  std::optional<double> p;  // absent when disagreement decided the sample
};

/// Verdicts for a batch of samples; `theta` overrides null.theta when set.
std::vector<DefenseVerdict> defend(const Network& net, const BoundVectors& bounds,
                                   const NullModel& null, const Tensor& batch,
                                   std::optional<double> theta = std::nullopt,
                                   Correction correction = Correction::mitigated);

std::vector<int> final_labels(const std::vector<DefenseVerdict>& verdicts);

/// CSV rows "id,original,mitigated,final,statistic,p_value,reason".
std::string verdict_csv(const std::vector<DefenseVerdict>& verdicts);

}  // namespace mmclip
