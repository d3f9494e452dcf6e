#include "mmclip/mmdf.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mmclip/error.hpp"
#include "mmclip/trainer.hpp"

namespace mmclip {

namespace {

std::vector<double> max_softmax(const Tensor& logits) {
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * c;
    const double top = *std::max_element(row, row + c);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(row[k] - top);
    out[i] = 1.0 / sum;
  }
  return out;
}

int runner_up(const double* row, std::size_t c, int skip) {
  int best = -1;
  for (std::size_t k = 0; k < c; ++k) {
    if (static_cast<int>(k) == skip) continue;
    if (best < 0 || row[k] > row[best]) best = static_cast<int>(k);
  }
  return best;
}

}  // namespace

void NullModel::validate() const {
  if (!(std > 0.0) || !std::isfinite(std) || !std::isfinite(mean))
    throw InvalidArgument("null model needs a finite mean and a positive standard deviation");
  if (!(theta > 0.0 && theta < 0.5)) throw InvalidArgument("theta must lie in (0, 0.5)");
}

NullModel fit_gaussian(const std::vector<double>& stats, double theta) {
  if (stats.size() < 2) throw InvalidArgument("a Gaussian fit needs at least two statistics");
  double mean = 0.0;
  for (double s : stats) mean += s;
  mean /= static_cast<double>(stats.size());
  double ss = 0.0;
  for (double s : stats) ss += (s - mean) * (s - mean);
  const double sd = std::sqrt(ss / static_cast<double>(stats.size() - 1));
  if (!(sd >= NullModel::kMinStd))
    throw InvalidArgument("degenerate null: confidence differences have no spread");
  NullModel m{mean, sd, theta};
  m.validate();
  return m;
}

std::vector<double> confidence_differences(const Network& net, const BoundVectors& bounds,
                                           const Tensor& batch) {
  const std::vector<double> a = max_softmax(forward(net, batch));
  const std::vector<double> b = max_softmax(bounded_forward(net, bounds, batch));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

NullModel fit_null(const Network& net, const BoundVectors& bounds, const CleanSet& clean,
                   double theta) {
  if (clean.size() < NullModel::kMinSamples)
    throw InvalidArgument("fitting the null needs at least " +
                          std::to_string(NullModel::kMinSamples) + " clean samples, got " +
                          std::to_string(clean.size()));
  return fit_gaussian(confidence_differences(net, bounds, clean.inputs()), theta);
}

double p_value(const NullModel& null, double s) {
  return 0.5 * std::erfc((s - null.mean) / (null.std * std::sqrt(2.0)));
}

std::string reason_name(FlagReason r) {
  switch (r) {
    case FlagReason::disagreement: return "disagreement";
    case FlagReason::anomalous_confidence: return "anomalous_confidence";
    case FlagReason::none: break;
  }
  return "none";
}

std::string correction_name(Correction c) {
  return c == Correction::runner_up ? "runner_up" : "mitigated";
}

Correction parse_correction(const std::string& name) {
  if (name == "mitigated") return Correction::mitigated;
  if (name == "runner_up") return Correction::runner_up;
  throw InvalidArgument("unknown correction '" + name + "' (expected mitigated or runner_up)");
}

std::vector<DefenseVerdict> defend(const Network& net, const BoundVectors& bounds,
                                   const NullModel& null, const Tensor& batch,
                                   std::optional<double> theta, Correction correction) {
  NullModel active = null;
  if (theta) active.theta = *theta;
  active.validate();

  const Tensor f = forward(net, batch);
  const Tensor fbar = bounded_forward(net, bounds, batch);
  const std::vector<int> lf = argmax_rows(f), lb = argmax_rows(fbar);
  const std::vector<double> cf = max_softmax(f), cb = max_softmax(fbar);
  const std::size_t c = net.num_classes();

  std::vector<DefenseVerdict> out(lf.size());
  for (std::size_t i = 0; i < lf.size(); ++i) {
    DefenseVerdict& v = out[i];
    v.original_label = lf[i];
    v.mitigated_label = lb[i];
    v.statistic = cf[i] - cb[i];
    if (lf[i] != lb[i]) {
      v.flagged = true;
      v.reason = FlagReason::disagreement;
      v.label = lb[i];
      continue;
    }
    v.p = p_value(active, v.statistic);
    if (*v.p < active.theta) {
      v.flagged = true;
      v.reason = FlagReason::anomalous_confidence;
      v.label = correction == Correction::runner_up
                    ? runner_up(fbar.data().data() + i * c, c, lb[i])
                    : lb[i];
    } else {
      v.label = lf[i];
    }
  }
  return out;
}

std::vector<int> final_labels(const std::vector<DefenseVerdict>& verdicts) {
  std::vector<int> out;
  out.reserve(verdicts.size());
  for (const auto& v : verdicts) out.push_back(v.label);
  return out;
}

std::string verdict_csv(const std::vector<DefenseVerdict>& verdicts) {
  std::ostringstream os;
  os.precision(17);
  os << "id,original,mitigated,final,statistic,p_value,reason\n";
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const auto& v = verdicts[i];
    os << i << ',' << v.original_label << ',' << v.mitigated_label << ',' << v.label << ','
       << v.statistic << ',';
    if (v.p) os << *v.p;
    os << ',' << reason_name(v.reason) << '\n';
  }
  return os.str();
}

}  // namespace mmclip
