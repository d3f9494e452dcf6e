// Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when any
// criterion fails. The experiment runs take a while (tens of minutes on one
// core); artifacts go to a scratch directory that is removed afterwards.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "../common/fixtures.hpp"
#include "mmclip/binary_io.hpp"
#include "mmclip/csv.hpp"
#include "mmclip/harness.hpp"
#include "mmclip/margin.hpp"

using namespace mmclip;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

int failures = 0;

void verdict(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

// ---- criteria 1-3: engine and margin properties -------------------------

struct GradResult {
  std::vector<double> errors;  // per op kind and seed
  double worst = 0.0;
  double seconds = 0.0;
};

GradResult gradient_sweep() {
  GradResult r;
  const auto t0 = Clock::now();
  for (OpKind k : testing::checked_ops())
    for (std::uint64_t s = 0; s < 100; ++s) {
      r.errors.push_back(testing::gradcheck(k, s));
      r.worst = std::max(r.worst, r.errors.back());
    }
  r.seconds = seconds_since(t0);
  return r;
}

bool identity_clipping(std::string& detail) {
  Rng rng(2024);
  std::size_t compared = 0, differing = 0;
  Network dense = mlp3(64, 10);
  dense.init_weights(1);
  for (std::size_t l = 0; l < dense.layers().size(); ++l)
    for (double& v : dense.params(l)[1].data()) v = rng.uniform(-0.5, 0.5);
  Network conv = cnn_s(8, 8, 10);
  conv.init_weights(2);
  const std::pair<const Network*, Shape> cases[] = {{&dense, {1000, 64}},
                                                    {&conv, {1000, 1, 8, 8}}};
  for (const auto& [net, shape] : cases) {
    const Tensor clean = testing::random_tensor(rng, shape, 0.0, 1.0);
    const BoundVectors z = init_bounds(*net, clean, std::numeric_limits<double>::infinity());
    const Tensor x = testing::random_tensor(rng, shape, 0.0, 1.0);
    const Tensor a = forward(*net, x), b = bounded_forward(*net, z, x);
    for (std::size_t i = 0; i < a.size(); ++i) differing += a[i] != b[i];
    compared += a.size();
  }
  detail = std::to_string(differing) + " of " + std::to_string(compared) +
           " logits differ over 1000 inputs to mlp3 and 1000 to cnn_s";
  return differing == 0;
}

struct MarginResult {
  std::vector<double> estimates;
  std::vector<std::string> misses;
  double seconds = 0.0;
};

MarginResult margin_oracle() {
  MarginResult r;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Network net = testing::two_input_mlp(seed);
    const BoundVectors none = BoundVectors::unbounded(net);
    for (int c = 0; c < 3; ++c) {
      const double grid = brute_force_margin(net, none, c, 101);
      const double est = estimate_class_margins(net, none, c, 10, seed).front().margin;
      r.estimates.push_back(est);
      // within 1% of the grid value; for a negative maximum 0.99 * grid would
      // demand more than the maximum itself
      if (!(est >= grid - 0.01 * std::abs(grid)))
        r.misses.push_back("net " + std::to_string(seed) + " class " + std::to_string(c) +
                           " (" + num(est) + " vs grid " + num(grid) + ")");
    }
  }
  r.seconds = seconds_since(t0);
  return r;
}

// ---- experiment runs ------------------------------------------------------

struct Run {
  ExperimentConfig cfg;
  ExperimentResult result;
  double seconds = 0.0;
};

Run run(ExperimentConfig cfg, const fs::path& dir) {
  cfg.out_dir = dir.string();
  const auto t0 = Clock::now();
  Run r{cfg, run_experiment(cfg), 0.0};
  r.seconds = seconds_since(t0);
  std::printf("  ran %s in %.0f s (config hash %s)\n", scenario_name(cfg.scenario).c_str(),
              r.seconds, cfg.hash().c_str());
  std::fflush(stdout);
  return r;
}

// Class indices sorted by training-set size, largest first.
std::vector<std::size_t> classes_by_size(const ExperimentResult& r) {
  const std::size_t k = r.mean_per_class("ce").size();
  std::vector<double> count(k);
  for (std::size_t c = 0; c < k; ++c)
    count[c] = r.mean("train_set", "count_class_" + std::to_string(c));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return count[a] > count[b]; });
  return order;
}

double mean_over(const std::vector<double>& acc, const std::vector<std::size_t>& classes) {
  double s = 0.0;
  for (std::size_t c : classes) s += acc[c];
  return s / static_cast<double>(classes.size());
}

void backdoor_criteria(const Run& r) {
  const auto& x = r.result;
  const double pre_asr = x.mean("poisoned", "asr"), pre_acc = x.mean("poisoned", "acc");
  const double base_acc = x.mean("clean", "acc");
  const double mmac_asr = x.mean("mmac", "asr"), mmac_acc = x.mean("mmac", "acc");
  const double mmdf_asr = x.mean("mmdf", "asr");
  const bool attack = pre_asr >= 90.0 && std::abs(pre_acc - base_acc) <= 2.0;
  const bool mmac = mmac_asr <= 20.0 && pre_acc - mmac_acc <= 5.0;
  const bool mmdf = mmdf_asr <= 8.0 && mmdf_asr < mmac_asr;
  const bool fast = r.seconds < 900.0;
  verdict(4, "backdoor analog", attack && mmac && mmdf && fast,
          "pre ASR " + num(pre_asr) + ", ACC " + num(pre_acc) + " vs unpoisoned " +
              num(base_acc) + (attack ? " ok" : " MISS") + "; MMAC ASR " + num(mmac_asr) +
              ", ACC " + num(mmac_acc) + (mmac ? " ok" : " MISS") + "; MMDF ASR " +
              num(mmdf_asr) + (mmdf ? " ok" : " MISS (needs <= 8 and < MMAC)") + "; " +
              num(r.seconds, 3) + " s" + (fast ? "" : " MISS (limit 900 s)"));

  // calibration on the clean held-out set
  const std::size_t held = r.cfg.calib_per_class * r.cfg.data.num_classes;
  std::vector<double> thetas = r.cfg.calibration_thetas;
  std::sort(thetas.rbegin(), thetas.rend());
  bool in_band = held == 1000, monotone = true;
  std::string rates;
  for (double t : thetas) {
    const double rate = x.mean("calibration", "anomalous_rate_theta_" + fmt(t));
    in_band = in_band && rate >= 0.0 && rate <= 3.0 * t;
    rates += (rates.empty() ? "" : ", ") + ("theta " + fmt(t) + ": " + num(rate, 3) +
                                            (rate <= 3.0 * t ? "" : " (above 3 theta)"));
  }
  for (const auto& s : x.seeds)
    for (std::size_t i = 1; i < thetas.size(); ++i)
      monotone = monotone && s.get("calibration", "flags_theta_" + fmt(thetas[i])) <=
                                 s.get("calibration", "flags_theta_" + fmt(thetas[i - 1]));
  verdict(10, "MMDF calibration", in_band && monotone,
          std::to_string(held) + " held-out samples; anomalous rate " + rates + "; flag counts " +
              (monotone ? "monotone" : "NOT monotone") + " as theta decreases");

  const double frac = x.mean("poisoned", "overfit_fraction");
  const double before = x.mean("poisoned", "directional_mean");
  const double after = x.mean("mmac", "directional_mean");
  const double ratio = x.mean("mmac", "gradient_norm_ratio");
  verdict(11, "trigger diagnostics", frac >= 0.8 && after < before && ratio <= 1.0,
          "overfitting inequality holds on " + num(100.0 * frac) +
              "% of source samples; directional mean " + num(before) + " -> " + num(after) +
              "; gradient-norm ratio " + num(ratio));
}

void imbalance_criterion(const Run& r) {
  const auto& x = r.result;
  const auto order = classes_by_size(x);
  const auto ce = x.mean_per_class("ce"), mm = x.mean_per_class("mmom");
  const std::size_t rarest = order.back();
  const std::vector<std::size_t> common(order.begin(), order.begin() + order.size() / 2);
  double worst_drop = 0.0;
  for (std::size_t c : common) worst_drop = std::max(worst_drop, ce[c] - mm[c]);
  const double gain = x.mean("mmom", "acc") - x.mean("ce", "acc");
  const double rare_gain = mm[rarest] - ce[rarest];
  verdict(5, "imbalance analog", gain >= 3.0 && rare_gain >= 10.0 && worst_drop <= 8.0,
          "ACC " + num(x.mean("ce", "acc")) + " -> " + num(x.mean("mmom", "acc")) +
              "; rarest class " + num(ce[rarest]) + " -> " + num(mm[rarest]) +
              "; worst common-class drop " + num(worst_drop));
}

void cross_criterion(const Run& r) {
  const auto& x = r.result;
  const double change = x.mean("mmac", "acc") - x.mean("ce", "acc");
  const double mse = x.mean("mmac", "logit_mse"), scale = x.mean("mmom", "logit_mse");
  verdict(6, "objective cross-test", std::abs(change) <= 1.5 && mse < 10.0 * scale,
          "MMAC changes ACC by " + num(change) + "; logit MSE on D " + num(mse) +
              " vs MMOM's " + num(scale));
}

void balanced_criterion(const Run& r) {
  const double drop = r.result.mean("ce", "acc") - r.result.mean("mmom", "acc");
  verdict(7, "balanced no-harm", drop <= 0.5,
          "ACC " + num(r.result.mean("ce", "acc")) + " -> " + num(r.result.mean("mmom", "acc")) +
              " (drop " + num(drop) + ", limit 0.5)");
}

void overtrain_criterion(const Run& r) {
  const auto& x = r.result;
  const auto order = classes_by_size(x);
  const std::vector<std::size_t> common(order.begin(), order.begin() + order.size() / 2);
  const std::vector<std::size_t> rare(order.end() - 2, order.end());
  const auto a = x.mean_per_class("ce"), b = x.mean_per_class("ce_overtrained");
  const bool common_up = mean_over(b, common) > mean_over(a, common);
  bool rare_down = true;
  std::string rare_text;
  for (std::size_t c : rare) {
    rare_down = rare_down && b[c] < a[c];
    rare_text += (rare_text.empty() ? "" : ", ") + ("class " + std::to_string(c) + " " +
                                                    num(a[c]) + " -> " + num(b[c]));
  }
  const double m1 = x.mean("mmom", "acc"), m5 = x.mean("mmom_overtrained", "acc");
  verdict(8, "over-training analog", common_up && rare_down && m5 >= m1,
          "common-class ACC " + num(mean_over(a, common)) + " -> " + num(mean_over(b, common)) +
              (common_up ? "" : " (not raised)") + "; rarest " + rare_text +
              (rare_down ? "" : " (not lowered)") + "; MMOM " + num(m1) + " (1x) vs " + num(m5) +
              " (5x)");
}

void lambda_criterion(const Run& r) {
  const auto& x = r.result;
  std::vector<double> lambdas = r.cfg.lambdas;
  std::sort(lambdas.begin(), lambdas.end());
  const std::size_t rarest = classes_by_size(x).back();
  auto variant = [](double l) { return "mmom_lambda_" + fmt(l); };
  double lo = 1e300, hi = -1e300;
  for (double l : lambdas)
    if (l > 0.0 && l < lambdas.back()) {
      lo = std::min(lo, x.mean(variant(l), "acc"));
      hi = std::max(hi, x.mean(variant(l), "acc"));
    }
  // lowest of the sweep; a tie with a tiny lambda still counts
  const double rare0 = x.mean_per_class(variant(0.0))[rarest];
  bool zero_lowest = lambdas.front() == 0.0;
  std::string rare_text;
  for (double l : lambdas) {
    const double v = x.mean_per_class(variant(l))[rarest];
    rare_text += (rare_text.empty() ? "" : ", ") + fmt(l) + ": " + num(v);
    if (l > 0.0) zero_lowest = zero_lowest && rare0 <= v;
  }
  const double base = x.mean("ce", "acc"), top = x.mean(variant(lambdas.back()), "acc");
  verdict(9, "lambda sensitivity", hi - lo < 1.5 && zero_lowest && base - top >= 3.0,
          "mid-range ACC spread " + num(hi - lo) + " (" + num(lo) + " to " + num(hi) +
              "); rarest class by lambda " + rare_text +
              (zero_lowest ? " (lambda 0 lowest)" : " (lambda 0 NOT lowest)") + "; largest lambda ACC " + num(top) +
              " vs CE " + num(base));
}

// ---- determinism -----------------------------------------------------------

bool same_metrics(const ExperimentResult& a, const ExperimentResult& b) {
  if (a.seeds.size() != b.seeds.size()) return false;
  for (std::size_t i = 0; i < a.seeds.size(); ++i) {
    const auto& x = a.seeds[i].metrics;
    const auto& y = b.seeds[i].metrics;
    if (x.size() != y.size()) return false;
    for (std::size_t j = 0; j < x.size(); ++j)
      if (x[j].variant != y[j].variant || x[j].metric != y[j].metric ||
          std::memcmp(&x[j].value, &y[j].value, sizeof(double)) != 0)
        return false;
  }
  return true;
}

// Files under `a` that are missing or different under `b`.
std::vector<std::string> differing_files(const fs::path& a, const fs::path& b) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel) ||
        binary::read_file(e.path().string()) != binary::read_file((b / rel).string()))
      out.push_back(rel.string());
  }
  return out;
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / "mmclip_acceptance";
  fs::remove_all(scratch);
  const auto start = Clock::now();

  const GradResult grad = gradient_sweep();
  verdict(1, "gradient correctness", grad.worst < 1e-5 && grad.seconds < 60.0,
          "max relative error " + num(grad.worst, 3) + " over " +
              std::to_string(grad.errors.size()) + " cases (12 op kinds x 100), " +
              num(grad.seconds, 3) + " s");

  std::string detail;
  verdict(2, "identity clipping", identity_clipping(detail), detail);

  const MarginResult margin = margin_oracle();
  std::string misses;
  for (const auto& m : margin.misses) misses += "; " + m;
  verdict(3, "margin oracle equivalence", margin.misses.empty() && margin.seconds < 120.0,
          std::to_string(30 - margin.misses.size()) + " of 30 classes within 1% of the grid, " +
              num(margin.seconds, 3) + " s" + misses);

  const std::vector<Scenario> scenarios{Scenario::backdoor,  Scenario::imbalance,
                                        Scenario::objective_cross, Scenario::balanced,
                                        Scenario::overtrain, Scenario::lambda_sweep};
  std::map<Scenario, Run> first;
  for (Scenario s : scenarios)
    first.emplace(s, run(scenario_defaults(s), scratch / "first" / scenario_name(s)));

  backdoor_criteria(first.at(Scenario::backdoor));
  imbalance_criterion(first.at(Scenario::imbalance));
  cross_criterion(first.at(Scenario::objective_cross));
  balanced_criterion(first.at(Scenario::balanced));
  overtrain_criterion(first.at(Scenario::overtrain));
  lambda_criterion(first.at(Scenario::lambda_sweep));

  // Repeat everything with the same seeds.
  std::vector<std::string> diffs;
  if (gradient_sweep().errors != grad.errors) diffs.push_back("gradient errors");
  if (margin_oracle().estimates != margin.estimates) diffs.push_back("margin estimates");
  for (Scenario s : scenarios) {
    const std::string name = scenario_name(s);
    const Run again = run(scenario_defaults(s), scratch / "second" / name);
    if (!same_metrics(first.at(s).result, again.result)) diffs.push_back(name + " metrics");
    for (const auto& f : differing_files(scratch / "first" / name, scratch / "second" / name))
      diffs.push_back(name + "/" + f);
  }
  std::string diff_text;
  for (const auto& d : diffs) diff_text += (diff_text.empty() ? "" : ", ") + d;
  verdict(12, "determinism", diffs.empty(),
          diffs.empty() ? "all metrics, CSVs and checkpoints reproduced byte for byte"
                        : "differences in " + diff_text);

  fs::remove_all(scratch);
  std::printf("%d of 12 criteria failed; total %.0f s\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
