#pragma once

// End-to-end experiments: data, training, mitigation, defense, metrics, and
// per-seed CSV artifacts.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmclip/config.hpp"
#include "mmclip/datagen.hpp"
#include "mmclip/mitigation.hpp"
#include "mmclip/mmdf.hpp"
#include "mmclip/trainer.hpp"

namespace mmclip {

enum class Scenario { backdoor, imbalance, overtrain, lambda_sweep, objective_cross, balanced };

std::string scenario_name(Scenario s);
Scenario parse_scenario(const std::string& name);

enum class Architecture { mlp3, cnn_s };

std::string architecture_name(Architecture a);
Architecture parse_architecture(const std::string& name);

/// "1x8x8" <-> {1, 8, 8}.
std::string shape_text(const Shape& s);
Shape parse_shape(const std::string& text);

std::string trigger_name(TriggerKind k);  // chessboard, patch, blend
TriggerKind parse_trigger(const std::string& name);

/// Mitigation settings used by experiments unless overridden.
MitigationConfig desk_mitigation();

struct ExperimentConfig {
  Scenario scenario = Scenario::imbalance;
  Architecture arch = Architecture::mlp3;
  SynthSpec data{.per_class = 850};  // per_class is the pool drawn per class
  std::size_t clean_per_class = 50;  // |D| per class
  std::size_t test_per_class = 200;
  std::size_t calib_per_class = 100;  // backdoor: clean held-out set for the null check
  ImbalanceSpec imbalance;

  // backdoor
  TriggerKind trigger = TriggerKind::additive_global;
  double trigger_amplitude = 0.03;  // additive chessboard
  std::size_t patch_size = 3;       // patch triggers
  double blend_alpha = 0.2;
  int target = 0;
  double poison_rate = 0.02;
  Correction correction = Correction::runner_up;
  double theta = 0.005;
  std::vector<double> calibration_thetas{0.05, 0.01, 0.005, 0.001};

  TrainConfig train{.epochs = 20};
  std::size_t overtrain_factor = 5;
  MitigationConfig mitigation = desk_mitigation();
  std::vector<double> lambdas{0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3};
  /// Multiplies every lambda before use.
  double lambda_scale = 1e3;

  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out_dir;  // empty: nothing written

  /// Hash of every setting except out_dir; stamped on all CSV outputs.
  std::string hash() const;

  /// Throws ConfigError on missing or inconsistent fields.
  void validate() const;
};

/// Desk-scale settings of a scenario.
ExperimentConfig scenario_defaults(Scenario s);
/// Builds a config from key=value entries; absent keys take the
/// scenario_defaults() of the given scenario.
ExperimentConfig experiment_config(const Config& c);
/// Pieces of experiment_config, each starting from the given defaults.
SynthSpec synth_spec(const Config& c, SynthSpec defaults = {});
ImbalanceSpec imbalance_spec(const Config& c, ImbalanceSpec defaults = {});
TrainConfig train_config(const Config& c, TrainConfig defaults = {});
MitigationConfig mitigation_config(const Config& c, MitigationConfig defaults = desk_mitigation());
/// Keys trigger, amplitude, patch_size, blend_alpha, target.
TriggerSpec trigger_spec(const Config& c, const Shape& sample_shape);

/// Full key=value form of a config, the inverse of experiment_config.
Config to_config(const ExperimentConfig& cfg);

struct AttackMetrics {
  double asr = 0.0;   // percent of triggered non-target samples decided as target
  double acc = 0.0;   // percent correct on the clean test set
  double pacc = 0.0;  // percent of triggered non-target samples decided as their source
  std::size_t eligible = 0;
};

/// From decided labels: `clean_pred` on the clean test set, `triggered_pred`
/// on the triggered copies of `test` (all rows; target-class rows are skipped).
AttackMetrics compute_attack_metrics(const std::vector<int>& clean_pred,
                                     const std::vector<int>& triggered_pred, const Dataset& test,
                                     int target);
AttackMetrics compute_attack_metrics(const Network& net, const std::optional<BoundVectors>& bounds,
                                     const Dataset& test, const TriggerSpec& trigger);

/// Trigger-alignment statistics over the non-target rows of `test`.
struct TriggerDiagnostics {
  double tau = 0.0;                 // margin floor of the model on its training set
  double overfit_fraction = 0.0;    // share with delta . grad(f_t - f_s) > 2 tau
  double directional_before = 0.0;  // mean delta . grad(f_t - f_s), original model
  double directional_after = 0.0;   // same with bounds
  double gradient_norm_ratio = 0.0; // mean ||grad fbar_t|| / ||grad f_t||
  std::size_t samples = 0;
};
/// Requires an additive trigger.
TriggerDiagnostics trigger_diagnostics(const Network& net, const BoundVectors& bounds,
                                       const Dataset& train_set, const Dataset& test,
                                       const TriggerSpec& trigger);

class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// One metric of one model variant in one seed.
struct MetricRow {
  std::string variant;
  std::string metric;
  double value = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<MetricRow> metrics;
  std::map<std::string, std::vector<double>> per_class_acc;  // variant -> percent per class

  /// Throws InvalidArgument when absent.
  double get(const std::string& variant, const std::string& metric) const;
};

struct ExperimentResult {
  Scenario scenario = Scenario::imbalance;
  std::vector<SeedResult> seeds;

  /// Mean over seeds.
  double mean(const std::string& variant, const std::string& metric) const;
  std::vector<double> mean_per_class(const std::string& variant) const;
};

/// Runs every seed sequentially. With out_dir set, writes
/// out_dir/config.txt and out_dir/seed_<s>/{metrics,per_class_acc,
/// margin_history,training_curve}.csv plus checkpoints. A failing stage
/// raises StageError after the outputs written so far are kept.
ExperimentResult run_experiment(const ExperimentConfig& cfg);
SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct MetricSummary {
  std::string variant;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // unbiased; 0 for a single run
  std::size_t runs = 0;
};

struct Report {
  std::string scenario;
  std::vector<MetricSummary> rows;

  std::string csv() const;
  std::string text() const;
};

/// Aggregates metrics.csv of every seed_* directory under each run directory.
/// All runs must share one scenario.
Report report(const std::vector<std::string>& run_dirs);

}  // namespace mmclip
