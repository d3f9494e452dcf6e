#include "mmclip/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

#include "mmclip/binary_io.hpp"
#include "mmclip/checkpoint.hpp"
#include "mmclip/csv.hpp"
#include "mmclip/margin.hpp"

namespace mmclip {

namespace fs = std::filesystem;

namespace {

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + stream + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum Stream : std::uint64_t {
  kData = 1, kCleanSplit, kTestSplit, kCalibSplit, kImbalance, kPoison, kTrain, kTrainClean,
  kAscent
};

}  // namespace

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, 'x')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size() || v == 0) throw std::invalid_argument(item);
      s.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("shape '" + text + "' must look like 1x8x8");
    }
  }
  if (s.empty()) throw ConfigError("empty shape");
  return s;
}

std::string trigger_name(TriggerKind k) {
  switch (k) {
    case TriggerKind::patch_replace: return "patch";
    case TriggerKind::patch_blend: return "blend";
    case TriggerKind::additive_global: break;
  }
  return "chessboard";
}

TriggerKind parse_trigger(const std::string& s) {
  if (s == "chessboard") return TriggerKind::additive_global;
  if (s == "patch") return TriggerKind::patch_replace;
  if (s == "blend") return TriggerKind::patch_blend;
  throw ConfigError("unknown trigger '" + s + "' (expected chessboard, patch or blend)");
}

namespace {

std::string list_text(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

std::string list_text(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

TriggerSpec make_trigger(const ExperimentConfig& cfg) {
  const Shape& shape = cfg.data.sample_shape;
  switch (cfg.trigger) {
    case TriggerKind::additive_global:
      return chessboard_trigger(shape, cfg.trigger_amplitude, cfg.target);
    case TriggerKind::patch_replace:
    case TriggerKind::patch_blend: {
      const std::size_t h = shape.size() == 3 ? shape[1] : 1;
      const std::size_t w = shape.back();
      const std::size_t size = std::min(cfg.patch_size, std::min(h, w));
      const double alpha = cfg.trigger == TriggerKind::patch_blend ? cfg.blend_alpha : 1.0;
      return patch_trigger(shape, size, h - size, w - size, alpha, cfg.target);
    }
  }
  throw ConfigError("unknown trigger kind");
}

Network make_network(const ExperimentConfig& cfg) {
  const Shape& s = cfg.data.sample_shape;
  if (cfg.arch == Architecture::cnn_s) {
    if (s.size() != 3 || s[0] != 1) throw ConfigError("cnn_s needs a 1xHxW sample shape");
    return cnn_s(s[1], s[2], cfg.data.num_classes);
  }
  return mlp3(shape_size(s), cfg.data.num_classes);
}

// Per-seed artifact sink. Tables are rewritten after every stage so a
// failure keeps everything produced before it.
class Artifacts {
 public:
  Artifacts(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t classes)
      : hash_(cfg.hash()),
        metrics_({"variant", "metric", "value"}),
        per_class_({"variant", "class", "count", "acc"}),
        curve_({"model", "epoch", "loss", "train_acc", "test_acc"}) {
    if (!cfg.out_dir.empty()) {
      dir_ = fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed));
      fs::create_directories(dir_);
    }
    std::vector<std::string> h{"variant", "iteration", "total", "data", "margin"};
    for (std::size_t c = 0; c < classes; ++c) h.push_back("class_" + std::to_string(c));
    history_ = CsvTable(std::move(h));
  }

  SeedResult result;

  void metric(const std::string& variant, const std::string& name, double value) {
    result.metrics.push_back({variant, name, value});
    metrics_.add({variant, name, fmt(value)});
  }

  void accuracy(const std::string& variant, const Metrics& m) {
    metric(variant, "acc", m.acc);
    for (std::size_t c = 0; c < m.per_class_acc.size(); ++c) {
      metric(variant, "acc_class_" + std::to_string(c), m.per_class_acc[c]);
      per_class_.add({variant, fmt(c), fmt(m.per_class_count[c]), fmt(m.per_class_acc[c])});
    }
    result.per_class_acc[variant] = m.per_class_acc;
  }

  void attack(const std::string& variant, const AttackMetrics& a, bool with_acc = false) {
    if (with_acc) metric(variant, "acc", a.acc);
    metric(variant, "asr", a.asr);
    metric(variant, "pacc", a.pacc);
  }

  void curve(const std::string& model, const std::vector<EpochRecord>& records) {
    for (const auto& r : records)
      curve_.add({model, fmt(r.epoch), fmt(r.loss), fmt(r.train_acc),
                  r.test_acc ? fmt(*r.test_acc) : std::string("nan")});
  }

  void history(const std::string& variant, const std::vector<IterationRecord>& records) {
    for (const auto& r : records) {
      std::vector<std::string> row{variant, fmt(r.iteration), fmt(r.terms.total),
                                   fmt(r.terms.data), fmt(r.terms.margin)};
      for (double m : r.class_margins) row.push_back(fmt(m));
      history_.add(std::move(row));
    }
  }

  void checkpoint(const std::string& name, const Network& net, const BoundVectors* bounds) {
    if (!dir_.empty()) save_checkpoint(net, bounds, (dir_ / (name + ".ckpt")).string());
  }

  void flush() const {
    if (dir_.empty()) return;
    metrics_.save((dir_ / "metrics.csv").string(), hash_);
    per_class_.save((dir_ / "per_class_acc.csv").string(), hash_);
    curve_.save((dir_ / "training_curve.csv").string(), hash_);
    history_.save((dir_ / "margin_history.csv").string(), hash_);
  }

 private:
  std::string hash_;
  fs::path dir_;
  CsvTable metrics_, per_class_, curve_, history_;
};

void stage(Artifacts& art, const std::string& name, const std::function<void()>& body) {
  try {
    body();
  } catch (const StageError&) {
    art.flush();
    throw;
  } catch (const std::exception& e) {
    art.flush();
    throw StageError(name, e.what());
  }
  art.flush();
}

struct Splits {
  CleanSet clean;
  Dataset test;
  Dataset calib;
  Dataset pool;  // balanced training pool
};

Splits make_splits(const ExperimentConfig& cfg, std::uint64_t seed) {
  SynthSpec spec = cfg.data;
  spec.seed = sub_seed(cfg.data.seed ^ seed, kData);
  const Dataset all = synth_classes(spec);
  CleanSplit cs = split_clean_set(all, cfg.clean_per_class, sub_seed(seed, kCleanSplit));
  auto [test, rest] = split_per_class(cs.rest, cfg.test_per_class, sub_seed(seed, kTestSplit));
  Splits s{std::move(cs.clean), std::move(test), Dataset(), std::move(rest)};
  if (cfg.scenario == Scenario::backdoor && cfg.calib_per_class > 0) {
    auto [calib, pool] = split_per_class(s.pool, cfg.calib_per_class, sub_seed(seed, kCalibSplit));
    s.calib = std::move(calib);
    s.pool = std::move(pool);
  }
  return s;
}

TrainConfig train_config(const ExperimentConfig& cfg, std::uint64_t seed, Stream stream) {
  TrainConfig t = cfg.train;
  t.seed = sub_seed(seed, stream);
  return t;
}

MitigationConfig mitigation_config(const ExperimentConfig& cfg, std::uint64_t seed,
                                   Objective objective, double lambda) {
  MitigationConfig m = cfg.mitigation;
  m.objective = objective;
  m.lambda = lambda;
  m.ascent.seed = sub_seed(seed, kAscent);
  return m;
}

double logit_mse(const Network& net, const BoundVectors& bounds, const CleanSet& clean) {
  const Tensor x = clean.inputs();
  const Tensor a = forward(net, x), b = bounded_forward(net, bounds, x);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

TrainResult train_stage(Artifacts& art, const std::string& name, const Network& arch,
                        const Dataset& ds, const TrainConfig& tc, const Dataset& test) {
  std::optional<TrainResult> r;
  stage(art, "train:" + name, [&] {
    r = train(arch, ds, tc, &test);
    art.curve(name, r->curve);
    art.accuracy(name, evaluate(r->net, std::nullopt, test));
    art.checkpoint(name, r->net, nullptr);
  });
  return std::move(*r);
}

MitigationResult mitigate_stage(Artifacts& art, const std::string& name, const Network& net,
                                const CleanSet& clean, const Dataset& test,
                                const MitigationConfig& mc) {
  MitigationResult r;
  stage(art, "mitigate:" + name, [&] {
    try {
      r = run_mitigation(net, clean, mc);
    } catch (const MitigationError& e) {
      art.history(name, e.history());
      throw;
    }
    art.history(name, r.history);
    art.accuracy(name, evaluate(net, r.bounds, test));
    art.metric(name, "iterations", static_cast<double>(r.history.size()));
    art.metric(name, "final_margin", r.history.back().terms.margin);
    art.metric(name, "logit_mse", logit_mse(net, r.bounds, clean));
    art.checkpoint(name, net, &r.bounds);
  });
  return r;
}

void run_backdoor(const ExperimentConfig& cfg, std::uint64_t seed, const Splits& sp,
                  const Network& arch, Artifacts& art) {
  const TriggerSpec trigger = make_trigger(cfg);
  const int target = cfg.target;

  train_stage(art, "clean", arch, sp.pool, train_config(cfg, seed, kTrainClean), sp.test);

  Dataset poisoned;
  stage(art, "poison", [&] {
    poisoned = poison(sp.pool, trigger, cfg.poison_rate, sub_seed(seed, kPoison));
    art.metric("poisoned", "poisoned_samples", static_cast<double>(poisoned.poisoned_count()));
  });
  const TrainResult tr =
      train_stage(art, "poisoned", arch, poisoned, train_config(cfg, seed, kTrain), sp.test);
  const Network& net = tr.net;
  stage(art, "evaluate:poisoned", [&] {
    art.attack("poisoned", compute_attack_metrics(net, std::nullopt, sp.test, trigger));
  });

  const MitigationResult mm = mitigate_stage(
      art, "mmac", net, sp.clean, sp.test,
      mitigation_config(cfg, seed, Objective::mmac, cfg.mitigation.lambda * cfg.lambda_scale));
  stage(art, "evaluate:mmac", [&] {
    art.attack("mmac", compute_attack_metrics(net, mm.bounds, sp.test, trigger));
    art.attack("initial_bounds",
               compute_attack_metrics(net, mm.initial_bounds, sp.test, trigger), true);
  });

  stage(art, "defend", [&] {
    const NullModel null = fit_null(net, mm.bounds, sp.clean, cfg.theta);
    art.metric("mmdf", "null_mean", null.mean);
    art.metric("mmdf", "null_std", null.std);
    const Dataset triggered = embed_all(sp.test, trigger);
    const auto clean_v = defend(net, mm.bounds, null, sp.test.inputs(), std::nullopt,
                                cfg.correction);
    const auto trig_v = defend(net, mm.bounds, null, triggered.inputs(), std::nullopt,
                               cfg.correction);
    art.attack("mmdf", compute_attack_metrics(final_labels(clean_v), final_labels(trig_v),
                                              sp.test, target), true);
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < trig_v.size(); ++i)
      if (sp.test.label(i) != target && trig_v[i].flagged) ++flagged;
    const std::size_t eligible = sp.test.size() - sp.test.rows_of_class(target).size();
    art.metric("mmdf", "trigger_detection", 100.0 * flagged / eligible);

    if (!sp.calib.empty()) {
      for (double theta : cfg.calibration_thetas) {
        const auto v = defend(net, mm.bounds, null, sp.calib.inputs(), theta, cfg.correction);
        std::size_t anomalous = 0, disagree = 0;
        for (const auto& d : v) {
          anomalous += d.reason == FlagReason::anomalous_confidence;
          disagree += d.reason == FlagReason::disagreement;
        }
        const std::string tag = "theta_" + fmt(theta);
        art.metric("calibration", "anomalous_rate_" + tag,
                   static_cast<double>(anomalous) / static_cast<double>(v.size()));
        art.metric("calibration", "disagreement_rate_" + tag,
                   static_cast<double>(disagree) / static_cast<double>(v.size()));
        art.metric("calibration", "flags_" + tag, static_cast<double>(anomalous + disagree));
      }
    }
  });

  stage(art, "diagnose", [&] {
    const TriggerDiagnostics d = trigger_diagnostics(net, mm.bounds, poisoned, sp.test, trigger);
    art.metric("poisoned", "tau", d.tau);
    art.metric("poisoned", "overfit_fraction", d.overfit_fraction);
    art.metric("poisoned", "directional_mean", d.directional_before);
    art.metric("mmac", "directional_mean", d.directional_after);
    art.metric("mmac", "gradient_norm_ratio", d.gradient_norm_ratio);
  });
}

void run_imbalanced(const ExperimentConfig& cfg, std::uint64_t seed, const Splits& sp,
                    const Network& arch, Artifacts& art) {
  Dataset train_set;
  stage(art, "imbalance", [&] {
    ImbalanceSpec spec = cfg.imbalance;
    if (cfg.scenario == Scenario::balanced) spec.gamma = 1.0;
    train_set = apply_imbalance(sp.pool, spec, sub_seed(seed, kImbalance));
    const auto counts = train_set.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
      art.metric("train_set", "count_class_" + std::to_string(c), static_cast<double>(counts[c]));
  });
  const TrainConfig tc = train_config(cfg, seed, kTrain);
  const TrainResult ce = train_stage(art, "ce", arch, train_set, tc, sp.test);
  const double lambda = cfg.mitigation.lambda * cfg.lambda_scale;

  switch (cfg.scenario) {
    case Scenario::imbalance:
    case Scenario::balanced:
      mitigate_stage(art, "mmom", ce.net, sp.clean, sp.test,
                     mitigation_config(cfg, seed, Objective::mmom, lambda));
      break;
    case Scenario::overtrain: {
      mitigate_stage(art, "mmom", ce.net, sp.clean, sp.test,
                     mitigation_config(cfg, seed, Objective::mmom, lambda));
      const TrainResult over = train_stage(art, "ce_overtrained", arch, train_set,
                                           tc.overtrained(cfg.overtrain_factor), sp.test);
      mitigate_stage(art, "mmom_overtrained", over.net, sp.clean, sp.test,
                     mitigation_config(cfg, seed, Objective::mmom, lambda));
      break;
    }
    case Scenario::lambda_sweep:
      for (double l : cfg.lambdas)
        mitigate_stage(art, "mmom_lambda_" + fmt(l), ce.net, sp.clean, sp.test,
                       mitigation_config(cfg, seed, Objective::mmom, l * cfg.lambda_scale));
      break;
    case Scenario::objective_cross:
      mitigate_stage(art, "mmac", ce.net, sp.clean, sp.test,
                     mitigation_config(cfg, seed, Objective::mmac, lambda));
      mitigate_stage(art, "mmom", ce.net, sp.clean, sp.test,
                     mitigation_config(cfg, seed, Objective::mmom, lambda));
      break;
    case Scenario::backdoor: break;
  }
}

}  // namespace

MitigationConfig desk_mitigation() {
  MitigationConfig m;
  m.beta = 1.0;
  m.ascent.steps = 10;
  m.tolerance = 1e-5;
  return m;
}

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::backdoor: return "backdoor";
    case Scenario::imbalance: return "imbalance";
    case Scenario::overtrain: return "overtrain";
    case Scenario::lambda_sweep: return "lambda_sweep";
    case Scenario::objective_cross: return "objective_cross";
    case Scenario::balanced: return "balanced";
  }
  return "?";
}

Scenario parse_scenario(const std::string& name) {
  for (Scenario s : {Scenario::backdoor, Scenario::imbalance, Scenario::overtrain,
                     Scenario::lambda_sweep, Scenario::objective_cross, Scenario::balanced})
    if (scenario_name(s) == name) return s;
  throw ConfigError("unknown scenario '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (data.num_classes < 2) throw ConfigError("need at least two classes");
  if (clean_per_class == 0 || test_per_class == 0)
    throw ConfigError("clean_per_class and test_per_class must be positive");
  std::size_t held = clean_per_class + test_per_class;
  if (scenario == Scenario::backdoor) held += calib_per_class;
  if (data.per_class <= held)
    throw ConfigError("per_class (" + std::to_string(data.per_class) +
                      ") must exceed the held-out samples per class (" + std::to_string(held) +
                      ")");
  const std::size_t pool = data.per_class - held;
  const bool imbalanced = scenario != Scenario::backdoor;
  if (imbalanced && imbalance.n0 > pool)
    throw ConfigError("n0 (" + std::to_string(imbalance.n0) + ") exceeds the training pool of " +
                      std::to_string(pool) + " per class");
  if (imbalanced && !(imbalance.gamma >= 1.0)) throw ConfigError("gamma must be >= 1");
  if (scenario == Scenario::backdoor) {
    if (target < 0 || static_cast<std::size_t>(target) >= data.num_classes)
      throw ConfigError("target class out of range");
    if (!(poison_rate > 0.0 && poison_rate < 1.0))
      throw ConfigError("poison_rate must be in (0, 1)");
    if (!(theta > 0.0 && theta < 0.5)) throw ConfigError("theta must be in (0, 0.5)");
  }
  if (scenario == Scenario::lambda_sweep && lambdas.empty())
    throw ConfigError("lambda_sweep needs a nonempty lambdas list");
  for (double l : lambdas)
    if (!(l >= 0.0)) throw ConfigError("lambdas must be >= 0");
  if (!(mitigation.lambda >= 0.0) || !(lambda_scale > 0.0))
    throw ConfigError("lambda must be >= 0 and lambda_scale > 0");
  if (train.epochs == 0) throw ConfigError("epochs must be >= 1");
  if (overtrain_factor < 1) throw ConfigError("overtrain_factor must be >= 1");
  if (!(mitigation.beta >= 1.0)) throw ConfigError("beta must be >= 1");
}

Architecture parse_architecture(const std::string& name) {
  if (name == "mlp3") return Architecture::mlp3;
  if (name == "cnn_s") return Architecture::cnn_s;
  throw ConfigError("unknown arch '" + name + "' (expected mlp3 or cnn_s)");
}

std::string architecture_name(Architecture a) { return a == Architecture::mlp3 ? "mlp3" : "cnn_s"; }

SynthSpec synth_spec(const Config& c, SynthSpec s) {
  s.num_classes = c.get_size("classes", s.num_classes);
  s.sample_shape = parse_shape(c.get("shape", shape_text(s.sample_shape)));
  s.per_class = c.get_size("per_class", s.per_class);
  s.modes = c.get_size("modes", s.modes);
  s.separation = c.get_double("separation", s.separation);
  s.noise = c.get_double("noise", s.noise);
  s.pixel_noise = c.get_double("pixel_noise", s.pixel_noise);
  s.seed = c.get_u64("data_seed", s.seed);
  if (c.contains("sample_seed")) s.sample_seed = c.get_u64("sample_seed", 0);
  return s;
}

ImbalanceSpec imbalance_spec(const Config& c, ImbalanceSpec s) {
  const std::string kind = c.get("imbalance", s.kind == ImbalanceKind::lt ? "lt" : "step");
  if (kind == "lt") s.kind = ImbalanceKind::lt;
  else if (kind == "step") s.kind = ImbalanceKind::step;
  else throw ConfigError("unknown imbalance '" + kind + "' (expected lt or step)");
  s.gamma = c.get_double("gamma", s.gamma);
  s.n0 = c.get_size("n0", s.n0);
  return s;
}

TrainConfig train_config(const Config& c, TrainConfig t) {
  t.epochs = c.get_size("epochs", t.epochs);
  t.batch_size = c.get_size("batch_size", t.batch_size);
  t.learning_rate = c.get_double("learning_rate", t.learning_rate);
  t.momentum = c.get_double("momentum", t.momentum);
  t.weight_decay = c.get_double("weight_decay", t.weight_decay);
  t.lr_decay = c.get_double("lr_decay", t.lr_decay);
  return t;
}

MitigationConfig mitigation_config(const Config& c, MitigationConfig m) {
  try {
    m.objective = parse_objective(c.get("objective", objective_name(m.objective)));
    m.update = parse_update(c.get("update", update_name(m.update)));
  } catch (const InvalidArgument& ex) {
    throw ConfigError(ex.what());
  }
  m.lambda = c.get_double("lambda", m.lambda);
  m.max_iterations = c.get_size("max_iterations", m.max_iterations);
  m.tolerance = c.get_double("tolerance", m.tolerance);
  m.bound_step = c.get_double("bound_step", m.bound_step);
  m.beta = c.get_double("beta", m.beta);
  m.ascent.steps = c.get_size("ascent_steps", m.ascent.steps);
  m.ascent.step_size = c.get_double("ascent_step_size", m.ascent.step_size);
  m.ascent.restarts = c.get_size("restarts", m.ascent.restarts);
  return m;
}

TriggerSpec trigger_spec(const Config& c, const Shape& sample_shape) {
  ExperimentConfig e;
  e.data.sample_shape = sample_shape;
  e.trigger = parse_trigger(c.get("trigger", trigger_name(e.trigger)));
  e.trigger_amplitude = c.get_double("amplitude", e.trigger_amplitude);
  e.patch_size = c.get_size("patch_size", e.patch_size);
  e.blend_alpha = c.get_double("blend_alpha", e.blend_alpha);
  e.target = static_cast<int>(c.get_int("target", e.target));
  return make_trigger(e);
}

ExperimentConfig scenario_defaults(Scenario s) {
  ExperimentConfig e;
  e.scenario = s;
  if (s == Scenario::backdoor) {
    // Noisier classes and a longer run so the trigger is learned as a
    // shortcut; mmac needs a larger penalty than mmom since its data term
    // is a logit MSE rather than a cross-entropy.
    e.data.noise = 0.35;
    e.trigger_amplitude = 0.13;
    e.train.epochs = 200;
    e.mitigation.lambda = 1e-3;
    e.mitigation.tolerance = 1e-8;
    e.mitigation.max_iterations = 600;
  }
  return e;
}

ExperimentConfig experiment_config(const Config& c) {
  ExperimentConfig e = scenario_defaults(parse_scenario(c.get("scenario", "imbalance")));
  e.arch = parse_architecture(c.get("arch", architecture_name(e.arch)));
  e.data = synth_spec(c, e.data);
  e.clean_per_class = c.get_size("clean_per_class", e.clean_per_class);
  e.test_per_class = c.get_size("test_per_class", e.test_per_class);
  e.calib_per_class = c.get_size("calib_per_class", e.calib_per_class);
  e.imbalance = imbalance_spec(c, e.imbalance);

  e.trigger = parse_trigger(c.get("trigger", trigger_name(e.trigger)));
  e.trigger_amplitude = c.get_double("amplitude", e.trigger_amplitude);
  e.patch_size = c.get_size("patch_size", e.patch_size);
  e.blend_alpha = c.get_double("blend_alpha", e.blend_alpha);
  e.target = static_cast<int>(c.get_int("target", e.target));
  e.poison_rate = c.get_double("poison_rate", e.poison_rate);
  try {
    e.correction = parse_correction(c.get("correction", correction_name(e.correction)));
  } catch (const InvalidArgument& ex) {
    throw ConfigError(ex.what());
  }
  e.theta = c.get_double("theta", e.theta);
  e.calibration_thetas = c.get_doubles("calibration_thetas", e.calibration_thetas);

  e.train = train_config(c, e.train);
  e.overtrain_factor = c.get_size("overtrain_factor", e.overtrain_factor);
  e.mitigation = mitigation_config(c, e.mitigation);
  e.lambdas = c.get_doubles("lambdas", e.lambdas);
  e.lambda_scale = c.get_double("lambda_scale", e.lambda_scale);

  e.seeds = c.get_u64s("seeds", e.seeds);
  e.out_dir = c.get("out_dir", "");
  e.validate();
  return e;
}

Config to_config(const ExperimentConfig& e) {
  Config c;
  c.set("scenario", scenario_name(e.scenario));
  c.set("arch", architecture_name(e.arch));
  c.set("classes", fmt(e.data.num_classes));
  c.set("shape", shape_text(e.data.sample_shape));
  c.set("per_class", fmt(e.data.per_class));
  c.set("modes", fmt(e.data.modes));
  c.set("separation", fmt(e.data.separation));
  c.set("noise", fmt(e.data.noise));
  c.set("pixel_noise", fmt(e.data.pixel_noise));
  c.set("data_seed", std::to_string(e.data.seed));
  if (e.data.sample_seed) c.set("sample_seed", std::to_string(*e.data.sample_seed));
  c.set("clean_per_class", fmt(e.clean_per_class));
  c.set("test_per_class", fmt(e.test_per_class));
  c.set("calib_per_class", fmt(e.calib_per_class));
  c.set("imbalance", e.imbalance.kind == ImbalanceKind::step ? "step" : "lt");
  c.set("gamma", fmt(e.imbalance.gamma));
  c.set("n0", fmt(e.imbalance.n0));
  c.set("trigger", trigger_name(e.trigger));
  c.set("amplitude", fmt(e.trigger_amplitude));
  c.set("patch_size", fmt(e.patch_size));
  c.set("blend_alpha", fmt(e.blend_alpha));
  c.set("target", std::to_string(e.target));
  c.set("poison_rate", fmt(e.poison_rate));
  c.set("correction", correction_name(e.correction));
  c.set("theta", fmt(e.theta));
  c.set("calibration_thetas", list_text(e.calibration_thetas));
  c.set("epochs", fmt(e.train.epochs));
  c.set("batch_size", fmt(e.train.batch_size));
  c.set("learning_rate", fmt(e.train.learning_rate));
  c.set("momentum", fmt(e.train.momentum));
  c.set("weight_decay", fmt(e.train.weight_decay));
  c.set("lr_decay", fmt(e.train.lr_decay));
  c.set("overtrain_factor", fmt(e.overtrain_factor));
  c.set("objective", objective_name(e.mitigation.objective));
  c.set("lambda", fmt(e.mitigation.lambda));
  c.set("max_iterations", fmt(e.mitigation.max_iterations));
  c.set("tolerance", fmt(e.mitigation.tolerance));
  c.set("bound_step", fmt(e.mitigation.bound_step));
  c.set("beta", fmt(e.mitigation.beta));
  c.set("update", update_name(e.mitigation.update));
  c.set("ascent_steps", fmt(e.mitigation.ascent.steps));
  c.set("ascent_step_size", fmt(e.mitigation.ascent.step_size));
  c.set("restarts", fmt(e.mitigation.ascent.restarts));
  c.set("lambdas", list_text(e.lambdas));
  c.set("lambda_scale", fmt(e.lambda_scale));
  c.set("seeds", list_text(e.seeds));
  if (!e.out_dir.empty()) c.set("out_dir", e.out_dir);
  return c;
}

std::string ExperimentConfig::hash() const {
  ExperimentConfig copy = *this;
  copy.out_dir.clear();
  return to_config(copy).hash();
}

TriggerDiagnostics trigger_diagnostics(const Network& net, const BoundVectors& bounds,
                                       const Dataset& train_set, const Dataset& test,
                                       const TriggerSpec& trigger) {
  if (trigger.kind != TriggerKind::additive_global)
    throw InvalidArgument("trigger diagnostics need an additive trigger");
  TriggerDiagnostics d;
  d.tau = margin_floor(net, train_set).tau;
  const int target = trigger.target;
  double above = 0.0, before = 0.0, after = 0.0, ratio = 0.0;
  for (std::size_t s = 0; s < test.num_classes(); ++s) {
    if (static_cast<int>(s) == target) continue;
    const auto rows = test.rows_of_class(static_cast<int>(s));
    if (rows.empty()) continue;
    const Tensor x = test.inputs(rows);
    const auto b = directional_overfit_stats(net, nullptr, trigger.pattern, x,
                                             static_cast<int>(s), target);
    const auto a = directional_overfit_stats(net, &bounds, trigger.pattern, x,
                                             static_cast<int>(s), target);
    const auto g0 = logit_gradient_norms(net, nullptr, x, target);
    const auto g1 = logit_gradient_norms(net, &bounds, x, target);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      above += b[i] > 2.0 * d.tau;
      before += b[i];
      after += a[i];
      ratio += g0[i] > 0.0 ? g1[i] / g0[i] : 1.0;
      ++d.samples;
    }
  }
  if (d.samples == 0) throw DataError("no source-class samples to diagnose");
  const double n = static_cast<double>(d.samples);
  d.overfit_fraction = above / n;
  d.directional_before = before / n;
  d.directional_after = after / n;
  d.gradient_norm_ratio = ratio / n;
  return d;
}

AttackMetrics compute_attack_metrics(const std::vector<int>& clean_pred,
                                     const std::vector<int>& triggered_pred, const Dataset& test,
                                     int target) {
  if (clean_pred.size() != test.size() || triggered_pred.size() != test.size())
    throw InvalidArgument("prediction count does not match the test set");
  if (test.empty()) throw InvalidArgument("empty test set");
  AttackMetrics m;
  std::size_t correct = 0, hit = 0, recovered = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    correct += clean_pred[i] == test.label(i);
    if (test.label(i) == target) continue;
    ++m.eligible;
    hit += triggered_pred[i] == target;
    recovered += triggered_pred[i] == test.label(i);
  }
  if (m.eligible == 0) throw InvalidArgument("no non-target samples to attack");
  m.acc = 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
  m.asr = 100.0 * static_cast<double>(hit) / static_cast<double>(m.eligible);
  m.pacc = 100.0 * static_cast<double>(recovered) / static_cast<double>(m.eligible);
  return m;
}

AttackMetrics compute_attack_metrics(const Network& net, const std::optional<BoundVectors>& bounds,
                                     const Dataset& test, const TriggerSpec& trigger) {
  const Dataset triggered = embed_all(test, trigger);
  return compute_attack_metrics(predict(net, bounds, test.inputs()),
                                predict(net, bounds, triggered.inputs()), test, trigger.target);
}

double SeedResult::get(const std::string& variant, const std::string& metric) const {
  for (const auto& r : metrics)
    if (r.variant == variant && r.metric == metric) return r.value;
  throw InvalidArgument("no metric '" + metric + "' for variant '" + variant + "'");
}

double ExperimentResult::mean(const std::string& variant, const std::string& metric) const {
  if (seeds.empty()) throw InvalidArgument("no seeds in result");
  double s = 0.0;
  for (const auto& r : seeds) s += r.get(variant, metric);
  return s / static_cast<double>(seeds.size());
}

std::vector<double> ExperimentResult::mean_per_class(const std::string& variant) const {
  if (seeds.empty()) throw InvalidArgument("no seeds in result");
  std::vector<double> out;
  for (const auto& r : seeds) {
    const auto it = r.per_class_acc.find(variant);
    if (it == r.per_class_acc.end())
      throw InvalidArgument("no per-class accuracy for variant '" + variant + "'");
    if (out.empty()) out.assign(it->second.size(), 0.0);
    for (std::size_t c = 0; c < out.size(); ++c)
      out[c] += it->second[c] / static_cast<double>(seeds.size());
  }
  return out;
}

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Artifacts art(cfg, seed, cfg.data.num_classes);
  art.result.seed = seed;
  Splits sp;
  Network arch({1}, {LayerSpec::dense(2, Activation::none, false)});
  stage(art, "data", [&] {
    sp = make_splits(cfg, seed);
    arch = make_network(cfg);
  });
  if (cfg.scenario == Scenario::backdoor)
    run_backdoor(cfg, seed, sp, arch, art);
  else
    run_imbalanced(cfg, seed, sp, arch, art);
  return std::move(art.result);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    ExperimentConfig copy = cfg;
    copy.out_dir.clear();
    binary::write_file((fs::path(cfg.out_dir) / "config.txt").string(),
               to_config(copy).canonical() + "# config_hash=" + cfg.hash() + "\n");
  }
  ExperimentResult result;
  result.scenario = cfg.scenario;
  for (std::uint64_t s : cfg.seeds) result.seeds.push_back(run_seed(cfg, s));
  return result;
}

std::string Report::csv() const {
  CsvTable t({"scenario", "variant", "metric", "mean", "std", "runs"});
  for (const auto& r : rows)
    t.add({scenario, r.variant, r.metric, fmt(r.mean), fmt(r.std), fmt(r.runs)});
  return t.str();
}

std::string Report::text() const {
  std::ostringstream os;
  os << "scenario: " << scenario << "\n";
  std::size_t wv = 7, wm = 6;
  for (const auto& r : rows) {
    wv = std::max(wv, r.variant.size());
    wm = std::max(wm, r.metric.size());
  }
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %-*s  %14s  %12s  %4s\n", static_cast<int>(wv), "variant",
                static_cast<int>(wm), "metric", "mean", "std", "runs");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %-*s  %14.6g  %12.6g  %4zu\n", static_cast<int>(wv),
                  r.variant.c_str(), static_cast<int>(wm), r.metric.c_str(), r.mean, r.std,
                  r.runs);
    os << buf;
  }
  return os.str();
}

Report report(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw InvalidArgument("report needs at least one run directory");
  Report rep;
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<double>> values;
  for (const auto& dir : run_dirs) {
    const fs::path cfg_path = fs::path(dir) / "config.txt";
    if (!fs::exists(cfg_path)) throw DataError("'" + dir + "' has no config.txt");
    const std::string scenario = Config::load(cfg_path.string()).require("scenario");
    if (rep.scenario.empty()) rep.scenario = scenario;
    if (scenario != rep.scenario)
      throw InvalidArgument("cannot aggregate scenario '" + scenario + "' with '" +
                            rep.scenario + "'");
    std::vector<fs::path> seeds;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_directory() && entry.path().filename().string().rfind("seed_", 0) == 0 &&
          fs::exists(entry.path() / "metrics.csv"))
        seeds.push_back(entry.path());
    std::sort(seeds.begin(), seeds.end());
    if (seeds.empty()) throw DataError("'" + dir + "' holds no completed seed directories");
    for (const auto& s : seeds) {
      const CsvTable t = CsvTable::load((s / "metrics.csv").string());
      for (std::size_t i = 0; i < t.size(); ++i) {
        const auto key = std::make_pair(t.at(i, "variant"), t.at(i, "metric"));
        if (!values.count(key)) order.push_back(key);
        values[key].push_back(t.number(i, "value"));
      }
    }
  }
  for (const auto& key : order) {
    const auto& v = values[key];
    MetricSummary m{key.first, key.second, 0.0, 0.0, v.size()};
    for (double x : v) m.mean += x / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - m.mean) * (x - m.mean);
      m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    rep.rows.push_back(m);
  }
  return rep;
}

}  // namespace mmclip
