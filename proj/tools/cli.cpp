#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>

#include "mmclip/binary_io.hpp"
#include "mmclip/checkpoint.hpp"
#include "mmclip/config.hpp"
#include "mmclip/csv.hpp"
#include "mmclip/datagen.hpp"
#include "mmclip/harness.hpp"
#include "mmclip/margin.hpp"
#include "mmclip/mitigation.hpp"
#include "mmclip/mmdf.hpp"
#include "mmclip/trainer.hpp"

namespace mmclip::cli {

namespace {

using Keys = std::set<std::string>;

struct Verb {
  std::string name;
  std::string help;
  Keys keys;
  std::function<void(const Config&, std::ostream&)> run;
};

const Keys kDataKeys{"classes", "shape"};
const Keys kTriggerKeys{"trigger", "amplitude", "patch_size", "blend_alpha", "target"};

Keys join(std::initializer_list<Keys> parts) {
  Keys out;
  for (const auto& p : parts) out.insert(p.begin(), p.end());
  return out;
}

// "--key value", "--key=value", or a bare "--flag" meaning true.
Config parse_overrides(const std::vector<std::string>& tokens, const Keys& allowed) {
  Config c;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t.rfind("--", 0) != 0 || t.size() == 2)
      throw ConfigError("unexpected argument '" + t + "'");
    std::string key = t.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else if (i + 1 < tokens.size() && tokens[i + 1].rfind("--", 0) != 0) {
      value = tokens[++i];
    } else {
      value = "true";
    }
    std::replace(key.begin(), key.end(), '-', '_');
    if (!allowed.count(key)) throw ConfigError("unknown option '--" + key + "'");
    c.set(key, value);
  }
  return c;
}

DataFormat format_of(const std::string& path) {
  const bool csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
  return csv ? DataFormat::csv : DataFormat::raw;
}

Dataset load_data(const Config& c, const std::string& key) {
  const std::string path = c.require(key);
  const DataFormat f = format_of(path);
  Shape shape;
  if (f == DataFormat::csv && c.contains("shape")) shape = parse_shape(c.require("shape"));
  Dataset ds = load_external(path, f, c.get_size("classes", 10), shape);
  ds.validate();
  return ds;
}

Checkpoint load_model(const Config& c, bool need_bounds) {
  Checkpoint ck = load_checkpoint(c.require("model"));
  if (need_bounds && !ck.bounds)
    throw ConfigError("checkpoint '" + c.require("model") +
                      "' holds no bounds; pass the output of mitigate");
  return ck;
}

// Writes to the "out" path when given, else to the stream.
void emit(const Config& c, const CsvTable& table, std::ostream& out) {
  if (c.contains("out")) {
    table.save(c.require("out"), c.hash());
    out << "wrote " << table.size() << " rows to " << c.require("out") << "\n";
  } else {
    out << table.str(c.hash());
  }
}

std::string counts_text(const std::vector<std::size_t>& counts) {
  std::string s;
  for (std::size_t i = 0; i < counts.size(); ++i) s += (i ? " " : "") + std::to_string(counts[i]);
  return s;
}

void gen_data(const Config& c, std::ostream& out) {
  Dataset ds = synth_classes(synth_spec(c));
  const std::string imbalance = c.get("imbalance", "none");
  if (imbalance != "none")
    ds = apply_imbalance(ds, imbalance_spec(c), c.get_u64("seed", 0));
  const std::string path = c.require("out");
  save_dataset(ds, path, format_of(path));
  out << "wrote " << ds.size() << " samples to " << path << " (per class: "
      << counts_text(ds.class_counts()) << ")\n";
}

void poison_cmd(const Config& c, std::ostream& out) {
  const Dataset ds = load_data(c, "data");
  const TriggerSpec trigger = trigger_spec(c, ds.sample_shape());
  const Dataset p = poison(ds, trigger, c.get_double("poison_rate", 0.02), c.get_u64("seed", 0));
  const std::string path = c.require("out");
  save_dataset(p, path, format_of(path));
  out << "poisoned " << p.poisoned_count() << " of " << p.size() << " samples into " << path
      << "\n";
}

Network build_network(const Config& c, const Dataset& ds) {
  if (parse_architecture(c.get("arch", "mlp3")) == Architecture::mlp3)
    return mlp3(ds.dim(), ds.num_classes());
  const Shape& s = ds.sample_shape();
  if (s.size() != 3 || s[0] != 1)
    throw ConfigError("cnn_s needs 1xHxW samples, got " + shape_text(s));
  return cnn_s(s[1], s[2], ds.num_classes());
}

void train_cmd(const Config& c, std::ostream& out) {
  const Dataset ds = load_data(c, "data");
  std::optional<Dataset> test;
  if (c.contains("test")) test = load_data(c, "test");
  TrainConfig cfg = train_config(c, ExperimentConfig{}.train);
  cfg.seed = c.get_u64("seed", 0);
  const std::string path = c.require("out");
  const TrainResult r = train(build_network(c, ds), ds, cfg, test ? &*test : nullptr);
  save_checkpoint(r.net, nullptr, path);
  if (c.contains("curve")) {
    CsvTable curve({"epoch", "loss", "train_acc", "test_acc"});
    for (const auto& e : r.curve)
      curve.add({fmt(e.epoch), fmt(e.loss), fmt(e.train_acc),
                 e.test_acc ? fmt(*e.test_acc) : "nan"});
    curve.save(c.require("curve"), c.hash());
  }
  const auto& last = r.curve.back();
  out << "trained " << cfg.epochs << " epochs: loss " << last.loss << ", train acc "
      << last.train_acc;
  if (last.test_acc) out << ", test acc " << *last.test_acc;
  out << "\nwrote " << path << "\n";
}

void mitigate_cmd(const Config& c, std::ostream& out) {
  const Checkpoint ck = load_model(c, false);
  const CleanSet clean(load_data(c, "clean"));
  MitigationConfig cfg = mitigation_config(c);
  cfg.ascent.seed = c.get_u64("seed", 0);
  const std::string path = c.require("out");
  const MitigationResult r = run_mitigation(ck.net, clean, cfg);
  save_checkpoint(ck.net, &r.bounds, path);
  if (c.contains("history")) {
    std::vector<std::string> header{"iteration", "total", "data", "margin"};
    for (std::size_t k = 0; k < clean.num_classes(); ++k)
      header.push_back("class_" + std::to_string(k));
    CsvTable h(header);
    for (const auto& rec : r.history) {
      std::vector<std::string> row{fmt(rec.iteration), fmt(rec.terms.total),
                                   fmt(rec.terms.data), fmt(rec.terms.margin)};
      for (double m : rec.class_margins) row.push_back(fmt(m));
      h.add(row);
    }
    h.save(c.require("history"), c.hash());
  }
  const auto& t = r.history.back().terms;
  out << objective_name(cfg.objective) << ": " << r.history.size() << " iterations"
      << (r.converged ? " (converged)" : "") << ", loss " << t.total << " = data " << t.data
      << " + lambda * margin " << t.margin << "\nwrote " << path << "\n";
}

void defend_cmd(const Config& c, std::ostream& out) {
  const Checkpoint ck = load_model(c, true);
  const CleanSet clean(load_data(c, "clean"));
  const Dataset ds = load_data(c, "data");
  Correction correction = Correction::runner_up;
  try {
    correction = parse_correction(c.get("correction", correction_name(correction)));
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  const NullModel null = fit_null(ck.net, *ck.bounds, clean, c.get_double("theta", 0.005));
  const auto verdicts =
      defend(ck.net, *ck.bounds, null, ds.inputs(), std::nullopt, correction);
  const std::string text = verdict_csv(verdicts) + "# config_hash=" + c.hash() + "\n";
  std::size_t disagree = 0, anomalous = 0;
  for (const auto& v : verdicts) {
    disagree += v.reason == FlagReason::disagreement;
    anomalous += v.reason == FlagReason::anomalous_confidence;
  }
  if (!c.contains("out")) {
    out << text;
    return;
  }
  binary::write_file(c.require("out"), text);
  const Metrics m = score_predictions(final_labels(verdicts), ds);
  out << "null mean " << null.mean << ", std " << null.std << "\n"
      << verdicts.size() << " samples: " << disagree << " disagreements, " << anomalous
      << " anomalous confidences, final accuracy " << m.acc << "\nwrote " << c.require("out")
      << "\n";
}

void margins_cmd(const Config& c, std::ostream& out) {
  const Checkpoint ck = load_model(c, false);
  const BoundVectors bounds = ck.bounds && !c.get_bool("unbounded", false)
                                  ? *ck.bounds
                                  : BoundVectors::unbounded(ck.net);
  AscentConfig a;
  a.steps = c.get_size("ascent_steps", a.steps);
  a.step_size = c.get_double("ascent_step_size", a.step_size);
  a.seed = c.get_u64("seed", 0);
  const std::size_t restarts = c.get_size("restarts", 10);
  if (restarts == 0) throw ConfigError("restarts must be positive");
  CsvTable t({"class", "rank", "restart", "margin", "converged", "aborted"});
  std::vector<double> best;
  for (std::size_t k = 0; k < ck.net.num_classes(); ++k) {
    const auto est =
        estimate_class_margins(ck.net, bounds, static_cast<int>(k), restarts, a.seed, a);
    for (std::size_t r = 0; r < est.size(); ++r)
      t.add({fmt(k), fmt(r), fmt(est[r].restart), fmt(est[r].margin),
             est[r].converged ? "1" : "0", est[r].aborted ? "1" : "0"});
    best.push_back(est.front().margin);
  }
  emit(c, t, out);
  if (c.contains("out"))
    for (std::size_t k = 0; k < best.size(); ++k)
      out << "class " << k << ": max margin " << best[k] << "\n";
}

void diagnose_cmd(const Config& c, std::ostream& out) {
  const Checkpoint ck = load_model(c, true);
  const Dataset train_set = load_data(c, "data");
  const Dataset test = load_data(c, "test");
  const TriggerSpec trigger = trigger_spec(c, test.sample_shape());
  const TriggerDiagnostics d = trigger_diagnostics(ck.net, *ck.bounds, train_set, test, trigger);
  CsvTable t({"metric", "value"});
  t.add({"tau", fmt(d.tau)});
  t.add({"overfit_fraction", fmt(d.overfit_fraction)});
  t.add({"directional_mean_original", fmt(d.directional_before)});
  t.add({"directional_mean_bounded", fmt(d.directional_after)});
  t.add({"gradient_norm_ratio", fmt(d.gradient_norm_ratio)});
  t.add({"samples", fmt(d.samples)});
  if (c.contains("clean")) {
    const LogitPreservation lp =
        logit_preservation_report(ck.net, *ck.bounds, CleanSet(load_data(c, "clean")));
    for (std::size_t k = 0; k < lp.mse.size(); ++k) {
      t.add({"logit_mse_class_" + std::to_string(k), fmt(lp.mse[k])});
      t.add({"gradient_norm_ratio_class_" + std::to_string(k),
             fmt(lp.gradient_norm_ratio[k])});
    }
  }
  emit(c, t, out);
}

void experiment_cmd(const Config& c, std::ostream& out) {
  const ExperimentConfig e = experiment_config(c);
  const ExperimentResult r = run_experiment(e);
  out << "scenario " << scenario_name(r.scenario) << ", " << r.seeds.size()
      << " seed(s), config hash " << e.hash() << "\n";
  for (const auto& row : r.seeds.front().metrics) {
    if (row.metric.rfind("acc_class_", 0) == 0 || row.metric.rfind("count_class_", 0) == 0)
      continue;
    out << std::left << std::setw(24) << row.variant << std::setw(40) << row.metric
        << r.mean(row.variant, row.metric) << "\n";
  }
  if (!e.out_dir.empty()) out << "wrote " << e.out_dir << "\n";
}

std::vector<Verb> verbs() {
  Keys experiment;
  const Config defaults = to_config(ExperimentConfig{});
  for (const auto& [k, v] : defaults.entries()) experiment.insert(k);
  experiment.insert("out_dir");
  return {
      {"gen-data", "Generate a synthetic dataset (optionally class-imbalanced)",
       {"out", "classes", "shape", "per_class", "modes", "separation", "noise", "pixel_noise",
        "data_seed", "sample_seed", "imbalance", "gamma", "n0", "seed"},
       gen_data},
      {"poison", "Embed a trigger into a fraction of a dataset and relabel it",
       join({kDataKeys, kTriggerKeys, {"data", "out", "poison_rate", "seed"}}), poison_cmd},
      {"train", "Train a classifier with cross-entropy",
       join({kDataKeys,
             {"data", "test", "out", "curve", "arch", "epochs", "batch_size", "learning_rate",
              "momentum", "weight_decay", "lr_decay", "seed"}}),
       train_cmd},
      {"mitigate", "Learn activation bounds with mmac or mmom",
       join({kDataKeys,
             {"model", "clean", "out", "history", "objective", "lambda", "max_iterations",
              "tolerance", "bound_step", "beta", "update", "ascent_steps", "ascent_step_size",
              "restarts", "seed"}}),
       mitigate_cmd},
      {"defend", "Label samples with the original/bounded pair and flag anomalies",
       join({kDataKeys, {"model", "clean", "data", "out", "theta", "correction"}}), defend_cmd},
      {"margins", "Estimate the maximum margin of every class",
       {"model", "out", "restarts", "ascent_steps", "ascent_step_size", "seed", "unbounded"},
       margins_cmd},
      {"diagnose", "Trigger-alignment and logit-preservation statistics",
       join({kDataKeys, kTriggerKeys, {"model", "data", "test", "clean", "out"}}), diagnose_cmd},
      {"experiment", "Run a full experiment scenario over its seeds", experiment,
       experiment_cmd},
  };
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Activation clipping against overfitting and backdoors"};
  app.name("mmclip");
  app.require_subcommand(1);

  const auto list = verbs();
  std::map<CLI::App*, const Verb*> by_app;
  std::map<CLI::App*, std::string> config_files;
  for (const auto& v : list) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--config", config_files[sub], "key=value file; flags override it");
    sub->allow_extras();
    std::string keys;
    for (const auto& k : v.keys) keys += (keys.empty() ? "" : ", ") + k;
    sub->footer("Keys (as --key value or in the config file): " + keys);
    by_app[sub] = &v;
  }
  std::vector<std::string> runs;
  std::string report_out;
  CLI::App* report_app = app.add_subcommand("report", "Aggregate experiment run directories");
  report_app->add_option("runs", runs, "run directories (out_dir of experiment)")->required();
  report_app->add_option("--out", report_out, "write <out>.csv and <out>.txt");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (report_app->parsed()) {
      const Report r = report(runs);
      if (!report_out.empty()) {
        binary::write_file(report_out + ".csv", r.csv());
        binary::write_file(report_out + ".txt", r.text());
      }
      out << r.text();
      return kExitOk;
    }
    for (auto& [sub, verb] : by_app) {
      if (!sub->parsed()) continue;
      Config c;
      if (!config_files[sub].empty()) c = Config::load(config_files[sub]);
      c.merge(parse_overrides(sub->remaining(), verb->keys));
      verb->run(c, out);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitConfig;
}

}  // namespace mmclip::cli
