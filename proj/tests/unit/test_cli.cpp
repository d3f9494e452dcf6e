#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "mmclip/binary_io.hpp"
#include "mmclip/checkpoint.hpp"
#include "mmclip/csv.hpp"

using namespace mmclip;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& f) const { return (path_ / f).string(); }

 private:
  fs::path path_;
};

}  // namespace

TEST_CASE("cli pipeline: data, poison, train, mitigate, defend, margins, diagnose") {
  const TempDir d("mmclip_cli_pipeline");
  const auto ok = [](const Outcome& o) {
    INFO(o.err);
    CHECK(o.code == cli::kExitOk);
  };

  ok(call({"gen-data", "--out", d / "train.bin", "--per_class", "40", "--sample_seed", "1"}));
  ok(call({"gen-data", "--out", d / "clean.csv", "--per_class", "5", "--sample_seed", "2"}));
  ok(call({"gen-data", "--out", d / "test.bin", "--per_class", "10", "--sample_seed", "3"}));
  ok(call({"poison", "--data", d / "train.bin", "--out", d / "poisoned.bin", "--amplitude",
           "0.2", "--poison_rate", "0.05"}));

  binary::write_file(d / "train.cfg", "# short run\nepochs = 1\nbatch_size = 32\n");
  ok(call({"train", "--config", d / "train.cfg", "--epochs", "2", "--data", d / "poisoned.bin",
           "--test", d / "test.bin", "--out", d / "model.ckpt", "--curve", d / "curve.csv"}));
  CHECK(CsvTable::load(d / "curve.csv").size() == 2);  // the flag beat the file

  ok(call({"mitigate", "--model", d / "model.ckpt", "--clean", d / "clean.csv", "--shape",
           "1x8x8", "--out", d / "bounded.ckpt", "--history", d / "history.csv",
           "--max_iterations", "3", "--ascent_steps", "2", "--lambda", "1"}));
  CHECK(load_checkpoint(d / "bounded.ckpt").bounds.has_value());
  CHECK(CsvTable::load(d / "history.csv").size() == 3);

  const Outcome def = call({"defend", "--model", d / "bounded.ckpt", "--clean", d / "clean.csv",
                            "--shape", "1x8x8", "--data", d / "test.bin", "--out",
                            d / "verdicts.csv", "--theta=0.01"});
  ok(def);
  const std::string verdicts = binary::read_file(d / "verdicts.csv");
  CHECK(CsvTable::parse(verdicts).size() == 100);
  CHECK(csv_config_hash(verdicts).size() == 16);

  ok(call({"margins", "--model", d / "bounded.ckpt", "--restarts", "2", "--ascent-steps", "3",
           "--out", d / "margins.csv"}));
  CHECK(CsvTable::load(d / "margins.csv").size() == 20);

  ok(call({"diagnose", "--model", d / "bounded.ckpt", "--data", d / "poisoned.bin", "--test",
           d / "test.bin", "--amplitude", "0.2", "--clean", d / "clean.csv", "--shape", "1x8x8",
           "--out", d / "diag.csv"}));
  const CsvTable diag = CsvTable::load(d / "diag.csv");
  CHECK(diag.at(1, "metric") == "overfit_fraction");
  CHECK(diag.size() == 6 + 2 * 10);
}

TEST_CASE("cli experiment and report") {
  const TempDir d("mmclip_cli_experiment");
  const std::vector<std::string> common{
      "--scenario", "imbalance", "--per_class", "60", "--clean_per_class", "5",
      "--test_per_class", "10", "--n0", "40", "--gamma", "10", "--epochs", "2",
      "--max_iterations", "2", "--ascent_steps", "2", "--seeds", "0,1"};
  for (const char* run : {"a", "b"}) {
    std::vector<std::string> args{"experiment", "--out_dir", d / run};
    args.insert(args.end(), common.begin(), common.end());
    const Outcome o = call(args);
    INFO(o.err);
    REQUIRE(o.code == cli::kExitOk);
    CHECK(o.out.find("scenario imbalance, 2 seed(s)") != std::string::npos);
  }
  CHECK(binary::read_file(d / "a/seed_1/metrics.csv") ==
        binary::read_file(d / "b/seed_1/metrics.csv"));

  const Outcome rep = call({"report", d / "a", d / "b", "--out", d / "summary"});
  CHECK(rep.code == cli::kExitOk);
  const CsvTable t = CsvTable::load(d / "summary.csv");
  CHECK(t.at(0, "runs") == "4");
  CHECK(fs::exists(d / "summary.txt"));
}

TEST_CASE("cli exit codes") {
  const TempDir d("mmclip_cli_codes");
  CHECK(call({}).code == cli::kExitConfig);
  CHECK(call({"bogus-verb"}).code == cli::kExitConfig);
  CHECK(call({"gen-data", "--out", d / "x.bin", "--no_such_key", "1"}).code == cli::kExitConfig);
  CHECK(call({"gen-data"}).code == cli::kExitConfig);  // out is required
  CHECK(call({"gen-data", "--out", d / "x.bin", "--per_class", "lots"}).code == cli::kExitConfig);
  CHECK(call({"gen-data", "--config", d / "absent.cfg", "--out", d / "x.bin"}).code ==
        cli::kExitConfig);
  CHECK(call({"train", "--data", d / "absent.bin", "--out", d / "m.ckpt"}).code ==
        cli::kExitStage);
  CHECK(call({"report", d / "absent"}).code == cli::kExitStage);
  CHECK(call({"--help"}).code == cli::kExitOk);

  // the installed binary maps the same codes onto its process status
  const std::string bin = MMCLIP_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  CHECK(status(bin + " gen-data --out " + d / "y.bin" + " --per_class 3") == 0);
  CHECK(status(bin + " gen-data --bogus 1") == 2);
  CHECK(status(bin + " defend --model " + d / "nothing.ckpt") == 3);
}
