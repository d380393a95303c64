// Exercises the installed binary end to end. The binary path arrives via
// the GDLA_CLI environment variable (set by CTest) or argv-style fallback
// locations.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "gdla/data.hpp"
#include "gdla/metrics.hpp"

using namespace gdla;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  if (const char* env = std::getenv("GDLA_CLI")) return env;
  for (const char* candidate : {"./gdla", "./build/gdla", "build/gdla"}) {
    if (fs::exists(candidate)) return candidate;
  }
  FAIL("gdla binary not found; set GDLA_CLI");
  return "";
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return buffer.str();
}

RunResult run_cli(const std::string& args) {
  fs::path dir = fs::temp_directory_path() / "gdla_test_cli";
  fs::create_directories(dir);
  fs::path out = dir / "stdout.txt";
  fs::path err = dir / "stderr.txt";
  std::string command = cli_path() + " " + args + " >" + out.string() + " 2>" +
                        err.string();
  int status = std::system(command.c_str());
  RunResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = slurp(out);
  result.err = slurp(err);
  return result;
}

fs::path scratch() {
  fs::path dir = fs::temp_directory_path() / "gdla_test_cli";
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path);
  os << content;
}

const char* kSynthSpec = R"({
  "n_classes": 3, "runs_per_class": 2, "test_runs_per_class": 1,
  "samples_per_run": 45, "n_features": 6, "noise_std": 1.0, "seed": 7,
  "window": 10, "stride": 5, "test_onset": 15,
  "archetypes": [{"kind": "none"}, {"kind": "step", "magnitude": 3.0},
                 {"kind": "drift", "magnitude": 3.0}]
})";

const char* kModelConfig =
    "n_features = 6\nwindow = 10\nd_model = 8\nn_layers = 1\n"
    "n_heads = 2\nd_ff = 16\nn_classes = 3\n";

const char* kTrainConfig = R"({
  "learning_rate": 0.003, "epochs": 3, "batch_size": 16,
  "optimizer": "adam", "seed": 7, "early_stop_patience": 0
})";

}  // namespace

TEST_CASE("unknown flags print usage to stderr and exit 1") {
  RunResult r = run_cli("--definitely-not-a-flag");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("Usage") != std::string::npos);

  RunResult sub = run_cli("gradcheck --bogus");
  CHECK(sub.exit_code == 1);
}

TEST_CASE("help exits zero") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("synth --help").exit_code == 0);
}

TEST_CASE("gradcheck passes on the built-in tiny model") {
  RunResult r = run_cli("gradcheck");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(r.out.find("gates") != std::string::npos);

  RunResult bilinear = run_cli("gradcheck --similarity bilinear");
  CHECK(bilinear.exit_code == 0);
  CHECK(bilinear.out.find("w_bl") != std::string::npos);
}

TEST_CASE("gradcheck exits nonzero when the tolerance cannot be met") {
  RunResult r = run_cli("gradcheck --tolerance 1e-18");
  CHECK(r.exit_code == 1);
  CHECK(r.out.find("FAIL") != std::string::npos);
}

TEST_CASE("synth is byte-for-byte deterministic") {
  fs::path dir = scratch();
  write_file(dir / "spec.json", kSynthSpec);
  fs::remove_all(dir / "d1");
  fs::remove_all(dir / "d2");
  CHECK(run_cli("synth --spec " + (dir / "spec.json").string() + " --out " +
                (dir / "d1").string())
            .exit_code == 0);
  CHECK(run_cli("synth --spec " + (dir / "spec.json").string() + " --out " +
                (dir / "d2").string())
            .exit_code == 0);

  for (const char* part : {"train", "test"}) {
    fs::path a = dir / "d1" / part;
    fs::path b = dir / "d2" / part;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
      if (!entry.is_regular_file()) continue;
      fs::path rel = fs::relative(entry.path(), a);
      CHECK(slurp(entry.path()) == slurp(b / rel));
    }
  }
}

TEST_CASE("train then eval produce a checkpoint, history, and reports") {
  fs::path dir = scratch();
  write_file(dir / "spec.json", kSynthSpec);
  write_file(dir / "model.cfg", kModelConfig);
  write_file(dir / "train.json", kTrainConfig);
  fs::remove_all(dir / "data");
  fs::remove_all(dir / "run");
  REQUIRE(run_cli("synth --spec " + (dir / "spec.json").string() + " --out " +
                  (dir / "data").string())
              .exit_code == 0);

  RunResult trained = run_cli(
      "train --data " + (dir / "data" / "train").string() + " --model " +
      (dir / "model.cfg").string() + " --train " +
      (dir / "train.json").string() + " --out " + (dir / "run").string());
  CHECK(trained.exit_code == 0);
  CHECK(fs::exists(dir / "run" / "checkpoint.gdla"));
  CHECK(fs::exists(dir / "run" / "history.json"));
  CHECK(fs::exists(dir / "run" / "model.cfg"));

  RunResult evaled = run_cli(
      "eval --data " + (dir / "data" / "test").string() + " --checkpoint " +
      (dir / "run" / "checkpoint.gdla").string() + " --model " +
      (dir / "run" / "model.cfg").string() + " --out-json " +
      (dir / "report.json").string() + " --out-csv " +
      (dir / "report.csv").string());
  CHECK(evaled.exit_code == 0);
  REQUIRE(fs::exists(dir / "report.json"));

  ClassificationReport rep = report_from_json(slurp(dir / "report.json"));
  CHECK(rep.per_class.size() == 3);
  CHECK(rep.dataset_id.rfind("synth-test-", 0) == 0);
  CHECK(!rep.model_config_hash.empty());

  std::string csv = slurp(dir / "report.csv");
  CHECK(csv.rfind("class,precision,recall,f1,far,mar\n", 0) == 0);

  RunResult rendered = run_cli("report --in " + (dir / "report.json").string());
  CHECK(rendered.exit_code == 0);
  CHECK(rendered.out.find("F1-score (%)") != std::string::npos);
  CHECK(rendered.out.find("Average") != std::string::npos);
}

TEST_CASE("eval with a missing checkpoint exits 2") {
  fs::path dir = scratch();
  write_file(dir / "model.cfg", kModelConfig);
  RunResult r = run_cli("eval --data " + (dir / "data" / "test").string() +
                        " --checkpoint /no/such/checkpoint.gdla --model " +
                        (dir / "model.cfg").string());
  CHECK(r.exit_code == 2);
}

TEST_CASE("balanced class weights are accepted and typos rejected") {
  fs::path dir = scratch();
  write_file(dir / "spec.json", kSynthSpec);
  write_file(dir / "model.cfg", kModelConfig);
  write_file(dir / "train.json", kTrainConfig);
  fs::remove_all(dir / "cw_data");
  REQUIRE(run_cli("synth --spec " + (dir / "spec.json").string() + " --out " +
                  (dir / "cw_data").string())
              .exit_code == 0);
  RunResult balanced = run_cli(
      "train --data " + (dir / "cw_data" / "train").string() + " --model " +
      (dir / "model.cfg").string() + " --train " +
      (dir / "train.json").string() + " --class-weights balanced --out " +
      (dir / "cw_run").string());
  CHECK(balanced.exit_code == 0);

  RunResult typo = run_cli(
      "train --data " + (dir / "cw_data" / "train").string() + " --model " +
      (dir / "model.cfg").string() + " --class-weights sometimes --out " +
      (dir / "cw_run2").string());
  CHECK(typo.exit_code == 1);
}

TEST_CASE("a broken train config exits 1") {
  fs::path dir = scratch();
  write_file(dir / "bad_train.json", R"({"epochs": 0})");
  write_file(dir / "model.cfg", kModelConfig);
  RunResult r = run_cli(
      "train --data " + (dir / "data" / "train").string() + " --model " +
      (dir / "model.cfg").string() + " --train " +
      (dir / "bad_train.json").string() + " --out " + (dir / "x").string());
  CHECK(r.exit_code == 1);
}
