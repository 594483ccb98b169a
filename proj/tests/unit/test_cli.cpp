#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include <json.hpp>

#include "hart/cli.hpp"
#include "hart/config.hpp"
#include "util.hpp"

using namespace hart;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "hart");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Unsets HAL_OUT_DIR for the scope, restoring nothing: tests own the environment.
struct NoEnvOut {
  NoEnvOut() { unsetenv("HAL_OUT_DIR"); }
  ~NoEnvOut() { unsetenv("HAL_OUT_DIR"); }
};

// bench rows with the wall-clock column dropped
std::string without_wall_ns(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
  return out;
}

fs::path write_tiny_config(const fs::path& dir) {
  nlohmann::json j = Config::toy().to_json();
  j["train_iters"] = 2;
  j["eval_iters"] = 2;
  j["toy_train_samples"] = 2;
  j["toy_val_samples"] = 2;
  j["train_steps"] = 3;
  j["log_every"] = 1;
  std::ofstream(dir / "tiny.json") << j.dump();
  return dir / "tiny.json";
}

}  // namespace

TEST_CASE("usage errors exit 1 with usage text") {
  NoEnvOut env;
  auto r = run_cli({});
  CHECK(r.code == 1);
  CHECK(r.err.find("Usage") != std::string::npos);

  r = run_cli({"equiv", "--no-such-flag"});
  CHECK(r.code == 1);
  CHECK(r.err.find("--no-such-flag") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);

  CHECK(run_cli({"frobnicate"}).code == 1);
  CHECK(run_cli({"eval"}).code == 1);  // --checkpoint is required
  CHECK(run_cli({"rank", "--trials", "0"}).code == 1);
  CHECK(run_cli({"train-toy", "--kernel", "relu"}).code == 1);
  CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("validation failures exit 1") {
  NoEnvOut env;
  const auto dir = scratch_dir("cli_validation");
  std::ofstream(dir / "typo.json") << R"({"max_lr": 0.001, "wieght_decay": 0.1})";
  const auto r = run_cli({"equiv", "--config", (dir / "typo.json").string(), "--out-dir", dir.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("wieght_decay") != std::string::npos);
  CHECK(run_cli({"bench", "--sizes", "64,256", "--out-dir", dir.string()}).code == 1);
  CHECK(run_cli({"bench", "--sizes", "64,x", "--out-dir", dir.string()}).code == 1);
}

TEST_CASE("numerical check failures exit 2") {
  NoEnvOut env;
  const auto dir = scratch_dir("cli_numeric");
  const auto r = run_cli({"gradcheck", "--tolerance", "1e-30", "--out-dir", dir.string()});
  CHECK(r.code == 2);
  CHECK(r.out.find("FAIL") != std::string::npos);
  CHECK(fs::exists(dir / "gradcheck.json"));
  CHECK(run_cli({"equiv", "--trials", "5", "--tolerance", "1e-30", "--out-dir", dir.string()}).code == 2);
}

TEST_CASE("HAL_OUT_DIR overrides the output directory") {
  const auto flag_dir = scratch_dir("cli_flag"), env_dir = scratch_dir("cli_env");
  setenv("HAL_OUT_DIR", env_dir.string().c_str(), 1);
  const auto r = run_cli({"equiv", "--trials", "3", "--out-dir", flag_dir.string()});
  unsetenv("HAL_OUT_DIR");
  CHECK(r.code == 0);
  CHECK(fs::exists(env_dir / "equiv.json"));
  CHECK_FALSE(fs::exists(flag_dir / "equiv.json"));
}

TEST_CASE("fixed seed reproduces identical outputs") {
  NoEnvOut env;
  const auto a = scratch_dir("cli_run_a"), b = scratch_dir("cli_run_b");
  for (const auto& d : {a, b}) {
    REQUIRE(run_cli({"rank", "--trials", "5", "--seed", "7", "--out-dir", d.string()}).code == 0);
    REQUIRE(run_cli({"equiv", "--trials", "10", "--out-dir", d.string()}).code == 0);
    REQUIRE(run_cli({"bench", "--sizes", "16,64,144,256", "--c", "8", "--reps", "1", "--out-dir", d.string()}).code == 0);
    REQUIRE(run_cli({"gen-data", "--train", "2", "--val", "1", "--illposed", "--out-dir", d.string()}).code == 0);
  }
  CHECK(read_file(a / "rank.json") == read_file(b / "rank.json"));
  CHECK(read_file(a / "equiv.json") == read_file(b / "equiv.json"));
  CHECK(without_wall_ns(read_file(a / "bench.csv")) == without_wall_ns(read_file(b / "bench.csv")));
  CHECK(read_file(a / "bench.csv").rfind("method,n,c,flops,wall_ns\n", 0) == 0);
  for (const char* f : {"train/sample_0001/disp.pfm", "train/sample_0001/left.pfm", "val/sample_0000/meta.json",
                        "dataset.json"})
    CHECK(read_file(a / f) == read_file(b / f));

  const auto other = scratch_dir("cli_run_c");
  REQUIRE(run_cli({"rank", "--trials", "5", "--seed", "8", "--out-dir", other.string()}).code == 0);
  CHECK(read_file(a / "rank.json") != read_file(other / "rank.json"));
}

TEST_CASE("train-toy, then eval on generated data") {
  NoEnvOut env;
  const auto dir = scratch_dir("cli_train");
  const auto cfg = write_tiny_config(dir);
  const auto run1 = dir / "run1", run2 = dir / "run2", data = dir / "data";
  for (const auto& d : {run1, run2})
    REQUIRE(run_cli({"train-toy", "--config", cfg.string(), "--out-dir", d.string()}).code == 0);
  CHECK(read_file(run1 / "metrics.json") == read_file(run2 / "metrics.json"));
  CHECK(read_file(run1 / "checkpoint.json") == read_file(run2 / "checkpoint.json"));
  CHECK(read_file(run1 / "train_log.csv").rfind("step,loss,lr,grad_norm\n", 0) == 0);

  REQUIRE(run_cli({"gen-data", "--config", cfg.string(), "--out-dir", data.string()}).code == 0);
  const auto r = run_cli({"eval", "--checkpoint", (run1 / "checkpoint.json").string(), "--data",
                          (data / "val").string(), "--out-dir", (dir / "eval").string()});
  REQUIRE(r.code == 0);
  const auto ev = nlohmann::json::parse(read_file(dir / "eval" / "eval.json"));
  CHECK(ev["samples"] == 2);
  // gen-data without --illposed writes exactly the validation split train-toy evaluates on
  const auto m = nlohmann::json::parse(read_file(run1 / "metrics.json"));
  CHECK(ev["epe"].get<double>() == doctest::Approx(m["val_epe"].get<double>()).epsilon(1e-6));
}
