#include "hart/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hart/bench.hpp"
#include "hart/config.hpp"
#include "hart/data.hpp"
#include "hart/gradcheck.hpp"
#include "hart/metrics.hpp"
#include "hart/train.hpp"
#include "hart/verify.hpp"

namespace hart::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Thrown for bad flag values that CLI11 cannot check on its own.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_set = false;
};

fs::path output_dir(const Common& c) {
  const char* env = std::getenv("HAL_OUT_DIR");
  fs::path dir = (env && *env) ? fs::path(env) : fs::path(c.out_dir);
  fs::create_directories(dir);
  return dir;
}

fs::path in_dir(const fs::path& dir, const std::string& name) {
  const fs::path p(name);
  return p.is_absolute() ? p : dir / p;
}

Config load_config(const Common& c, const Config& fallback) {
  Config cfg = c.config_path.empty() ? fallback : Config::load(c.config_path);
  if (c.seed_set) cfg.seed = c.seed;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size() || tok.empty() || tok[0] == '-') throw UsageError("--sizes: bad entry '" + tok + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<data::StereoSample> load_sample_dir(const fs::path& dir) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw UsageError("no sample directories under " + dir.string());
  std::vector<data::StereoSample> out;
  for (const auto& d : dirs) out.push_back(data::load_sample(d));
  return out;
}

int cmd_gen_data(const Common& c, std::size_t n_train, std::size_t n_val, bool illposed, std::ostream& out) {
  Config cfg = load_config(c, Config::toy());
  if (n_train) cfg.toy_train_samples = n_train;
  if (n_val) cfg.toy_val_samples = n_val;
  const fs::path dir = output_dir(c);
  ToySplit split = make_toy_split(cfg);
  Rng rng(cfg.seed ^ 0x9a7c4ULL);
  auto degrade = [&](data::StereoSample& s) {
    if (!illposed) return;
    const std::size_t ph = s.height() / 4, pw = s.width() / 4;
    const data::Rect r{std::uniform_int_distribution<std::size_t>(0, s.height() - ph)(rng),
                       std::uniform_int_distribution<std::size_t>(0, s.width() - pw)(rng), ph, pw};
    const auto kind = rng() % 2 ? data::PatchKind::specular : data::PatchKind::textureless;
    s = data::apply_illposed_patch(s, kind, r, rng());
  };
  auto save = [&](std::vector<data::StereoSample>& v, const char* name) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      degrade(v[i]);
      char sub[32];
      std::snprintf(sub, sizeof sub, "sample_%04zu", i);
      data::save_sample(v[i], dir / name / sub);
    }
  };
  save(split.train, "train");
  save(split.val, "val");
  write_json(dir / "dataset.json", {{"config", cfg.to_json()},
                                    {"train", split.train.size()},
                                    {"val", split.val.size()},
                                    {"illposed", illposed}});
  out << "wrote " << split.train.size() << " train and " << split.val.size() << " val samples to " << dir.string()
      << '\n';
  return kOk;
}

int cmd_train_toy(const Common& c, const std::string& kernel, std::size_t steps, std::ostream& out) {
  Config cfg = load_config(c, Config::toy());
  if (!kernel.empty()) cfg.attention_kernel = kernel;
  if (steps) cfg.train_steps = steps;
  cfg.validate();
  const fs::path dir = output_dir(c);
  const ToySplit split = make_toy_split(cfg);
  Rng rng(cfg.seed);
  ModelParams params = ModelParams::init(cfg.model_config(), rng);
  std::ofstream log(dir / "train_log.csv");
  log << "step,loss,lr,grad_norm\n";
  const TrainHistory hist = train(params, split.train, cfg, [&](const StepLog& l) {
    log << l.step << ',' << fmt("%.9g", l.loss) << ',' << fmt("%.9g", l.lr) << ',' << fmt("%.9g", l.grad_norm) << '\n';
    out << "step " << l.step << "  loss " << fmt("%.4f", l.loss) << "  lr " << fmt("%.2e", l.lr) << '\n';
  });
  const EvalReport ev = evaluate(params, split.val, cfg.eval_iters);
  save_checkpoint(cfg, params, dir / "checkpoint.json");
  write_json(dir / "metrics.json", {{"attention_kernel", cfg.attention_kernel},
                                    {"seed", cfg.seed},
                                    {"train_steps", cfg.train_steps},
                                    {"final_train_loss", hist.losses.back()},
                                    {"val_epe", ev.epe},
                                    {"val_d1", ev.d1},
                                    {"val_samples", split.val.size()}});
  out << "val EPE " << fmt("%.4f", ev.epe) << " px, D1 " << fmt("%.2f", ev.d1) << "% (" << fmt("%.0f", hist.seconds)
      << " s)\n";
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir, std::size_t iters,
             std::ostream& out) {
  auto [cfg, params] = load_checkpoint(checkpoint);
  if (c.seed_set) cfg.seed = c.seed;
  const std::vector<data::StereoSample> samples =
      data_dir.empty() ? make_toy_split(cfg).val : load_sample_dir(data_dir);
  const EvalReport ev = evaluate(params, samples, iters ? iters : cfg.eval_iters);
  const fs::path dir = output_dir(c);
  write_json(dir / "eval.json",
             {{"epe", ev.epe}, {"d1", ev.d1}, {"samples", samples.size()}, {"per_sample_epe", ev.per_sample_epe}});
  out << "EPE " << fmt("%.4f", ev.epe) << " px, D1 " << fmt("%.2f", ev.d1) << "% over " << samples.size()
      << " samples\n";
  return kOk;
}

int cmd_bench(const Common& c, const std::string& sizes_arg, std::size_t channels, std::size_t reps,
              const std::string& out_name, std::ostream& out) {
  const Config cfg = load_config(c, Config());
  const auto sizes = parse_sizes(sizes_arg);
  const fs::path dir = output_dir(c);
  std::vector<bench::BenchRecord> records;
  json summary = json::object();
  bool ok = true;
  for (const auto m : {bench::Method::hpsa, bench::Method::vanilla_sa}) {
    const auto r = bench::scaling_bench(m, sizes, channels, reps, cfg.seed);
    records.insert(records.end(), r.records.begin(), r.records.end());
    const double target = m == bench::Method::hpsa ? 1.0 : 2.0;
    const bool pass = std::abs(r.flop_slope - target) <= 0.1;
    ok = ok && pass;
    summary[bench::method_name(m)] = {{"flop_slope", r.flop_slope}, {"wall_slope", r.wall_slope}, {"pass", pass}};
    out << bench::method_name(m) << ": flop slope " << fmt("%.4f", r.flop_slope) << ", wall slope "
        << fmt("%.4f", r.wall_slope) << (pass ? "" : "  (outside target)") << '\n';
  }
  std::ofstream csv(in_dir(dir, out_name));
  if (!csv) throw std::runtime_error("cannot write " + in_dir(dir, out_name).string());
  bench::write_csv(csv, records);
  write_json(dir / "bench_summary.json", summary);
  return ok ? kOk : kNumeric;
}

int cmd_gradcheck(const Common& c, double tolerance, std::ostream& out) {
  const Config cfg = load_config(c, Config());
  const auto reports = gradient_suite(cfg.seed, tolerance);
  json j = json::array();
  bool ok = true;
  char line[160];
  std::snprintf(line, sizeof line, "%-28s %14s %10s %8s  %s\n", "op", "max_rel_error", "tolerance", "checked", "status");
  out << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-28s %14.3e %10.1e %8zu  %s\n", r.op_name.c_str(), r.max_rel_error, r.tolerance,
                  r.checked, r.passed ? "PASS" : "FAIL");
    out << line;
    ok = ok && r.passed;
    j.push_back({{"op", r.op_name},
                 {"max_rel_error", r.max_rel_error},
                 {"tolerance", r.tolerance},
                 {"checked", r.checked},
                 {"passed", r.passed}});
  }
  write_json(output_dir(c) / "gradcheck.json", {{"seed", cfg.seed}, {"reports", j}, {"all_passed", ok}});
  return ok ? kOk : kNumeric;
}

int cmd_rank(const Common& c, std::size_t trials, std::size_t channels, std::size_t tokens, std::ostream& out) {
  const Config cfg = load_config(c, Config());
  const auto dak = metrics::rank_experiment(attention::Kernel::dak, trials, channels, tokens, cfg.seed);
  const auto soft = metrics::rank_experiment(attention::Kernel::softmax, trials, channels, tokens, cfg.seed);
  const bool ok = dak.mean_rank_ratio >= soft.mean_rank_ratio;
  write_json(output_dir(c) / "rank.json",
             {{"dak", dak.to_json()}, {"softmax", soft.to_json()}, {"dak_mean_ge_softmax", ok}});
  out << "mean rank ratio: dak " << fmt("%.4f", dak.mean_rank_ratio) << " (" << dak.full_rank_trials << "/" << trials
      << " full rank), softmax " << fmt("%.4f", soft.mean_rank_ratio) << " (" << soft.full_rank_trials << "/" << trials
      << " full rank)\n";
  return ok ? kOk : kNumeric;
}

int cmd_equiv(const Common& c, std::size_t trials, double tolerance, std::ostream& out) {
  const Config cfg = load_config(c, Config());
  const auto r = verify::equivalence_suite(trials, cfg.seed, tolerance);
  write_json(output_dir(c) / "equiv.json", {{"trials", r.trials},
                                            {"max_elementwise_dev", r.max_elementwise_dev},
                                            {"max_mkoi_dev", r.max_mkoi_dev},
                                            {"tolerance", tolerance},
                                            {"passed", r.passed}});
  out << "dak(A)*V vs V + elu(A)*V over " << r.trials << " trials: max deviation " << fmt("%.3e", r.max_elementwise_dev)
      << " elementwise, " << fmt("%.3e", r.max_mkoi_dev) << " through MKOI -> " << (r.passed ? "PASS" : "FAIL") << '\n';
  return r.passed ? kOk : kNumeric;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stereo matching with Hadamard-product attention: data, training and verification tools", "hart"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--out-dir", common.out_dir, "Output directory ($HAL_OUT_DIR takes precedence)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { common.seed = s, common.seed_set = true; }, "Override the config seed");
  };

  std::size_t n_train = 0, n_val = 0, steps = 0, iters = 0, trials = 100, bench_c = 32, rank_c = 16, reps = 5, tokens = 256;
  bool illposed = false;
  std::string kernel, checkpoint, data_dir, sizes = "64,256,1024,4096", bench_out = "bench.csv";
  double tolerance = kGradTolerance, equiv_tol = verify::kEquivTolerance;

  auto* gen = app.add_subcommand("gen-data", "Write random-dot stereo samples as PFM + JSON directories");
  add_common(gen);
  gen->add_option("--train", n_train, "Training samples (default from config)");
  gen->add_option("--val", n_val, "Validation samples (default from config)");
  gen->add_flag("--illposed", illposed, "Add one textureless or specular patch per sample");

  auto* tr = app.add_subcommand("train-toy", "Train the stereo model on generated random-dot samples");
  add_common(tr);
  tr->add_option("--kernel", kernel, "Attention kernel: dak or softmax")->check(CLI::IsMember({"dak", "softmax"}));
  tr->add_option("--steps", steps, "Override train_steps");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (EPE, D1)");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "checkpoint.json from train-toy")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Directory of sample directories (default: regenerated validation split)")
      ->check(CLI::ExistingDirectory);
  ev->add_option("--iters", iters, "Refinement iterations (default eval_iters)");

  auto* be = app.add_subcommand("bench", "Operation-count and wall-clock scaling of HPSA vs softmax attention");
  add_common(be);
  be->add_option("--sizes", sizes, "Comma-separated token counts");
  be->add_option("--c", bench_c, "Channels")->check(CLI::PositiveNumber);
  be->add_option("--reps", reps, "Timed repetitions per size")->check(CLI::PositiveNumber);
  be->add_option("--out", bench_out, "CSV file name");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks for every differentiable op");
  add_common(gc);
  gc->add_option("--tolerance", tolerance, "Relative tolerance")->check(CLI::PositiveNumber);

  auto* rk = app.add_subcommand("rank", "Numerical rank of random attention maps, dak vs softmax");
  add_common(rk);
  rk->add_option("--trials", trials, "Trials per kernel")->check(CLI::PositiveNumber);
  rk->add_option("--c", rank_c, "Channels")->check(CLI::PositiveNumber);
  rk->add_option("--n", tokens, "Tokens")->check(CLI::PositiveNumber);

  auto* eq = app.add_subcommand("equiv", "Check dak(A)*V == V + elu(A)*V elementwise and through MKOI");
  add_common(eq);
  eq->add_option("--trials", trials, "Random (A, V) pairs")->check(CLI::PositiveNumber);
  eq->add_option("--tolerance", equiv_tol, "Max absolute deviation")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, n_train, n_val, illposed, out);
    if (tr->parsed()) return cmd_train_toy(common, kernel, steps, out);
    if (ev->parsed()) return cmd_eval(common, checkpoint, data_dir, iters, out);
    if (be->parsed()) return cmd_bench(common, sizes, bench_c, reps, bench_out, out);
    if (gc->parsed()) return cmd_gradcheck(common, tolerance, out);
    if (rk->parsed()) return cmd_rank(common, trials, rank_c, tokens, out);
    if (eq->parsed()) return cmd_equiv(common, trials, equiv_tol, out);
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kValidation;
}

}  // namespace hart::cli
