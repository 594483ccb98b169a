#include "hart/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/SVD>

namespace hart::metrics {

namespace {

template <typename F>
void for_valid(const Tensor& pred, const DisparityMap& gt, const std::vector<std::uint8_t>* pred_valid, F&& f,
               const char* where) {
  if (pred.shape() != gt.values.shape())
    throw ShapeError(std::string(where) + ": prediction " + shape_str(pred.shape()) + " vs ground truth " +
                     shape_str(gt.values.shape()));
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (!gt.valid[i] || (pred_valid && !(*pred_valid)[i])) continue;
    f(pred[i], gt.values[i]);
    ++n;
  }
  if (n == 0) throw ShapeError(std::string(where) + ": no valid pixels");
}

double epe_impl(const Tensor& pred, const DisparityMap& gt, const std::vector<std::uint8_t>* pv) {
  double total = 0.0;
  std::size_t n = 0;
  for_valid(pred, gt, pv, [&](double p, double g) { total += std::abs(p - g); ++n; }, "epe");
  return total / static_cast<double>(n);
}

double d1_impl(const Tensor& pred, const DisparityMap& gt, const std::vector<std::uint8_t>* pv, double px,
               double rel) {
  std::size_t bad = 0, n = 0;
  for_valid(pred, gt, pv, [&](double p, double g) {
    const double e = std::abs(p - g);
    bad += e > px && e > rel * std::abs(g);
    ++n;
  }, "d1_rate");
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

}  // namespace

double epe(const DisparityMap& pred, const DisparityMap& gt) { return epe_impl(pred.values, gt, &pred.valid); }
double epe(const Tensor& pred, const DisparityMap& gt) { return epe_impl(pred, gt, nullptr); }

double d1_rate(const DisparityMap& pred, const DisparityMap& gt, double px, double rel) {
  return d1_impl(pred.values, gt, &pred.valid, px, rel);
}
double d1_rate(const Tensor& pred, const DisparityMap& gt, double px, double rel) {
  return d1_impl(pred, gt, nullptr, px, rel);
}

double rank_ratio(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("rank_ratio: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Eigen::MatrixXd mat(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a[i * n + j];
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(mat);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0.0;
  const double cutoff = sv(0) * kRankTolerance;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > cutoff;
  return static_cast<double>(rank) / static_cast<double>(m);
}

nlohmann::json RankReport::to_json() const {
  return {{"kernel", kernel_name(kernel)},
          {"trials", trials},
          {"c", channels},
          {"n", tokens},
          {"seed", seed},
          {"mean_rank_ratio", mean_rank_ratio},
          {"full_rank_trials", full_rank_trials},
          {"sv_threshold_policy", sv_threshold_policy}};
}

std::string kernel_name(attention::Kernel kernel) { return kernel == attention::Kernel::dak ? "dak" : "softmax"; }

attention::Kernel parse_kernel(const std::string& name) {
  if (name == "dak") return attention::Kernel::dak;
  if (name == "softmax") return attention::Kernel::softmax;
  throw std::invalid_argument("unknown attention kernel '" + name + "' (expected dak or softmax)");
}

Tensor random_attention_map(attention::Kernel kernel, std::size_t c, std::size_t n, Rng& rng) {
  const Var q = Var::constant(Tensor::randn({c, 1, n}, rng));
  const Var k = Var::constant(Tensor::randn({c, 1, n}, rng));
  return attention::apply_kernel(attention::hadamard_attention(q, k), kernel).value().reshaped({c, n});
}

RankReport rank_experiment(attention::Kernel kernel, std::size_t trials, std::size_t c, std::size_t n,
                           std::uint64_t seed) {
  if (trials == 0 || c == 0 || n == 0) throw ShapeError("rank_experiment: trials, c and n must be positive");
  RankReport r;
  r.kernel = kernel;
  r.trials = trials;
  r.channels = c;
  r.tokens = n;
  r.seed = seed;
  r.sv_threshold_policy = "rank = #{singular values > sigma_max * 1e-10}; ratio = rank / rows (c)";
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const double ratio = rank_ratio(random_attention_map(kernel, c, n, rng));
    r.ratios.push_back(ratio);
    total += ratio;
    r.full_rank_trials += ratio == 1.0;
  }
  r.mean_rank_ratio = total / static_cast<double>(trials);
  return r;
}

}  // namespace hart::metrics
