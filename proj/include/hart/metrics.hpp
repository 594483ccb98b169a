#pragma once

// Disparity error metrics and numerical-rank analysis of attention maps.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hart/attention.hpp"
#include "hart/disparity.hpp"

namespace hart::metrics {

/// Mean |pred - gt| over pixels valid in both maps. Throws ShapeError on an empty mask.
double epe(const DisparityMap& pred, const DisparityMap& gt);
double epe(const Tensor& pred, const DisparityMap& gt);

constexpr double kD1Pixels = 3.0;
constexpr double kD1Relative = 0.05;

/// Percentage of valid pixels with |err| > px_thresh and |err| > rel_thresh * gt.
/// rel_thresh = 0 gives a pure pixel threshold.
double d1_rate(const DisparityMap& pred, const DisparityMap& gt, double px_thresh = kD1Pixels,
               double rel_thresh = kD1Relative);
double d1_rate(const Tensor& pred, const DisparityMap& gt, double px_thresh = kD1Pixels,
               double rel_thresh = kD1Relative);

constexpr double kRankTolerance = 1e-10;

/// Numerical rank of an (m, n) matrix (singular values above sigma_max * 1e-10) divided by m.
double rank_ratio(const Tensor& matrix);

struct RankReport {
  attention::Kernel kernel = attention::Kernel::dak;
  std::size_t trials = 0, channels = 0, tokens = 0;
  std::uint64_t seed = 0;
  double mean_rank_ratio = 0.0;
  std::size_t full_rank_trials = 0;
  std::vector<double> ratios;
  std::string sv_threshold_policy;

  nlohmann::json to_json() const;
};

std::string kernel_name(attention::Kernel kernel);
attention::Kernel parse_kernel(const std::string& name);

/// Post-kernel Hadamard attention map for Q, K ~ N(0, 1) of shape (c, n), as a (c, n) matrix.
Tensor random_attention_map(attention::Kernel kernel, std::size_t c, std::size_t n, Rng& rng);

RankReport rank_experiment(attention::Kernel kernel, std::size_t trials, std::size_t c, std::size_t n,
                           std::uint64_t seed);

}  // namespace hart::metrics
