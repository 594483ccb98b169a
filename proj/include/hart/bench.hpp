#pragma once

// Operation-count and wall-clock scaling of HPSA against vanilla attention.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace hart::bench {

enum class Method { hpsa, vanilla_sa };

struct BenchRecord {
  Method method;
  std::size_t n = 0;  // tokens, H * W
  std::size_t c = 0;
  std::uint64_t flops = 0;
  std::uint64_t wall_ns = 0;
};

struct ScalingResult {
  std::vector<BenchRecord> records;
  double flop_slope = 0.0;  // least-squares slope of log(flops) vs log(n)
  double wall_slope = 0.0;
};

std::string method_name(Method m);
Method parse_method(const std::string& name);

constexpr std::size_t kVanillaHeads = 4;

/// Exact counts in the units of hart::flops for one forward pass on a (c, h, w) triple.
std::uint64_t hpsa_flops(std::size_t c, std::size_t h, std::size_t w);
std::uint64_t vanilla_sa_flops(std::size_t c, std::size_t h, std::size_t w, std::size_t heads = kVanillaHeads);

/// Near-square (h, w) with h * w = n and h <= w.
std::pair<std::size_t, std::size_t> grid_for(std::size_t n);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Times reps forward passes per size on the calling thread (median reported)
/// and records the analytic operation count. Sizes must be strictly
/// increasing with at least four points.
ScalingResult scaling_bench(Method method, const std::vector<std::size_t>& sizes, std::size_t c, std::size_t reps,
                            std::uint64_t seed);

/// CSV with header method,n,c,flops,wall_ns.
void write_csv(std::ostream& out, const std::vector<BenchRecord>& records);

}  // namespace hart::bench
