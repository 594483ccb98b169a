#include "hart/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "hart/attention.hpp"

namespace hart::bench {

std::string method_name(Method m) { return m == Method::hpsa ? "hpsa" : "vanilla_sa"; }

Method parse_method(const std::string& name) {
  if (name == "hpsa") return Method::hpsa;
  if (name == "vanilla_sa") return Method::vanilla_sa;
  throw std::invalid_argument("unknown method '" + name + "' (expected hpsa or vanilla_sa)");
}

std::uint64_t hpsa_flops(std::size_t c, std::size_t h, std::size_t w) {
  const std::uint64_t n = h * w, wide = c + c / 2 + c / 4;
  std::uint64_t f = 0;
  f += 2 * 2 * c * n;  // l2-normalize q and k
  f += c * n;          // q * k
  f += wide * c * n + wide * n;  // expand 1x1 + bias
  f += wide * n;                 // kernel
  f += (c * c * 9 + (c / 2) * c * 25 + (c / 4) * c * 49) * n + wide * n;  // branch convs + biases
  f += wide * n;                 // weights * branches
  f += c * wide * n + c * n;     // fuse 1x1 + bias
  return f;
}

std::uint64_t vanilla_sa_flops(std::size_t c, std::size_t h, std::size_t w, std::size_t heads) {
  const std::uint64_t n = h * w;
  // per head: q^T k (dk n^2), scaling (n^2), softmax (3 n^2), v p^T (dk n^2)
  return 2 * c * n * n + 4 * heads * n * n;
}

std::pair<std::size_t, std::size_t> grid_for(std::size_t n) {
  if (n == 0) throw std::invalid_argument("grid_for: n must be positive");
  std::size_t h = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (n % h != 0) --h;
  return {h, n / h};
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need >= 2 paired points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

ScalingResult scaling_bench(Method method, const std::vector<std::size_t>& sizes, std::size_t c, std::size_t reps,
                            std::uint64_t seed) {
  if (sizes.size() < 4) throw std::invalid_argument("scaling_bench: need at least four sizes");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1]) throw std::invalid_argument("scaling_bench: sizes must be strictly increasing");
  if (reps == 0 || c == 0) throw std::invalid_argument("scaling_bench: reps and c must be positive");
  Rng rng(seed);
  const attention::MkoiParams mkoi = freeze_parameters(attention::MkoiParams::init(c, rng));
  ScalingResult out;
  std::vector<double> ns, fl, wall;
  for (std::size_t n : sizes) {
    const auto [h, w] = grid_for(n);
    const attention::QkvTriple t{Var::constant(Tensor::randn({c, h, w}, rng)),
                                 Var::constant(Tensor::randn({c, h, w}, rng)),
                                 Var::constant(Tensor::randn({c, h, w}, rng))};
    std::vector<std::uint64_t> times;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const Var y = method == Method::hpsa ? attention::hpsa(t, mkoi) : attention::vanilla_sa(t, kVanillaHeads);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
    }
    std::nth_element(times.begin(), times.begin() + static_cast<long>(times.size() / 2), times.end());
    BenchRecord rec;
    rec.method = method;
    rec.n = n;
    rec.c = c;
    rec.flops = method == Method::hpsa ? hpsa_flops(c, h, w) : vanilla_sa_flops(c, h, w);
    rec.wall_ns = std::max<std::uint64_t>(1, times[times.size() / 2]);
    out.records.push_back(rec);
    ns.push_back(static_cast<double>(n));
    fl.push_back(static_cast<double>(rec.flops));
    wall.push_back(static_cast<double>(rec.wall_ns));
  }
  out.flop_slope = loglog_slope(ns, fl);
  out.wall_slope = loglog_slope(ns, wall);
  return out;
}

void write_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  out << "method,n,c,flops,wall_ns\n";
  for (const auto& r : records)
    out << method_name(r.method) << ',' << r.n << ',' << r.c << ',' << r.flops << ',' << r.wall_ns << '\n';
}

}  // namespace hart::bench
