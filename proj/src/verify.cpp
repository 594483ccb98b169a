#include "hart/verify.hpp"

#include <algorithm>
#include <cmath>

#include "hart/attention.hpp"

namespace hart::verify {

EquivReport equivalence_suite(std::size_t trials, std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  EquivReport rep;
  rep.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t c = 4 * (1 + t % 4), h = 2 + t % 5, w = 3 + t % 4;
    const Var a = Var::constant(Tensor::randn({c, h, w}, rng, 3.0));
    const Var v = Var::constant(Tensor::randn({c, h, w}, rng));
    const Var lhs = mul(attention::dak(a), v);
    const Var rhs = add(v, mul(elu(a), v));
    rep.max_elementwise_dev = std::max(rep.max_elementwise_dev, max_abs_diff(lhs.value(), rhs.value()));

    const attention::MkoiParams p = freeze_parameters(attention::MkoiParams::init(c, rng));
    const Tensor direct = attention::mkoi(a, v, p).value();
    const Tensor decoupled = attention::mkoi_decoupled(a, v, p).value();
    rep.max_mkoi_dev = std::max(rep.max_mkoi_dev, max_abs_diff(direct, decoupled));
  }
  rep.passed = trials > 0 && rep.max_elementwise_dev <= tolerance && rep.max_mkoi_dev <= tolerance;
  return rep;
}

DakReport dak_properties(std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  DakReport rep;
  rep.samples = samples;
  const Tensor y = attention::dak(Var::constant(Tensor::randn({samples}, rng, 20.0))).value();
  for (double v : y.data()) rep.positivity_violations += !(v > 0.0);

  auto f = [](double x) { return attention::dak(Var::constant(Tensor::scalar(x))).value()[0]; };
  rep.value_at_zero = f(0.0);
  // Second-order one-sided stencils; a plain forward difference on e^x has
  // truncation error h/2, too coarse for a 1e-8 check.
  const double h = 1e-5;
  rep.right_derivative = (-3.0 * f(0.0) + 4.0 * f(h) - f(2.0 * h)) / (2.0 * h);
  rep.left_derivative = (3.0 * f(0.0) - 4.0 * f(-h) + f(-2.0 * h)) / (2.0 * h);
  rep.passed = samples > 0 && rep.positivity_violations == 0 && rep.value_at_zero == 1.0 &&
               std::abs(rep.right_derivative - 1.0) <= 1e-8 && std::abs(rep.left_derivative - 1.0) <= 1e-8;
  return rep;
}

}  // namespace hart::verify
