#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hart/autograd.hpp"

namespace hart {

constexpr double kGradStep = 1e-5;
constexpr double kGradTolerance = 1e-4;

struct GradReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double tolerance = kGradTolerance;
  bool passed = false;
  std::size_t checked = 0;  // number of scalar inputs compared
};

using LossFn = std::function<Var(const std::vector<Var>&)>;

/// Compares d(loss)/d(inputs) from backward() with central differences.
/// Per-element relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
/// Throws ShapeError for a non-scalar loss; NumericError propagates from ops.
GradReport grad_check(const std::string& op_name, const LossFn& loss, const std::vector<Tensor>& inputs,
                      double tolerance = kGradTolerance, double step = kGradStep);

/// Copies a parameter bundle, replacing its tensors (in visit order) with
/// vars[offset], vars[offset + 1], ...
template <typename P>
P bind_parameters(const P& proto, const std::vector<Var>& vars, std::size_t offset) {
  P copy = proto;
  copy.visit([&](Var& v) { v = vars.at(offset++); });
  return copy;
}

template <typename P>
std::vector<Tensor> parameter_values(P& p) {
  std::vector<Tensor> out;
  p.visit([&](Var& v) { out.push_back(v.value()); });
  return out;
}

/// The gradient checks for every differentiable operation of the pipeline,
/// on small random instances drawn from seed.
std::vector<GradReport> gradient_suite(std::uint64_t seed, double tolerance = kGradTolerance);

}  // namespace hart
