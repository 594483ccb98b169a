#pragma once

// Parameter containers. Every bundle exposes visit(f), calling f(Var&) on
// each trainable tensor in a fixed order; optimizers, checkpointing and
// per-sample cloning are built on that.

#include <vector>

#include "hart/ops.hpp"

namespace hart {

/// Convolution with owned weights. Weights use Kaiming-uniform fan-in
/// initialization (bound sqrt(6 / fan_in)); biases start at zero.
struct Conv2d {
  ConvSpec spec;
  Var weight;
  Var bias;

  static Conv2d init(const ConvSpec& spec, Rng& rng);
  Var operator()(const Var& x) const { return conv2d(x, spec, weight, bias); }
  void zero() const;

  template <typename F>
  void visit(F&& f) {
    f(weight);
    if (bias.defined()) f(bias);
  }
};

inline ConvSpec conv_spec(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1) {
  ConvSpec s;
  s.kernel_size = k;
  s.in_channels = in;
  s.out_channels = out;
  s.stride = stride;
  return s;
}

Var kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng);

template <typename P>
std::vector<Var> parameters(P& p) {
  std::vector<Var> out;
  p.visit([&](Var& v) { out.push_back(v); });
  return out;
}

template <typename P>
std::size_t parameter_count(P& p) {
  std::size_t n = 0;
  p.visit([&](Var& v) { n += v.numel(); });
  return n;
}

/// Deep copy with fresh leaf nodes, so the copy can be differentiated
/// independently (e.g. one copy per sample on a worker thread).
template <typename P>
P clone_parameters(const P& p) {
  P copy = p;
  copy.visit([](Var& v) { v = Var::leaf(v.value(), true); });
  return copy;
}

/// Copy whose tensors are constants, so forward passes record no graph.
template <typename P>
P freeze_parameters(const P& p) {
  P copy = p;
  copy.visit([](Var& v) { v = Var::constant(v.value()); });
  return copy;
}

}  // namespace hart
