#pragma once

// Differentiable tensor operations. Feature maps are (channels, height, width);
// disparity maps are (height, width). Every op records an exact
// vector-Jacobian product; tests/unit/test_ops.cpp checks each one against
// central finite differences.

#include <cstdint>
#include <optional>
#include <vector>

#include "hart/autograd.hpp"

namespace hart {

struct ConvSpec {
  std::size_t kernel_size = 1;  // odd
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t stride = 1;
  std::optional<std::size_t> padding;  // defaults to (kernel_size - 1) / 2
  std::size_t groups = 1;
  bool bias = true;

  std::size_t pad() const { return padding.value_or((kernel_size - 1) / 2); }
  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel_size, kernel_size}; }
  void validate() const;
};

// Counts multiply-class operations issued by the forward pass of each op on
// the calling thread:
//   conv2d / conv3d   out_ch * (in_ch/groups) * k^d * out_positions, + out elements with bias
//   matmul            M * N * K
//   add, sub, mul, scale, add_scalar, dak, elu, gelu, tanh, sigmoid   1 per element
//   l2_normalize      2 per element (square-accumulate, rescale)
//   softmax           3 per element (exp, accumulate, divide)
//   layer_norm        5 per element
// Data movement (concat, slice, reshape, pooling, upsampling) is not counted.
namespace flops {
std::uint64_t count();
void reset();
void add(std::uint64_t n);
}  // namespace flops

// Elementwise arithmetic on equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var mul_const(const Var& a, const Tensor& c);

Var detach(const Var& a);
Var reshape(const Var& a, Shape shape);

/// Concatenation / slicing along axis 0 (the channel axis of a feature map).
Var concat(const std::vector<Var>& parts);
Var slice(const Var& a, std::size_t begin, std::size_t count);
std::vector<Var> split(const Var& a, const std::vector<std::size_t>& sizes);

Var conv2d(const Var& x, const ConvSpec& spec, const Var& weight, const Var& bias = {});

/// Stride-1 "same" 3-D convolution of x (C, D, H, W) with weight (O, C, k, k, k).
Var conv3d(const Var& x, const Var& weight, const Var& bias = {});

constexpr double kL2NormEps = 1e-6;
constexpr double kLayerNormEps = 1e-10;

/// Unit Euclidean norm along axis; slices with norm below eps become zeros.
Var l2_normalize(const Var& x, std::size_t axis, double eps = kL2NormEps);

/// Normalizes each spatial position of a (C, H, W) map across channels,
/// then applies per-channel gain and offset.
Var layer_norm(const Var& x, const Var& gain, const Var& offset, double eps = kLayerNormEps);

Var gelu(const Var& x);
Var elu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var softmax(const Var& x, std::size_t axis);

/// x + 1 for x >= 0, e^x for x < 0. Strictly positive for finite input.
Var dense_attention_kernel(const Var& x);

enum class Activation { gelu, elu, softmax };
Var activation(const Var& x, Activation kind, std::size_t softmax_axis = 0);

/// 2-D matrix product op(a) * op(b) where op transposes when requested.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

Var sum(const Var& x);
Var mean(const Var& x);
/// sum(x * w) for a constant weight tensor of x's shape.
Var weighted_sum(const Var& x, const Tensor& w);
/// Mean over axis 0: (A, ...) -> (...).
Var mean_axis0(const Var& x);
/// Sum over axis 0: (A, ...) -> (...).
Var sum_axis0(const Var& x);

/// 2x2 average pooling of a (C, H, W) map; H and W must be even.
Var avg_pool2(const Var& x);
/// Nearest-neighbour upsampling of a (C, H, W) map by an integer factor.
Var upsample_nearest(const Var& x, std::size_t factor);

/// Mean of |pred - target| over pixels where mask != 0.
Var masked_l1(const Var& pred, const Tensor& target, const std::vector<std::uint8_t>& mask);
/// Mean smooth-L1 (quadratic below beta) over pixels where mask != 0.
Var masked_smooth_l1(const Var& pred, const Tensor& target, const std::vector<std::uint8_t>& mask,
                     double beta = 1.0);

}  // namespace hart
