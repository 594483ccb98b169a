#pragma once

#include <vector>

#include "hart/disparity.hpp"
#include "hart/nn.hpp"

namespace hart::correlation {

/// Group-wise correlation, (groups, disparities, H, W).
struct CorrelationVolume {
  Var values;
  std::size_t disparity_stride = 1;

  std::size_t groups() const { return values.dim(0); }
  std::size_t disparities() const { return values.dim(1); }
  std::size_t max_disp() const { return disparities() * disparity_stride; }
};

/// values[g, d, h, w] = <fl_g(h, w), fr_g(h, w - d)> / (C / groups), zero where w - d < 0.
/// max_disp is the number of disparity bins D (d = 0 .. D-1).
CorrelationVolume build_gwc_volume(const Var& f_left, const Var& f_right, std::size_t max_disp,
                                   std::size_t n_groups);

/// Residual stack of three 3x3x3 convolutions over (d, h, w), groups as channels.
struct RegularizerParams {
  Var w1, b1, w2, b2, w3, b3;

  static RegularizerParams init(std::size_t groups, std::size_t hidden, Rng& rng);
  /// Zeroes the last layer so the regularizer is the identity.
  void zero_last() const;

  template <typename F>
  void visit(F&& f) {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
    f(w3);
    f(b3);
  }
};

CorrelationVolume regularize_volume(const CorrelationVolume& vol, const RegularizerParams& params);

/// d0(h, w) = sum_d d * softmax_d(mean over groups)[d, h, w]; shape (H, W).
Var soft_argmin_init(const CorrelationVolume& vol);

/// Halves the disparity axis by averaging bin pairs; an odd last bin is kept as is.
Var pool_disparity(const Var& volume);

struct CorrPyramid {
  std::vector<Var> levels;  // level l has ceil(D / 2^l) bins
  std::size_t radius = 4;

  static CorrPyramid build(const CorrelationVolume& vol, std::size_t n_levels, std::size_t radius);
  std::size_t groups() const { return levels.front().dim(0); }
  std::size_t feature_width() const { return levels.size() * (2 * radius + 1) * groups(); }
};

/// Samples each level at disp / 2^l + o, o in [-r, r], with linear
/// interpolation along d and zeros outside the volume. Output channels are
/// ordered (level, group, offset); shape (levels * groups * (2r+1), H, W).
Var pyramid_lookup(const CorrPyramid& pyr, const Var& disp);

}  // namespace hart::correlation
