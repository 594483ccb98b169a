#pragma once

// Recurrent disparity refinement with convolutional LSTM cells on a
// multi-level hidden state (finest level at disparity-field resolution, each
// further level at half the previous resolution).

#include <utility>
#include <vector>

#include "hart/correlation.hpp"
#include "hart/disparity.hpp"
#include "hart/nn.hpp"

namespace hart::refine {

struct RecurrentState {
  std::vector<Var> hidden;  // finest first
  std::vector<Var> cell;
};

struct RefineConfig {
  std::size_t hidden_dim = 32;
  std::size_t levels = 3;
  std::vector<std::size_t> context_channels;  // one entry per level
  std::size_t corr_feature_width = 144;       // CorrPyramid::feature_width()
  std::size_t motion_dim = 32;
  std::size_t upsample_factor = 4;

  void validate() const;
};

struct RefineParams {
  RefineConfig cfg;
  Conv2d motion_a;            // 3x3 on [disp, corr] -> motion_dim
  Conv2d motion_b;            // 3x3 motion_dim -> motion_dim - 1, disparity re-appended
  std::vector<Conv2d> gates;  // per level, 3x3 -> 4 * hidden_dim as (input, forget, output, candidate)
  Conv2d delta_a, delta_b;    // 3x3 hidden -> hidden -> 1
  Conv2d mask_a, mask_b;      // 3x3 hidden -> hidden, 1x1 hidden -> 9 * factor^2

  static RefineParams init(const RefineConfig& cfg, Rng& rng);
  std::size_t gate_input_channels(std::size_t level) const;
  void zero_delta_head() const { delta_b.zero(); }

  template <typename F>
  void visit(F&& f) {
    motion_a.visit(f);
    motion_b.visit(f);
    for (auto& g : gates) g.visit(f);
    delta_a.visit(f);
    delta_b.visit(f);
    mask_a.visit(f);
    mask_b.visit(f);
  }
};

/// One LSTM step over all levels (coarsest first, so finer levels see the
/// freshly updated coarser state). Returns the new state and the disparity
/// increment decoded from the finest hidden state.
std::pair<RecurrentState, Var> lstm_update(const RecurrentState& state, const std::vector<Var>& context,
                                           const Var& corr_feat, const Var& disp, const RefineParams& params);

/// Learned convex combination over 3x3 neighbourhoods: (H, W) -> (H*f, W*f),
/// with disparities scaled by f. mask_logits is (9 * f^2, H, W).
Var convex_upsample(const Var& disp, const Var& mask_logits, std::size_t factor);

/// Nearest-neighbour upsampling of an (H, W) disparity map, values scaled by factor.
Var upsample_disparity(const Var& disp, std::size_t factor);

struct RefineResult {
  std::vector<Var> low_res;   // d_1 .. d_N at field resolution
  std::vector<Var> full_res;  // convex-upsampled
  RecurrentState state;
};

/// d_{i+1} = d_i + delta_i. The disparity fed back into the next step is
/// detached, so each increment is trained through its own lookup only.
RefineResult refine_disparity(const Var& d0, const correlation::CorrPyramid& pyr, const std::vector<Var>& context,
                              RecurrentState state, std::size_t n_iters, const RefineParams& params);

constexpr double kSmoothL1Beta = 1.0;

/// SmoothL1(d0 - gt) + sum_i gamma^(N-i) L1(d_i - gt), each term averaged over valid pixels.
Var sequence_loss(const std::vector<Var>& preds, const Var& d0, const DisparityMap& gt, double gamma);

}  // namespace hart::refine
