#pragma once

// End-to-end stereo network: shared attention encoder, group-wise correlation
// volume with a residual 3-D regularizer, soft-argmin initial disparity and
// recurrent refinement at 1/2^K resolution with convex upsampling.

#include <vector>

#include "hart/attention.hpp"
#include "hart/correlation.hpp"
#include "hart/refine.hpp"

namespace hart {

struct ModelConfig {
  attention::EncoderConfig encoder;  // scale l must have factor 2^K * 2^l for l < hidden levels
  std::size_t downsample_k = 2;      // disparity field at 1/2^K
  std::size_t max_disp = 192;        // full-resolution pixels
  std::size_t n_groups = 8;
  std::size_t regularizer_hidden = 8;
  std::size_t corr_levels = 2;
  std::size_t corr_radius = 4;
  std::size_t hidden_levels = 3;
  std::size_t hidden_dim = 32;
  std::size_t context_dim = 32;
  std::size_t motion_dim = 32;

  std::size_t field_factor() const { return std::size_t{1} << downsample_k; }
  /// Disparity bins of the volume at field resolution.
  std::size_t volume_bins() const { return max_disp / field_factor(); }
  refine::RefineConfig refine_config() const;
  void validate() const;
};

struct ModelParams {
  ModelConfig cfg;
  attention::EncoderParams encoder;
  correlation::RegularizerParams regularizer;
  std::vector<Conv2d> context;  // per hidden level, 1x1 from encoder features
  std::vector<Conv2d> hidden_init;
  refine::RefineParams refine;

  static ModelParams init(const ModelConfig& cfg, Rng& rng);

  template <typename F>
  void visit(F&& f) {
    encoder.visit(f);
    regularizer.visit(f);
    for (auto& c : context) c.visit(f);
    for (auto& c : hidden_init) c.visit(f);
    refine.visit(f);
  }
};

struct StereoOutput {
  Var d0;                     // soft-argmin at field resolution
  Var d0_full;                // nearest-upsampled and scaled to full resolution
  std::vector<Var> low_res;   // refined, field resolution
  std::vector<Var> full_res;  // refined, full resolution
};

/// left/right are (C, H, W) with H, W divisible by the encoder's largest factor.
StereoOutput stereo_forward(const Var& left, const Var& right, const ModelParams& params, std::size_t iters);

/// sequence_loss on full-resolution outputs.
Var stereo_loss(const StereoOutput& out, const DisparityMap& gt, double gamma);

}  // namespace hart
