#pragma once

// Hadamard-product self-attention (HPSA) encoder.
//
//   A      = l2n(Q) * l2n(K)                  (per-pixel channel normalization)
//   HPSA   = fuse_1x1( [ kernel(expand_1x1(A))_m * conv_{2m+3}(V)_m ]_{m=0,1,2} )
//   block  = b + SGFF(LN(b)),  b = V_in + HPSA(split3(qkv_1x1(V_in)))
//
// The expanded attention map and the branch outputs have 7c/4 channels split
// as (c, c/2, c/4). All attention work is O(c * H * W).

#include <array>
#include <vector>

#include "hart/nn.hpp"

namespace hart::attention {

struct QkvTriple {
  Var q, k, v;
};

/// Positive weighting applied to the expanded attention map.
enum class Kernel {
  dak,      // dense attention kernel: a + 1 (a >= 0), e^a (a < 0)
  softmax,  // softmax over spatial positions, per channel (ablation baseline)
};

struct MkoiParams {
  Conv2d expand;                 // 1x1, c -> 7c/4
  std::array<Conv2d, 3> branch;  // kernels 3/5/7, c -> c, c/2, c/4
  Conv2d fuse;                   // 1x1, 7c/4 -> c
  Kernel kernel = Kernel::dak;

  static MkoiParams init(std::size_t channels, Rng& rng, Kernel kernel = Kernel::dak);
  std::size_t channels() const { return fuse.spec.out_channels; }
  /// Channel widths of the three groups: (c, c/2, c/4).
  std::array<std::size_t, 3> group_widths() const;

  template <typename F>
  void visit(F&& f) {
    expand.visit(f);
    for (auto& b : branch) b.visit(f);
    fuse.visit(f);
  }
};

struct SgffParams {
  Conv2d proj_in;   // 1x1
  Conv2d gate;      // 3x3, GELU side of the gate
  Conv2d value;     // 3x3, linear side of the gate
  Conv2d proj_out;  // 1x1

  static SgffParams init(std::size_t channels, Rng& rng);

  template <typename F>
  void visit(F&& f) {
    proj_in.visit(f);
    gate.visit(f);
    value.visit(f);
    proj_out.visit(f);
  }
};

struct BlockParams {
  Conv2d qkv;  // 1x1, c -> 3c
  MkoiParams mkoi;
  Var ln_gain, ln_offset;
  SgffParams sgff;

  static BlockParams init(std::size_t channels, Rng& rng, Kernel kernel = Kernel::dak);
  std::size_t channels() const { return mkoi.channels(); }
  /// Zeroes the HPSA fuse and SGFF output projections, making the block the identity.
  void zero_output_projections() const;

  template <typename F>
  void visit(F&& f) {
    qkv.visit(f);
    mkoi.visit(f);
    f(ln_gain);
    f(ln_offset);
    sgff.visit(f);
  }
};

struct ScaleSpec {
  std::size_t channels;
  std::size_t factor;  // downsampling relative to the encoder input
};

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::vector<ScaleSpec> scales;
  std::size_t blocks_per_scale = 2;
  Kernel kernel = Kernel::dak;

  /// Stem to 1/4, then (64, x4), (128, x8), (192, x16) with two blocks each.
  static EncoderConfig default_config(std::size_t in_channels = 1);
  void validate() const;
};

struct EncoderParams {
  EncoderConfig cfg;
  // Per scale: stride-2 3x3 convs bridging from the previous scale (may be empty).
  std::vector<std::vector<Conv2d>> downsample;
  std::vector<std::vector<BlockParams>> blocks;

  static EncoderParams init(const EncoderConfig& cfg, Rng& rng);

  template <typename F>
  void visit(F&& f) {
    for (auto& scale : downsample)
      for (auto& c : scale) c.visit(f);
    for (auto& scale : blocks)
      for (auto& b : scale) b.visit(f);
  }
};

/// 1x1 projection to 3c channels split in order (Q, K, V).
QkvTriple project_qkv(const Var& v_init, const Conv2d& proj);

/// l2_normalize(q, channel) * l2_normalize(k, channel).
Var hadamard_attention(const Var& q, const Var& k);

/// Dense attention kernel; strictly positive output.
Var dak(const Var& a);

/// Applies the configured kernel to an expanded attention map (C, H, W).
Var apply_kernel(const Var& a, Kernel kernel);

/// Multi-kernel interaction of the pre-kernel attention map with V.
Var mkoi(const Var& a_pre, const Var& v, const MkoiParams& params);

/// mkoi with the dak weighting written in its decoupled form b + elu(a) * b.
/// Equal to mkoi() for Kernel::dak; used to verify that identity end to end.
Var mkoi_decoupled(const Var& a_pre, const Var& v, const MkoiParams& params);

Var hpsa(const QkvTriple& qkv, const MkoiParams& params);

/// Scaled dot-product attention over the H*W tokens, per head; O(n^2 c).
Var vanilla_sa(const QkvTriple& qkv, std::size_t heads = 4);

/// proj_out( GELU(gate(u)) * value(u) ),  u = proj_in(v).
Var sgff(const Var& v, const SgffParams& params);

Var transformer_block(const Var& v, const BlockParams& params);

/// One feature map per scale, finest first.
std::vector<Var> encoder_forward(const Var& x, const EncoderParams& params);

}  // namespace hart::attention
