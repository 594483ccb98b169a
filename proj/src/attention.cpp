#include "hart/attention.hpp"

#include <bit>
#include <cmath>
#include <string>

namespace hart::attention {

namespace {

void require_divisible_by_4(std::size_t c, const char* where) {
  if (c == 0 || c % 4 != 0)
    throw ShapeError(std::string(where) + ": channel count " + std::to_string(c) + " must be a positive multiple of 4");
}

}  // namespace

MkoiParams MkoiParams::init(std::size_t c, Rng& rng, Kernel kernel) {
  require_divisible_by_4(c, "MkoiParams");
  MkoiParams p;
  const std::size_t wide = c + c / 2 + c / 4;
  p.expand = Conv2d::init(conv_spec(c, wide, 1), rng);
  const std::array<std::size_t, 3> widths{c, c / 2, c / 4};
  for (std::size_t m = 0; m < 3; ++m) p.branch[m] = Conv2d::init(conv_spec(c, widths[m], 2 * m + 3), rng);
  p.fuse = Conv2d::init(conv_spec(wide, c, 1), rng);
  p.kernel = kernel;
  return p;
}

std::array<std::size_t, 3> MkoiParams::group_widths() const {
  const std::size_t c = channels();
  return {c, c / 2, c / 4};
}

SgffParams SgffParams::init(std::size_t c, Rng& rng) {
  SgffParams p;
  p.proj_in = Conv2d::init(conv_spec(c, c, 1), rng);
  p.gate = Conv2d::init(conv_spec(c, c, 3), rng);
  p.value = Conv2d::init(conv_spec(c, c, 3), rng);
  p.proj_out = Conv2d::init(conv_spec(c, c, 1), rng);
  return p;
}

BlockParams BlockParams::init(std::size_t c, Rng& rng, Kernel kernel) {
  BlockParams p;
  p.qkv = Conv2d::init(conv_spec(c, 3 * c, 1), rng);
  p.mkoi = MkoiParams::init(c, rng, kernel);
  p.ln_gain = Var::leaf(Tensor::ones({c}));
  p.ln_offset = Var::leaf(Tensor::zeros({c}));
  p.sgff = SgffParams::init(c, rng);
  return p;
}

void BlockParams::zero_output_projections() const {
  mkoi.fuse.zero();
  sgff.proj_out.zero();
}

EncoderConfig EncoderConfig::default_config(std::size_t in_channels) {
  EncoderConfig cfg;
  cfg.in_channels = in_channels;
  cfg.scales = {{64, 4}, {128, 8}, {192, 16}};
  cfg.blocks_per_scale = 2;
  return cfg;
}

void EncoderConfig::validate() const {
  if (in_channels == 0) throw ShapeError("encoder: in_channels must be positive");
  if (scales.empty()) throw ShapeError("encoder: at least one scale required");
  std::size_t prev_factor = 0;
  for (const auto& s : scales) {
    require_divisible_by_4(s.channels, "encoder scale");
    if (s.factor == 0 || !std::has_single_bit(s.factor))
      throw ShapeError("encoder: downsample factors must be powers of two, got " + std::to_string(s.factor));
    if (s.factor <= prev_factor) throw ShapeError("encoder: downsample factors must be strictly increasing");
    prev_factor = s.factor;
  }
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams p;
  p.cfg = cfg;
  std::size_t ch = cfg.in_channels, factor = 1;
  for (const auto& s : cfg.scales) {
    std::vector<Conv2d> convs;
    for (std::size_t f = factor; f < s.factor; f *= 2) {
      convs.push_back(Conv2d::init(conv_spec(ch, s.channels, 3, 2), rng));
      ch = s.channels;
    }
    if (ch != s.channels) {
      convs.push_back(Conv2d::init(conv_spec(ch, s.channels, 3, 1), rng));
      ch = s.channels;
    }
    p.downsample.push_back(std::move(convs));
    std::vector<BlockParams> blocks;
    for (std::size_t b = 0; b < cfg.blocks_per_scale; ++b) blocks.push_back(BlockParams::init(ch, rng, cfg.kernel));
    p.blocks.push_back(std::move(blocks));
    factor = s.factor;
  }
  return p;
}

QkvTriple project_qkv(const Var& v_init, const Conv2d& proj) {
  const std::size_t c = v_init.dim(0);
  if (proj.spec.kernel_size != 1 || proj.spec.in_channels != c || proj.spec.out_channels != 3 * c)
    throw ShapeError("project_qkv: projection must be 1x1 from " + std::to_string(c) + " to " +
                     std::to_string(3 * c) + " channels");
  auto parts = split(proj(v_init), {c, c, c});
  return {parts[0], parts[1], parts[2]};
}

Var hadamard_attention(const Var& q, const Var& k) {
  if (q.shape() != k.shape() || q.value().rank() != 3)
    throw ShapeError("hadamard_attention: q " + shape_str(q.shape()) + " and k " + shape_str(k.shape()) +
                     " must be equal (C, H, W) maps");
  return mul(l2_normalize(q, 0), l2_normalize(k, 0));
}

Var dak(const Var& a) { return dense_attention_kernel(a); }

Var apply_kernel(const Var& a, Kernel kernel) {
  if (kernel == Kernel::dak) return dak(a);
  const Shape s = a.shape();
  return reshape(softmax(reshape(a, {s[0], s[1] * s[2]}), 1), s);
}

Var mkoi(const Var& a_pre, const Var& v, const MkoiParams& params) {
  const std::size_t c = params.channels();
  require_divisible_by_4(v.dim(0), "mkoi");
  if (a_pre.shape() != v.shape() || v.dim(0) != c)
    throw ShapeError("mkoi: attention " + shape_str(a_pre.shape()) + " and value " + shape_str(v.shape()) +
                     " must both have " + std::to_string(c) + " channels");
  // The kernel is elementwise for dak, so it commutes with the group split;
  // the softmax variant normalizes each channel separately, which also does.
  const Var weights = apply_kernel(params.expand(a_pre), params.kernel);
  const Var branches = concat({params.branch[0](v), params.branch[1](v), params.branch[2](v)});
  return params.fuse(mul(weights, branches));
}

Var mkoi_decoupled(const Var& a_pre, const Var& v, const MkoiParams& params) {
  if (params.kernel != Kernel::dak) throw ShapeError("mkoi_decoupled: only defined for the dak kernel");
  const Var a = params.expand(a_pre);
  const Var branches = concat({params.branch[0](v), params.branch[1](v), params.branch[2](v)});
  return params.fuse(add(branches, mul(elu(a), branches)));
}

Var hpsa(const QkvTriple& qkv, const MkoiParams& params) {
  return mkoi(hadamard_attention(qkv.q, qkv.k), qkv.v, params);
}

Var vanilla_sa(const QkvTriple& qkv, std::size_t heads) {
  const Shape s = qkv.q.shape();
  if (s.size() != 3 || qkv.k.shape() != s || qkv.v.shape() != s)
    throw ShapeError("vanilla_sa: q, k, v must share a (C, H, W) shape");
  const std::size_t c = s[0], n = s[1] * s[2];
  if (heads == 0 || c % heads != 0)
    throw ShapeError("vanilla_sa: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) +
                     " heads");
  const std::size_t dk = c / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  const Var q = reshape(qkv.q, {c, n}), k = reshape(qkv.k, {c, n}), v = reshape(qkv.v, {c, n});
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = slice(q, h * dk, dk), kh = slice(k, h * dk, dk), vh = slice(v, h * dk, dk);
    // logits[i, j] = <q_i, k_j> / sqrt(dk), tokens as columns.
    const Var logits = scale(matmul(qh, kh, true, false), inv_sqrt_dk);
    const Var probs = softmax(logits, 1);
    // out[:, i] = sum_j probs[i, j] v[:, j]
    outs.push_back(matmul(vh, probs, false, true));
  }
  return reshape(concat(outs), s);
}

Var sgff(const Var& v, const SgffParams& p) {
  const Var u = p.proj_in(v);
  return p.proj_out(mul(gelu(p.gate(u)), p.value(u)));
}

Var transformer_block(const Var& v, const BlockParams& p) {
  const Var b = add(v, hpsa(project_qkv(v, p.qkv), p.mkoi));
  return add(b, sgff(layer_norm(b, p.ln_gain, p.ln_offset), p.sgff));
}

std::vector<Var> encoder_forward(const Var& x, const EncoderParams& p) {
  const EncoderConfig& cfg = p.cfg;
  if (x.value().rank() != 3 || x.dim(0) != cfg.in_channels)
    throw ShapeError("encoder_forward: expected (" + std::to_string(cfg.in_channels) + ", H, W) input, got " +
                     shape_str(x.shape()));
  const std::size_t max_factor = cfg.scales.back().factor;
  if (x.dim(1) % max_factor != 0 || x.dim(2) % max_factor != 0)
    throw ShapeError("encoder_forward: spatial dims " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(max_factor));
  std::vector<Var> outs;
  Var h = x;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
    const auto& convs = p.downsample[s];
    for (std::size_t i = 0; i < convs.size(); ++i) {
      h = convs[i](h);
      if (i + 1 < convs.size()) h = gelu(h);
    }
    for (const auto& block : p.blocks[s]) h = transformer_block(h, block);
    outs.push_back(h);
  }
  return outs;
}

}  // namespace hart::attention
