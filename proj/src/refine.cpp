#include "hart/refine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hart/simd/kernels.hpp"

namespace hart::refine {

void RefineConfig::validate() const {
  if (hidden_dim == 0 || levels == 0 || motion_dim < 2 || upsample_factor == 0)
    throw ShapeError("RefineConfig: hidden_dim, levels, upsample_factor must be positive and motion_dim >= 2");
  if (context_channels.size() != levels)
    throw ShapeError("RefineConfig: need one context width per level (" + std::to_string(levels) + ")");
}

std::size_t RefineParams::gate_input_channels(std::size_t level) const {
  std::size_t n = cfg.hidden_dim + cfg.context_channels[level];
  if (level == 0) n += cfg.motion_dim;
  if (level + 1 < cfg.levels) n += cfg.hidden_dim;  // upsampled coarser state
  if (level > 0) n += cfg.hidden_dim;               // pooled finer state
  return n;
}

RefineParams RefineParams::init(const RefineConfig& cfg, Rng& rng) {
  cfg.validate();
  RefineParams p;
  p.cfg = cfg;
  const std::size_t hd = cfg.hidden_dim, f = cfg.upsample_factor;
  p.motion_a = Conv2d::init(conv_spec(1 + cfg.corr_feature_width, cfg.motion_dim, 3), rng);
  p.motion_b = Conv2d::init(conv_spec(cfg.motion_dim, cfg.motion_dim - 1, 3), rng);
  for (std::size_t l = 0; l < cfg.levels; ++l) p.gates.push_back(Conv2d::init(conv_spec(p.gate_input_channels(l), 4 * hd, 3), rng));
  p.delta_a = Conv2d::init(conv_spec(hd, hd, 3), rng);
  p.delta_b = Conv2d::init(conv_spec(hd, 1, 3), rng);
  p.mask_a = Conv2d::init(conv_spec(hd, hd, 3), rng);
  p.mask_b = Conv2d::init(conv_spec(hd, 9 * f * f, 1), rng);
  // Small initial increments keep early iterations close to the initial estimate.
  for (auto& v : p.delta_b.weight.mutable_value().data()) v *= 0.1;
  return p;
}

namespace {

Var as_map(const Var& hw) { return reshape(hw, {1, hw.dim(0), hw.dim(1)}); }
Var as_plane(const Var& chw) { return reshape(chw, {chw.dim(1), chw.dim(2)}); }

std::pair<Var, Var> lstm_cell(const Var& input, const Var& cell, const Conv2d& gates, std::size_t hd) {
  auto parts = split(gates(input), {hd, hd, hd, hd});
  const Var i = sigmoid(parts[0]);
  const Var f = sigmoid(parts[1]);
  const Var o = sigmoid(parts[2]);
  const Var g = tanh(parts[3]);
  const Var c = add(mul(f, cell), mul(i, g));
  return {mul(o, tanh(c)), c};
}

}  // namespace

std::pair<RecurrentState, Var> lstm_update(const RecurrentState& state, const std::vector<Var>& context,
                                           const Var& corr_feat, const Var& disp, const RefineParams& p) {
  const std::size_t levels = p.cfg.levels, hd = p.cfg.hidden_dim;
  if (state.hidden.size() != levels || state.cell.size() != levels || context.size() != levels)
    throw ShapeError("lstm_update: state/context must have " + std::to_string(levels) + " levels");
  const std::size_t h = state.hidden[0].dim(1), w = state.hidden[0].dim(2);
  if (disp.shape() != Shape{h, w} || corr_feat.dim(1) != h || corr_feat.dim(2) != w)
    throw ShapeError("lstm_update: disparity " + shape_str(disp.shape()) + " / correlation " +
                     shape_str(corr_feat.shape()) + " do not match hidden state " + shape_str(state.hidden[0].shape()));
  for (std::size_t l = 0; l < levels; ++l)
    if (state.hidden[l].shape() != state.cell[l].shape() || state.hidden[l].dim(0) != hd)
      throw ShapeError("lstm_update: hidden/cell shape mismatch at level " + std::to_string(l));

  const Var d = as_map(disp);
  Var motion = gelu(p.motion_a(concat({d, corr_feat})));
  motion = concat({gelu(p.motion_b(motion)), d});

  RecurrentState next = state;
  for (std::size_t li = levels; li-- > 0;) {
    std::vector<Var> inputs{state.hidden[li], context[li]};
    if (li == 0) inputs.push_back(motion);
    if (li + 1 < levels) inputs.push_back(upsample_nearest(next.hidden[li + 1], 2));
    if (li > 0) inputs.push_back(avg_pool2(state.hidden[li - 1]));
    auto [hn, cn] = lstm_cell(concat(inputs), state.cell[li], p.gates[li], hd);
    next.hidden[li] = hn;
    next.cell[li] = cn;
  }
  const Var delta = as_plane(p.delta_b(gelu(p.delta_a(next.hidden[0]))));
  return {std::move(next), delta};
}

Var convex_upsample(const Var& disp, const Var& mask_logits, std::size_t f) {
  if (disp.value().rank() != 2) throw ShapeError("convex_upsample: disparity must be (H, W)");
  const std::size_t h = disp.dim(0), w = disp.dim(1), ff = f * f;
  if (mask_logits.shape() != Shape{9 * ff, h, w})
    throw ShapeError("convex_upsample: mask " + shape_str(mask_logits.shape()) + " expected (" +
                     std::to_string(9 * ff) + ", " + std::to_string(h) + ", " + std::to_string(w) + ")");
  const std::size_t hw = h * w;
  const Tensor& dv = disp.value();
  const Tensor& mv = mask_logits.value();
  // neighbourhood values, (9, H, W), zero padded and scaled by f
  Tensor nb({9, h, w});
  for (std::size_t k = 0; k < 9; ++k) {
    const long dy = static_cast<long>(k / 3) - 1, dx = static_cast<long>(k % 3) - 1;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
        nb[k * hw + y * w + x] = (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w))
                                     ? 0.0
                                     : static_cast<double>(f) * dv[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
      }
  }
  Tensor weights({9, ff, h, w});
  Tensor out({h * f, w * f});
  double buf[9];
  for (std::size_t s = 0; s < ff; ++s)
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < 9; ++k) mx = std::max(mx, mv[(k * ff + s) * hw + p]);
      double total = 0.0;
      for (std::size_t k = 0; k < 9; ++k) {
        buf[k] = std::exp(mv[(k * ff + s) * hw + p] - mx);
        total += buf[k];
      }
      double acc = 0.0;
      for (std::size_t k = 0; k < 9; ++k) {
        const double wk = buf[k] / total;
        weights[(k * ff + s) * hw + p] = wk;
        acc += wk * nb[k * hw + p];
      }
      const std::size_t y = p / w, x = p % w, sy = s / f, sx = s % f;
      out[(y * f + sy) * (w * f) + x * f + sx] = acc;
    }
  return make_result(std::move(out), {disp, mask_logits},
                     [h, w, f, ff, hw, nb = std::move(nb), weights = std::move(weights)](Node& n) {
    Tensor* gd = input_grad(n, 0);
    Tensor* gm = input_grad(n, 1);
    for (std::size_t s = 0; s < ff; ++s)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t y = p / w, x = p % w, sy = s / f, sx = s % f;
        const double go = n.grad[(y * f + sy) * (w * f) + x * f + sx];
        if (go == 0.0) continue;
        double acc = 0.0;
        for (std::size_t k = 0; k < 9; ++k) acc += weights[(k * ff + s) * hw + p] * nb[k * hw + p];
        for (std::size_t k = 0; k < 9; ++k) {
          const double wk = weights[(k * ff + s) * hw + p];
          if (gm) (*gm)[(k * ff + s) * hw + p] += go * wk * (nb[k * hw + p] - acc);
          if (gd) {
            const long yy = static_cast<long>(y) + static_cast<long>(k / 3) - 1;
            const long xx = static_cast<long>(x) + static_cast<long>(k % 3) - 1;
            if (yy >= 0 && xx >= 0 && yy < static_cast<long>(h) && xx < static_cast<long>(w))
              (*gd)[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] += go * wk * static_cast<double>(f);
          }
        }
      }
  }, "convex_upsample");
}

Var upsample_disparity(const Var& disp, std::size_t factor) {
  return as_plane(scale(upsample_nearest(as_map(disp), factor), static_cast<double>(factor)));
}

RefineResult refine_disparity(const Var& d0, const correlation::CorrPyramid& pyr, const std::vector<Var>& context,
                              RecurrentState state, std::size_t n_iters, const RefineParams& p) {
  if (n_iters == 0) throw ShapeError("refine_disparity: n_iters must be >= 1");
  RefineResult r;
  Var d = d0;
  for (std::size_t it = 0; it < n_iters; ++it) {
    const Var d_in = detach(d);
    const Var corr = correlation::pyramid_lookup(pyr, d_in);
    auto [next, delta] = lstm_update(state, context, corr, d_in, p);
    state = std::move(next);
    d = add(d_in, delta);
    r.low_res.push_back(d);
    const Var mask = p.mask_b(gelu(p.mask_a(state.hidden[0])));
    r.full_res.push_back(convex_upsample(d, mask, p.cfg.upsample_factor));
  }
  r.state = std::move(state);
  return r;
}

Var sequence_loss(const std::vector<Var>& preds, const Var& d0, const DisparityMap& gt, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ShapeError("sequence_loss: gamma must be in (0, 1]");
  if (gt.valid_count() == 0) throw ShapeError("sequence_loss: empty valid mask");
  Var loss = masked_smooth_l1(d0, gt.values, gt.valid, kSmoothL1Beta);
  const std::size_t n = preds.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double weight = std::pow(gamma, static_cast<double>(n - 1 - i));
    loss = add(loss, scale(masked_l1(preds[i], gt.values, gt.valid), weight));
  }
  return loss;
}

}  // namespace hart::refine
