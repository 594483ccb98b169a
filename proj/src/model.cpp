#include "hart/model.hpp"

#include <string>

namespace hart {

refine::RefineConfig ModelConfig::refine_config() const {
  refine::RefineConfig r;
  r.hidden_dim = hidden_dim;
  r.levels = hidden_levels;
  r.context_channels.assign(hidden_levels, context_dim);
  r.corr_feature_width = corr_levels * (2 * corr_radius + 1) * n_groups;
  r.motion_dim = motion_dim;
  r.upsample_factor = field_factor();
  return r;
}

void ModelConfig::validate() const {
  encoder.validate();
  if (encoder.scales.size() < hidden_levels)
    throw ShapeError("model: encoder has " + std::to_string(encoder.scales.size()) + " scales, need one per hidden level (" +
                     std::to_string(hidden_levels) + ")");
  for (std::size_t l = 0; l < hidden_levels; ++l)
    if (encoder.scales[l].factor != field_factor() << l)
      throw ShapeError("model: encoder scale " + std::to_string(l) + " must have factor " +
                       std::to_string(field_factor() << l));
  if (encoder.scales[0].channels % n_groups != 0)
    throw ShapeError("model: " + std::to_string(n_groups) + " correlation groups do not divide " +
                     std::to_string(encoder.scales[0].channels) + " feature channels");
  if (volume_bins() == 0) throw ShapeError("model: max_disp smaller than the field downsampling factor");
  if (corr_levels == 0 || hidden_dim == 0 || context_dim == 0 || regularizer_hidden == 0)
    throw ShapeError("model: sizes must be positive");
  refine_config().validate();
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  p.encoder = attention::EncoderParams::init(cfg.encoder, rng);
  p.regularizer = correlation::RegularizerParams::init(cfg.n_groups, cfg.regularizer_hidden, rng);
  for (std::size_t l = 0; l < cfg.hidden_levels; ++l) {
    const std::size_t ch = cfg.encoder.scales[l].channels;
    p.context.push_back(Conv2d::init(conv_spec(ch, cfg.context_dim, 1), rng));
    p.hidden_init.push_back(Conv2d::init(conv_spec(ch, cfg.hidden_dim, 1), rng));
  }
  p.refine = refine::RefineParams::init(cfg.refine_config(), rng);
  return p;
}

StereoOutput stereo_forward(const Var& left, const Var& right, const ModelParams& p, std::size_t iters) {
  const ModelConfig& cfg = p.cfg;
  if (left.shape() != right.shape()) throw ShapeError("stereo_forward: left and right views differ in shape");
  const auto fl = attention::encoder_forward(left, p.encoder);
  const auto fr = attention::encoder_forward(right, p.encoder);

  auto volume = correlation::build_gwc_volume(fl[0], fr[0], std::min(cfg.volume_bins(), fl[0].dim(2)), cfg.n_groups);
  volume = correlation::regularize_volume(volume, p.regularizer);
  StereoOutput out;
  out.d0 = correlation::soft_argmin_init(volume);
  out.d0_full = refine::upsample_disparity(out.d0, cfg.field_factor());

  const auto pyr = correlation::CorrPyramid::build(volume, cfg.corr_levels, cfg.corr_radius);
  refine::RecurrentState state;
  std::vector<Var> context;
  for (std::size_t l = 0; l < cfg.hidden_levels; ++l) {
    context.push_back(gelu(p.context[l](fl[l])));
    const Var h = tanh(p.hidden_init[l](fl[l]));
    state.hidden.push_back(h);
    state.cell.push_back(Var::constant(Tensor::zeros(h.shape())));
  }
  auto r = refine::refine_disparity(out.d0, pyr, context, std::move(state), iters, p.refine);
  out.low_res = std::move(r.low_res);
  out.full_res = std::move(r.full_res);
  return out;
}

Var stereo_loss(const StereoOutput& out, const DisparityMap& gt, double gamma) {
  return refine::sequence_loss(out.full_res, out.d0_full, gt, gamma);
}

}  // namespace hart
