#include "hart/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "hart/metrics.hpp"

namespace hart {

AdamW::AdamW(std::vector<Var> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const Tensor& g = params_[i].node()->grad;
    Tensor& w = params_[i].mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < w.numel(); ++j) {
      m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
      w[j] -= lr * (wd_ * w[j] + (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_));
    }
  }
}

double learning_rate(std::size_t step, std::size_t total_steps, double max_lr, double warmup_frac) {
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) return max_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps <= warmup) return max_lr;
  return max_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

double clip_grad_norm(const std::vector<Var>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.node()->grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      if (p.has_grad())
        for (double& g : p.node()->grad.data()) g *= s;
  }
  return norm;
}

namespace {

struct Crop {
  Var left, right;
  DisparityMap gt;
};

// Pixels whose match leaves the crop become invalid.
Crop random_crop(const data::StereoSample& s, std::size_t ch, std::size_t cw, Rng& rng) {
  const std::size_t H = s.height(), W = s.width();
  if (ch > H || cw > W)
    throw ConfigError("train: crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than sample " +
                      std::to_string(H) + "x" + std::to_string(W));
  const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, H - ch)(rng);
  const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, W - cw)(rng);
  Tensor l({1, ch, cw}), r({1, ch, cw});
  DisparityMap gt;
  gt.values = Tensor({ch, cw});
  gt.valid.assign(ch * cw, 0);
  for (std::size_t y = 0; y < ch; ++y)
    for (std::size_t x = 0; x < cw; ++x) {
      const std::size_t sy = y0 + y, sx = x0 + x;
      l.at(0, y, x) = s.left.at(0, sy, sx);
      r.at(0, y, x) = s.right.at(0, sy, sx);
      const double d = s.disp.values[sy * W + sx];
      gt.values[y * cw + x] = d;
      gt.valid[y * cw + x] = s.disp.valid[sy * W + sx] && static_cast<double>(x) - d >= 0.0;
    }
  return {Var::constant(std::move(l)), Var::constant(std::move(r)), std::move(gt)};
}

}  // namespace

TrainHistory train(ModelParams& params, const std::vector<data::StereoSample>& samples, const Config& cfg,
                   const std::function<void(const StepLog&)>& on_log) {
  if (samples.empty()) throw ConfigError("train: no training samples");
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Var> ps = parameters(params);
  AdamW opt(ps, cfg.weight_decay);
  Rng rng(cfg.seed ^ 0x7452a1bULL);
  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  TrainHistory hist;
  for (std::size_t step = 0; step < cfg.train_steps; ++step) {
    for (const auto& p : ps) p.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto crop = random_crop(samples[order[cursor++]], cfg.crop_h, cfg.crop_w, rng);
      if (crop.gt.valid_count() == 0) continue;
      const auto out = stereo_forward(crop.left, crop.right, params, cfg.train_iters);
      const Var loss = stereo_loss(out, crop.gt, cfg.gamma);
      backward(loss, Tensor::scalar(1.0 / static_cast<double>(cfg.batch_size)));
      batch_loss += loss.value().item() / static_cast<double>(cfg.batch_size);
    }
    const double norm = clip_grad_norm(ps, cfg.grad_clip);
    const double lr = learning_rate(step, cfg.train_steps, cfg.max_lr, cfg.warmup_frac);
    opt.step(lr);
    hist.losses.push_back(batch_loss);
    if (on_log && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.train_steps)) on_log({step + 1, batch_loss, lr, norm});
  }
  for (const auto& p : ps) p.zero_grad();
  hist.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return hist;
}

EvalReport evaluate(const ModelParams& params, const std::vector<data::StereoSample>& samples, std::size_t iters) {
  if (samples.empty()) throw ConfigError("evaluate: no samples");
  const ModelParams frozen = freeze_parameters(params);
  EvalReport rep;
  for (const auto& s : samples) {
    const auto out = stereo_forward(Var::constant(s.left), Var::constant(s.right), frozen, iters);
    const Tensor& pred = out.full_res.back().value();
    const double e = metrics::epe(pred, s.disp);
    rep.per_sample_epe.push_back(e);
    rep.epe += e;
    rep.d1 += metrics::d1_rate(pred, s.disp);
  }
  rep.epe /= static_cast<double>(samples.size());
  rep.d1 /= static_cast<double>(samples.size());
  return rep;
}

ToySplit make_toy_split(const Config& cfg) {
  ToySplit split;
  const std::uint64_t base = cfg.seed * 1000003ULL;
  for (std::size_t i = 0; i < cfg.toy_train_samples; ++i)
    split.train.push_back(data::gen_rds(cfg.toy_height, cfg.toy_width, cfg.max_disp, base + i));
  // Validation seeds start past every training seed.
  for (std::size_t i = 0; i < cfg.toy_val_samples; ++i)
    split.val.push_back(data::gen_rds(cfg.toy_height, cfg.toy_width, cfg.max_disp, base + cfg.toy_train_samples + i));
  return split;
}

void save_checkpoint(const Config& cfg, ModelParams& params, const std::filesystem::path& path) {
  nlohmann::json tensors = nlohmann::json::array();
  params.visit([&](Var& v) {
    tensors.push_back({{"shape", v.shape()}, {"values", std::vector<double>(v.value().data().begin(), v.value().data().end())}});
  });
  const nlohmann::json j = {{"config", cfg.to_json()}, {"params", tensors}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path.string());
  out << j.dump() << '\n';
}

std::pair<Config, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw data::FormatError("load_checkpoint: " + std::string(e.what()));
  }
  Config cfg = Config::from_json(j.at("config"));
  Rng rng(cfg.seed);
  ModelParams params = ModelParams::init(cfg.model_config(), rng);
  const auto& tensors = j.at("params");
  std::size_t i = 0;
  params.visit([&](Var& v) {
    if (i >= tensors.size()) throw data::FormatError("load_checkpoint: too few tensors");
    const auto shape = tensors[i].at("shape").get<Shape>();
    auto values = tensors[i].at("values").get<std::vector<double>>();
    if (shape != v.shape() || values.size() != v.numel())
      throw data::FormatError("load_checkpoint: tensor " + std::to_string(i) + " has shape " + shape_str(shape) +
                              ", model expects " + shape_str(v.shape()));
    v.set_value(Tensor(shape, std::move(values)));
    ++i;
  });
  if (i != tensors.size()) throw data::FormatError("load_checkpoint: too many tensors");
  return {std::move(cfg), std::move(params)};
}

}  // namespace hart
