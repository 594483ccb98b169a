#pragma once

// Training loop, optimizer, evaluation and checkpoints for the stereo model.

#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "hart/config.hpp"
#include "hart/data.hpp"
#include "hart/model.hpp"

namespace hart {

/// Decoupled weight decay Adam. Moments are kept per parameter in visit order.
class AdamW {
 public:
  AdamW(std::vector<Var> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Applies one update from the parameters' accumulated gradients.
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  double wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

/// Linear warmup to max_lr over warmup_frac of the run, then linear decay to zero.
double learning_rate(std::size_t step, std::size_t total_steps, double max_lr, double warmup_frac);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns the norm before scaling.
double clip_grad_norm(const std::vector<Var>& params, double max_norm);

struct StepLog {
  std::size_t step;
  double loss;
  double lr;
  double grad_norm;
};

struct TrainHistory {
  std::vector<double> losses;  // mean batch loss per step
  double seconds = 0.0;
};

/// Trains params in place on samples for cfg.train_steps steps of cfg.batch_size
/// random crops each. on_log fires every cfg.log_every steps and on the last step.
TrainHistory train(ModelParams& params, const std::vector<data::StereoSample>& samples, const Config& cfg,
                   const std::function<void(const StepLog&)>& on_log = {});

struct EvalReport {
  double epe = 0.0;  // mean over samples of per-sample EPE
  double d1 = 0.0;
  std::vector<double> per_sample_epe;
};

/// Full-resolution final prediction against ground truth, on valid pixels.
EvalReport evaluate(const ModelParams& params, const std::vector<data::StereoSample>& samples, std::size_t iters);

struct ToySplit {
  std::vector<data::StereoSample> train, val;
};

/// Random-dot samples at toy_height x toy_width with max_disp, seeded from cfg.seed.
/// Validation samples use seeds disjoint from the training ones.
ToySplit make_toy_split(const Config& cfg);

/// JSON with the config and every parameter tensor in visit order.
void save_checkpoint(const Config& cfg, ModelParams& params, const std::filesystem::path& path);
std::pair<Config, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace hart
