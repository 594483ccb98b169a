#pragma once

// Run configuration as a single JSON document. Unknown keys are errors.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hart/model.hpp"

namespace hart {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Config {
  // Training hyperparameters of the full-size setup.
  std::size_t batch_size = 8;
  std::size_t crop_h = 320;
  std::size_t crop_w = 720;
  double max_lr = 2e-4;
  std::size_t train_steps = 200000;
  std::size_t train_iters = 22;
  std::size_t eval_iters = 32;
  std::size_t corr_levels = 2;
  std::size_t corr_radius = 4;
  std::size_t disp_downsample_k = 2;
  std::size_t n_hidden_levels = 3;
  std::size_t max_disp = 192;
  double weight_decay = 1e-5;
  std::uint64_t seed = 666;
  bool mixed_precision = false;  // only false is supported; everything runs in double
  std::array<double, 2> color_saturation{0.0, 1.4};

  // Model widths.
  std::vector<attention::ScaleSpec> encoder_scales{{64, 4}, {128, 8}, {192, 16}};
  std::size_t blocks_per_scale = 2;
  std::string attention_kernel = "dak";
  std::size_t n_groups = 8;
  std::size_t regularizer_hidden = 8;
  std::size_t hidden_dim = 32;
  std::size_t context_dim = 32;
  std::size_t motion_dim = 32;

  // Optimization details.
  double gamma = 0.9;
  double warmup_frac = 0.01;
  double grad_clip = 1.0;
  std::size_t log_every = 100;

  // Synthetic data.
  std::size_t toy_height = 64;
  std::size_t toy_width = 128;
  std::size_t toy_train_samples = 200;
  std::size_t toy_val_samples = 20;

  /// Throws ConfigError naming the first offending key.
  void validate() const;
  ModelConfig model_config() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys throw ConfigError.
  static Config from_json(const nlohmann::json& j);
  static Config load(const std::filesystem::path& path);

  /// Desk-scale setup for the random-dot training run (configs/toy.json).
  static Config toy();
};

}  // namespace hart
