#include "hart/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "hart/metrics.hpp"

namespace hart {

namespace {

using nlohmann::json;

std::size_t as_size(const json& v, const std::string& key) {
  // Literals built in code are signed; parsed text is unsigned when non-negative.
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::size_t>(v.get<std::int64_t>());
  throw ConfigError("config: '" + key + "' must be a non-negative integer");
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config: '" + key + "' must be a number");
  return v.get<double>();
}

void positive(std::size_t v, const char* key) {
  if (v == 0) throw ConfigError(std::string("config: '") + key + "' must be positive");
}

void positive(double v, const char* key) {
  if (!(v > 0.0)) throw ConfigError(std::string("config: '") + key + "' must be positive");
}

using Setter = std::function<void(Config&, const json&, const std::string&)>;

#define SIZE_KEY(name) {#name, [](Config& c, const json& v, const std::string& k) { c.name = as_size(v, k); }}
#define DOUBLE_KEY(name) {#name, [](Config& c, const json& v, const std::string& k) { c.name = as_double(v, k); }}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      SIZE_KEY(batch_size),
      SIZE_KEY(crop_h),
      SIZE_KEY(crop_w),
      DOUBLE_KEY(max_lr),
      SIZE_KEY(train_steps),
      SIZE_KEY(train_iters),
      SIZE_KEY(eval_iters),
      SIZE_KEY(corr_levels),
      SIZE_KEY(corr_radius),
      SIZE_KEY(disp_downsample_k),
      SIZE_KEY(n_hidden_levels),
      SIZE_KEY(max_disp),
      DOUBLE_KEY(weight_decay),
      {"seed", [](Config& c, const json& v, const std::string& k) { c.seed = as_size(v, k); }},
      {"mixed_precision",
       [](Config& c, const json& v, const std::string& k) {
         if (!v.is_boolean()) throw ConfigError("config: '" + k + "' must be a boolean");
         c.mixed_precision = v.get<bool>();
       }},
      {"color_saturation",
       [](Config& c, const json& v, const std::string& k) {
         if (!v.is_array() || v.size() != 2) throw ConfigError("config: '" + k + "' must be [lo, hi]");
         c.color_saturation = {as_double(v[0], k), as_double(v[1], k)};
       }},
      {"encoder_scales",
       [](Config& c, const json& v, const std::string& k) {
         if (!v.is_array()) throw ConfigError("config: '" + k + "' must be a list of [channels, factor]");
         c.encoder_scales.clear();
         for (const auto& s : v) {
           if (!s.is_array() || s.size() != 2) throw ConfigError("config: '" + k + "' entries must be [channels, factor]");
           c.encoder_scales.push_back({as_size(s[0], k), as_size(s[1], k)});
         }
       }},
      SIZE_KEY(blocks_per_scale),
      {"attention_kernel",
       [](Config& c, const json& v, const std::string& k) {
         if (!v.is_string()) throw ConfigError("config: '" + k + "' must be a string");
         c.attention_kernel = v.get<std::string>();
       }},
      SIZE_KEY(n_groups),
      SIZE_KEY(regularizer_hidden),
      SIZE_KEY(hidden_dim),
      SIZE_KEY(context_dim),
      SIZE_KEY(motion_dim),
      DOUBLE_KEY(gamma),
      DOUBLE_KEY(warmup_frac),
      DOUBLE_KEY(grad_clip),
      SIZE_KEY(log_every),
      SIZE_KEY(toy_height),
      SIZE_KEY(toy_width),
      SIZE_KEY(toy_train_samples),
      SIZE_KEY(toy_val_samples),
  };
  return table;
}

#undef SIZE_KEY
#undef DOUBLE_KEY

}  // namespace

void Config::validate() const {
  positive(batch_size, "batch_size");
  positive(crop_h, "crop_h");
  positive(crop_w, "crop_w");
  positive(max_lr, "max_lr");
  positive(train_steps, "train_steps");
  positive(train_iters, "train_iters");
  positive(eval_iters, "eval_iters");
  positive(corr_levels, "corr_levels");
  positive(n_hidden_levels, "n_hidden_levels");
  positive(max_disp, "max_disp");
  positive(blocks_per_scale, "blocks_per_scale");
  positive(n_groups, "n_groups");
  positive(regularizer_hidden, "regularizer_hidden");
  positive(hidden_dim, "hidden_dim");
  positive(context_dim, "context_dim");
  positive(motion_dim, "motion_dim");
  positive(grad_clip, "grad_clip");
  positive(log_every, "log_every");
  positive(toy_height, "toy_height");
  positive(toy_width, "toy_width");
  positive(toy_train_samples, "toy_train_samples");
  positive(toy_val_samples, "toy_val_samples");
  if (weight_decay < 0.0) throw ConfigError("config: 'weight_decay' must be non-negative");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("config: 'gamma' must lie in (0, 1]");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("config: 'warmup_frac' must lie in [0, 1)");
  if (mixed_precision) throw ConfigError("config: 'mixed_precision' is not supported (all arithmetic is double)");
  if (color_saturation[0] < 0.0 || color_saturation[1] < color_saturation[0])
    throw ConfigError("config: 'color_saturation' must be 0 <= lo <= hi");
  try {
    metrics::parse_kernel(attention_kernel);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: 'attention_kernel': ") + e.what());
  }
  const ModelConfig m = model_config();
  try {
    m.validate();
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  const std::size_t factor = encoder_scales.back().factor;
  if (crop_h % factor != 0 || crop_w % factor != 0)
    throw ConfigError("config: crop must be divisible by the coarsest encoder factor " + std::to_string(factor));
}

ModelConfig Config::model_config() const {
  ModelConfig m;
  m.encoder.in_channels = 1;
  m.encoder.scales = encoder_scales;
  m.encoder.blocks_per_scale = blocks_per_scale;
  m.encoder.kernel = metrics::parse_kernel(attention_kernel);
  m.downsample_k = disp_downsample_k;
  m.max_disp = max_disp;
  m.n_groups = n_groups;
  m.regularizer_hidden = regularizer_hidden;
  m.corr_levels = corr_levels;
  m.corr_radius = corr_radius;
  m.hidden_levels = n_hidden_levels;
  m.hidden_dim = hidden_dim;
  m.context_dim = context_dim;
  m.motion_dim = motion_dim;
  return m;
}

nlohmann::json Config::to_json() const {
  json scales = json::array();
  for (const auto& s : encoder_scales) scales.push_back({s.channels, s.factor});
  return {
      {"batch_size", batch_size},
      {"crop_h", crop_h},
      {"crop_w", crop_w},
      {"max_lr", max_lr},
      {"train_steps", train_steps},
      {"train_iters", train_iters},
      {"eval_iters", eval_iters},
      {"corr_levels", corr_levels},
      {"corr_radius", corr_radius},
      {"disp_downsample_k", disp_downsample_k},
      {"n_hidden_levels", n_hidden_levels},
      {"max_disp", max_disp},
      {"weight_decay", weight_decay},
      {"seed", seed},
      {"mixed_precision", mixed_precision},
      {"color_saturation", {color_saturation[0], color_saturation[1]}},
      {"encoder_scales", scales},
      {"blocks_per_scale", blocks_per_scale},
      {"attention_kernel", attention_kernel},
      {"n_groups", n_groups},
      {"regularizer_hidden", regularizer_hidden},
      {"hidden_dim", hidden_dim},
      {"context_dim", context_dim},
      {"motion_dim", motion_dim},
      {"gamma", gamma},
      {"warmup_frac", warmup_frac},
      {"grad_clip", grad_clip},
      {"log_every", log_every},
      {"toy_height", toy_height},
      {"toy_width", toy_width},
      {"toy_train_samples", toy_train_samples},
      {"toy_val_samples", toy_val_samples},
  };
}

Config Config::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  Config c;
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(c, value, key);
  }
  c.validate();
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

Config Config::toy() {
  Config c;
  c.batch_size = 1;
  c.crop_h = 64;
  c.crop_w = 128;
  c.max_lr = 1e-3;
  c.train_steps = 2000;
  c.train_iters = 6;
  c.eval_iters = 6;
  c.max_disp = 32;
  c.encoder_scales = {{16, 4}, {24, 8}, {32, 16}};
  c.blocks_per_scale = 1;
  c.n_groups = 4;
  c.hidden_dim = 16;
  c.context_dim = 16;
  c.motion_dim = 16;
  c.warmup_frac = 0.05;
  return c;
}

}  // namespace hart
