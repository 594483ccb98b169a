#include <doctest.h>

#include <fstream>

#include "hart/config.hpp"
#include "util.hpp"

using namespace hart;
using nlohmann::json;

TEST_CASE("config defaults are the full-size hyperparameters") {
  const Config c;
  CHECK(c.batch_size == 8);
  CHECK(c.crop_h == 320);
  CHECK(c.crop_w == 720);
  CHECK(c.max_lr == 2e-4);
  CHECK(c.train_steps == 200000);
  CHECK(c.train_iters == 22);
  CHECK(c.eval_iters == 32);
  CHECK(c.corr_levels == 2);
  CHECK(c.corr_radius == 4);
  CHECK(c.disp_downsample_k == 2);
  CHECK(c.n_hidden_levels == 3);
  CHECK(c.max_disp == 192);
  CHECK(c.weight_decay == 1e-5);
  CHECK(c.seed == 666);
  CHECK(c.color_saturation == std::array<double, 2>{0.0, 1.4});
  CHECK_NOTHROW(c.validate());
  CHECK(c.model_config().refine_config().corr_feature_width == 144);
}

TEST_CASE("unknown keys are rejected by name") {
  try {
    Config::from_json({{"max_lr", 1e-3}, {"max_lrr", 1e-3}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("max_lrr") != std::string::npos);
  }
  CHECK_THROWS_AS(Config::from_json(json::array()), ConfigError);
}

TEST_CASE("invalid values are rejected") {
  CHECK_THROWS_AS(Config::from_json({{"batch_size", 0}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"batch_size", -1}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"batch_size", 2.5}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"max_lr", "fast"}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"max_lr", 0.0}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"gamma", 1.5}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"mixed_precision", true}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"mixed_precision", 1}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"attention_kernel", "relu"}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"encoder_scales", {{64, 4}, {128, 4}}}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"n_groups", 7}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"crop_w", 100}}), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"color_saturation", {1.4, 0.0}}}), ConfigError);
}

TEST_CASE("eval_iters may differ from train_iters in either direction") {
  CHECK_NOTHROW(Config::from_json({{"train_iters", 6}, {"eval_iters", 32}}));
  CHECK_NOTHROW(Config::from_json({{"train_iters", 6}, {"eval_iters", 6}}));
}

TEST_CASE("json round trip") {
  Config c = Config::toy();
  c.seed = 12345;
  c.attention_kernel = "softmax";
  const Config back = Config::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.encoder_scales.size() == 3);
  CHECK(back.encoder_scales[1].channels == 24);
}

TEST_CASE("shipped toy config matches the built-in preset") {
  const Config file = Config::load(std::filesystem::path(HART_SOURCE_DIR) / "configs" / "toy.json");
  CHECK(file.to_json() == Config::toy().to_json());
}

TEST_CASE("load reports unreadable and malformed files") {
  const auto dir = scratch_dir("config");
  CHECK_THROWS_AS(Config::load(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{ \"seed\": ";
  CHECK_THROWS_AS(Config::load(dir / "bad.json"), ConfigError);
}
