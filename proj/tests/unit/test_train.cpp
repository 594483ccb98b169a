#include <doctest.h>

#include <cmath>

#include "hart/gradcheck.hpp"
#include "hart/train.hpp"
#include "util.hpp"

using namespace hart;

namespace {

Config tiny_config() {
  Config c = Config::toy();
  c.train_iters = 2;
  c.eval_iters = 2;
  c.toy_train_samples = 3;
  c.toy_val_samples = 2;
  return c;
}

double sample_loss(const ModelParams& p, const data::StereoSample& s, std::size_t iters) {
  const auto out = stereo_forward(Var::constant(s.left), Var::constant(s.right), p, iters);
  return stereo_loss(out, s.disp, 0.9).value().item();
}

}  // namespace

TEST_CASE("stereo_forward shapes") {
  const Config c = tiny_config();
  Rng rng(1);
  const ModelParams p = freeze_parameters(ModelParams::init(c.model_config(), rng));
  const auto s = data::gen_rds(64, 128, 32, 5);
  const auto out = stereo_forward(Var::constant(s.left), Var::constant(s.right), p, 3);
  CHECK(out.d0.shape() == Shape{16, 32});
  CHECK(out.d0_full.shape() == Shape{64, 128});
  REQUIRE(out.low_res.size() == 3);
  REQUIRE(out.full_res.size() == 3);
  CHECK(out.low_res[0].shape() == Shape{16, 32});
  CHECK(out.full_res[2].shape() == Shape{64, 128});
  // soft-argmin over 8 bins at quarter resolution, scaled back to pixels
  for (double d : values_of(out.d0_full)) {
    CHECK(d >= 0.0);
    CHECK(d <= 28.0 + 1e-9);
  }
  CHECK_THROWS_AS(stereo_forward(Var::constant(s.left), Var::constant(Tensor({1, 64, 64})), p, 1), ShapeError);
}

TEST_CASE("model config validation") {
  ModelConfig m = Config::toy().model_config();
  CHECK_NOTHROW(m.validate());
  ModelConfig bad = m;
  bad.encoder.scales[1].factor = 16;
  bad.encoder.scales[2].factor = 32;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = m;
  bad.n_groups = 3;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = m;
  bad.max_disp = 2;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("one gradient step lowers the loss (majority of 10 seeds)") {
  const Config c = tiny_config();
  const double lr = 1e-4;
  int lower = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    ModelParams p = ModelParams::init(c.model_config(), rng);
    const auto s = data::gen_rds(64, 128, 32, 100 + seed);
    const auto out = stereo_forward(Var::constant(s.left), Var::constant(s.right), p, c.train_iters);
    const Var loss = stereo_loss(out, s.disp, c.gamma);
    backward(loss);
    p.visit([&](Var& v) {
      if (!v.has_grad()) return;
      Tensor w = v.value();
      const Tensor g = v.grad();
      for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= lr * g[i];
      v.set_value(std::move(w));
    });
    lower += sample_loss(freeze_parameters(p), s, c.train_iters) < loss.value().item();
  }
  CHECK(lower >= 6);
}

TEST_CASE("AdamW update against a hand computation") {
  const Var w = Var::leaf(Tensor({2}, {1.0, -2.0}));
  AdamW opt({w}, 0.1);
  backward(sum(mul(w, Var::constant(Tensor({2}, {3.0, -0.5})))));
  opt.step(0.01);
  // first step: m_hat = g, v_hat = g^2, so the Adam direction is sign(g) up to eps
  const double e = 1e-8;
  CHECK(w.value()[0] == doctest::Approx(1.0 - 0.01 * (0.1 * 1.0 + 3.0 / (3.0 + e))).epsilon(1e-14));
  CHECK(w.value()[1] == doctest::Approx(-2.0 - 0.01 * (0.1 * -2.0 + -0.5 / (0.5 + e))).epsilon(1e-14));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("AdamW minimizes a quadratic") {
  const Var w = Var::leaf(Tensor({3}, {4.0, -3.0, 0.5}));
  AdamW opt({w}, 0.0);
  for (int i = 0; i < 2000; ++i) {
    w.zero_grad();
    backward(sum(mul(w, w)));
    opt.step(0.01);
  }
  for (double x : w.value().data()) CHECK(std::abs(x) < 1e-2);
}

TEST_CASE("learning rate schedule") {
  CHECK(learning_rate(0, 100, 1.0, 0.1) == doctest::Approx(0.1));
  CHECK(learning_rate(9, 100, 1.0, 0.1) == doctest::Approx(1.0));
  CHECK(learning_rate(10, 100, 1.0, 0.1) == doctest::Approx(1.0));
  CHECK(learning_rate(55, 100, 1.0, 0.1) == doctest::Approx(0.5));
  CHECK(learning_rate(99, 100, 1.0, 0.1) == doctest::Approx(1.0 / 90.0));
  CHECK(learning_rate(0, 10, 2.0, 0.0) == doctest::Approx(2.0));
  double prev = 2.0;
  for (std::size_t s = 0; s < 10; ++s) {
    const double lr = learning_rate(s, 10, 2.0, 0.0);
    CHECK(lr > 0.0);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("gradient clipping rescales to the global norm") {
  const Var a = Var::leaf(Tensor({2}, {0.0, 0.0})), b = Var::leaf(Tensor({1}, {0.0}));
  backward(add(sum(mul(a, Var::constant(Tensor({2}, {3.0, 0.0})))), sum(mul(b, Var::constant(Tensor({1}, {4.0}))))));
  CHECK(clip_grad_norm({a, b}, 10.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == 3.0);
  CHECK(clip_grad_norm({a, b}, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("short training run is deterministic and reduces training loss") {
  Config c = tiny_config();
  c.train_steps = 6;
  c.log_every = 2;
  const ToySplit split = make_toy_split(c);
  CHECK(split.train.size() == 3);
  CHECK(split.val.size() == 2);
  CHECK(split.val[0].seed != split.train[0].seed);

  auto run = [&] {
    Rng rng(c.seed);
    ModelParams p = ModelParams::init(c.model_config(), rng);
    std::vector<std::size_t> logged;
    const auto h = train(p, split.train, c, [&](const StepLog& l) { logged.push_back(l.step); });
    CHECK(logged == std::vector<std::size_t>{2, 4, 6});
    CHECK(h.losses.size() == 6);
    return std::make_pair(parameter_values(p), evaluate(p, split.val, c.eval_iters));
  };
  const auto [w1, e1] = run();
  const auto [w2, e2] = run();
  REQUIRE(w1.size() == w2.size());
  for (std::size_t i = 0; i < w1.size(); ++i) CHECK(max_abs_diff(w1[i], w2[i]) == 0.0);
  CHECK(e1.epe == e2.epe);
  CHECK(e1.per_sample_epe.size() == 2);
  CHECK(e1.epe > 0.0);
}

TEST_CASE("checkpoint round trip") {
  const Config c = tiny_config();
  Rng rng(3);
  ModelParams p = ModelParams::init(c.model_config(), rng);
  const auto dir = scratch_dir("checkpoint");
  save_checkpoint(c, p, dir / "ck.json");
  auto [c2, p2] = load_checkpoint(dir / "ck.json");
  CHECK(c2.to_json() == c.to_json());
  const auto a = parameter_values(p), b = parameter_values(p2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i], b[i]) == 0.0);

  std::ofstream(dir / "broken.json") << "{\"config\": {}, \"params\": []}";
  CHECK_THROWS_AS(load_checkpoint(dir / "broken.json"), data::FormatError);
}
