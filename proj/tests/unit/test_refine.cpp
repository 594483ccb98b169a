#include <doctest.h>

#include <cmath>

#include "hart/refine.hpp"
#include "util.hpp"

using namespace hart;
using namespace hart::refine;

namespace {

RefineConfig small_config() {
  RefineConfig cfg;
  cfg.hidden_dim = 4;
  cfg.levels = 3;
  cfg.context_channels = {3, 3, 3};
  cfg.corr_feature_width = 2 * 3 * 2;  // 2 levels, radius 1, 2 groups
  cfg.motion_dim = 6;
  cfg.upsample_factor = 4;
  return cfg;
}

struct Fixture {
  Rng rng{42};
  RefineConfig cfg = small_config();
  RefineParams params = RefineParams::init(cfg, rng);
  std::size_t h = 4, w = 8;
  RecurrentState state;
  std::vector<Var> context;
  correlation::CorrPyramid pyr;
  Var d0;

  Fixture() {
    for (std::size_t l = 0; l < 3; ++l) {
      state.hidden.push_back(Var::constant(Tensor::randn({4, h >> l, w >> l}, rng, 0.5)));
      state.cell.push_back(Var::constant(Tensor::randn({4, h >> l, w >> l}, rng, 0.5)));
      context.push_back(Var::constant(Tensor::randn({3, h >> l, w >> l}, rng)));
    }
    pyr = correlation::CorrPyramid::build({Var::constant(Tensor::randn({2, 6, h, w}, rng)), 1}, 2, 1);
    d0 = Var::constant(Tensor::uniform({h, w}, rng, 0.0, 5.0));
  }
};

}  // namespace

TEST_CASE("lstm_update with zero gate weights halves the cell") {
  Fixture f;
  for (auto& g : f.params.gates) g.zero();
  const Var corr = correlation::pyramid_lookup(f.pyr, f.d0);
  auto [next, delta] = lstm_update(f.state, f.context, corr, f.d0, f.params);
  for (std::size_t l = 0; l < 3; ++l) {
    const Tensor& c = f.state.cell[l].value();
    for (std::size_t i = 0; i < c.numel(); ++i) {
      CHECK(next.cell[l].value()[i] == doctest::Approx(0.5 * c[i]).epsilon(1e-15));
      CHECK(next.hidden[l].value()[i] == doctest::Approx(0.5 * std::tanh(0.5 * c[i])).epsilon(1e-15));
    }
  }
  CHECK(delta.shape() == Shape{f.h, f.w});
}

TEST_CASE("zero delta head leaves the disparity unchanged") {
  Fixture f;
  f.params.zero_delta_head();
  const Var corr = correlation::pyramid_lookup(f.pyr, f.d0);
  for (double v : values_of(lstm_update(f.state, f.context, corr, f.d0, f.params).second)) CHECK(v == 0.0);
  const auto r = refine_disparity(f.d0, f.pyr, f.context, f.state, 3, f.params);
  REQUIRE(r.low_res.size() == 3);
  for (const auto& d : r.low_res) CHECK(max_abs_diff(d.value(), f.d0.value()) == 0.0);
}

TEST_CASE("refine_disparity iteration count, shapes and determinism") {
  Fixture f;
  const auto one = refine_disparity(f.d0, f.pyr, f.context, f.state, 1, f.params);
  CHECK(one.low_res.size() == 1);
  CHECK(one.full_res.size() == 1);
  CHECK(one.full_res[0].shape() == Shape{f.h * 4, f.w * 4});
  const Var corr = correlation::pyramid_lookup(f.pyr, f.d0);
  const Var delta = lstm_update(f.state, f.context, corr, f.d0, f.params).second;
  CHECK(max_abs_diff(one.low_res[0].value(), add(f.d0, delta).value()) == 0.0);

  const auto a = refine_disparity(f.d0, f.pyr, f.context, f.state, 4, f.params);
  const auto b = refine_disparity(f.d0, f.pyr, f.context, f.state, 4, f.params);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(max_abs_diff(a.low_res[i].value(), b.low_res[i].value()) == 0.0);
    CHECK(max_abs_diff(a.full_res[i].value(), b.full_res[i].value()) == 0.0);
  }
  CHECK_THROWS_AS(refine_disparity(f.d0, f.pyr, f.context, f.state, 0, f.params), ShapeError);
}

TEST_CASE("lstm_update validates shapes") {
  Fixture f;
  const Var corr = correlation::pyramid_lookup(f.pyr, f.d0);
  CHECK_THROWS_AS(lstm_update(f.state, f.context, corr, Var::constant(Tensor::zeros({f.h, f.w + 1})), f.params),
                  ShapeError);
  RecurrentState short_state = f.state;
  short_state.cell.pop_back();
  CHECK_THROWS_AS(lstm_update(short_state, f.context, corr, f.d0, f.params), ShapeError);
}

TEST_CASE("convex_upsample") {
  Rng rng(3);
  SUBCASE("a constant field upsamples to the scaled constant away from the border") {
    const Var d = Var::constant(Tensor({5, 6}, 2.0));
    const Tensor up = convex_upsample(d, Var::constant(Tensor::randn({9 * 16, 5, 6}, rng)), 4).value();
    CHECK(up.shape() == Shape{20, 24});
    for (std::size_t y = 4; y < 16; ++y)
      for (std::size_t x = 4; x < 20; ++x) CHECK(up[y * 24 + x] == doctest::Approx(8.0).epsilon(1e-14));
  }
  SUBCASE("a mask dominated by the centre tap reproduces nearest upsampling") {
    const Var d = Var::constant(Tensor::uniform({3, 4}, rng, 0.0, 9.0));
    Tensor m({9 * 4, 3, 4}, -60.0);
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t p = 0; p < 12; ++p) m[(4 * 4 + s) * 12 + p] = 60.0;
    const Tensor up = convex_upsample(d, Var::constant(m), 2).value();
    CHECK(max_abs_diff(up, upsample_disparity(d, 2).value()) < 1e-12);
  }
  CHECK_THROWS_AS(convex_upsample(Var::constant(Tensor::zeros({2, 2})), Var::constant(Tensor::zeros({9, 2, 2})), 2),
                  ShapeError);
}

TEST_CASE("sequence_loss examples") {
  const Tensor gt_values({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  const DisparityMap gt = DisparityMap::all_valid(gt_values);
  const Var exact = Var::constant(gt_values);
  CHECK(sequence_loss({exact, exact}, exact, gt, 0.9).value().item() == 0.0);

  Tensor off = gt_values;
  for (auto& v : off.data()) v += 1.0;
  const Var one = Var::constant(off);
  CHECK(sequence_loss({one, one}, one, gt, 0.9).value().item() == doctest::Approx(2.4).epsilon(1e-15));

  SUBCASE("later iterates weigh more") {
    const Var l_first = sequence_loss({one, exact}, exact, gt, 0.9);
    const Var l_last = sequence_loss({exact, one}, exact, gt, 0.9);
    CHECK(l_first.value().item() == doctest::Approx(0.9));
    CHECK(l_last.value().item() == doctest::Approx(1.0));
  }
  SUBCASE("invalid pixels are ignored") {
    DisparityMap masked = gt;
    masked.valid = {1, 1, 1, 1, 1, 0};
    Tensor bad = gt_values;
    bad[5] = 1000.0;
    const Var b = Var::constant(bad);
    CHECK(sequence_loss({b}, b, masked, 0.9).value().item() == 0.0);
    masked.valid.assign(6, 0);
    CHECK_THROWS_AS(sequence_loss({b}, b, masked, 0.9), ShapeError);
  }
  CHECK_THROWS_AS(sequence_loss({exact}, exact, gt, 0.0), ShapeError);
  CHECK_THROWS_AS(sequence_loss({exact}, exact, gt, 1.5), ShapeError);
}

TEST_CASE("sequence_loss is non-negative and zero only at the target") {
  Rng rng(8);
  const DisparityMap gt = DisparityMap::all_valid(Tensor::uniform({3, 3}, rng, 0.0, 4.0));
  for (int t = 0; t < 20; ++t) {
    std::vector<Var> preds;
    for (int i = 0; i < 3; ++i) preds.push_back(Var::constant(Tensor::randn({3, 3}, rng)));
    CHECK(sequence_loss(preds, Var::constant(gt.values), gt, 0.9).value().item() > 0.0);
  }
}
