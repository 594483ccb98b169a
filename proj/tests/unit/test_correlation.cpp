#include <doctest.h>

#include <cmath>

#include "hart/correlation.hpp"
#include "util.hpp"

using namespace hart;
using namespace hart::correlation;

namespace {

Tensor gwc_reference(const Tensor& fl, const Tensor& fr, std::size_t d_max, std::size_t groups) {
  const std::size_t c = fl.dim(0), h = fl.dim(1), w = fl.dim(2), gs = c / groups;
  Tensor out({groups, d_max, h, w});
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t d = 0; d < d_max; ++d)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          if (x < d) continue;
          double acc = 0.0;
          for (std::size_t ch = g * gs; ch < (g + 1) * gs; ++ch) acc += fl.at(ch, y, x) * fr.at(ch, y, x - d);
          out[((g * d_max + d) * h + y) * w + x] = acc / static_cast<double>(gs);
        }
  return out;
}

CorrelationVolume volume_of(Tensor t) { return CorrelationVolume{Var::constant(std::move(t)), 1}; }

}  // namespace

TEST_CASE("gwc volume matches the brute-force loop") {
  Rng rng(1);
  for (std::size_t c : {2u, 4u, 8u})
    for (std::size_t g : {1u, 2u})
      for (std::size_t d = 1; d <= 4; ++d) {
        const Tensor fl = Tensor::randn({c, 3, 5}, rng), fr = Tensor::randn({c, 3, 5}, rng);
        const auto vol = build_gwc_volume(Var::constant(fl), Var::constant(fr), d, g);
        CHECK(max_abs_diff(vol.values.value(), gwc_reference(fl, fr, d, g)) <= 1e-12);
        CHECK(vol.max_disp() == d);
      }
}

TEST_CASE("gwc volume with one channel per group is a shifted product") {
  Rng rng(2);
  const Tensor fl = Tensor::randn({8, 2, 6}, rng), fr = Tensor::randn({8, 2, 6}, rng);
  const Tensor v = build_gwc_volume(Var::constant(fl), Var::constant(fr), 3, 8).values.value();
  for (std::size_t g = 0; g < 8; ++g)
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 6; ++x) {
          const double expect = x < d ? 0.0 : fl.at(g, y, x) * fr.at(g, y, x - d);
          CHECK(v[((g * 3 + d) * 2 + y) * 6 + x] == expect);
        }
}

TEST_CASE("self-correlation of positive features") {
  Rng rng(3);
  const Tensor f = Tensor::uniform({8, 4, 10}, rng, 0.1, 1.0);
  const auto vol = build_gwc_volume(Var::constant(f), Var::constant(f), 4, 2);
  const Tensor& v = vol.values.value();
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 10; ++x) {
        double norm = 0.0;
        for (std::size_t ch = 4 * g; ch < 4 * g + 4; ++ch) norm += f.at(ch, y, x) * f.at(ch, y, x);
        CHECK(v[((g * 4 + 0) * 4 + y) * 10 + x] == doctest::Approx(norm / 4.0).epsilon(1e-14));
      }

  // Zero disparity is the argmax when every pixel's group vector has the same
  // norm (Cauchy-Schwarz); with unequal norms a brighter neighbour can win.
  Tensor unit = f;
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t p = 0; p < 40; ++p) {
      double n = 0.0;
      for (std::size_t ch = 4 * g; ch < 4 * g + 4; ++ch) n += unit[ch * 40 + p] * unit[ch * 40 + p];
      for (std::size_t ch = 4 * g; ch < 4 * g + 4; ++ch) unit[ch * 40 + p] /= std::sqrt(n);
    }
  const Tensor m = mean_axis0(build_gwc_volume(Var::constant(unit), Var::constant(unit), 4, 2).values).value();
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 10; ++x)
      for (std::size_t d = 1; d < 4 && d <= x; ++d) CHECK(m[(0 * 4 + y) * 10 + x] >= m[(d * 4 + y) * 10 + x]);
}

TEST_CASE("gwc volume errors") {
  const Var f = Var::constant(Tensor::ones({6, 2, 4}));
  CHECK_THROWS_AS(build_gwc_volume(f, f, 2, 4), ShapeError);
  CHECK_THROWS_AS(build_gwc_volume(f, f, 0, 2), ShapeError);
  CHECK_THROWS_AS(build_gwc_volume(f, f, 5, 2), ShapeError);
  CHECK_THROWS_AS(build_gwc_volume(f, Var::constant(Tensor::ones({6, 2, 5})), 2, 2), ShapeError);
}

TEST_CASE("regularizer with zeroed last layer is the identity") {
  Rng rng(4);
  const RegularizerParams p = RegularizerParams::init(2, 4, rng);
  const auto vol = volume_of(Tensor::randn({2, 5, 3, 4}, rng));
  const auto out = regularize_volume(vol, p);
  CHECK(out.values.shape() == vol.values.shape());
  CHECK(max_abs_diff(out.values.value(), vol.values.value()) == 0.0);
  RegularizerParams q = p;
  q.w3 = Var::leaf(Tensor::randn(p.w3.shape(), rng));
  CHECK(regularize_volume(vol, q).values.shape() == vol.values.shape());
  CHECK(max_abs_diff(regularize_volume(vol, q).values.value(), vol.values.value()) > 0.0);
}

TEST_CASE("soft_argmin_init") {
  SUBCASE("large spike at d = 5") {
    Tensor t({3, 8, 2, 2});
    for (std::size_t g = 0; g < 3; ++g)
      for (std::size_t p = 0; p < 4; ++p) t[(g * 8 + 5) * 4 + p] = 50.0;
    for (double v : values_of(soft_argmin_init(volume_of(t)))) CHECK(std::abs(v - 5.0) < 1e-6);
  }
  SUBCASE("uniform volume gives the middle bin") {
    for (double v : values_of(soft_argmin_init(volume_of(Tensor({2, 7, 3, 3}, 0.4))))) CHECK(v == doctest::Approx(3.0));
  }
  SUBCASE("single bin gives zero") {
    Rng rng(5);
    for (double v : values_of(soft_argmin_init(volume_of(Tensor::randn({2, 1, 3, 3}, rng))))) CHECK(v == 0.0);
  }
  SUBCASE("range and per-pixel shift invariance") {
    Rng rng(6);
    Tensor t = Tensor::randn({2, 6, 3, 4}, rng, 3.0);
    const Tensor d0 = soft_argmin_init(volume_of(t)).value();
    for (double v : d0.data()) CHECK((v >= 0.0 && v <= 5.0));
    Tensor shifted = t;
    for (std::size_t p = 0; p < 12; ++p) {
      const double s = static_cast<double>(p) - 4.5;
      for (std::size_t g = 0; g < 2; ++g)
        for (std::size_t d = 0; d < 6; ++d) shifted[(g * 6 + d) * 12 + p] += s;
    }
    CHECK(max_abs_diff(soft_argmin_init(volume_of(shifted)).value(), d0) <= 1e-13);
  }
}

TEST_CASE("pyramid construction and lookup") {
  Rng rng(7);
  const Tensor t = Tensor::randn({2, 7, 2, 3}, rng);
  const auto pyr = CorrPyramid::build(volume_of(t), 3, 2);
  REQUIRE(pyr.levels.size() == 3);
  CHECK(pyr.levels[1].dim(1) == 4);
  CHECK(pyr.levels[2].dim(1) == 2);
  CHECK(pyr.feature_width() == 3 * 5 * 2);
  // odd trailing bin is carried over
  CHECK(pyr.levels[1].value()[3 * 6] == t[6 * 6]);
  CHECK(pyr.levels[1].value()[0] == doctest::Approx(0.5 * (t[0] + t[6])));

  auto entry = [&](const Tensor& f, std::size_t l, std::size_t g, std::size_t o, std::size_t p) {
    return f[((l * 2 + g) * 5 + o) * 6 + p];
  };
  SUBCASE("integer disparity reads stored values, midpoints average neighbours") {
    const Tensor d = Tensor({2, 3}, {0.0, 1.0, 2.0, 3.0, 4.0, 6.0});
    const Tensor f = pyramid_lookup(pyr, Var::constant(d)).value();
    CHECK(f.dim(0) == 30);
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t g = 0; g < 2; ++g)
        CHECK(entry(f, 0, g, 2, p) == t[(g * 7 + static_cast<std::size_t>(d[p])) * 6 + p]);
    // beyond the volume: zeros
    CHECK(entry(f, 0, 0, 0, 0) == 0.0);
    CHECK(entry(f, 0, 1, 4, 5) == 0.0);
    const Tensor mid = pyramid_lookup(pyr, Var::constant(Tensor({2, 3}, 2.5))).value();
    for (std::size_t p = 0; p < 6; ++p)
      CHECK(entry(mid, 0, 1, 2, p) == doctest::Approx(0.5 * (t[(7 + 2) * 6 + p] + t[(7 + 3) * 6 + p])));
  }
  SUBCASE("piecewise linear within a bin") {
    const Tensor a({2, 3}, 3.1), b({2, 3}, 3.4);
    Tensor mix({2, 3});
    for (std::size_t i = 0; i < 6; ++i) mix[i] = 0.3 * a[i] + 0.7 * b[i];
    const Tensor fa = pyramid_lookup(pyr, Var::constant(a)).value();
    const Tensor fb = pyramid_lookup(pyr, Var::constant(b)).value();
    const Tensor fm = pyramid_lookup(pyr, Var::constant(mix)).value();
    // level 0 only: at level 1 3.1/2 and 3.4/2 share a bin too, level 2 likewise
    for (std::size_t i = 0; i < fm.numel(); ++i) CHECK(fm[i] == doctest::Approx(0.3 * fa[i] + 0.7 * fb[i]).epsilon(1e-12));
  }
  SUBCASE("configured width") {
    const auto big = CorrPyramid::build(volume_of(Tensor::zeros({8, 48, 1, 1})), 2, 4);
    CHECK(big.feature_width() == 144);
    CHECK(pyramid_lookup(big, Var::constant(Tensor({1, 1}, 10.0))).dim(0) == 144);
  }
}
