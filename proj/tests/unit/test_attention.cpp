#include <doctest.h>

#include "util.hpp"

#include <cmath>

#include "hart/attention.hpp"

using namespace hart;
using namespace hart::attention;

namespace {

Var rand_map(Shape s, Rng& rng, double sd = 1.0) { return Var::constant(Tensor::randn(std::move(s), rng, sd)); }

void zero_biases(MkoiParams& p) {
  p.visit([](Var& v) {
    if (v.value().rank() == 1) v.mutable_value().fill(0.0);
  });
}

}  // namespace

TEST_CASE("project_qkv splits 3c channels in (Q, K, V) order") {
  Rng rng(1);
  const Conv2d proj = Conv2d::init(conv_spec(4, 12, 1), rng);
  const Var x = rand_map({4, 3, 3}, rng);
  const QkvTriple t = project_qkv(x, proj);
  CHECK(t.q.shape() == Shape{4, 3, 3});
  CHECK(t.k.shape() == Shape{4, 3, 3});
  CHECK(t.v.shape() == Shape{4, 3, 3});
  const Tensor full = proj(x).value();
  CHECK(t.k.value()[0] == full[36]);

  Conv2d zero = proj;
  zero.weight = Var::leaf(Tensor::randn(proj.weight.shape(), rng));
  zero.bias = Var::leaf(Tensor::zeros({12}));
  const QkvTriple z = project_qkv(Var::constant(Tensor::zeros({4, 3, 3})), zero);
  for (const Var* m : {&z.q, &z.k, &z.v})
    for (double v : m->value().data()) CHECK(v == 0.0);

  Conv2d ident = zero;
  Tensor w(proj.weight.shape());
  for (std::size_t part = 0; part < 3; ++part)
    for (std::size_t c = 0; c < 4; ++c) w[(part * 4 + c) * 4 + c] = 1.0;
  ident.weight = Var::leaf(w);
  const QkvTriple i = project_qkv(x, ident);
  CHECK(max_abs_diff(i.q.value(), x.value()) == 0.0);
  CHECK(max_abs_diff(i.k.value(), x.value()) == 0.0);
  CHECK(max_abs_diff(i.v.value(), x.value()) == 0.0);

  CHECK_THROWS_AS(project_qkv(rand_map({5, 3, 3}, rng), proj), ShapeError);
}

TEST_CASE("hadamard_attention") {
  Rng rng(2);
  const Var q = rand_map({6, 4, 5}, rng), k = rand_map({6, 4, 5}, rng);
  SUBCASE("q == k gives nonnegative squared normalized entries") {
    for (double v : values_of(hadamard_attention(q, q))) CHECK(v >= 0.0);
  }
  SUBCASE("zero keys give zero attention") {
    for (double v : values_of(hadamard_attention(q, Var::constant(Tensor::zeros({6, 4, 5}))))) CHECK(v == 0.0);
  }
  SUBCASE("matches an elementwise oracle") {
    const Tensor a = hadamard_attention(q, k).value();
    double worst = 0.0;
    for (std::size_t p = 0; p < 20; ++p) {
      double nq = 0.0, nk = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        nq += q.value()[c * 20 + p] * q.value()[c * 20 + p];
        nk += k.value()[c * 20 + p] * k.value()[c * 20 + p];
      }
      for (std::size_t c = 0; c < 6; ++c) {
        const double ref = q.value()[c * 20 + p] / std::sqrt(nq) * (k.value()[c * 20 + p] / std::sqrt(nk));
        worst = std::max(worst, std::abs(ref - a[c * 20 + p]));
      }
    }
    CHECK(worst <= 1e-12);
  }
  CHECK_THROWS_AS(hadamard_attention(q, rand_map({6, 4, 4}, rng)), ShapeError);
}

TEST_CASE("dak examples and properties") {
  auto at = [](double x) { return dak(Var::constant(Tensor({1}, {x}))).value()[0]; };
  CHECK(at(0.0) == 1.0);
  CHECK(at(1.5) == 2.5);
  CHECK(at(-std::log(2.0)) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(at(-1e-12) == doctest::Approx(1.0).epsilon(1e-11));
  CHECK(at(-700.0) > 0.0);

  Rng rng(3);
  const Tensor big = Tensor::randn({100000}, rng, 20.0);
  for (double v : values_of(dak(Var::constant(big)))) REQUIRE(v > 0.0);

  // one-sided derivatives at 0
  const double h = 1e-7;
  CHECK((at(h) - at(0.0)) / h == doctest::Approx(1.0).epsilon(1e-8));
  CHECK((at(0.0) - at(-h)) / h == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dak(a) * v equals v + elu(a) * v") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Var a = rand_map({3, 4, 4}, rng, 3.0), v = rand_map({3, 4, 4}, rng);
    CHECK(max_abs_diff(mul(dak(a), v).value(), add(v, mul(elu(a), v)).value()) <= 1e-12);
  }
}

TEST_CASE("mkoi channel plan and oracles") {
  Rng rng(5);
  MkoiParams p = MkoiParams::init(8, rng);
  CHECK(p.group_widths() == std::array<std::size_t, 3>{8, 4, 2});
  CHECK(p.expand.spec.out_channels == 14);
  CHECK(p.fuse.spec.in_channels == 14);
  for (std::size_t m = 0; m < 3; ++m) CHECK(p.branch[m].spec.kernel_size == 2 * m + 3);
  CHECK_THROWS_AS(MkoiParams::init(6, rng), ShapeError);

  const Var a = rand_map({8, 5, 6}, rng), v = rand_map({8, 5, 6}, rng);
  const Var out = mkoi(a, v, p);
  CHECK(out.shape() == Shape{8, 5, 6});

  SUBCASE("straight-line six-step reference") {
    const Var expanded = p.expand(a);                                      // (1)
    const auto groups = split(expanded, {8, 4, 2});                        // (1)
    std::vector<Var> mixed;
    for (std::size_t m = 0; m < 3; ++m) {
      const Var weights = dak(groups[m]);                                  // (2)
      const Var branch = p.branch[m](v);                                   // (3)
      mixed.push_back(mul(weights, branch));                               // (4)
    }
    const Var ref = p.fuse(concat(mixed));                                 // (5), (6)
    CHECK(max_abs_diff(ref.value(), out.value()) <= 1e-12);
  }
  SUBCASE("decoupled form gives the same module output") {
    CHECK(max_abs_diff(mkoi_decoupled(a, v, p).value(), out.value()) <= 1e-12);
  }
  SUBCASE("zero values with zero biases give zero output") {
    zero_biases(p);
    for (double x : values_of(mkoi(a, Var::constant(Tensor::zeros({8, 5, 6})), p))) CHECK(x == 0.0);
  }
  SUBCASE("softmax kernel normalizes each expanded channel over space") {
    MkoiParams s = p;
    s.kernel = Kernel::softmax;
    const Tensor w = apply_kernel(s.expand(a), Kernel::softmax).value();
    for (std::size_t c = 0; c < 14; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < 30; ++i) total += w[c * 30 + i];
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(mkoi_decoupled(a, v, s), ShapeError);
  }
}

TEST_CASE("hpsa composes hadamard_attention and mkoi") {
  Rng rng(6);
  MkoiParams p = MkoiParams::init(8, rng);
  const QkvTriple t{rand_map({8, 6, 6}, rng), rand_map({8, 6, 6}, rng), rand_map({8, 6, 6}, rng)};
  CHECK(max_abs_diff(hpsa(t, p).value(), mkoi(hadamard_attention(t.q, t.k), t.v, p).value()) == 0.0);
  zero_biases(p);
  const Var z = Var::constant(Tensor::zeros({8, 6, 6}));
  for (double x : values_of(hpsa({z, z, z}, p))) CHECK(x == 0.0);
}

TEST_CASE("vanilla_sa") {
  Rng rng(7);
  SUBCASE("single token returns v") {
    const QkvTriple t{rand_map({8, 1, 1}, rng), rand_map({8, 1, 1}, rng), rand_map({8, 1, 1}, rng)};
    CHECK(max_abs_diff(vanilla_sa(t).value(), t.v.value()) <= 1e-15);
  }
  SUBCASE("identical query tokens attend uniformly when keys are identical") {
    const Var same = Var::constant(Tensor({8, 2, 3}, 0.3));
    const Var v = rand_map({8, 2, 3}, rng);
    const Tensor out = vanilla_sa({same, same, v}).value();
    for (std::size_t c = 0; c < 8; ++c) {
      double mean = 0.0;
      for (std::size_t j = 0; j < 6; ++j) mean += v.value()[c * 6 + j] / 6.0;
      for (std::size_t j = 0; j < 6; ++j) CHECK(out[c * 6 + j] == doctest::Approx(mean).epsilon(1e-13));
    }
  }
  SUBCASE("heads must divide channels") {
    const Var x = rand_map({6, 2, 2}, rng);
    CHECK_THROWS_AS(vanilla_sa({x, x, x}, 4), ShapeError);
  }
}

TEST_CASE("sgff") {
  Rng rng(8);
  SgffParams p = SgffParams::init(4, rng);
  const Var x = rand_map({4, 5, 3}, rng);
  const Var out = sgff(x, p);
  CHECK(out.shape() == x.shape());
  const Var u = p.proj_in(x);
  const Var ref = p.proj_out(mul(gelu(p.gate(u)), p.value(u)));
  CHECK(max_abs_diff(ref.value(), out.value()) <= 1e-12);
  // the gate and value convolutions are distinct parameters
  CHECK(max_abs_diff(p.gate.weight.value(), p.value.weight.value()) > 0.0);
  p.visit([](Var& v) {
    if (v.value().rank() == 1) v.mutable_value().fill(0.0);
  });
  for (double v : values_of(sgff(Var::constant(Tensor::zeros({4, 5, 3})), p))) CHECK(v == 0.0);
}

TEST_CASE("transformer_block residual identity and shape") {
  Rng rng(9);
  BlockParams p = BlockParams::init(8, rng);
  const Var x = rand_map({8, 4, 6}, rng);
  CHECK(transformer_block(x, p).shape() == x.shape());
  CHECK(max_abs_diff(transformer_block(x, p).value(), x.value()) > 1e-3);
  p.zero_output_projections();
  CHECK(max_abs_diff(transformer_block(x, p).value(), x.value()) == 0.0);
}

TEST_CASE("stacked identity blocks pass gradient ones to the input") {
  Rng rng(10);
  for (std::size_t depth : {1u, 2u, 4u}) {
    std::vector<BlockParams> blocks;
    for (std::size_t b = 0; b < depth; ++b) {
      blocks.push_back(BlockParams::init(8, rng));
      blocks.back().zero_output_projections();
    }
    const Var x = Var::leaf(Tensor::randn({8, 4, 4}, rng));
    Var h = x;
    for (const auto& b : blocks) h = transformer_block(h, b);
    backward(sum(h));
    INFO("depth " << depth);
    const Tensor grad = x.grad();
    for (double g : grad.data()) CHECK(g == 1.0);
  }
}

TEST_CASE("encoder_forward") {
  Rng rng(11);
  SUBCASE("single full-resolution scale with one block is one transformer block") {
    EncoderConfig cfg;
    cfg.in_channels = 4;
    cfg.scales = {{4, 1}};
    cfg.blocks_per_scale = 1;
    const EncoderParams p = EncoderParams::init(cfg, rng);
    CHECK(p.downsample[0].empty());
    const Var x = rand_map({4, 6, 6}, rng);
    const auto outs = encoder_forward(x, p);
    REQUIRE(outs.size() == 1);
    CHECK(max_abs_diff(outs[0].value(), transformer_block(x, p.blocks[0][0]).value()) == 0.0);
  }
  SUBCASE("default configuration produces 1/4, 1/8, 1/16 maps") {
    EncoderConfig cfg = EncoderConfig::default_config(1);
    cfg.blocks_per_scale = 1;
    const EncoderParams p = EncoderParams::init(cfg, rng);
    CHECK(p.downsample[0].size() == 2);
    const Var x = rand_map({1, 64, 128}, rng);
    const auto outs = encoder_forward(x, p);
    REQUIRE(outs.size() == 3);
    CHECK(outs[0].shape() == Shape{64, 16, 32});
    CHECK(outs[1].shape() == Shape{128, 8, 16});
    CHECK(outs[2].shape() == Shape{192, 4, 8});
    const auto again = encoder_forward(x, p);
    for (std::size_t s = 0; s < 3; ++s) CHECK(max_abs_diff(outs[s].value(), again[s].value()) == 0.0);
    CHECK_THROWS_AS(encoder_forward(rand_map({1, 60, 128}, rng), p), ShapeError);
  }
  SUBCASE("invalid configurations are rejected") {
    EncoderConfig cfg;
    cfg.scales = {{8, 4}, {16, 4}};
    CHECK_THROWS_AS(cfg.validate(), ShapeError);
    cfg.scales = {{8, 4}, {18, 8}};
    CHECK_THROWS_AS(cfg.validate(), ShapeError);
    cfg.scales = {{8, 3}};
    CHECK_THROWS_AS(cfg.validate(), ShapeError);
  }
}
