#include "hart/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hart/attention.hpp"
#include "hart/correlation.hpp"
#include "hart/refine.hpp"

namespace hart {

GradReport grad_check(const std::string& op_name, const LossFn& loss, const std::vector<Tensor>& inputs,
                      double tolerance, double step) {
  for (const auto& t : inputs)
    if (!t.all_finite()) throw NumericError(op_name + ": non-finite input to grad_check");

  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(Var::leaf(t));
  const Var out = loss(vars);
  if (out.numel() != 1) throw ShapeError(op_name + ": loss must be a scalar, got " + shape_str(out.shape()));
  backward(out);

  auto evaluate = [&](std::size_t which, std::size_t idx, double delta) {
    std::vector<Var> probe;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Tensor t = inputs[i];
      if (i == which) t[idx] += delta;
      probe.push_back(Var::constant(std::move(t)));
    }
    return loss(probe).value().item();
  };

  GradReport r;
  r.op_name = op_name;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = vars[i].grad();
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      const double numeric = (evaluate(i, j, step) - evaluate(i, j, -step)) / (2.0 * step);
      const double a = analytic[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
      ++r.checked;
    }
  }
  r.passed = r.max_rel_error <= tolerance;
  return r;
}

namespace {

using attention::BlockParams;
using attention::MkoiParams;
using attention::SgffParams;

// Values in k + [0.2, 0.8] so interpolation never straddles a bin edge under the FD step.
Tensor fractional_disparity(Shape shape, std::size_t max_bin, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_int_distribution<std::size_t> bin(0, max_bin);
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  for (auto& v : t.data()) v = static_cast<double>(bin(rng)) + frac(rng);
  return t;
}

void randomize(Conv2d& conv, Rng& rng, double stddev) {
  conv.visit([&](Var& v) { v = Var::leaf(Tensor::randn(v.shape(), rng, stddev)); });
}

template <typename P>
std::vector<Tensor> with_parameters(std::vector<Tensor> inputs, P& p) {
  auto params = parameter_values(p);
  inputs.insert(inputs.end(), params.begin(), params.end());
  return inputs;
}

}  // namespace

std::vector<GradReport> gradient_suite(std::uint64_t seed, double tol) {
  Rng rng(seed);
  std::vector<GradReport> out;

  {
    ConvSpec spec = conv_spec(4, 6, 3);
    spec.groups = 2;
    const Tensor x = Tensor::randn({4, 5, 5}, rng);
    const Tensor w = Tensor::randn(spec.weight_shape(), rng);
    const Tensor b = Tensor::randn({6}, rng);
    const Tensor proj = Tensor::randn({6, 5, 5}, rng);
    out.push_back(grad_check("conv2d", [&](const std::vector<Var>& v) {
      return weighted_sum(conv2d(v[0], spec, v[1], v[2]), proj);
    }, {x, w, b}, tol));
    ConvSpec strided = conv_spec(3, 4, 3, 2);
    const Tensor xs = Tensor::randn({3, 6, 6}, rng);
    const Tensor ws = Tensor::randn(strided.weight_shape(), rng);
    const Tensor ps = Tensor::randn({4, 3, 3}, rng);
    out.push_back(grad_check("conv2d_stride2", [&](const std::vector<Var>& v) {
      return weighted_sum(conv2d(v[0], strided, v[1]), ps);
    }, {xs, ws}, tol));
  }
  {
    const Tensor x = Tensor::randn({5, 3, 4}, rng);
    const Tensor g = Tensor::randn({5}, rng);
    const Tensor o = Tensor::randn({5}, rng);
    const Tensor proj = Tensor::randn({5, 3, 4}, rng);
    out.push_back(grad_check("layer_norm", [&](const std::vector<Var>& v) {
      return weighted_sum(layer_norm(v[0], v[1], v[2]), proj);
    }, {x, g, o}, tol));
  }
  {
    const Tensor q = Tensor::randn({8, 4, 4}, rng);
    const Tensor k = Tensor::randn({8, 4, 4}, rng);
    const Tensor proj = Tensor::randn({8, 4, 4}, rng);
    out.push_back(grad_check("hadamard_attention", [&](const std::vector<Var>& v) {
      return weighted_sum(attention::hadamard_attention(v[0], v[1]), proj);
    }, {q, k}, tol));
  }
  {
    const Tensor a = Tensor::randn({4, 5, 5}, rng, 2.0);
    const Tensor proj = Tensor::randn({4, 5, 5}, rng);
    out.push_back(grad_check("dak", [&](const std::vector<Var>& v) {
      return weighted_sum(attention::dak(v[0]), proj);
    }, {a}, tol));
  }
  {
    MkoiParams p = MkoiParams::init(8, rng);
    const Tensor a = Tensor::randn({8, 5, 5}, rng);
    const Tensor v0 = Tensor::randn({8, 5, 5}, rng);
    const Tensor proj = Tensor::randn({8, 5, 5}, rng);
    out.push_back(grad_check("mkoi", [&](const std::vector<Var>& v) {
      return weighted_sum(attention::mkoi(v[0], v[1], bind_parameters(p, v, 2)), proj);
    }, with_parameters({a, v0}, p), tol));
  }
  {
    SgffParams p = SgffParams::init(4, rng);
    const Tensor x = Tensor::randn({4, 5, 5}, rng);
    const Tensor proj = Tensor::randn({4, 5, 5}, rng);
    out.push_back(grad_check("sgff", [&](const std::vector<Var>& v) {
      return weighted_sum(attention::sgff(v[0], bind_parameters(p, v, 1)), proj);
    }, with_parameters({x}, p), tol));
  }
  {
    BlockParams p = BlockParams::init(8, rng);
    p.ln_gain = Var::leaf(Tensor::uniform({8}, rng, 0.5, 1.5));
    p.ln_offset = Var::leaf(Tensor::randn({8}, rng, 0.1));
    const Tensor x = Tensor::randn({8, 6, 6}, rng);
    const Tensor proj = Tensor::randn({8, 6, 6}, rng);
    out.push_back(grad_check("transformer_block", [&](const std::vector<Var>& v) {
      return weighted_sum(attention::transformer_block(v[0], bind_parameters(p, v, 1)), proj);
    }, with_parameters({x}, p), tol));
  }
  {
    correlation::RegularizerParams p = correlation::RegularizerParams::init(2, 3, rng);
    p.w3 = Var::leaf(Tensor::randn(p.w3.shape(), rng, 0.2));
    p.b3 = Var::leaf(Tensor::randn(p.b3.shape(), rng, 0.2));
    const Tensor fl = Tensor::randn({4, 3, 6}, rng);
    const Tensor fr = Tensor::randn({4, 3, 6}, rng);
    const Tensor proj = Tensor::randn({2, 4, 3, 6}, rng);
    out.push_back(grad_check("gwc_volume+regularize", [&](const std::vector<Var>& v) {
      const auto vol = correlation::build_gwc_volume(v[0], v[1], 4, 2);
      return weighted_sum(correlation::regularize_volume(vol, bind_parameters(p, v, 2)).values, proj);
    }, with_parameters({fl, fr}, p), tol));
  }
  {
    const Tensor vol = Tensor::randn({2, 5, 3, 4}, rng);
    const Tensor proj = Tensor::randn({3, 4}, rng);
    out.push_back(grad_check("soft_argmin_init", [&](const std::vector<Var>& v) {
      return weighted_sum(correlation::soft_argmin_init({v[0], 1}), proj);
    }, {vol}, tol));
  }
  {
    const Tensor vol = Tensor::randn({2, 7, 3, 4}, rng);
    const Tensor disp = fractional_disparity({3, 4}, 5, rng);
    const Tensor proj = Tensor::randn({2 * 2 * 5, 3, 4}, rng);
    out.push_back(grad_check("pyramid_lookup", [&](const std::vector<Var>& v) {
      const auto pyr = correlation::CorrPyramid::build({v[0], 1}, 2, 2);
      return weighted_sum(correlation::pyramid_lookup(pyr, v[1]), proj);
    }, {vol, disp}, tol));
  }
  {
    refine::RefineConfig cfg;
    cfg.hidden_dim = 4;
    cfg.levels = 3;
    cfg.context_channels = {3, 2, 2};
    cfg.corr_feature_width = 5;
    cfg.motion_dim = 4;
    cfg.upsample_factor = 2;
    refine::RefineParams p = refine::RefineParams::init(cfg, rng);
    randomize(p.delta_b, rng, 0.3);
    const std::size_t h = 4, w = 8;
    std::vector<Tensor> inputs;
    for (std::size_t l = 0; l < 3; ++l) {
      inputs.push_back(Tensor::randn({4, h >> l, w >> l}, rng, 0.5));
      inputs.push_back(Tensor::randn({4, h >> l, w >> l}, rng, 0.5));
    }
    for (std::size_t l = 0; l < 3; ++l) inputs.push_back(Tensor::randn({cfg.context_channels[l], h >> l, w >> l}, rng));
    inputs.push_back(Tensor::randn({5, h, w}, rng));
    inputs.push_back(Tensor::uniform({h, w}, rng, 0.0, 4.0));
    const std::size_t n_data = inputs.size();
    inputs = with_parameters(std::move(inputs), p);
    Rng proj_rng(seed + 1);
    const Tensor proj_delta = Tensor::randn({h, w}, proj_rng);
    std::vector<Tensor> proj_hidden;
    for (std::size_t l = 0; l < 3; ++l) proj_hidden.push_back(Tensor::randn({4, h >> l, w >> l}, proj_rng));
    out.push_back(grad_check("lstm_update", [&](const std::vector<Var>& v) {
      refine::RecurrentState s;
      std::vector<Var> ctx;
      for (std::size_t l = 0; l < 3; ++l) {
        s.hidden.push_back(v[2 * l]);
        s.cell.push_back(v[2 * l + 1]);
        ctx.push_back(v[6 + l]);
      }
      auto [next, delta] = refine::lstm_update(s, ctx, v[9], v[10], bind_parameters(p, v, n_data));
      Var loss = weighted_sum(delta, proj_delta);
      for (std::size_t l = 0; l < 3; ++l) loss = add(loss, weighted_sum(next.hidden[l], proj_hidden[l]));
      return loss;
    }, inputs, tol));
  }
  {
    const Tensor mask = Tensor::randn({9 * 4, 3, 3}, rng);
    const Tensor disp = Tensor::uniform({3, 3}, rng, 0.0, 5.0);
    const Tensor proj = Tensor::randn({6, 6}, rng);
    out.push_back(grad_check("convex_upsample", [&](const std::vector<Var>& v) {
      return weighted_sum(refine::convex_upsample(v[0], v[1], 2), proj);
    }, {disp, mask}, tol));
  }
  {
    const std::size_t h = 4, w = 5;
    DisparityMap gt = DisparityMap::all_valid(Tensor::uniform({h, w}, rng, 0.0, 8.0));
    gt.valid[3] = 0;
    gt.valid[7] = 0;
    // offsets bounded away from 0 and from the smooth-L1 transition at 1 px
    auto offset = [&](double lo, double hi) {
      Tensor t = gt.values;
      std::uniform_real_distribution<double> mag(lo, hi);
      std::bernoulli_distribution sign(0.5);
      for (auto& x : t.data()) x += sign(rng) ? mag(rng) : -mag(rng);
      return t;
    };
    const Tensor d0 = offset(0.1, 2.5);
    const Tensor d1 = offset(0.1, 2.0);
    const Tensor d2 = offset(0.1, 2.0);
    out.push_back(grad_check("sequence_loss", [&](const std::vector<Var>& v) {
      return refine::sequence_loss({v[1], v[2]}, v[0], gt, 0.9);
    }, {d0, d1, d2}, tol));
  }
  return out;
}

}  // namespace hart
