#include "hart/correlation.hpp"

#include <cmath>
#include <string>

#include "hart/simd/kernels.hpp"

namespace hart::correlation {

CorrelationVolume build_gwc_volume(const Var& fl, const Var& fr, std::size_t max_disp, std::size_t n_groups) {
  if (fl.shape() != fr.shape() || fl.value().rank() != 3)
    throw ShapeError("build_gwc_volume: left " + shape_str(fl.shape()) + " and right " + shape_str(fr.shape()) +
                     " must be equal (C, H, W) maps");
  const std::size_t c = fl.dim(0), h = fl.dim(1), w = fl.dim(2);
  if (n_groups == 0 || c % n_groups != 0)
    throw ShapeError("build_gwc_volume: " + std::to_string(n_groups) + " groups do not divide " + std::to_string(c) +
                     " channels");
  if (max_disp == 0 || max_disp > w)
    throw ShapeError("build_gwc_volume: max_disp " + std::to_string(max_disp) + " must be in [1, width=" +
                     std::to_string(w) + "]");
  const std::size_t gs = c / n_groups;
  const double norm = 1.0 / static_cast<double>(gs);
  const auto& kern = simd::kernels();

  Tensor out({n_groups, max_disp, h, w});
  const double* lp = fl.value().ptr();
  const double* rp = fr.value().ptr();
  for (std::size_t g = 0; g < n_groups; ++g)
    for (std::size_t d = 0; d < max_disp; ++d)
      for (std::size_t y = 0; y < h; ++y) {
        double* dst = out.ptr() + ((g * max_disp + d) * h + y) * w;
        for (std::size_t ch = g * gs; ch < (g + 1) * gs; ++ch) {
          const std::size_t row = (ch * h + y) * w;
          kern.mul_add(lp + row + d, rp + row, dst + d, w - d);
        }
        for (std::size_t x = d; x < w; ++x) dst[x] *= norm;
      }
  flops::add(static_cast<std::uint64_t>(c) * max_disp * h * w);

  Var values = make_result(
      std::move(out), {fl, fr},
      [n_groups, max_disp, gs, h, w, norm](Node& n) {
        const auto& kern = simd::kernels();
        Tensor* gl = input_grad(n, 0);
        Tensor* gr = input_grad(n, 1);
        const double* lp = n.inputs[0]->value.ptr();
        const double* rp = n.inputs[1]->value.ptr();
        std::vector<double> gscaled(w);
        for (std::size_t g = 0; g < n_groups; ++g)
          for (std::size_t d = 0; d < max_disp; ++d)
            for (std::size_t y = 0; y < h; ++y) {
              const double* src = n.grad.ptr() + ((g * max_disp + d) * h + y) * w;
              for (std::size_t x = d; x < w; ++x) gscaled[x] = src[x] * norm;
              for (std::size_t ch = g * gs; ch < (g + 1) * gs; ++ch) {
                const std::size_t row = (ch * h + y) * w;
                if (gl) kern.mul_add(gscaled.data() + d, rp + row, gl->ptr() + row + d, w - d);
                if (gr) kern.mul_add(gscaled.data() + d, lp + row + d, gr->ptr() + row, w - d);
              }
            }
      },
      "gwc_volume");
  return CorrelationVolume{std::move(values), 1};
}

RegularizerParams RegularizerParams::init(std::size_t groups, std::size_t hidden, Rng& rng) {
  RegularizerParams p;
  p.w1 = kaiming_uniform({hidden, groups, 3, 3, 3}, groups * 27, rng);
  p.b1 = Var::leaf(Tensor::zeros({hidden}));
  p.w2 = kaiming_uniform({hidden, hidden, 3, 3, 3}, hidden * 27, rng);
  p.b2 = Var::leaf(Tensor::zeros({hidden}));
  p.w3 = Var::leaf(Tensor::zeros({groups, hidden, 3, 3, 3}));
  p.b3 = Var::leaf(Tensor::zeros({groups}));
  return p;
}

void RegularizerParams::zero_last() const {
  w3.mutable_value().fill(0.0);
  b3.mutable_value().fill(0.0);
}

CorrelationVolume regularize_volume(const CorrelationVolume& vol, const RegularizerParams& p) {
  const Var& x = vol.values;
  Var h = gelu(conv3d(x, p.w1, p.b1));
  h = gelu(conv3d(h, p.w2, p.b2));
  return CorrelationVolume{add(x, conv3d(h, p.w3, p.b3)), vol.disparity_stride};
}

Var soft_argmin_init(const CorrelationVolume& vol) {
  const Var& v = vol.values;
  if (v.value().rank() != 4) throw ShapeError("soft_argmin_init: volume must be (G, D, H, W)");
  const std::size_t d = v.dim(1), h = v.dim(2), w = v.dim(3);
  const Var probs = softmax(mean_axis0(v), 0);
  Tensor index({d, h, w});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t p = 0; p < h * w; ++p) index[i * h * w + p] = static_cast<double>(i * vol.disparity_stride);
  return sum_axis0(mul_const(probs, index));
}

Var pool_disparity(const Var& volume) {
  if (volume.value().rank() != 4) throw ShapeError("pool_disparity: volume must be (G, D, H, W)");
  const std::size_t g = volume.dim(0), d = volume.dim(1), hw = volume.dim(2) * volume.dim(3);
  const std::size_t dout = (d + 1) / 2;
  Tensor out({g, dout, volume.dim(2), volume.dim(3)});
  const Tensor& v = volume.value();
  for (std::size_t gi = 0; gi < g; ++gi)
    for (std::size_t j = 0; j < dout; ++j) {
      const std::size_t a = 2 * j, b = 2 * j + 1;
      const double* pa = v.ptr() + (gi * d + a) * hw;
      double* dst = out.ptr() + (gi * dout + j) * hw;
      if (b < d) {
        const double* pb = v.ptr() + (gi * d + b) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] = 0.5 * (pa[i] + pb[i]);
      } else {
        for (std::size_t i = 0; i < hw; ++i) dst[i] = pa[i];
      }
    }
  return make_result(std::move(out), {volume}, [g, d, dout, hw](Node& n) {
    Tensor* gv = input_grad(n, 0);
    if (!gv) return;
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t j = 0; j < dout; ++j) {
        const std::size_t a = 2 * j, b = 2 * j + 1;
        const double* src = n.grad.ptr() + (gi * dout + j) * hw;
        const double wgt = b < d ? 0.5 : 1.0;
        double* da = gv->ptr() + (gi * d + a) * hw;
        for (std::size_t i = 0; i < hw; ++i) da[i] += wgt * src[i];
        if (b < d) {
          double* db = gv->ptr() + (gi * d + b) * hw;
          for (std::size_t i = 0; i < hw; ++i) db[i] += wgt * src[i];
        }
      }
  }, "pool_disparity");
}

CorrPyramid CorrPyramid::build(const CorrelationVolume& vol, std::size_t n_levels, std::size_t radius) {
  if (n_levels == 0) throw ShapeError("CorrPyramid: at least one level required");
  CorrPyramid p;
  p.radius = radius;
  p.levels.push_back(vol.values);
  for (std::size_t l = 1; l < n_levels; ++l) p.levels.push_back(pool_disparity(p.levels.back()));
  return p;
}

Var pyramid_lookup(const CorrPyramid& pyr, const Var& disp) {
  if (pyr.levels.empty()) throw ShapeError("pyramid_lookup: empty pyramid");
  const Var& l0 = pyr.levels.front();
  const std::size_t g = l0.dim(0), h = l0.dim(2), w = l0.dim(3);
  if (disp.shape() != Shape{h, w})
    throw ShapeError("pyramid_lookup: disparity " + shape_str(disp.shape()) + " vs volume " + shape_str(l0.shape()));
  const std::size_t r = pyr.radius, taps = 2 * r + 1, hw = h * w;
  const std::size_t n_levels = pyr.levels.size();
  Tensor out({n_levels * g * taps, h, w});
  const Tensor& dv = disp.value();
  for (std::size_t l = 0; l < n_levels; ++l) {
    const Tensor& vol = pyr.levels[l].value();
    const std::size_t dl = vol.dim(1);
    const double inv = 1.0 / static_cast<double>(std::size_t{1} << l);
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t t = 0; t < taps; ++t) {
        double* dst = out.ptr() + ((l * g + gi) * taps + t) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const double x = dv[p] * inv + static_cast<double>(t) - static_cast<double>(r);
          const double x0 = std::floor(x);
          const double frac = x - x0;
          const long i0 = static_cast<long>(x0);
          auto sample = [&](long i) {
            return (i < 0 || i >= static_cast<long>(dl)) ? 0.0 : vol[(gi * dl + static_cast<std::size_t>(i)) * hw + p];
          };
          dst[p] = (1.0 - frac) * sample(i0) + frac * sample(i0 + 1);
        }
      }
  }
  std::vector<Var> inputs{disp};
  inputs.insert(inputs.end(), pyr.levels.begin(), pyr.levels.end());
  return make_result(std::move(out), std::move(inputs), [g, r, taps, hw, n_levels](Node& n) {
    const Tensor& dv = n.inputs[0]->value;
    Tensor* gd = input_grad(n, 0);
    for (std::size_t l = 0; l < n_levels; ++l) {
      const Tensor& vol = n.inputs[l + 1]->value;
      Tensor* gv = input_grad(n, l + 1);
      const std::size_t dl = vol.dim(1);
      const double inv = 1.0 / static_cast<double>(std::size_t{1} << l);
      for (std::size_t gi = 0; gi < g; ++gi)
        for (std::size_t t = 0; t < taps; ++t) {
          const double* go = n.grad.ptr() + ((l * g + gi) * taps + t) * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            const double x = dv[p] * inv + static_cast<double>(t) - static_cast<double>(r);
            const double x0 = std::floor(x);
            const double frac = x - x0;
            const long i0 = static_cast<long>(x0);
            auto in_range = [&](long i) { return i >= 0 && i < static_cast<long>(dl); };
            auto idx = [&](long i) { return (gi * dl + static_cast<std::size_t>(i)) * hw + p; };
            if (gv) {
              if (in_range(i0)) (*gv)[idx(i0)] += (1.0 - frac) * go[p];
              if (in_range(i0 + 1)) (*gv)[idx(i0 + 1)] += frac * go[p];
            }
            if (gd) {
              const double v0 = in_range(i0) ? vol[idx(i0)] : 0.0;
              const double v1 = in_range(i0 + 1) ? vol[idx(i0 + 1)] : 0.0;
              (*gd)[p] += go[p] * (v1 - v0) * inv;
            }
          }
        }
    }
  }, "pyramid_lookup");
}

}  // namespace hart::correlation
