#include "hart/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "hart/simd/kernels.hpp"

namespace hart {

namespace flops {
namespace {
thread_local std::uint64_t g_count = 0;
}
std::uint64_t count() { return g_count; }
void reset() { g_count = 0; }
void add(std::uint64_t n) { g_count += n; }
}  // namespace flops

namespace {

const simd::KernelTable& K() { return simd::kernels(); }

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, std::size_t r, const char* op) {
  if (a.value().rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  K().axpy(1.0, src.ptr(), dst->ptr(), src.numel());
}

// Strides for reductions along one axis: (outer, len, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

void ConvSpec::validate() const {
  if (kernel_size == 0 || kernel_size % 2 == 0)
    throw ShapeError("conv kernel_size must be odd and positive, got " + std::to_string(kernel_size));
  if (in_channels == 0 || out_channels == 0 || groups == 0 || stride == 0)
    throw ShapeError("conv channels, groups and stride must be positive");
  if (in_channels % groups != 0 || out_channels % groups != 0)
    throw ShapeError("conv groups=" + std::to_string(groups) + " must divide in=" + std::to_string(in_channels) +
                     " and out=" + std::to_string(out_channels));
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  K().axpy(1.0, b.value().ptr(), out.ptr(), out.numel());
  flops::add(out.numel());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    accumulate(input_grad(n, 0), n.grad);
    accumulate(input_grad(n, 1), n.grad);
  }, "add");
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  K().axpy(-1.0, b.value().ptr(), out.ptr(), out.numel());
  flops::add(out.numel());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    accumulate(input_grad(n, 0), n.grad);
    if (Tensor* gb = input_grad(n, 1)) K().axpy(-1.0, n.grad.ptr(), gb->ptr(), gb->numel());
  }, "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out(a.shape());
  K().mul(a.value().ptr(), b.value().ptr(), out.ptr(), out.numel());
  flops::add(out.numel());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (Tensor* ga = input_grad(n, 0)) K().mul_add(n.grad.ptr(), bv.ptr(), ga->ptr(), ga->numel());
    if (Tensor* gb = input_grad(n, 1)) K().mul_add(n.grad.ptr(), av.ptr(), gb->ptr(), gb->numel());
  }, "mul");
}

Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
  flops::add(out.numel());
  return make_result(std::move(out), {a}, [s](Node& n) {
    if (Tensor* g = input_grad(n, 0)) K().axpy(s, n.grad.ptr(), g->ptr(), g->numel());
  }, "scale");
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += s;
  flops::add(out.numel());
  return make_result(std::move(out), {a}, [](Node& n) { accumulate(input_grad(n, 0), n.grad); }, "add_scalar");
}

Var mul_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape())
    throw ShapeError("mul_const: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(c.shape()));
  Tensor out(a.shape());
  K().mul(a.value().ptr(), c.ptr(), out.ptr(), out.numel());
  flops::add(out.numel());
  return make_result(std::move(out), {a}, [c](Node& n) {
    if (Tensor* g = input_grad(n, 0)) K().mul_add(n.grad.ptr(), c.ptr(), g->ptr(), g->numel());
  }, "mul_const");
}

Var detach(const Var& a) { return Var::constant(a.value()); }

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](Node& n) {
    if (Tensor* g = input_grad(n, 0)) K().axpy(1.0, n.grad.ptr(), g->ptr(), g->numel());
  }, "reshape");
}

// ---------------------------------------------------------------- concat / slice

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1))
      throw ShapeError("concat: incompatible shapes " + shape_str(ps) + " and " + shape_str(s));
    total += ps[0];
  }
  s[0] = total;
  Tensor out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    off += p.numel();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const std::size_t len = n.inputs[i]->value.numel();
      if (Tensor* g = input_grad(n, i)) K().axpy(1.0, n.grad.ptr() + off, g->ptr(), len);
      off += len;
    }
  }, "concat");
}

Var slice(const Var& a, std::size_t begin, std::size_t count) {
  const Shape& s = a.shape();
  if (count == 0 || begin + count > s[0])
    throw ShapeError("slice [" + std::to_string(begin) + ", +" + std::to_string(count) + ") out of range for " +
                     shape_str(s));
  Shape os = s;
  os[0] = count;
  const std::size_t stride = a.numel() / s[0];
  std::vector<double> data(a.value().data().begin() + begin * stride,
                           a.value().data().begin() + (begin + count) * stride);
  Tensor out(os, std::move(data));
  const std::size_t off = begin * stride;
  return make_result(std::move(out), {a}, [off](Node& n) {
    if (Tensor* g = input_grad(n, 0)) K().axpy(1.0, n.grad.ptr(), g->ptr() + off, n.grad.numel());
  }, "slice");
}

std::vector<Var> split(const Var& a, const std::vector<std::size_t>& sizes) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != a.dim(0))
    throw ShapeError("split sizes sum to " + std::to_string(total) + " but axis 0 has " + std::to_string(a.dim(0)));
  std::vector<Var> out;
  std::size_t begin = 0;
  for (auto s : sizes) {
    out.push_back(slice(a, begin, s));
    begin += s;
  }
  return out;
}

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvGeom {
  std::size_t c, h, w, k, stride, pad, ho, wo;
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

void col2im(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t p = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const ConvSpec& spec, const Var& weight, const Var& bias) {
  spec.validate();
  require_rank(x, 3, "conv2d");
  if (x.dim(0) != spec.in_channels)
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(0)) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  if (weight.shape() != spec.weight_shape())
    throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) + ", expected " +
                     shape_str(spec.weight_shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{spec.out_channels})
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));

  const std::size_t h = x.dim(1), w = x.dim(2), k = spec.kernel_size, pad = spec.pad();
  if (h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  const ConvGeom geom{spec.in_channels, h, w, k, spec.stride, pad, (h + 2 * pad - k) / spec.stride + 1,
                      (w + 2 * pad - k) / spec.stride + 1};
  const std::size_t p = geom.ho * geom.wo;
  const std::size_t groups = spec.groups;
  const std::size_t cg = spec.in_channels / groups, og = spec.out_channels / groups;
  const std::size_t rows_g = cg * k * k;

  // A 1x1 stride-1 conv reads the input directly as its column matrix.
  const bool direct = k == 1 && spec.stride == 1 && pad == 0;
  Tensor cols;
  if (!direct) {
    cols = Tensor({spec.in_channels * k * k, p});
    im2col(x.value().ptr(), geom, cols.ptr());
  }
  const double* colp = direct ? x.value().ptr() : cols.ptr();

  Tensor out({spec.out_channels, geom.ho, geom.wo});
  const double* wp = weight.value().ptr();
  for (std::size_t g = 0; g < groups; ++g)
    K().gemm_nn(og, p, rows_g, wp + g * og * rows_g, rows_g, colp + g * rows_g * p, p, out.ptr() + g * og * p, p,
                false);
  if (has_bias) {
    for (std::size_t o = 0; o < spec.out_channels; ++o) {
      const double b = bias.value()[o];
      double* row = out.ptr() + o * p;
      for (std::size_t i = 0; i < p; ++i) row[i] += b;
    }
  }
  flops::add(static_cast<std::uint64_t>(spec.out_channels) * rows_g * p + (has_bias ? spec.out_channels * p : 0));

  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      std::move(out), std::move(inputs),
      [geom, groups, og, rows_g, p, direct, cols = std::move(cols), has_bias](Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        const Tensor& wv = n.inputs[1]->value;
        const double* colp = direct ? xv.ptr() : cols.ptr();
        const double* gout = n.grad.ptr();
        if (Tensor* gw = input_grad(n, 1))
          for (std::size_t g = 0; g < groups; ++g)
            K().gemm_nt(og, rows_g, p, gout + g * og * p, p, colp + g * rows_g * p, p, gw->ptr() + g * og * rows_g,
                        rows_g, true);
        if (has_bias)
          if (Tensor* gb = input_grad(n, 2))
            for (std::size_t o = 0; o < gb->numel(); ++o) {
              double s = 0.0;
              const double* row = gout + o * p;
              for (std::size_t i = 0; i < p; ++i) s += row[i];
              (*gb)[o] += s;
            }
        if (Tensor* gx = input_grad(n, 0)) {
          if (direct) {
            for (std::size_t g = 0; g < groups; ++g)
              K().gemm_tn(rows_g, p, og, wv.ptr() + g * og * rows_g, rows_g, gout + g * og * p, p,
                          gx->ptr() + g * rows_g * p, p, true);
          } else {
            Tensor dcols({groups * rows_g, p});
            for (std::size_t g = 0; g < groups; ++g)
              K().gemm_tn(rows_g, p, og, wv.ptr() + g * og * rows_g, rows_g, gout + g * og * p, p,
                          dcols.ptr() + g * rows_g * p, p, false);
            col2im(dcols.ptr(), geom, gx->ptr());
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------- conv3d

namespace {

struct Conv3Geom {
  std::size_t c, d, h, w, k, pad;
};

void vol2col(const double* x, const Conv3Geom& g, double* cols) {
  const std::size_t p = g.d * g.h * g.w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          double* dst = cols + row * p;
          for (std::size_t z = 0; z < g.d; ++z) {
            const long iz = static_cast<long>(z + kz) - static_cast<long>(g.pad);
            for (std::size_t y = 0; y < g.h; ++y) {
              const long iy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
              double* d = dst + (z * g.h + y) * g.w;
              if (iz < 0 || iz >= static_cast<long>(g.d) || iy < 0 || iy >= static_cast<long>(g.h)) {
                std::fill(d, d + g.w, 0.0);
                continue;
              }
              const double* src = x + ((c * g.d + iz) * g.h + iy) * g.w;
              for (std::size_t xx = 0; xx < g.w; ++xx) {
                const long ix = static_cast<long>(xx + kx) - static_cast<long>(g.pad);
                d[xx] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
              }
            }
          }
        }
}

void col2vol(const double* cols, const Conv3Geom& g, double* dx) {
  const std::size_t p = g.d * g.h * g.w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          const double* srcrow = cols + row * p;
          for (std::size_t z = 0; z < g.d; ++z) {
            const long iz = static_cast<long>(z + kz) - static_cast<long>(g.pad);
            if (iz < 0 || iz >= static_cast<long>(g.d)) continue;
            for (std::size_t y = 0; y < g.h; ++y) {
              const long iy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              const double* s = srcrow + (z * g.h + y) * g.w;
              double* d = dx + ((c * g.d + iz) * g.h + iy) * g.w;
              for (std::size_t xx = 0; xx < g.w; ++xx) {
                const long ix = static_cast<long>(xx + kx) - static_cast<long>(g.pad);
                if (ix >= 0 && ix < static_cast<long>(g.w)) d[ix] += s[xx];
              }
            }
          }
        }
}

}  // namespace

Var conv3d(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 4, "conv3d");
  const Shape& ws = weight.shape();
  if (ws.size() != 5 || ws[1] != x.dim(0) || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0)
    throw ShapeError("conv3d: weight " + shape_str(ws) + " incompatible with input " + shape_str(x.shape()));
  const std::size_t oc = ws[0], k = ws[2];
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{oc}) throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()));
  const Conv3Geom geom{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, (k - 1) / 2};
  const std::size_t p = geom.d * geom.h * geom.w;
  const std::size_t rows = geom.c * k * k * k;

  Tensor cols({rows, p});
  vol2col(x.value().ptr(), geom, cols.ptr());
  Tensor out({oc, geom.d, geom.h, geom.w});
  K().gemm_nn(oc, p, rows, weight.value().ptr(), rows, cols.ptr(), p, out.ptr(), p, false);
  if (has_bias)
    for (std::size_t o = 0; o < oc; ++o)
      for (std::size_t i = 0; i < p; ++i) out[o * p + i] += bias.value()[o];
  flops::add(static_cast<std::uint64_t>(oc) * rows * p + (has_bias ? oc * p : 0));

  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      std::move(out), std::move(inputs),
      [geom, oc, rows, p, cols = std::move(cols), has_bias](Node& n) {
        const Tensor& wv = n.inputs[1]->value;
        if (Tensor* gw = input_grad(n, 1)) K().gemm_nt(oc, rows, p, n.grad.ptr(), p, cols.ptr(), p, gw->ptr(), rows, true);
        if (has_bias)
          if (Tensor* gb = input_grad(n, 2))
            for (std::size_t o = 0; o < oc; ++o) {
              double s = 0.0;
              for (std::size_t i = 0; i < p; ++i) s += n.grad[o * p + i];
              (*gb)[o] += s;
            }
        if (Tensor* gx = input_grad(n, 0)) {
          Tensor dcols({rows, p});
          K().gemm_tn(rows, p, oc, wv.ptr(), rows, n.grad.ptr(), p, dcols.ptr(), p, false);
          col2vol(dcols.ptr(), geom, gx->ptr());
        }
      },
      "conv3d");
}

// ---------------------------------------------------------------- normalization

Var l2_normalize(const Var& x, std::size_t axis, double eps) {
  const AxisSplit s = split_axis(x.shape(), axis);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  Tensor inv_norm({s.outer * s.inner});  // 0 where the slice was zeroed
  std::vector<double> ss(s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::fill(ss.begin(), ss.end(), 0.0);
    const double* base = xv.ptr() + o * s.len * s.inner;
    for (std::size_t l = 0; l < s.len; ++l) K().mul_add(base + l * s.inner, base + l * s.inner, ss.data(), s.inner);
    double* inv = inv_norm.ptr() + o * s.inner;
    for (std::size_t i = 0; i < s.inner; ++i) {
      const double nrm = std::sqrt(ss[i]);
      inv[i] = nrm < eps ? 0.0 : 1.0 / nrm;
    }
    double* dst = out.ptr() + o * s.len * s.inner;
    for (std::size_t l = 0; l < s.len; ++l) K().mul(base + l * s.inner, inv, dst + l * s.inner, s.inner);
  }
  flops::add(2 * xv.numel());
  return make_result(
      std::move(out), {x},
      [s, inv_norm = std::move(inv_norm)](Node& n) {
        Tensor* gx = input_grad(n, 0);
        if (!gx) return;
        const Tensor& y = n.value;
        std::vector<double> dotp(s.inner);
        for (std::size_t o = 0; o < s.outer; ++o) {
          const std::size_t base = o * s.len * s.inner;
          std::fill(dotp.begin(), dotp.end(), 0.0);
          for (std::size_t l = 0; l < s.len; ++l)
            K().mul_add(y.ptr() + base + l * s.inner, n.grad.ptr() + base + l * s.inner, dotp.data(), s.inner);
          const double* inv = inv_norm.ptr() + o * s.inner;
          // dx = (g - y <y, g>) / |x|
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t off = base + l * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i)
              (*gx)[off + i] += inv[i] * (n.grad[off + i] - y[off + i] * dotp[i]);
          }
        }
      },
      "l2_normalize");
}

Var layer_norm(const Var& x, const Var& gain, const Var& offset, double eps) {
  require_rank(x, 3, "layer_norm");
  const std::size_t c = x.dim(0), p = x.dim(1) * x.dim(2);
  if (gain.shape() != Shape{c} || offset.shape() != Shape{c})
    throw ShapeError("layer_norm: gain/offset must have " + std::to_string(c) + " entries");
  const Tensor& xv = x.value();
  Tensor xhat(x.shape());
  Tensor rstd({p});
  std::vector<double> mu(p, 0.0), var(p, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < p; ++i) mu[i] += xv[ch * p + i];
  for (auto& m : mu) m /= static_cast<double>(c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < p; ++i) {
      const double d = xv[ch * p + i] - mu[i];
      var[i] += d * d;
    }
  for (std::size_t i = 0; i < p; ++i) rstd[i] = 1.0 / std::sqrt(var[i] / static_cast<double>(c) + eps);
  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double gch = gain.value()[ch], och = offset.value()[ch];
    for (std::size_t i = 0; i < p; ++i) {
      const double xh = (xv[ch * p + i] - mu[i]) * rstd[i];
      xhat[ch * p + i] = xh;
      out[ch * p + i] = gch * xh + och;
    }
  }
  flops::add(5 * xv.numel());
  return make_result(
      std::move(out), {x, gain, offset},
      [c, p, xhat = std::move(xhat), rstd = std::move(rstd)](Node& n) {
        const Tensor& g = n.grad;
        if (Tensor* gg = input_grad(n, 1))
          for (std::size_t ch = 0; ch < c; ++ch) (*gg)[ch] += simd::kernels().dot(g.ptr() + ch * p, xhat.ptr() + ch * p, p);
        if (Tensor* go = input_grad(n, 2))
          for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t i = 0; i < p; ++i) s += g[ch * p + i];
            (*go)[ch] += s;
          }
        Tensor* gx = input_grad(n, 0);
        if (!gx) return;
        const Tensor& gain = n.inputs[1]->value;
        std::vector<double> mean_d(p, 0.0), mean_dx(p, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < p; ++i) {
            const double d = g[ch * p + i] * gain[ch];
            mean_d[i] += d;
            mean_dx[i] += d * xhat[ch * p + i];
          }
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < p; ++i) {
            const double d = g[ch * p + i] * gain[ch];
            (*gx)[ch * p + i] += rstd[i] * (d - mean_d[i] * inv_c - xhat[ch * p + i] * mean_dx[i] * inv_c);
          }
      },
      "layer_norm");
}

// ---------------------------------------------------------------- activations

namespace {

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd f, Deriv d, const char* name) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  flops::add(out.numel());
  return make_result(std::move(out), {x}, [d](Node& n) {
    Tensor* gx = input_grad(n, 0);
    if (!gx) return;
    const Tensor& xv = n.inputs[0]->value;
    for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += n.grad[i] * d(xv[i], n.value[i]);
  }, name);
}

}  // namespace

Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); },
      "gelu");
}

Var elu(const Var& x) {
  return unary(
      x, [](double v) { return v >= 0.0 ? v : std::expm1(v); },
      [](double v, double y) { return v >= 0.0 ? 1.0 : y + 1.0; }, "elu");
}

Var tanh(const Var& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var dense_attention_kernel(const Var& x) {
  Tensor out(x.shape());
  K().dak(x.value().ptr(), out.ptr(), out.numel());
  flops::add(out.numel());
  return make_result(std::move(out), {x}, [](Node& n) {
    if (Tensor* gx = input_grad(n, 0))
      K().dak_backward(n.inputs[0]->value.ptr(), n.value.ptr(), n.grad.ptr(), gx->ptr(), gx->numel());
  }, "dak");
}

Var softmax(const Var& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  std::vector<double> buf(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      for (std::size_t l = 0; l < s.len; ++l) buf[l] = xv[base + l * s.inner] - mx;
      K().exp(buf.data(), buf.data(), s.len);
      double total = 0.0;
      for (double v : buf) total += v;
      const double inv = 1.0 / total;
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = buf[l] * inv;
    }
  flops::add(3 * xv.numel());
  return make_result(std::move(out), {x}, [s](Node& n) {
    Tensor* gx = input_grad(n, 0);
    if (!gx) return;
    const Tensor& y = n.value;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double d = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) d += n.grad[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = base + l * s.inner;
          (*gx)[idx] += y[idx] * (n.grad[idx] - d);
        }
      }
  }, "softmax");
}

Var activation(const Var& x, Activation kind, std::size_t softmax_axis) {
  switch (kind) {
    case Activation::gelu: return gelu(x);
    case Activation::elu: return elu(x);
    case Activation::softmax: return softmax(x, softmax_axis);
  }
  throw ShapeError("unknown activation");
}

// ---------------------------------------------------------------- matmul

namespace {

Tensor transpose2d(const Tensor& t) {
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

// C (+)= op(A) op(B) with op chosen per flag; dims are of op(A) (m x k) and op(B) (k x n).
void gemm_any(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const Tensor& a, const Tensor& b,
              double* c, bool accumulate) {
  if (!ta && !tb) {
    K().gemm_nn(m, n, k, a.ptr(), k, b.ptr(), n, c, n, accumulate);
  } else if (!ta && tb) {
    K().gemm_nt(m, n, k, a.ptr(), k, b.ptr(), k, c, n, accumulate);
  } else if (ta && !tb) {
    K().gemm_tn(m, n, k, a.ptr(), m, b.ptr(), n, c, n, accumulate);
  } else {
    const Tensor bt = transpose2d(b);
    K().gemm_tn(m, n, k, a.ptr(), m, bt.ptr(), n, c, n, accumulate);
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb ? b.dim(1) : b.dim(0);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  if (k != kb) throw ShapeError("matmul: inner dimensions " + std::to_string(k) + " vs " + std::to_string(kb));
  Tensor out({m, n});
  gemm_any(ta, tb, m, n, k, a.value(), b.value(), out.ptr(), false);
  flops::add(static_cast<std::uint64_t>(m) * n * k);
  return make_result(std::move(out), {a, b}, [ta, tb, m, n, k](Node& n_) {
    const Tensor& av = n_.inputs[0]->value;
    const Tensor& bv = n_.inputs[1]->value;
    const Tensor& g = n_.grad;  // m x n
    if (Tensor* ga = input_grad(n_, 0)) {
      if (!ta) {
        // dA (m x k) = G op(B)^T
        gemm_any(false, !tb, m, k, n, g, bv, ga->ptr(), true);
      } else {
        // dA (k x m) = op(B) G^T
        gemm_any(tb, true, k, m, n, bv, g, ga->ptr(), true);
      }
    }
    if (Tensor* gb = input_grad(n_, 1)) {
      if (!tb) {
        // dB (k x n) = op(A)^T G
        gemm_any(!ta, false, k, n, m, av, g, gb->ptr(), true);
      } else {
        // dB (n x k) = G^T op(A)
        gemm_any(true, ta, n, k, m, g, av, gb->ptr(), true);
      }
    }
  }, "matmul");
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_result(Tensor::scalar(s), {x}, [](Node& n) {
    if (Tensor* g = input_grad(n, 0))
      for (auto& v : g->data()) v += n.grad[0];
  }, "sum");
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Var weighted_sum(const Var& x, const Tensor& w) {
  if (w.shape() != x.shape()) throw ShapeError("weighted_sum: weight shape mismatch");
  const double s = K().dot(x.value().ptr(), w.ptr(), w.numel());
  return make_result(Tensor::scalar(s), {x}, [w](Node& n) {
    if (Tensor* g = input_grad(n, 0)) K().axpy(n.grad[0], w.ptr(), g->ptr(), g->numel());
  }, "weighted_sum");
}

Var sum_axis0(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("sum_axis0 needs rank >= 2");
  Shape os(s.begin() + 1, s.end());
  const std::size_t inner = shape_numel(os);
  Tensor out(os);
  for (std::size_t a = 0; a < s[0]; ++a) K().axpy(1.0, x.value().ptr() + a * inner, out.ptr(), inner);
  return make_result(std::move(out), {x}, [inner](Node& n) {
    Tensor* g = input_grad(n, 0);
    if (!g) return;
    const std::size_t rows = g->numel() / inner;
    for (std::size_t a = 0; a < rows; ++a) K().axpy(1.0, n.grad.ptr(), g->ptr() + a * inner, inner);
  }, "sum_axis0");
}

Var mean_axis0(const Var& x) { return scale(sum_axis0(x), 1.0 / static_cast<double>(x.dim(0))); }

// ---------------------------------------------------------------- resampling

Var avg_pool2(const Var& x) {
  require_rank(x, 3, "avg_pool2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2 needs even spatial dims, got " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({c, ho, wo});
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out.at(ch, y, xx) = 0.25 * (xv.at(ch, 2 * y, 2 * xx) + xv.at(ch, 2 * y, 2 * xx + 1) +
                                    xv.at(ch, 2 * y + 1, 2 * xx) + xv.at(ch, 2 * y + 1, 2 * xx + 1));
  return make_result(std::move(out), {x}, [](Node& n) {
    Tensor* g = input_grad(n, 0);
    if (!g) return;
    const Shape& s = n.value.shape();
    for (std::size_t ch = 0; ch < s[0]; ++ch)
      for (std::size_t y = 0; y < s[1]; ++y)
        for (std::size_t xx = 0; xx < s[2]; ++xx) {
          const double v = 0.25 * n.grad.at(ch, y, xx);
          g->at(ch, 2 * y, 2 * xx) += v;
          g->at(ch, 2 * y, 2 * xx + 1) += v;
          g->at(ch, 2 * y + 1, 2 * xx) += v;
          g->at(ch, 2 * y + 1, 2 * xx + 1) += v;
        }
  }, "avg_pool2");
}

Var upsample_nearest(const Var& x, std::size_t f) {
  require_rank(x, 3, "upsample_nearest");
  if (f == 0) throw ShapeError("upsample factor must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, h * f, w * f});
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h * f; ++y)
      for (std::size_t xx = 0; xx < w * f; ++xx) out.at(ch, y, xx) = xv.at(ch, y / f, xx / f);
  return make_result(std::move(out), {x}, [f](Node& n) {
    Tensor* g = input_grad(n, 0);
    if (!g) return;
    const Shape& s = n.value.shape();
    for (std::size_t ch = 0; ch < s[0]; ++ch)
      for (std::size_t y = 0; y < s[1]; ++y)
        for (std::size_t xx = 0; xx < s[2]; ++xx) g->at(ch, y / f, xx / f) += n.grad.at(ch, y, xx);
  }, "upsample_nearest");
}

// ---------------------------------------------------------------- losses

namespace {

template <typename Loss, typename Deriv>
Var masked_loss(const Var& pred, const Tensor& target, const std::vector<std::uint8_t>& mask, Loss loss, Deriv deriv,
                const char* name) {
  if (pred.shape() != target.shape()) throw ShapeError(std::string(name) + ": prediction/target shape mismatch");
  if (mask.size() != target.numel()) throw ShapeError(std::string(name) + ": mask size mismatch");
  std::size_t count = 0;
  double s = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      s += loss(pred.value()[i] - target[i]);
      ++count;
    }
  if (count == 0) throw ShapeError(std::string(name) + ": empty valid mask");
  const double inv = 1.0 / static_cast<double>(count);
  return make_result(Tensor::scalar(s * inv), {pred}, [target, mask, inv, deriv](Node& n) {
    Tensor* g = input_grad(n, 0);
    if (!g) return;
    const Tensor& pv = n.inputs[0]->value;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) (*g)[i] += n.grad[0] * inv * deriv(pv[i] - target[i]);
  }, name);
}

}  // namespace

Var masked_l1(const Var& pred, const Tensor& target, const std::vector<std::uint8_t>& mask) {
  return masked_loss(
      pred, target, mask, [](double e) { return std::abs(e); },
      [](double e) { return e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0); }, "masked_l1");
}

Var masked_smooth_l1(const Var& pred, const Tensor& target, const std::vector<std::uint8_t>& mask, double beta) {
  return masked_loss(
      pred, target, mask,
      [beta](double e) {
        const double a = std::abs(e);
        return a < beta ? 0.5 * e * e / beta : a - 0.5 * beta;
      },
      [beta](double e) {
        const double a = std::abs(e);
        if (a < beta) return e / beta;
        return e > 0.0 ? 1.0 : -1.0;
      },
      "masked_smooth_l1");
}

}  // namespace hart
