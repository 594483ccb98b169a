#include "hart/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

namespace hart::data {

namespace {

// Intensities are kept float32-representable so samples survive a PFM round trip exactly.
double texel(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Tensor smooth_disparity(std::size_t h, std::size_t w, std::size_t max_disp, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> n_bumps(2, 4);
  Tensor field({h, w});
  const double gx = u(rng) * 2.0 - 1.0, gy = u(rng) * 2.0 - 1.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      field[y * w + x] = gx * static_cast<double>(x) / static_cast<double>(w) + gy * static_cast<double>(y) / static_cast<double>(h);
  const int bumps = n_bumps(rng);
  for (int b = 0; b < bumps; ++b) {
    const double cy = u(rng) * static_cast<double>(h), cx = u(rng) * static_cast<double>(w);
    const double sigma = (0.1 + 0.25 * u(rng)) * static_cast<double>(std::min(h, w));
    const double amp = (u(rng) < 0.5 ? -1.0 : 1.0) * (0.5 + u(rng));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        field[y * w + x] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      }
  }
  const auto [mn, mx] = std::minmax_element(field.data().begin(), field.data().end());
  const double lo_v = *mn, span = std::max(*mx - *mn, 1e-12);
  // target range: at least half of [0, max_disp]
  const double md = static_cast<double>(max_disp);
  const double width = md * (0.5 + 0.5 * u(rng));
  const double lo = (md - width) * u(rng);
  for (auto& v : field.data()) v = std::clamp(std::round(lo + (v - lo_v) / span * width), 0.0, md);
  return field;
}

StereoSample render_pair(const Tensor& disparity, Rng& rng) {
  if (disparity.rank() != 2) throw ShapeError("render_pair: disparity must be (H, W)");
  const std::size_t h = disparity.dim(0), w = disparity.dim(1);
  std::uniform_real_distribution<double> tex(0.0, 1.0);
  StereoSample s;
  s.left = Tensor({1, h, w});
  for (auto& v : s.left.data()) v = texel(tex(rng));
  s.right = Tensor({1, h, w});
  s.disp.values = disparity;
  s.disp.valid.assign(h * w, 0);

  std::vector<long> owner(w);
  std::vector<double> depth(w);
  for (std::size_t y = 0; y < h; ++y) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(depth.begin(), depth.end(), -1.0);
    for (std::size_t x = 0; x < w; ++x) {
      const double d = disparity[y * w + x];
      if (d < 0.0 || d != std::round(d)) throw ShapeError("render_pair: disparities must be non-negative integers");
      const long xr = static_cast<long>(x) - static_cast<long>(d);
      if (xr < 0) continue;
      if (d > depth[static_cast<std::size_t>(xr)]) {
        depth[static_cast<std::size_t>(xr)] = d;
        owner[static_cast<std::size_t>(xr)] = static_cast<long>(x);
      }
    }
    for (std::size_t xr = 0; xr < w; ++xr) {
      if (owner[xr] >= 0) {
        s.right[y * w + xr] = s.left[y * w + static_cast<std::size_t>(owner[xr])];
        s.disp.valid[y * w + static_cast<std::size_t>(owner[xr])] = 1;
      } else {
        s.right[y * w + xr] = texel(tex(rng));
      }
    }
  }
  double mx = 0.0;
  for (double v : disparity.data()) mx = std::max(mx, v);
  s.max_disp = static_cast<std::size_t>(mx);
  return s;
}

StereoSample gen_rds(std::size_t h, std::size_t w, std::size_t max_disp, std::uint64_t seed) {
  if (h == 0 || w == 0) throw ShapeError("gen_rds: image must be non-empty");
  if (max_disp == 0 || 4 * max_disp > w)
    throw ShapeError("gen_rds: max_disp " + std::to_string(max_disp) + " must be in [1, width/4 = " +
                     std::to_string(w / 4) + "]");
  Rng rng(seed);
  const Tensor disp = smooth_disparity(h, w, max_disp, rng);
  StereoSample s = render_pair(disp, rng);
  s.seed = seed;
  s.max_disp = max_disp;
  return s;
}

StereoSample apply_illposed_patch(const StereoSample& s, PatchKind kind, const Rect& r, std::uint64_t seed) {
  const std::size_t h = s.height(), w = s.width();
  if (r.y + r.height > h || r.x + r.width > w)
    throw std::out_of_range("apply_illposed_patch: rect exceeds the " + std::to_string(h) + "x" + std::to_string(w) +
                            " image");
  StereoSample out = s;
  if (r.area() == 0) return out;
  out.patches.push_back({kind, r});
  if (kind == PatchKind::textureless) {
    for (Tensor* view : {&out.left, &out.right}) {
      double mean = 0.0;
      for (std::size_t y = r.y; y < r.y + r.height; ++y)
        for (std::size_t x = r.x; x < r.x + r.width; ++x) mean += (*view)[y * w + x];
      mean = texel(mean / static_cast<double>(r.area()));
      for (std::size_t y = r.y; y < r.y + r.height; ++y)
        for (std::size_t x = r.x; x < r.x + r.width; ++x) (*view)[y * w + x] = mean;
    }
  } else {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double base = 0.5 + 0.3 * u(rng);
    const double slope = 1.0 + u(rng);
    const bool rising = u(rng) < 0.5;
    for (std::size_t y = r.y; y < r.y + r.height; ++y)
      for (std::size_t x = r.x; x < r.x + r.width; ++x) {
        const double t = static_cast<double>(x - r.x) / static_cast<double>(std::max<std::size_t>(1, r.width - 1));
        out.left[y * w + x] = texel(std::min(1.0, base + slope * (rising ? t : 1.0 - t)));
      }
  }
  return out;
}

std::string patch_kind_name(PatchKind kind) { return kind == PatchKind::textureless ? "textureless" : "specular"; }

PatchKind parse_patch_kind(const std::string& name) {
  if (name == "textureless") return PatchKind::textureless;
  if (name == "specular") return PatchKind::specular;
  throw std::invalid_argument("unknown patch kind '" + name + "'");
}

namespace {

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return byteswap32(v);
  return v;
}

}  // namespace

void write_pfm(const DisparityMap& d, const std::filesystem::path& path) {
  if (d.values.rank() != 2 || d.valid.size() != d.values.numel())
    throw ShapeError("write_pfm: expected an (H, W) map with a matching mask");
  const std::size_t h = d.height(), w = d.width();
  std::vector<std::uint32_t> body(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      float f = std::numeric_limits<float>::infinity();
      if (d.valid[i]) {
        const double v = d.values[i];
        if (!std::isfinite(v) || std::abs(v) > std::numeric_limits<float>::max())
          throw FormatError("write_pfm: value at (" + std::to_string(y) + ", " + std::to_string(x) +
                            ") is not a finite float32");
        f = static_cast<float>(v);
      }
      body[(h - 1 - y) * w + x] = to_little(std::bit_cast<std::uint32_t>(f));
    }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_pfm: cannot open " + path.string());
  out << "Pf\n" << w << ' ' << h << "\n-1.0\n";
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size() * 4));
  if (!out) throw FormatError("write_pfm: write failed for " + path.string());
}

DisparityMap read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_pfm: cannot open " + path.string());
  std::string magic;
  long w = 0, h = 0;
  double scale = 0.0;
  in >> magic;
  if (magic == "PF") throw FormatError("read_pfm: colour PFM (PF) is not supported, expected grayscale Pf");
  if (magic != "Pf") throw FormatError("read_pfm: bad magic '" + magic + "' in " + path.string());
  if (!(in >> w >> h >> scale) || w <= 0 || h <= 0 || scale == 0.0)
    throw FormatError("read_pfm: malformed header in " + path.string());
  in.get();  // single whitespace byte after the scale
  const bool little = scale < 0.0;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  std::vector<std::uint32_t> body(n);
  in.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(n * 4));
  if (static_cast<std::size_t>(in.gcount()) != n * 4) throw FormatError("read_pfm: truncated body in " + path.string());
  const bool swap = little != (std::endian::native == std::endian::little);
  const std::size_t H = static_cast<std::size_t>(h), W = static_cast<std::size_t>(w);
  DisparityMap d;
  d.values = Tensor({H, W});
  d.valid.assign(n, 1);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      std::uint32_t bits = body[(H - 1 - y) * W + x];
      if (swap) bits = byteswap32(bits);
      const float f = std::bit_cast<float>(bits);
      if (std::isfinite(f)) {
        d.values[y * W + x] = f;
      } else {
        d.values[y * W + x] = 0.0;
        d.valid[y * W + x] = 0;
      }
    }
  return d;
}

void save_sample(const StereoSample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t h = s.height(), w = s.width();
  write_pfm(DisparityMap::all_valid(s.left.reshaped({h, w})), dir / "left.pfm");
  write_pfm(DisparityMap::all_valid(s.right.reshaped({h, w})), dir / "right.pfm");
  write_pfm(s.disp, dir / "disp.pfm");
  nlohmann::json meta;
  meta["height"] = h;
  meta["width"] = w;
  meta["max_disp"] = s.max_disp;
  meta["seed"] = s.seed;
  meta["valid_pixels"] = s.disp.valid_count();
  meta["patches"] = nlohmann::json::array();
  for (const auto& p : s.patches)
    meta["patches"].push_back({{"kind", patch_kind_name(p.kind)},
                               {"y", p.rect.y}, {"x", p.rect.x}, {"height", p.rect.height}, {"width", p.rect.width}});
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

StereoSample load_sample(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw FormatError("load_sample: missing meta.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_sample: " + std::string(e.what()));
  }
  StereoSample s;
  const DisparityMap l = read_pfm(dir / "left.pfm"), r = read_pfm(dir / "right.pfm");
  s.disp = read_pfm(dir / "disp.pfm");
  const std::size_t h = s.disp.height(), w = s.disp.width();
  if (l.values.shape() != Shape{h, w} || r.values.shape() != Shape{h, w})
    throw FormatError("load_sample: view and disparity sizes differ in " + dir.string());
  s.left = l.values.reshaped({1, h, w});
  s.right = r.values.reshaped({1, h, w});
  s.max_disp = meta.at("max_disp").get<std::size_t>();
  s.seed = meta.at("seed").get<std::uint64_t>();
  for (const auto& p : meta.value("patches", nlohmann::json::array()))
    s.patches.push_back({parse_patch_kind(p.at("kind").get<std::string>()),
                         {p.at("y").get<std::size_t>(), p.at("x").get<std::size_t>(),
                          p.at("height").get<std::size_t>(), p.at("width").get<std::size_t>()}});
  return s;
}

}  // namespace hart::data
