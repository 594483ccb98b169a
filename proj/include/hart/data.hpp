#pragma once

// Synthetic random-dot stereo pairs with exact ground truth, ill-posed patch
// degradation, and PFM disparity files.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "hart/disparity.hpp"

namespace hart::data {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class PatchKind { textureless, specular };

struct Rect {
  std::size_t y = 0, x = 0, height = 0, width = 0;
  std::size_t area() const { return height * width; }
};

struct Patch {
  PatchKind kind;
  Rect rect;
};

struct StereoSample {
  Tensor left, right;  // (1, H, W), values in [0, 1]
  DisparityMap disp;   // left-referenced, full resolution, integer valued
  std::uint64_t seed = 0;
  std::size_t max_disp = 0;
  std::vector<Patch> patches;

  std::size_t height() const { return left.dim(1); }
  std::size_t width() const { return left.dim(2); }
};

/// Smooth integer disparity field: a plane plus 2-4 Gaussian bumps, rescaled
/// into a random sub-range of [0, max_disp] and rounded.
Tensor smooth_disparity(std::size_t h, std::size_t w, std::size_t max_disp, Rng& rng);

/// Renders a pair for a given integer disparity field. The left view is
/// uniform random texture; each left pixel is forward-warped to x - d in the
/// right view with a z-buffer (larger disparity is nearer). Right pixels no
/// left pixel lands on get fresh texture. A left pixel is valid iff its target
/// is inside the image and it is the nearest surface landing there.
StereoSample render_pair(const Tensor& disparity, Rng& rng);

/// Deterministic in seed. Requires 1 <= max_disp <= w / 4.
StereoSample gen_rds(std::size_t h, std::size_t w, std::size_t max_disp, std::uint64_t seed);

/// textureless: the rect of each view is replaced by that view's mean over it.
/// specular: the left view's rect becomes a saturating horizontal ramp.
/// Ground truth is unchanged. Throws std::out_of_range when rect leaves the image.
StereoSample apply_illposed_patch(const StereoSample& s, PatchKind kind, const Rect& rect, std::uint64_t seed);

std::string patch_kind_name(PatchKind kind);
PatchKind parse_patch_kind(const std::string& name);

/// Grayscale PFM ("Pf"), scale -1.0 (little-endian float32), rows bottom to
/// top. Invalid pixels are written as +inf and read back as invalid. Values are
/// stored as float32, so read(write(d)) == d exactly for float32-representable d.
/// Throws FormatError for non-finite or float-overflowing valid values.
void write_pfm(const DisparityMap& d, const std::filesystem::path& path);
DisparityMap read_pfm(const std::filesystem::path& path);

/// Directory with left.pfm, right.pfm, disp.pfm and meta.json.
void save_sample(const StereoSample& s, const std::filesystem::path& dir);
StereoSample load_sample(const std::filesystem::path& dir);

}  // namespace hart::data
