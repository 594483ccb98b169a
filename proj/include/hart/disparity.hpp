#pragma once

#include <cstdint>
#include <vector>

#include "hart/tensor.hpp"

namespace hart {

/// Disparity in pixels, (H, W), with a per-pixel validity mask.
struct DisparityMap {
  Tensor values;
  std::vector<std::uint8_t> valid;

  static DisparityMap all_valid(Tensor values) {
    DisparityMap d;
    d.valid.assign(values.numel(), 1);
    d.values = std::move(values);
    return d;
  }

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v != 0;
    return n;
  }
};

}  // namespace hart
