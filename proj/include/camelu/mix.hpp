#pragma once

#include <cstddef>
#include <cstdint>

#include "camelu/image.hpp"

namespace camelu {

enum class MixMode : std::uint8_t { pixel, patch };

struct MixConfig {
  double alpha = 1.0;
  double beta = 1.0;
  // Open interval (lo, hi) that lambda must fall in.
  double lo = 0.0;
  double hi = 0.5;
  MixMode mode = MixMode::pixel;

  void validate() const;
};

// lambda * other + (1 - lambda) * base, per pixel. lambda in [0, 1).
Image mix_pixel(const Image& base, const Image& other, double lambda);

struct PatchRect {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  std::size_t area() const noexcept { return height * width; }
};

struct PatchMix {
  Image image;
  PatchRect rect;
  // Set when the rectangle rounds to zero area; image is then the base.
  bool empty_patch = false;
};

// Rectangle sides round(sqrt(lambda) * H) x round(sqrt(lambda) * W);
// top-left uniform over every position that keeps it inside the image.
PatchRect patch_rect(std::size_t height, std::size_t width, double lambda, std::uint64_t seed);

// Copies one axis-aligned rectangle of `other` into `base`. lambda in (0, 1).
PatchMix mix_patch(const Image& base, const Image& other, double lambda, std::uint64_t seed);

}  // namespace camelu
