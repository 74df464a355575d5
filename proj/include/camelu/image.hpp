#pragma once

#include <cstddef>
#include <vector>

#include "camelu/tensor.hpp"

namespace camelu {

// H x W x C raster, row-major, values in [0, 1]. Channels is 1 or 3.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0);

  std::size_t size() const noexcept { return pixels.size(); }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  bool same_dims(const Image& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }

  // Checks the pixel count and the [0, 1] range; contract error otherwise.
  void validate() const;
  void clamp();

  friend bool operator==(const Image&, const Image&) = default;
};

// ITU-R 601 luma: 0.299 R + 0.587 G + 0.114 B. Single-channel input is
// returned as is.
Image to_luma(const Image& img);

// Rank-3 (H, W, C) tensor view used for CMLT storage.
Tensor image_to_tensor(const Image& img);
Image image_from_tensor(const Tensor& t);

}  // namespace camelu
