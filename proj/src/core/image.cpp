#include "camelu/image.hpp"

#include <algorithm>
#include <cmath>

#include "camelu/error.hpp"

namespace camelu {

Image::Image(std::size_t h, std::size_t w, std::size_t c, double fill)
    : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

void Image::validate() const {
  require(height > 0 && width > 0, ErrorKind::contract, "image must have positive height and width");
  require(channels == 1 || channels == 3, ErrorKind::contract,
          "image must have 1 or 3 channels, got " + std::to_string(channels));
  require(pixels.size() == height * width * channels, ErrorKind::contract, "image pixel count does not match H*W*C");
  for (double v : pixels) {
    require(v >= 0.0 && v <= 1.0, ErrorKind::contract, "image pixel outside [0, 1]");
  }
}

void Image::clamp() {
  for (double& v : pixels) v = std::clamp(v, 0.0, 1.0);
}

Image to_luma(const Image& img) {
  if (img.channels == 1) return img;
  require(img.channels == 3, ErrorKind::contract, "luma conversion needs 1 or 3 channels");
  Image out(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const double* p = img.pixels.data() + 3 * i;
    out.pixels[i] = (p[0] == p[1] && p[1] == p[2]) ? p[0] : 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  return out;
}

Tensor image_to_tensor(const Image& img) { return Tensor({img.height, img.width, img.channels}, img.pixels); }

Image image_from_tensor(const Tensor& t) {
  require(t.rank() == 3, ErrorKind::dimension, "image tensor must be rank 3 (H, W, C), got " + shape_string(t.shape()));
  Image img;
  img.height = t.dim(0);
  img.width = t.dim(1);
  img.channels = t.dim(2);
  img.pixels = t.values();
  img.validate();
  return img;
}

}  // namespace camelu
