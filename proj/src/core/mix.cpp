#include "camelu/mix.hpp"

#include <algorithm>
#include <cmath>

#include "camelu/error.hpp"
#include "camelu/rng.hpp"

namespace camelu {

void MixConfig::validate() const {
  require(alpha > 0.0 && beta > 0.0, ErrorKind::config, "mix alpha and beta must be positive");
  require(lo >= 0.0 && lo < hi && hi <= 1.0, ErrorKind::config, "mix range must satisfy 0 <= lo < hi <= 1");
}

Image mix_pixel(const Image& base, const Image& other, double lambda) {
  require(base.same_dims(other), ErrorKind::contract, "mix_pixel: images differ in dimensions");
  require(lambda >= 0.0 && lambda < 1.0, ErrorKind::contract, "mix_pixel: lambda must lie in [0, 1)");
  Image out(base.height, base.width, base.channels);
  const double keep = 1.0 - lambda;
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = lambda * other.pixels[i] + keep * base.pixels[i];
  return out;
}

PatchRect patch_rect(std::size_t height, std::size_t width, double lambda, std::uint64_t seed) {
  require(lambda > 0.0 && lambda < 1.0, ErrorKind::contract, "mix_patch: lambda must lie in (0, 1)");
  const double side = std::sqrt(lambda);
  PatchRect r;
  r.height = std::min<std::size_t>(height, static_cast<std::size_t>(std::lround(side * static_cast<double>(height))));
  r.width = std::min<std::size_t>(width, static_cast<std::size_t>(std::lround(side * static_cast<double>(width))));
  if (r.area() == 0) {
    r.height = r.width = 0;
    return r;
  }
  Rng rng(seed);
  r.top = rng.uniform_int(height - r.height + 1);
  r.left = rng.uniform_int(width - r.width + 1);
  return r;
}

PatchMix mix_patch(const Image& base, const Image& other, double lambda, std::uint64_t seed) {
  require(base.same_dims(other), ErrorKind::contract, "mix_patch: images differ in dimensions");
  PatchMix out;
  out.rect = patch_rect(base.height, base.width, lambda, seed);
  out.image = base;
  if (out.rect.area() == 0) {
    out.empty_patch = true;
    return out;
  }
  const auto& r = out.rect;
  for (std::size_t y = r.top; y < r.top + r.height; ++y)
    for (std::size_t x = r.left; x < r.left + r.width; ++x)
      for (std::size_t c = 0; c < base.channels; ++c) out.image.at(y, x, c) = other.at(y, x, c);
  return out;
}

}  // namespace camelu
