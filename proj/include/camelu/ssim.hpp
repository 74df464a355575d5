#pragma once

#include <cstddef>

#include "camelu/image.hpp"

namespace camelu {

// Windowed structural similarity. Inputs in [0, 1]; colour images are
// reduced to luma first. Only windows fully inside the image are used and
// their indices are averaged.
struct SsimConfig {
  std::size_t window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
  // Component exponents for luminance, contrast and structure. With all
  // three at 1 and c3 = c2 / 2 the index reduces to the two-factor form.
  double alpha = 1.0, beta = 1.0, gamma = 1.0;

  double c3() const noexcept { return c2 / 2.0; }
  void validate() const;
};

double ssim(const Image& x, const Image& y, const SsimConfig& cfg = {});

// Mean of ssim(support_aug, query) and ssim(random_src, query).
double mssim_query(const Image& support_aug, const Image& random_src, const Image& query,
                   const SsimConfig& cfg = {});

}  // namespace camelu
