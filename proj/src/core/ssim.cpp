#include "camelu/ssim.hpp"

#include <cmath>
#include <vector>

#include "camelu/error.hpp"

namespace camelu {

void SsimConfig::validate() const {
  require(window >= 3 && window % 2 == 1, ErrorKind::config, "ssim window must be odd and >= 3");
  require(sigma > 0.0, ErrorKind::config, "ssim sigma must be positive");
  require(c1 > 0.0 && c2 > 0.0, ErrorKind::config, "ssim constants c1, c2 must be positive");
  require(alpha > 0.0 && beta > 0.0 && gamma > 0.0, ErrorKind::config, "ssim exponents must be positive");
}

namespace {

std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Valid-mode separable filtering of a single-channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& k) {
  const std::size_t n = k.size(), ow = w - n + 1, oh = h - n + 1;
  std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * plane[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

double signed_pow(double v, double e) { return v < 0.0 ? -std::pow(-v, e) : std::pow(v, e); }

}  // namespace

double ssim(const Image& x, const Image& y, const SsimConfig& cfg) {
  cfg.validate();
  require(x.same_dims(y), ErrorKind::contract, "ssim: images differ in dimensions");
  require(x.height >= cfg.window && x.width >= cfg.window, ErrorKind::contract,
          "ssim: image " + std::to_string(x.height) + "x" + std::to_string(x.width) + " smaller than the " +
              std::to_string(cfg.window) + "x" + std::to_string(cfg.window) + " window");
  const Image a = to_luma(x), b = to_luma(y);
  const std::size_t h = a.height, w = a.width, n = h * w;
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.pixels[i] * a.pixels[i];
    bb[i] = b.pixels[i] * b.pixels[i];
    ab[i] = a.pixels[i] * b.pixels[i];
  }
  const auto k = gaussian_window(cfg.window, cfg.sigma);
  const auto mu_a = filter_valid(a.pixels, h, w, k), mu_b = filter_valid(b.pixels, h, w, k);
  const auto e_aa = filter_valid(aa, h, w, k), e_bb = filter_valid(bb, h, w, k), e_ab = filter_valid(ab, h, w, k);
  const bool simple = cfg.alpha == 1.0 && cfg.beta == 1.0 && cfg.gamma == 1.0;
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = std::max(0.0, e_aa[i] - ma * ma), vb = std::max(0.0, e_bb[i] - mb * mb);
    const double cov = e_ab[i] - ma * mb;
    double index;
    if (simple) {
      index = ((2.0 * ma * mb + cfg.c1) * (2.0 * cov + cfg.c2)) / ((ma * ma + mb * mb + cfg.c1) * (va + vb + cfg.c2));
    } else {
      const double sa = std::sqrt(va), sb = std::sqrt(vb);
      const double l = (2.0 * ma * mb + cfg.c1) / (ma * ma + mb * mb + cfg.c1);
      const double c = (2.0 * sa * sb + cfg.c2) / (va + vb + cfg.c2);
      const double s = (cov + cfg.c3()) / (sa * sb + cfg.c3());
      index = std::pow(l, cfg.alpha) * std::pow(c, cfg.beta) * signed_pow(s, cfg.gamma);
    }
    total += index;
  }
  return total / static_cast<double>(mu_a.size());
}

double mssim_query(const Image& support_aug, const Image& random_src, const Image& query, const SsimConfig& cfg) {
  return 0.5 * (ssim(support_aug, query, cfg) + ssim(random_src, query, cfg));
}

}  // namespace camelu
