#include "camelu/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "camelu/error.hpp"
#include "camelu/rng.hpp"

namespace camelu {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

void check_range(double lo, double hi, double min, double max, const char* what) {
  require(lo <= hi && lo >= min && hi <= max, ErrorKind::contract,
          std::string("augmentation parameter ") + what + " outside its admissible range");
}

Image resized_crop(const Image& img, const ResolvedAug& a) {
  Image out(img.height, img.width, img.channels);
  const double sy = static_cast<double>(a.crop_height) / static_cast<double>(img.height);
  const double sx = static_cast<double>(a.crop_width) / static_cast<double>(img.width);
  const double y_lo = static_cast<double>(a.crop_top), y_hi = static_cast<double>(a.crop_top + a.crop_height - 1);
  const double x_lo = static_cast<double>(a.crop_left), x_hi = static_cast<double>(a.crop_left + a.crop_width - 1);
  for (std::size_t y = 0; y < img.height; ++y) {
    const double src_y = std::clamp(y_lo + (static_cast<double>(y) + 0.5) * sy - 0.5, y_lo, y_hi);
    for (std::size_t x = 0; x < img.width; ++x) {
      const double src_x = std::clamp(x_lo + (static_cast<double>(x) + 0.5) * sx - 0.5, x_lo, x_hi);
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = sample_bilinear(img, src_y, src_x, c);
    }
  }
  return out;
}

// Inverse-maps every output pixel through the 2x2 matrix `inv` about the
// image center.
Image warp_about_center(const Image& img, const std::array<double, 4>& inv) {
  Image out(img.height, img.width, img.channels);
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double src_x = cx + inv[0] * dx + inv[1] * dy;
      const double src_y = cy + inv[2] * dx + inv[3] * dy;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = sample_bilinear(img, src_y, src_x, c);
    }
  }
  out.clamp();
  return out;
}

Image rotate(const Image& img, double degrees) {
  // Forward map (y axis pointing down, counter-clockwise on screen):
  //   x' = cos*dx + sin*dy,  y' = -sin*dx + cos*dy
  const double t = degrees * kDegToRad, c = std::cos(t), s = std::sin(t);
  return warp_about_center(img, {c, -s, s, c});
}

Image shear(const Image& img, double sx_deg, double sy_deg) {
  // Forward map M = [[1, tx], [ty, 1 + tx*ty]] (x-shear then y-shear), det 1.
  const double tx = std::tan(sx_deg * kDegToRad), ty = std::tan(sy_deg * kDegToRad);
  return warp_about_center(img, {1.0 + tx * ty, -tx, -ty, 1.0});
}

Image hflip(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

Image grayscale(const Image& img) {
  require(img.channels == 1 || img.channels == 3, ErrorKind::contract,
          "grayscale needs a 1- or 3-channel source, got " + std::to_string(img.channels));
  if (img.channels == 1) return img;
  const Image luma = to_luma(img);
  Image out(img.height, img.width, 3);
  for (std::size_t i = 0; i < luma.pixels.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[3 * i + c] = luma.pixels[i];
  out.clamp();
  return out;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = (g - b) / delta;
  } else if (mx == g) {
    h = 2.0 + (b - r) / delta;
  } else {
    h = 4.0 + (r - g) / delta;
  }
  h /= 6.0;
  h -= std::floor(h);
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = h * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

Image color_jitter(const Image& img, const ResolvedAug& a) {
  Image out = img;
  for (double& v : out.pixels) v *= a.brightness;
  out.clamp();

  const Image gray_for_mean = to_luma(out);
  double mean = 0.0;
  for (double v : gray_for_mean.pixels) mean += v;
  mean /= static_cast<double>(gray_for_mean.pixels.size());
  for (double& v : out.pixels) v = a.contrast * v + (1.0 - a.contrast) * mean;
  out.clamp();

  if (out.channels == 3) {
    const Image gray = to_luma(out);
    for (std::size_t i = 0; i < gray.pixels.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c)
        out.pixels[3 * i + c] = a.saturation * out.pixels[3 * i + c] + (1.0 - a.saturation) * gray.pixels[i];
    out.clamp();

    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
      double* p = out.pixels.data() + 3 * i;
      double h, s, v;
      rgb_to_hsv(p[0], p[1], p[2], h, s, v);
      h += a.hue_shift;
      h -= std::floor(h);
      hsv_to_rgb(h, s, v, p[0], p[1], p[2]);
    }
    out.clamp();
  }
  return out;
}

std::size_t reflect(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<long>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

Image gaussian_blur(const Image& img, int kernel, double sigma) {
  const int half = kernel / 2;
  std::vector<double> w(static_cast<std::size_t>(kernel));
  double total = 0.0;
  for (int k = -half; k <= half; ++k) {
    w[static_cast<std::size_t>(k + half)] = std::exp(-0.5 * (k * k) / (sigma * sigma));
    total += w[static_cast<std::size_t>(k + half)];
  }
  for (double& v : w) v /= total;
  Image tmp(img.height, img.width, img.channels), out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (int k = -half; k <= half; ++k)
          s += w[static_cast<std::size_t>(k + half)] * img.at(y, reflect(static_cast<long>(x) + k, img.width), c);
        tmp.at(y, x, c) = s;
      }
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (int k = -half; k <= half; ++k)
          s += w[static_cast<std::size_t>(k + half)] * tmp.at(reflect(static_cast<long>(y) + k, img.height), x, c);
        out.at(y, x, c) = s;
      }
  out.clamp();
  return out;
}

}  // namespace

std::string_view aug_name(AugKind kind) noexcept {
  switch (kind) {
    case AugKind::resized_crop: return "resized_crop";
    case AugKind::rotation: return "rotation";
    case AugKind::hflip: return "hflip";
    case AugKind::grayscale: return "grayscale";
    case AugKind::color_jitter: return "color_jitter";
    case AugKind::gaussian_blur: return "gaussian_blur";
    case AugKind::affine_shear: return "affine_shear";
  }
  return "unknown";
}

std::optional<AugKind> aug_from_name(std::string_view name) noexcept {
  for (AugKind k : kAllAugKinds)
    if (aug_name(k) == name) return k;
  return std::nullopt;
}

void AugSpec::validate() const {
  const AugParams& p = params;
  switch (kind) {
    case AugKind::resized_crop:
      check_range(p.crop_scale_lo, p.crop_scale_hi, 0.2, 0.8, "crop scale");
      check_range(p.crop_ratio_lo, p.crop_ratio_hi, 0.75, 1.33, "crop ratio");
      break;
    case AugKind::rotation: check_range(0.0, p.rotation_degrees, 0.0, 60.0, "rotation degrees"); break;
    case AugKind::color_jitter:
      check_range(0.0, p.brightness, 0.0, 0.2, "brightness");
      check_range(0.0, p.contrast, 0.0, 0.2, "contrast");
      check_range(0.0, p.saturation, 0.0, 0.2, "saturation");
      check_range(0.0, p.hue, 0.0, 0.2, "hue");
      break;
    case AugKind::gaussian_blur:
      require(p.blur_kernel == 1 || p.blur_kernel == 3, ErrorKind::contract, "blur kernel must be 1 or 3");
      check_range(p.blur_sigma_lo, p.blur_sigma_hi, 0.1, 2.0, "blur sigma");
      break;
    case AugKind::affine_shear:
      check_range(p.shear_x_lo, p.shear_x_hi, -45.0, 45.0, "shear x");
      check_range(p.shear_y_lo, p.shear_y_hi, -45.0, 45.0, "shear y");
      break;
    case AugKind::hflip:
    case AugKind::grayscale: break;
  }
}

double sample_bilinear(const Image& img, double y, double x, std::size_t channel) {
  const double fy = std::floor(y), fx = std::floor(x);
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double wy = y - fy, wx = x - fx;
  auto px = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(img.height) || xx >= static_cast<long>(img.width)) return 0.0;
    return img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), channel);
  };
  double v = 0.0;
  if (wy < 1.0 && wx < 1.0) v += (1.0 - wy) * (1.0 - wx) * px(y0, x0);
  if (wx > 0.0) v += (1.0 - wy) * wx * px(y0, x0 + 1);
  if (wy > 0.0) v += wy * (1.0 - wx) * px(y0 + 1, x0);
  if (wy > 0.0 && wx > 0.0) v += wy * wx * px(y0 + 1, x0 + 1);
  return v;
}

ResolvedAug resolve_augmentation(const AugSpec& spec, std::size_t height, std::size_t width, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const AugParams& p = spec.params;
  ResolvedAug r;
  r.kind = spec.kind;
  switch (spec.kind) {
    case AugKind::resized_crop: {
      const double area = static_cast<double>(height * width);
      r.crop_top = 0;
      r.crop_left = 0;
      r.crop_height = height;
      r.crop_width = width;
      for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(p.crop_scale_lo, p.crop_scale_hi);
        const double aspect = std::exp(rng.uniform(std::log(p.crop_ratio_lo), std::log(p.crop_ratio_hi)));
        const long w = std::lround(std::sqrt(target * aspect));
        const long h = std::lround(std::sqrt(target / aspect));
        if (w > 0 && h > 0 && w <= static_cast<long>(width) && h <= static_cast<long>(height)) {
          r.crop_height = static_cast<std::size_t>(h);
          r.crop_width = static_cast<std::size_t>(w);
          r.crop_top = rng.uniform_int(height - r.crop_height + 1);
          r.crop_left = rng.uniform_int(width - r.crop_width + 1);
          break;
        }
      }
      break;
    }
    case AugKind::rotation: r.angle_degrees = rng.uniform(-p.rotation_degrees, p.rotation_degrees); break;
    case AugKind::color_jitter:
      r.brightness = rng.uniform(1.0 - p.brightness, 1.0 + p.brightness);
      r.contrast = rng.uniform(1.0 - p.contrast, 1.0 + p.contrast);
      r.saturation = rng.uniform(1.0 - p.saturation, 1.0 + p.saturation);
      r.hue_shift = rng.uniform(-p.hue, p.hue);
      break;
    case AugKind::gaussian_blur:
      r.kernel = p.blur_kernel;
      r.sigma = rng.uniform(p.blur_sigma_lo, p.blur_sigma_hi);
      break;
    case AugKind::affine_shear:
      r.shear_x_degrees = rng.uniform(p.shear_x_lo, p.shear_x_hi);
      r.shear_y_degrees = rng.uniform(p.shear_y_lo, p.shear_y_hi);
      break;
    case AugKind::hflip:
    case AugKind::grayscale: break;
  }
  return r;
}

Image apply_resolved(const Image& img, const ResolvedAug& a) {
  img.validate();
  switch (a.kind) {
    case AugKind::resized_crop: return resized_crop(img, a);
    case AugKind::rotation: return rotate(img, a.angle_degrees);
    case AugKind::hflip: return hflip(img);
    case AugKind::grayscale: return grayscale(img);
    case AugKind::color_jitter: return color_jitter(img, a);
    case AugKind::gaussian_blur: return gaussian_blur(img, a.kernel, a.sigma);
    case AugKind::affine_shear: return shear(img, a.shear_x_degrees, a.shear_y_degrees);
  }
  return img;
}

Image apply_augmentation(const Image& img, const AugSpec& spec, std::uint64_t seed) {
  return apply_resolved(img, resolve_augmentation(spec, img.height, img.width, seed));
}

std::vector<AugSpec> sample_augmentations(std::size_t count, std::uint64_t seed) {
  require(count >= 1 && count <= kAugKindCount, ErrorKind::contract,
          "augmentation count must be in [1, 7], got " + std::to_string(count));
  std::array<AugKind, kAugKindCount> pool = kAllAugKinds;
  Rng rng(seed);
  std::vector<AugSpec> specs;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.uniform_int(kAugKindCount - i);
    std::swap(pool[i], pool[j]);
    specs.push_back(AugSpec{pool[i], AugParams{}});
  }
  return specs;
}

Image apply_chain(const Image& img, const std::vector<AugSpec>& specs, std::uint64_t seed) {
  Image out = img;
  for (std::size_t i = 0; i < specs.size(); ++i) out = apply_augmentation(out, specs[i], derive_seed(seed, i));
  return out;
}

}  // namespace camelu
