#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "camelu/image.hpp"

namespace camelu {

// The seven label-preserving transformations used to synthesize supports.
enum class AugKind : std::uint8_t {
  resized_crop,
  rotation,
  hflip,
  grayscale,
  color_jitter,
  gaussian_blur,
  affine_shear,
};

inline constexpr std::size_t kAugKindCount = 7;
inline constexpr std::array<AugKind, kAugKindCount> kAllAugKinds = {
    AugKind::resized_crop, AugKind::rotation,      AugKind::hflip,       AugKind::grayscale,
    AugKind::color_jitter, AugKind::gaussian_blur, AugKind::affine_shear,
};

std::string_view aug_name(AugKind kind) noexcept;
std::optional<AugKind> aug_from_name(std::string_view name) noexcept;

// Sampling ranges. Defaults are the reference ranges; narrower ranges are
// accepted, wider ones are rejected by validate().
struct AugParams {
  double crop_scale_lo = 0.2, crop_scale_hi = 0.8;
  double crop_ratio_lo = 0.75, crop_ratio_hi = 1.33;
  double rotation_degrees = 60.0;
  double brightness = 0.2, contrast = 0.2, saturation = 0.2, hue = 0.2;
  int blur_kernel = 3;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
  double shear_x_lo = -45.0, shear_x_hi = 45.0;
  double shear_y_lo = -45.0, shear_y_hi = 45.0;
};

struct AugSpec {
  AugKind kind = AugKind::hflip;
  AugParams params;

  void validate() const;
};

// An AugSpec with every random draw fixed for a particular image size.
struct ResolvedAug {
  AugKind kind = AugKind::hflip;
  // resized_crop box
  std::size_t crop_top = 0, crop_left = 0, crop_height = 0, crop_width = 0;
  double angle_degrees = 0.0;  // rotation, counter-clockwise as displayed
  double brightness = 1.0, contrast = 1.0, saturation = 1.0, hue_shift = 0.0;
  double sigma = 1.0;
  int kernel = 3;
  double shear_x_degrees = 0.0, shear_y_degrees = 0.0;
};

ResolvedAug resolve_augmentation(const AugSpec& spec, std::size_t height, std::size_t width, std::uint64_t seed);
Image apply_resolved(const Image& img, const ResolvedAug& aug);

// Output has the input's dimensions and stays in [0, 1].
Image apply_augmentation(const Image& img, const AugSpec& spec, std::uint64_t seed);

// `count` distinct kinds drawn uniformly without replacement, default ranges.
std::vector<AugSpec> sample_augmentations(std::size_t count, std::uint64_t seed);

// Applies specs in order; spec i uses derive_seed(seed, i).
Image apply_chain(const Image& img, const std::vector<AugSpec>& specs, std::uint64_t seed);

// Bilinear sample at continuous pixel-center coordinates with zero fill
// outside the raster.
double sample_bilinear(const Image& img, double y, double x, std::size_t channel);

}  // namespace camelu
