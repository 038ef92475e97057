#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hybridscan/metrics.hpp"
#include "hybridscan/tensor.hpp"

namespace hybridscan {

struct VolumeSample {
  Tensor<float> image;  // [Cin, D, H, W]
  LabelVolume label;    // [D, H, W], values in [0, K)
  Spacing spacing = kUnitSpacing;
  std::string case_id;
};

/// Throws DataError if the image is non-finite or labels fall outside [0, K).
void validate(const VolumeSample& s, Index num_classes);

struct SyntheticSpec {
  Index size = 32;  // cubic volume edge
  Index lesions_min = 1;
  Index lesions_max = 3;
  double radius_min = 3.0;  // per-axis ellipsoid semi-axes, voxels
  double radius_max = 6.0;
  double background = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.1;
  double blur_sigma = 1.0;
  Spacing spacing = kUnitSpacing;
};

void validate(const SyntheticSpec& spec);

struct Ellipsoid {
  std::array<double, 3> center;  // voxel coordinates (d, h, w)
  std::array<double, 3> radii;
};

/// Voxel (d, h, w) is inside when sum(((p - c) / r)^2) <= 1 at its integer
/// coordinates.
LabelVolume rasterize(const std::vector<Ellipsoid>& lesions, Index size);

/// Separable Gaussian blur of a [D, H, W] block, kernel truncated at
/// 3 sigma, clamped borders. sigma = 0 returns the input.
Tensor<float> gaussian_blur(const Tensor<float>& volume, double sigma);

/// Single-channel lesion volume: label is the union of random axis-aligned
/// ellipsoids, image = background + contrast * label, blurred, plus noise.
VolumeSample generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, std::vector<Ellipsoid>* lesions = nullptr);

/// Case i uses seed derived from (seed, i); ids are "case_000", ...
std::vector<VolumeSample> generate_dataset(const SyntheticSpec& spec, Index num_cases, std::uint64_t seed);

}  // namespace hybridscan
