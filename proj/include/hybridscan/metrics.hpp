#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "hybridscan/tensor.hpp"

namespace hybridscan {

/// [D, H, W], nonzero = inside.
using BinaryMask = Tensor<std::uint8_t>;
/// Voxel spacing in mm along (D, H, W).
using Spacing = std::array<double, 3>;

inline constexpr Spacing kUnitSpacing{1.0, 1.0, 1.0};

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dice(const BinaryMask& a, const BinaryMask& b);

/// Mask voxels with at least one 6-neighbour outside the mask. Voxels on the
/// volume border count as surface (outside the volume is background).
BinaryMask surface(const BinaryMask& mask);

/// Squared Euclidean distance (mm^2) from every voxel to the nearest nonzero
/// voxel of `features`, exact, separable along W, H, D. +inf if there are no
/// features.
Tensor<double> squared_distance_transform(const BinaryMask& features, const Spacing& spacing = kUnitSpacing);

/// Distances from each surface voxel of `from` to the nearest surface voxel
/// of `to`, in raster order of `from`.
std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to,
                                               const Spacing& spacing = kUnitSpacing);

/// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

/// Length of the volume diagonal in mm.
double volume_diagonal(const Shape& dims, const Spacing& spacing);

/// 95th percentile of the pooled A->B and B->A surface distances, mm.
/// Both empty: 0. Exactly one empty: the volume diagonal.
double hd95(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing = kUnitSpacing);

/// Maximum of the pooled surface distances, same empty-mask conventions.
double hausdorff(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing = kUnitSpacing);

/// labels > 0.
BinaryMask foreground(const Tensor<std::int32_t>& labels);

}  // namespace hybridscan
