#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "hybridscan/autodiff.hpp"

namespace hybridscan {

enum class OrderKind { slice_f, slice_r, local_f, local_r, local_s };
enum class WindowVariant { within_slice, across_slice };

std::string to_string(OrderKind kind);
OrderKind parse_order_kind(const std::string& name);
std::string to_string(WindowVariant variant);
WindowVariant parse_window_variant(const std::string& name);

using Dims3 = std::array<Index, 3>;

/// A bijection between sequence positions and voxel linear indices
/// (d * H * W + h * W + w) of a D x H x W grid.
struct ScanOrder {
  std::vector<Index> forward;  // forward[s] = voxel visited at position s
  std::vector<Index> inverse;  // inverse[forward[s]] = s
  Dims3 dims{};
  OrderKind kind = OrderKind::slice_f;
  Index window = 1;  // meaningful for local kinds only

  Index length() const { return static_cast<Index>(forward.size()); }
};

/// Slice-by-slice raster; the identity permutation of the canonical layout.
ScanOrder slice_forward_order(Index D, Index H, Index W);

/// The same order traversed back to front, tagged with the reversed kind.
ScanOrder reverse_order(const ScanOrder& order);

/// k x k per-slice windows. `within_slice` walks slices outermost, windows in
/// raster order inside a slice, voxels in raster order inside a window.
/// `across_slice` walks window positions outermost and, for each, the full
/// depth tube (depth, then in-window raster). Extents not divisible by k are
/// handled by ordering on the padded grid and dropping padding positions.
ScanOrder local_window_order(Index D, Index H, Index W, Index k, WindowVariant variant);

/// Builds any of the five orders; local kinds use window `k`.
ScanOrder make_order(OrderKind kind, const Dims3& dims, Index k = 1);

/// Process-wide memo of orders; returned orders are immutable.
std::shared_ptr<const ScanOrder> cached_order(OrderKind kind, const Dims3& dims, Index k = 1);

/// out[c, s] = x[c, forward[s]] for x [C, D, H, W]; result [C, L].
template <typename Scalar>
Tensor<Scalar> apply_order(const Tensor<Scalar>& x, const ScanOrder& order);

/// Inverse of apply_order: [C, L] back to [C, D, H, W].
template <typename Scalar>
Tensor<Scalar> unapply_order(const Tensor<Scalar>& seq, const ScanOrder& order);

template <typename Scalar>
Var<Scalar> apply_order(const Var<Scalar>& x, std::shared_ptr<const ScanOrder> order);

template <typename Scalar>
Var<Scalar> unapply_order(const Var<Scalar>& seq, std::shared_ptr<const ScanOrder> order);

/// Same-window sequence spread used by the locality report.
struct LocalityStats {
  Index max_window_spread_local = 0;   // max over windows of (max pos - min pos) under the local order
  Index max_window_spread_raster = 0;  // same windows, under the raster order
  double mean_window_spread_local = 0;
  double mean_window_spread_raster = 0;
  double mean_neighbor_distance_local = 0;   // mean |pos(v) - pos(v')| over 4-connected in-slice neighbours
  double mean_neighbor_distance_raster = 0;
};

LocalityStats locality_stats(const Dims3& dims, Index k);

}  // namespace hybridscan
