#include "hybridscan/scan_orders.hpp"

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <map>
#include <mutex>
#include <tuple>

namespace hybridscan {
namespace {

void fill_inverse(ScanOrder& o) {
  o.inverse.assign(o.forward.size(), -1);
  for (std::size_t s = 0; s < o.forward.size(); ++s) o.inverse[static_cast<std::size_t>(o.forward[s])] = static_cast<Index>(s);
}

void check_dims(Index D, Index H, Index W) {
  if (D < 1 || H < 1 || W < 1) {
    throw ConfigError("scan order dims must be positive, got " + shape_str({D, H, W}));
  }
}

Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

}  // namespace

std::string to_string(OrderKind kind) {
  switch (kind) {
    case OrderKind::slice_f: return "slice_f";
    case OrderKind::slice_r: return "slice_r";
    case OrderKind::local_f: return "local_f";
    case OrderKind::local_r: return "local_r";
    case OrderKind::local_s: return "local_s";
  }
  return "?";
}

OrderKind parse_order_kind(const std::string& name) {
  for (OrderKind k : {OrderKind::slice_f, OrderKind::slice_r, OrderKind::local_f, OrderKind::local_r, OrderKind::local_s})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown order kind '" + name + "' (expected slice_f, slice_r, local_f, local_r or local_s)");
}

std::string to_string(WindowVariant variant) {
  return variant == WindowVariant::within_slice ? "within_slice" : "across_slice";
}

WindowVariant parse_window_variant(const std::string& name) {
  if (name == "within_slice") return WindowVariant::within_slice;
  if (name == "across_slice") return WindowVariant::across_slice;
  throw ConfigError("unknown window variant '" + name + "' (expected within_slice or across_slice)");
}

ScanOrder slice_forward_order(Index D, Index H, Index W) {
  check_dims(D, H, W);
  ScanOrder o;
  o.dims = {D, H, W};
  o.kind = OrderKind::slice_f;
  o.forward.resize(static_cast<std::size_t>(D * H * W));
  for (Index i = 0; i < D * H * W; ++i) o.forward[i] = i;
  fill_inverse(o);
  return o;
}

ScanOrder reverse_order(const ScanOrder& order) {
  ScanOrder o = order;
  std::reverse(o.forward.begin(), o.forward.end());
  switch (order.kind) {
    case OrderKind::slice_f: o.kind = OrderKind::slice_r; break;
    case OrderKind::slice_r: o.kind = OrderKind::slice_f; break;
    case OrderKind::local_f: o.kind = OrderKind::local_r; break;
    case OrderKind::local_r: o.kind = OrderKind::local_f; break;
    case OrderKind::local_s: break;
  }
  fill_inverse(o);
  return o;
}

ScanOrder local_window_order(Index D, Index H, Index W, Index k, WindowVariant variant) {
  check_dims(D, H, W);
  if (k < 1) throw ConfigError("window size must be >= 1, got " + std::to_string(k));
  if (k > H || k > W) {
    throw ConfigError("window size " + std::to_string(k) + " exceeds slice extent " + std::to_string(H) + "x" +
                      std::to_string(W));
  }
  ScanOrder o;
  o.dims = {D, H, W};
  o.window = k;
  o.kind = variant == WindowVariant::within_slice ? OrderKind::local_f : OrderKind::local_s;
  o.forward.reserve(static_cast<std::size_t>(D * H * W));
  const Index gh = ceil_div(H, k);
  const Index gw = ceil_div(W, k);
  auto emit_window = [&](Index d, Index wy, Index wx) {
    for (Index i = 0; i < k; ++i) {
      const Index h = wy * k + i;
      if (h >= H) break;
      for (Index j = 0; j < k; ++j) {
        const Index w = wx * k + j;
        if (w >= W) break;
        o.forward.push_back((d * H + h) * W + w);
      }
    }
  };
  if (variant == WindowVariant::within_slice) {
    for (Index d = 0; d < D; ++d)
      for (Index wy = 0; wy < gh; ++wy)
        for (Index wx = 0; wx < gw; ++wx) emit_window(d, wy, wx);
  } else {
    for (Index wy = 0; wy < gh; ++wy)
      for (Index wx = 0; wx < gw; ++wx)
        for (Index d = 0; d < D; ++d) emit_window(d, wy, wx);
  }
  fill_inverse(o);
  return o;
}

ScanOrder make_order(OrderKind kind, const Dims3& dims, Index k) {
  const auto [D, H, W] = dims;
  switch (kind) {
    case OrderKind::slice_f: return slice_forward_order(D, H, W);
    case OrderKind::slice_r: return reverse_order(slice_forward_order(D, H, W));
    case OrderKind::local_f: return local_window_order(D, H, W, k, WindowVariant::within_slice);
    case OrderKind::local_r: return reverse_order(local_window_order(D, H, W, k, WindowVariant::within_slice));
    case OrderKind::local_s: return local_window_order(D, H, W, k, WindowVariant::across_slice);
  }
  throw UsageError("unknown order kind");
}

std::shared_ptr<const ScanOrder> cached_order(OrderKind kind, const Dims3& dims, Index k) {
  using Key = std::tuple<int, Index, Index, Index, Index>;
  static std::mutex mutex;
  static std::map<Key, std::shared_ptr<const ScanOrder>> cache;
  const bool local = kind == OrderKind::local_f || kind == OrderKind::local_r || kind == OrderKind::local_s;
  Key key{static_cast<int>(kind), dims[0], dims[1], dims[2], local ? k : 1};
  std::lock_guard lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto order = std::make_shared<const ScanOrder>(make_order(kind, dims, k));
  cache.emplace(key, order);
  return order;
}

template <typename Scalar>
Tensor<Scalar> apply_order(const Tensor<Scalar>& x, const ScanOrder& order) {
  if (x.rank() != 4 || x.dim(1) != order.dims[0] || x.dim(2) != order.dims[1] || x.dim(3) != order.dims[2]) {
    throw UsageError("apply_order: tensor " + shape_str(x.shape()) + " does not match order dims " +
                     shape_str({order.dims[0], order.dims[1], order.dims[2]}));
  }
  const Index C = x.dim(0);
  const Index L = order.length();
  Tensor<Scalar> out({C, L});
  for (Index c = 0; c < C; ++c) {
    const Scalar* src = x.data() + c * L;
    Scalar* dst = out.data() + c * L;
    for (Index s = 0; s < L; ++s) dst[s] = src[order.forward[s]];
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> unapply_order(const Tensor<Scalar>& seq, const ScanOrder& order) {
  const Index L = order.length();
  if (seq.rank() != 2 || seq.dim(1) != L) {
    throw UsageError("unapply_order: sequence " + shape_str(seq.shape()) + " does not match order length " +
                     std::to_string(L));
  }
  const Index C = seq.dim(0);
  Tensor<Scalar> out({C, order.dims[0], order.dims[1], order.dims[2]});
  for (Index c = 0; c < C; ++c) {
    const Scalar* src = seq.data() + c * L;
    Scalar* dst = out.data() + c * L;
    for (Index s = 0; s < L; ++s) dst[order.forward[s]] = src[s];
  }
  return out;
}

template <typename Scalar>
Var<Scalar> apply_order(const Var<Scalar>& x, std::shared_ptr<const ScanOrder> order) {
  Tensor<Scalar> out = apply_order(x.value(), *order);
  return record<Scalar>("apply_order", std::move(out), {x}, [order](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(unapply_order(self.grad, *order));
  });
}

template <typename Scalar>
Var<Scalar> unapply_order(const Var<Scalar>& seq, std::shared_ptr<const ScanOrder> order) {
  Tensor<Scalar> out = unapply_order(seq.value(), *order);
  return record<Scalar>("unapply_order", std::move(out), {seq}, [order](Node<Scalar>& self) {
    if (auto* p = self.input(0)) p->accumulate(apply_order(self.grad, *order));
  });
}

LocalityStats locality_stats(const Dims3& dims, Index k) {
  const auto [D, H, W] = dims;
  const ScanOrder local = local_window_order(D, H, W, k, WindowVariant::within_slice);
  const ScanOrder raster = slice_forward_order(D, H, W);
  LocalityStats st;
  Index windows = 0;
  double sum_local = 0, sum_raster = 0;
  for (Index d = 0; d < D; ++d)
    for (Index wy = 0; wy * k < H; ++wy)
      for (Index wx = 0; wx * k < W; ++wx) {
        Index lo_l = std::numeric_limits<Index>::max(), hi_l = -1, lo_r = std::numeric_limits<Index>::max(), hi_r = -1;
        for (Index h = wy * k; h < std::min(H, (wy + 1) * k); ++h)
          for (Index w = wx * k; w < std::min(W, (wx + 1) * k); ++w) {
            const Index v = (d * H + h) * W + w;
            lo_l = std::min(lo_l, local.inverse[v]);
            hi_l = std::max(hi_l, local.inverse[v]);
            lo_r = std::min(lo_r, raster.inverse[v]);
            hi_r = std::max(hi_r, raster.inverse[v]);
          }
        st.max_window_spread_local = std::max(st.max_window_spread_local, hi_l - lo_l);
        st.max_window_spread_raster = std::max(st.max_window_spread_raster, hi_r - lo_r);
        sum_local += static_cast<double>(hi_l - lo_l);
        sum_raster += static_cast<double>(hi_r - lo_r);
        ++windows;
      }
  st.mean_window_spread_local = sum_local / static_cast<double>(windows);
  st.mean_window_spread_raster = sum_raster / static_cast<double>(windows);

  double nl = 0, nr = 0;
  Index pairs = 0;
  for (Index d = 0; d < D; ++d)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) {
        const Index v = (d * H + h) * W + w;
        auto visit = [&](Index u) {
          nl += static_cast<double>(std::abs(local.inverse[v] - local.inverse[u]));
          nr += static_cast<double>(std::abs(raster.inverse[v] - raster.inverse[u]));
          ++pairs;
        };
        if (w + 1 < W) visit(v + 1);
        if (h + 1 < H) visit(v + W);
      }
  if (pairs > 0) {
    st.mean_neighbor_distance_local = nl / static_cast<double>(pairs);
    st.mean_neighbor_distance_raster = nr / static_cast<double>(pairs);
  }
  return st;
}

template Tensor<float> apply_order(const Tensor<float>&, const ScanOrder&);
template Tensor<double> apply_order(const Tensor<double>&, const ScanOrder&);
template Tensor<float> unapply_order(const Tensor<float>&, const ScanOrder&);
template Tensor<double> unapply_order(const Tensor<double>&, const ScanOrder&);
template Var<float> apply_order(const Var<float>&, std::shared_ptr<const ScanOrder>);
template Var<double> apply_order(const Var<double>&, std::shared_ptr<const ScanOrder>);
template Var<float> unapply_order(const Var<float>&, std::shared_ptr<const ScanOrder>);
template Var<double> unapply_order(const Var<double>&, std::shared_ptr<const ScanOrder>);

}  // namespace hybridscan
