#include "hybridscan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hybridscan/errors.hpp"

namespace hybridscan {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_mask(const BinaryMask& m, const char* what) {
  if (m.rank() != 3) throw UsageError(std::string(what) + ": mask must be [D,H,W], got " + shape_str(m.shape()));
}

void check_pair(const BinaryMask& a, const BinaryMask& b, const char* what) {
  check_mask(a, what);
  check_mask(b, what);
  if (a.shape() != b.shape()) {
    throw UsageError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void check_spacing(const Spacing& s) {
  for (double v : s)
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError("spacing must be positive and finite");
}

// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher) on sample
// positions i*step: out[q] = min_p (step*(q-p))^2 + f[p].
void envelope_1d(const double* f, double* out, Index n, Index stride, double step, std::vector<Index>& v,
                 std::vector<double>& z) {
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kInf) continue;
    const double xq = step * static_cast<double>(q);
    while (k >= 0) {
      const Index p = v[static_cast<std::size_t>(k)];
      const double xp = step * static_cast<double>(p);
      const double s = ((fq + xq * xq) - (f[p * stride] + xp * xp)) / (2.0 * (xq - xp));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = kInf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
    }
  }
  if (k < 0) {
    for (Index q = 0; q < n; ++q) out[q * stride] = kInf;
    return;
  }
  Index j = 0;
  for (Index q = 0; q < n; ++q) {
    const double xq = step * static_cast<double>(q);
    while (z[static_cast<std::size_t>(j) + 1] < xq) ++j;
    const Index p = v[static_cast<std::size_t>(j)];
    const double d = step * static_cast<double>(q - p);
    out[q * stride] = d * d + f[p * stride];
  }
}

}  // namespace

double dice(const BinaryMask& a, const BinaryMask& b) {
  check_pair(a, b, "dice");
  Index na = 0, nb = 0, both = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

BinaryMask surface(const BinaryMask& mask) {
  check_mask(mask, "surface");
  const Index D = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
  BinaryMask out(mask.shape());
  auto at = [&](Index d, Index h, Index w) { return mask[(d * H + h) * W + w] != 0; };
  for (Index d = 0; d < D; ++d)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) {
        if (!at(d, h, w)) continue;
        const bool interior = d > 0 && d + 1 < D && h > 0 && h + 1 < H && w > 0 && w + 1 < W && at(d - 1, h, w) &&
                              at(d + 1, h, w) && at(d, h - 1, w) && at(d, h + 1, w) && at(d, h, w - 1) &&
                              at(d, h, w + 1);
        out[(d * H + h) * W + w] = interior ? 0 : 1;
      }
  return out;
}

Tensor<double> squared_distance_transform(const BinaryMask& features, const Spacing& spacing) {
  check_mask(features, "squared_distance_transform");
  check_spacing(spacing);
  const Index D = features.dim(0), H = features.dim(1), W = features.dim(2);
  Tensor<double> f(features.shape());
  for (Index i = 0; i < f.size(); ++i) f[i] = features[i] ? 0.0 : kInf;
  Tensor<double> tmp(features.shape());
  std::vector<Index> v;
  std::vector<double> z;
  // W axis
  for (Index d = 0; d < D; ++d)
    for (Index h = 0; h < H; ++h) {
      const Index base = (d * H + h) * W;
      envelope_1d(f.data() + base, tmp.data() + base, W, 1, spacing[2], v, z);
    }
  // H axis
  for (Index d = 0; d < D; ++d)
    for (Index w = 0; w < W; ++w) {
      const Index base = d * H * W + w;
      envelope_1d(tmp.data() + base, f.data() + base, H, W, spacing[1], v, z);
    }
  // D axis
  for (Index h = 0; h < H; ++h)
    for (Index w = 0; w < W; ++w) {
      const Index base = h * W + w;
      envelope_1d(f.data() + base, tmp.data() + base, D, H * W, spacing[0], v, z);
    }
  return tmp;
}

std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to, const Spacing& spacing) {
  check_pair(from, to, "directed_surface_distances");
  const BinaryMask sf = surface(from);
  const Tensor<double> dt = squared_distance_transform(surface(to), spacing);
  std::vector<double> out;
  for (Index i = 0; i < sf.size(); ++i)
    if (sf[i]) out.push_back(std::sqrt(dt[i]));
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("percentile of an empty sample");
  if (!(q >= 0 && q <= 100)) throw UsageError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double volume_diagonal(const Shape& dims, const Spacing& spacing) {
  if (dims.size() != 3) throw UsageError("volume_diagonal expects [D,H,W]");
  double s = 0;
  for (int i = 0; i < 3; ++i) {
    const double e = static_cast<double>(dims[static_cast<std::size_t>(i)]) * spacing[static_cast<std::size_t>(i)];
    s += e * e;
  }
  return std::sqrt(s);
}

namespace {

double pooled_statistic(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing, double q) {
  check_pair(a, b, "hd95");
  check_spacing(spacing);
  bool any_a = false, any_b = false;
  for (Index i = 0; i < a.size(); ++i) {
    any_a = any_a || a[i];
    any_b = any_b || b[i];
  }
  if (!any_a && !any_b) return 0.0;
  if (!any_a || !any_b) return volume_diagonal(a.shape(), spacing);
  std::vector<double> pooled = directed_surface_distances(a, b, spacing);
  const std::vector<double> ba = directed_surface_distances(b, a, spacing);
  pooled.insert(pooled.end(), ba.begin(), ba.end());
  return percentile(std::move(pooled), q);
}

}  // namespace

double hd95(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing) {
  return pooled_statistic(a, b, spacing, 95.0);
}

double hausdorff(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing) {
  return pooled_statistic(a, b, spacing, 100.0);
}

BinaryMask foreground(const Tensor<std::int32_t>& labels) {
  BinaryMask m(labels.shape());
  for (Index i = 0; i < labels.size(); ++i) m[i] = labels[i] > 0 ? 1 : 0;
  return m;
}

}  // namespace hybridscan
