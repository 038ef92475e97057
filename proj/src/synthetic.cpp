#include "hybridscan/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "hybridscan/errors.hpp"
#include "hybridscan/random.hpp"

namespace hybridscan {

void validate(const VolumeSample& s, Index num_classes) {
  if (s.image.rank() != 4) throw DataError(s.case_id + ": image must be [C,D,H,W], got " + shape_str(s.image.shape()));
  if (s.label.rank() != 3 || s.label.dim(0) != s.image.dim(1) || s.label.dim(1) != s.image.dim(2) ||
      s.label.dim(2) != s.image.dim(3)) {
    throw DataError(s.case_id + ": label shape " + shape_str(s.label.shape()) + " does not match image " +
                    shape_str(s.image.shape()));
  }
  if (!s.image.array().isFinite().all()) throw DataError(s.case_id + ": image contains non-finite values");
  for (Index i = 0; i < s.label.size(); ++i) {
    if (s.label[i] < 0 || s.label[i] >= num_classes) {
      throw DataError(s.case_id + ": label " + std::to_string(s.label[i]) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
}

void validate(const SyntheticSpec& spec) {
  if (spec.size < 1) throw ConfigError("synthetic size must be >= 1");
  if (spec.lesions_min < 0 || spec.lesions_max < spec.lesions_min) throw ConfigError("invalid lesion count range");
  if (!(spec.radius_min >= 1.0) || spec.radius_max < spec.radius_min) {
    throw ConfigError("lesion radii must satisfy 1 <= radius_min <= radius_max");
  }
  if (2 * spec.radius_max > static_cast<double>(spec.size)) throw ConfigError("radius_max too large for the volume");
  if (spec.noise_sigma < 0 || spec.blur_sigma < 0) throw ConfigError("noise and blur sigma must be >= 0");
}

LabelVolume rasterize(const std::vector<Ellipsoid>& lesions, Index size) {
  LabelVolume label = LabelVolume::zeros({size, size, size});
  for (const Ellipsoid& e : lesions) {
    for (Index d = 0; d < size; ++d)
      for (Index h = 0; h < size; ++h)
        for (Index w = 0; w < size; ++w) {
          const double p[3] = {static_cast<double>(d), static_cast<double>(h), static_cast<double>(w)};
          double r = 0;
          for (int a = 0; a < 3; ++a) {
            const double t = (p[a] - e.center[static_cast<std::size_t>(a)]) / e.radii[static_cast<std::size_t>(a)];
            r += t * t;
          }
          if (r <= 1.0) label[(d * size + h) * size + w] = 1;
        }
  }
  return label;
}

Tensor<float> gaussian_blur(const Tensor<float>& volume, double sigma) {
  if (volume.rank() != 3) throw UsageError("gaussian_blur expects [D,H,W]");
  if (sigma <= 0) return volume;
  const Index radius = static_cast<Index>(std::ceil(3 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (Index i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  const Index dims[3] = {volume.dim(0), volume.dim(1), volume.dim(2)};
  const Index strides[3] = {dims[1] * dims[2], dims[2], 1};
  Tensor<float> cur = volume;
  for (int axis = 0; axis < 3; ++axis) {
    Tensor<float> next(volume.shape());
    const Index n = dims[axis], st = strides[axis];
    for (Index i = 0; i < cur.size(); ++i) {
      const Index pos = (i / st) % n;
      const Index base = i - pos * st;
      double acc = 0;
      for (Index k = -radius; k <= radius; ++k) {
        const Index j = std::clamp<Index>(pos + k, 0, n - 1);
        acc += kernel[static_cast<std::size_t>(k + radius)] * static_cast<double>(cur[base + j * st]);
      }
      next[i] = static_cast<float>(acc);
    }
    cur = std::move(next);
  }
  return cur;
}

VolumeSample generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, std::vector<Ellipsoid>* lesions_out) {
  validate(spec);
  Rng rng(seed);
  const Index n = spec.size;
  const Index count =
      spec.lesions_min + static_cast<Index>(rng.below(static_cast<std::uint64_t>(spec.lesions_max - spec.lesions_min + 1)));
  std::vector<Ellipsoid> lesions;
  for (Index i = 0; i < count; ++i) {
    Ellipsoid e;
    for (std::size_t a = 0; a < 3; ++a) {
      e.radii[a] = rng.uniform(spec.radius_min, spec.radius_max);
      e.center[a] = rng.uniform(e.radii[a], static_cast<double>(n - 1) - e.radii[a]);
    }
    lesions.push_back(e);
  }

  VolumeSample s;
  s.label = rasterize(lesions, n);
  s.spacing = spec.spacing;
  Tensor<float> clean({n, n, n});
  for (Index i = 0; i < clean.size(); ++i) {
    clean[i] = static_cast<float>(spec.background + spec.contrast * static_cast<double>(s.label[i]));
  }
  Tensor<float> img = gaussian_blur(clean, spec.blur_sigma);
  if (spec.noise_sigma > 0) {
    for (Index i = 0; i < img.size(); ++i) img[i] += static_cast<float>(spec.noise_sigma * rng.normal());
  }
  s.image = img.reshaped({1, n, n, n});
  if (lesions_out) *lesions_out = std::move(lesions);
  return s;
}

std::vector<VolumeSample> generate_dataset(const SyntheticSpec& spec, Index num_cases, std::uint64_t seed) {
  if (num_cases < 0) throw ConfigError("num_cases must be >= 0");
  std::vector<VolumeSample> cases;
  Rng master(seed);
  for (Index i = 0; i < num_cases; ++i) {
    VolumeSample s = generate_synthetic(spec, master.next());
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03ld", static_cast<long>(i));
    s.case_id = id;
    cases.push_back(std::move(s));
  }
  return cases;
}

}  // namespace hybridscan
