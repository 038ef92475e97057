#include "hybridscan/fft.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <unordered_map>
#include <vector>

namespace hybridscan {
namespace {

thread_local std::uint64_t g_fft3_calls = 0;

bool is_pow2(Index n) { return n > 0 && (n & (n - 1)) == 0; }

Index next_pow2(Index n) {
  Index m = 1;
  while (m < n) m <<= 1;
  return m;
}

template <typename Real>
class Radix2Plan {
 public:
  explicit Radix2Plan(Index n) : n_(n), bitrev_(static_cast<std::size_t>(n)), twiddle_(static_cast<std::size_t>(n / 2)) {
    Index bits = 0;
    while ((Index(1) << bits) < n) ++bits;
    for (Index i = 0; i < n; ++i) {
      Index r = 0;
      for (Index b = 0; b < bits; ++b)
        if (i & (Index(1) << b)) r |= Index(1) << (bits - 1 - b);
      bitrev_[i] = r;
    }
    for (Index k = 0; k < n / 2; ++k) {
      const long double angle = -2.0L * std::numbers::pi_v<long double> * k / n;
      twiddle_[k] = {static_cast<Real>(std::cos(angle)), static_cast<Real>(std::sin(angle))};
    }
  }

  // Forward (negative exponent) transform, unnormalized.
  void run(std::complex<Real>* a) const {
    for (Index i = 0; i < n_; ++i)
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    for (Index len = 2; len <= n_; len <<= 1) {
      const Index half = len / 2;
      const Index step = n_ / len;
      for (Index start = 0; start < n_; start += len) {
        for (Index j = 0; j < half; ++j) {
          const std::complex<Real> t = twiddle_[j * step] * a[start + j + half];
          a[start + j + half] = a[start + j] - t;
          a[start + j] += t;
        }
      }
    }
  }

 private:
  Index n_;
  std::vector<Index> bitrev_;
  std::vector<std::complex<Real>> twiddle_;
};

template <typename Real>
class Plan {
 public:
  explicit Plan(Index n) : n_(n) {
    if (is_pow2(n)) {
      radix2_ = std::make_unique<Radix2Plan<Real>>(n);
      return;
    }
    m_ = next_pow2(2 * n - 1);
    radix2_ = std::make_unique<Radix2Plan<Real>>(m_);
    chirp_.resize(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) {
      // k^2 mod 2n keeps the angle argument small and exact.
      const Index k2 = (k * k) % (2 * n);
      const long double angle = -std::numbers::pi_v<long double> * k2 / n;
      chirp_[k] = {static_cast<Real>(std::cos(angle)), static_cast<Real>(std::sin(angle))};
    }
    kernel_.assign(static_cast<std::size_t>(m_), {});
    for (Index k = 0; k < n; ++k) {
      kernel_[k] = std::conj(chirp_[k]);
      if (k > 0) kernel_[m_ - k] = std::conj(chirp_[k]);
    }
    radix2_->run(kernel_.data());
  }

  void forward(std::complex<Real>* a) const {
    if (n_ == 1) return;
    if (m_ == 0) {
      radix2_->run(a);
      return;
    }
    std::vector<std::complex<Real>> buf(static_cast<std::size_t>(m_));
    for (Index k = 0; k < n_; ++k) buf[k] = a[k] * chirp_[k];
    radix2_->run(buf.data());
    for (Index k = 0; k < m_; ++k) buf[k] *= kernel_[k];
    // Inverse of size m via conjugation.
    for (auto& v : buf) v = std::conj(v);
    radix2_->run(buf.data());
    const Real inv_m = Real(1) / static_cast<Real>(m_);
    for (Index k = 0; k < n_; ++k) a[k] = chirp_[k] * std::conj(buf[k]) * inv_m;
  }

 private:
  Index n_;
  Index m_ = 0;
  std::unique_ptr<Radix2Plan<Real>> radix2_;
  std::vector<std::complex<Real>> chirp_;
  std::vector<std::complex<Real>> kernel_;
};

template <typename Real>
const Plan<Real>& plan_for(Index n) {
  thread_local std::unordered_map<Index, std::unique_ptr<Plan<Real>>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Plan<Real>>(n);
  return *slot;
}

// Transforms every line of length `n` with element stride `stride` inside
// each block of size `n * stride`, for `blocks` consecutive blocks.
template <typename Real>
void transform_axis(std::complex<Real>* data, Index blocks, Index n, Index stride, bool inverse) {
  if (n == 1) return;
  std::vector<std::complex<Real>> line(static_cast<std::size_t>(n));
  for (Index b = 0; b < blocks; ++b) {
    std::complex<Real>* base = data + b * n * stride;
    for (Index s = 0; s < stride; ++s) {
      for (Index i = 0; i < n; ++i) line[i] = base[s + i * stride];
      fft1d(line.data(), n, inverse);
      for (Index i = 0; i < n; ++i) base[s + i * stride] = line[i];
    }
  }
}

template <typename Real>
void transform3(Tensor<std::complex<Real>>& t, bool inverse) {
  if (t.rank() != 4) throw UsageError("fft3 expects [C,D,H,W], got " + shape_str(t.shape()));
  ++g_fft3_calls;
  const Index C = t.dim(0), D = t.dim(1), H = t.dim(2), W = t.dim(3);
  auto* data = t.data();
  transform_axis(data, C * D * H, W, 1, inverse);
  transform_axis(data, C * D, H, W, inverse);
  transform_axis(data, C, D, H * W, inverse);
}

}  // namespace

template <typename Real>
void fft1d(std::complex<Real>* data, Index n, bool inverse) {
  if (n < 1) throw UsageError("fft1d: length must be positive");
  const Plan<Real>& plan = plan_for<Real>(n);
  if (!inverse) {
    plan.forward(data);
    return;
  }
  for (Index i = 0; i < n; ++i) data[i] = std::conj(data[i]);
  plan.forward(data);
  const Real inv_n = Real(1) / static_cast<Real>(n);
  for (Index i = 0; i < n; ++i) data[i] = std::conj(data[i]) * inv_n;
}

template <typename Real>
Tensor<std::complex<Real>> fft3(const Tensor<Real>& x) {
  Tensor<std::complex<Real>> t = x.template cast<std::complex<Real>>();
  transform3(t, false);
  return t;
}

template <typename Real>
Tensor<std::complex<Real>> fft3(const Tensor<std::complex<Real>>& x) {
  Tensor<std::complex<Real>> t = x;
  transform3(t, false);
  return t;
}

template <typename Real>
Tensor<std::complex<Real>> ifft3(const Tensor<std::complex<Real>>& spectrum) {
  Tensor<std::complex<Real>> t = spectrum;
  transform3(t, true);
  return t;
}

template <typename Real>
Tensor<Real> real_part(const Tensor<std::complex<Real>>& z) {
  return Tensor<Real>(z.shape(), z.array().real());
}

std::uint64_t fft3_call_count() { return g_fft3_calls; }

#define HYBRIDSCAN_INSTANTIATE_FFT(R)                                                   \
  template void fft1d<R>(std::complex<R>*, Index, bool);                                \
  template Tensor<std::complex<R>> fft3<R>(const Tensor<R>&);                           \
  template Tensor<std::complex<R>> fft3<R>(const Tensor<std::complex<R>>&);             \
  template Tensor<std::complex<R>> ifft3<R>(const Tensor<std::complex<R>>&);            \
  template Tensor<R> real_part<R>(const Tensor<std::complex<R>>&);

HYBRIDSCAN_INSTANTIATE_FFT(float)
HYBRIDSCAN_INSTANTIATE_FFT(double)

}  // namespace hybridscan
