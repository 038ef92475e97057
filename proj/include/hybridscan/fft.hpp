#pragma once

#include <complex>
#include <cstdint>

#include "hybridscan/tensor.hpp"

namespace hybridscan {

// Discrete Fourier transforms over the three trailing (D, H, W) axes of a
// [C, D, H, W] tensor, per channel.
//
// Convention: the forward transform is unnormalized,
//   X[k] = sum_n x[n] exp(-2 pi i k.n / N),
// and the inverse carries the 1/N factor. Any positive extent is accepted:
// powers of two use an iterative radix-2 kernel, other lengths go through
// Bluestein's chirp-z reduction onto a power-of-two transform.

/// In-place 1D transform of `n` contiguous values.
template <typename Real>
void fft1d(std::complex<Real>* data, Index n, bool inverse);

template <typename Real>
Tensor<std::complex<Real>> fft3(const Tensor<Real>& x);

template <typename Real>
Tensor<std::complex<Real>> fft3(const Tensor<std::complex<Real>>& x);

template <typename Real>
Tensor<std::complex<Real>> ifft3(const Tensor<std::complex<Real>>& spectrum);

template <typename Real>
Tensor<Real> real_part(const Tensor<std::complex<Real>>& z);

/// Number of fft3/ifft3 calls made on this thread; lets tests assert that a
/// configuration performs no spectral work.
std::uint64_t fft3_call_count();

}  // namespace hybridscan
