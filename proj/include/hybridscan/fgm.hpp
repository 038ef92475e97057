#pragma once

#include <string>

#include "hybridscan/layers.hpp"

namespace hybridscan {

enum class FilterMode { low_pass, high_pass };
enum class MaskKind { soft, hard };

std::string to_string(FilterMode mode);
FilterMode parse_filter_mode(const std::string& name);
std::string to_string(MaskKind kind);
MaskKind parse_mask_kind(const std::string& name);

/// Normalized radial frequency of every bin of a D x H x W spectrum:
///   rho = |(u/D, v/H, w/W)| / |(1/2, 1/2, 1/2)|
/// with u, v, w the signed (centered) frequency indices. DC has rho = 0 and
/// the all-Nyquist corner of an even grid has rho = 1. Result is [D, H, W].
Tensor<double> frequency_radius(Index D, Index H, Index W);

/// Filter mask over the spectrum, [D, H, W].
///   soft low_pass:  sigmoid((f_low - rho) / tau)
///   soft high_pass: sigmoid((rho - f_high) / tau)
///   hard:           indicator rho < f_low, resp. rho > f_high
template <typename Scalar>
Tensor<Scalar> frequency_mask(Index D, Index H, Index W, FilterMode mode, Scalar f_low, Scalar f_high, Scalar tau,
                              MaskKind kind = MaskKind::soft);

/// x_fre = Re(IFFT(mask * FFT(x))) per channel of x [C, D, H, W].
/// Differentiable in x and in the threshold the mode uses (soft masks only).
template <typename Scalar>
Var<Scalar> fft_filter(const Var<Scalar>& x, const Var<Scalar>& f_low, const Var<Scalar>& f_high, FilterMode mode,
                       Scalar tau, MaskKind kind = MaskKind::soft);

struct FgmConfig {
  Index channels = 0;
  FilterMode mode = FilterMode::high_pass;
  double tau = 0.05;
  double f_low_init = 0.1;
  double f_high_init = 0.9;
  MaskKind mask = MaskKind::soft;
};

template <typename Scalar>
struct FgmParams {
  FgmConfig config;
  ConvBlock<Scalar> conv_in;
  Var<Scalar> f_low;   // scalar, kept in [0.01, 0.99]
  Var<Scalar> f_high;  // scalar, kept in [0.01, 0.99]
  Conv3dLayer<Scalar> gate_conv;  // 2C -> 1
  ConvBlock<Scalar> conv_out;
};

template <typename Scalar>
FgmParams<Scalar> make_fgm(ParameterSet<Scalar>& params, const std::string& prefix, const FgmConfig& cfg, Rng& rng);

inline constexpr double kThresholdMin = 0.01;
inline constexpr double kThresholdMax = 0.99;

template <typename Scalar>
void clamp_thresholds(FgmParams<Scalar>& fgm);

template <typename Scalar>
struct FgmBranches {
  Var<Scalar> spatial;    // conv_in(x)
  Var<Scalar> frequency;  // fft_filter(spatial)
  Var<Scalar> gate;       // sigmoid(gate_conv([frequency, spatial])), [1, D, H, W]
  Var<Scalar> fused;      // spatial * gate + frequency * (1 - gate)
};

template <typename Scalar>
FgmBranches<Scalar> fgm_branches(const FgmParams<Scalar>& fgm, const Var<Scalar>& x);

/// conv_out(fused) + x.
template <typename Scalar>
Var<Scalar> fgm_forward(const FgmParams<Scalar>& fgm, const Var<Scalar>& x, double* mean_gate = nullptr);

}  // namespace hybridscan
