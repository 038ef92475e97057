#include "hybridscan/fgm.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "hybridscan/fft.hpp"

namespace hybridscan {
namespace {

double signed_frequency(Index k, Index n) {
  const Index u = 2 * k <= n ? k : k - n;
  return static_cast<double>(u) / static_cast<double>(n);
}

template <typename Scalar>
Scalar logistic(Scalar z) {
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

}  // namespace

std::string to_string(FilterMode mode) { return mode == FilterMode::low_pass ? "low_pass" : "high_pass"; }

FilterMode parse_filter_mode(const std::string& name) {
  if (name == "low_pass") return FilterMode::low_pass;
  if (name == "high_pass") return FilterMode::high_pass;
  throw ConfigError("unknown filter mode '" + name + "' (expected low_pass or high_pass)");
}

std::string to_string(MaskKind kind) { return kind == MaskKind::hard ? "hard" : "soft"; }

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "soft") return MaskKind::soft;
  if (name == "hard") return MaskKind::hard;
  throw ConfigError("unknown mask kind '" + name + "' (expected soft or hard)");
}

Tensor<double> frequency_radius(Index D, Index H, Index W) {
  const double norm = std::sqrt(0.75);
  Tensor<double> rho({D, H, W});
  for (Index d = 0; d < D; ++d) {
    const double fd = signed_frequency(d, D);
    for (Index h = 0; h < H; ++h) {
      const double fh = signed_frequency(h, H);
      for (Index w = 0; w < W; ++w) {
        const double fw = signed_frequency(w, W);
        rho[(d * H + h) * W + w] = std::sqrt(fd * fd + fh * fh + fw * fw) / norm;
      }
    }
  }
  return rho;
}

template <typename Scalar>
Tensor<Scalar> frequency_mask(Index D, Index H, Index W, FilterMode mode, Scalar f_low, Scalar f_high, Scalar tau,
                              MaskKind kind) {
  const Tensor<double> rho = frequency_radius(D, H, W);
  Tensor<Scalar> mask(rho.shape());
  for (Index i = 0; i < rho.size(); ++i) {
    const Scalar r = static_cast<Scalar>(rho[i]);
    if (kind == MaskKind::hard) {
      mask[i] = mode == FilterMode::low_pass ? Scalar(r < f_low) : Scalar(r > f_high);
    } else {
      mask[i] = mode == FilterMode::low_pass ? logistic((f_low - r) / tau) : logistic((r - f_high) / tau);
    }
  }
  return mask;
}

template <typename Scalar>
Var<Scalar> fft_filter(const Var<Scalar>& x, const Var<Scalar>& f_low, const Var<Scalar>& f_high, FilterMode mode,
                       Scalar tau, MaskKind kind) {
  if (x.value().rank() != 4) throw UsageError("fft_filter expects [C,D,H,W], got " + shape_str(x.shape()));
  if (!(tau > 0)) throw ConfigError("fft_filter: mask sharpness tau must be positive");
  const Index C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index S = D * H * W;
  const Scalar lo = f_low.value().item();
  const Scalar hi = f_high.value().item();
  Tensor<Scalar> mask = frequency_mask(D, H, W, mode, lo, hi, tau, kind);

  using Complex = std::complex<Scalar>;
  Tensor<Complex> spectrum = fft3(x.value());
  Tensor<Complex> filtered = spectrum;
  for (Index c = 0; c < C; ++c) filtered.array().segment(c * S, S) *= mask.array().template cast<Complex>();
  Tensor<Scalar> out = real_part(ifft3(filtered));

  return record<Scalar>(
      "fft_filter", std::move(out), {x, f_low, f_high},
      [C, S, mode, tau, kind, mask = std::move(mask), spectrum = std::move(spectrum)](Node<Scalar>& self) {
        Tensor<Complex> g_spec = fft3(self.grad);
        if (auto* p = self.input(0)) {
          // The masked round trip is self-adjoint for a real, symmetric mask.
          Tensor<Complex> masked = g_spec;
          for (Index c = 0; c < C; ++c) masked.array().segment(c * S, S) *= mask.array().template cast<Complex>();
          p->accumulate(real_part(ifft3(masked)));
        }
        const bool wants_low = mode == FilterMode::low_pass && self.input(1);
        const bool wants_high = mode == FilterMode::high_pass && self.input(2);
        if (kind == MaskKind::soft && (wants_low || wants_high)) {
          // dL/dmask[k] = sum_c Re(X_c[k] conj(G_c[k])) / N
          Scalar total = 0;
          const Scalar inv_n = Scalar(1) / static_cast<Scalar>(S);
          for (Index k = 0; k < S; ++k) {
            Scalar gm = 0;
            for (Index c = 0; c < C; ++c) gm += std::real(spectrum[c * S + k] * std::conj(g_spec[c * S + k]));
            const Scalar m = mask[k];
            total += gm * inv_n * m * (Scalar(1) - m) / tau;
          }
          if (wants_low) self.input(1)->accumulate(Tensor<Scalar>::scalar(total));
          if (wants_high) self.input(2)->accumulate(Tensor<Scalar>::scalar(-total));
        }
      });
}

template <typename Scalar>
FgmParams<Scalar> make_fgm(ParameterSet<Scalar>& params, const std::string& prefix, const FgmConfig& cfg, Rng& rng) {
  if (cfg.channels < 1) throw ConfigError(prefix + ": channels must be positive");
  if (!(cfg.tau > 0)) throw ConfigError(prefix + ": tau must be positive");
  const Index C = cfg.channels;
  FgmParams<Scalar> f;
  f.config = cfg;
  f.conv_in = make_conv_block(params, prefix + ".conv_in", C, C, 3, 1, rng);
  f.f_low = params.add(prefix + ".f_low", Tensor<Scalar>::scalar(static_cast<Scalar>(cfg.f_low_init)));
  f.f_high = params.add(prefix + ".f_high", Tensor<Scalar>::scalar(static_cast<Scalar>(cfg.f_high_init)));
  f.gate_conv = make_conv3d(params, prefix + ".gate", 2 * C, 1, 3, 1, rng);
  f.conv_out = make_conv_block(params, prefix + ".conv_out", C, C, 3, 1, rng);
  return f;
}

template <typename Scalar>
void clamp_thresholds(FgmParams<Scalar>& fgm) {
  for (Var<Scalar>* t : {&fgm.f_low, &fgm.f_high}) {
    Scalar& v = t->mutable_value()[0];
    v = std::clamp(v, static_cast<Scalar>(kThresholdMin), static_cast<Scalar>(kThresholdMax));
  }
}

template <typename Scalar>
FgmBranches<Scalar> fgm_branches(const FgmParams<Scalar>& fgm, const Var<Scalar>& x) {
  FgmBranches<Scalar> b;
  b.spatial = apply(fgm.conv_in, x);
  b.frequency = fft_filter(b.spatial, fgm.f_low, fgm.f_high, fgm.config.mode, static_cast<Scalar>(fgm.config.tau),
                           fgm.config.mask);
  b.gate = sigmoid(apply(fgm.gate_conv, concat_channels<Scalar>({b.frequency, b.spatial})));
  b.fused = add(mul_broadcast_channels(b.spatial, b.gate), mul_broadcast_channels(b.frequency, one_minus(b.gate)));
  return b;
}

template <typename Scalar>
Var<Scalar> fgm_forward(const FgmParams<Scalar>& fgm, const Var<Scalar>& x, double* mean_gate) {
  FgmBranches<Scalar> b = fgm_branches(fgm, x);
  if (mean_gate) *mean_gate = static_cast<double>(b.gate.value().array().mean());
  return add(apply(fgm.conv_out, b.fused), x);
}

#define HYBRIDSCAN_INSTANTIATE_FGM(S)                                                                         \
  template Tensor<S> frequency_mask(Index, Index, Index, FilterMode, S, S, S, MaskKind);                     \
  template Var<S> fft_filter(const Var<S>&, const Var<S>&, const Var<S>&, FilterMode, S, MaskKind);          \
  template FgmParams<S> make_fgm(ParameterSet<S>&, const std::string&, const FgmConfig&, Rng&);              \
  template void clamp_thresholds(FgmParams<S>&);                                                              \
  template FgmBranches<S> fgm_branches(const FgmParams<S>&, const Var<S>&);                                   \
  template Var<S> fgm_forward(const FgmParams<S>&, const Var<S>&, double*);

HYBRIDSCAN_INSTANTIATE_FGM(float)
HYBRIDSCAN_INSTANTIATE_FGM(double)

}  // namespace hybridscan
