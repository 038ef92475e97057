#pragma once

#include <functional>
#include <optional>
#include <string>

#include "hybridscan/layers.hpp"
#include "hybridscan/scan_orders.hpp"
#include "hybridscan/selective_scan.hpp"

namespace hybridscan {

/// Source of the block's second residual.
///   intermediate: out = MLP(IN(m)) + m   (default)
///   input:        out = MLP(IN(m)) + x
enum class ResidualMode { intermediate, input };

std::string to_string(ResidualMode mode);
ResidualMode parse_residual_mode(const std::string& name);

/// Any [C, L] -> [C, L] sequence map; normally a bound mamba_layer.
template <typename Scalar>
using SequenceLayer = std::function<Var<Scalar>(const Var<Scalar>&)>;

template <typename Scalar>
SequenceLayer<Scalar> bind_layer(const MambaLayer<Scalar>& layer) {
  return [layer](const Var<Scalar>& seq) { return mamba_layer(layer, seq); };
}

/// Flattens x [C, D, H, W] along `order`, runs `layer`, and scatters back.
template <typename Scalar>
Var<Scalar> scan_along(const Var<Scalar>& x, OrderKind kind, Index k, const SequenceLayer<Scalar>& layer);

/// Whole-volume raster scan forward and backward, summed.
template <typename Scalar>
Var<Scalar> somamba(const Var<Scalar>& x, const SequenceLayer<Scalar>& forward_layer,
                    const SequenceLayer<Scalar>& reverse_layer);

/// k x k window scans: forward, reverse and across-slice, summed.
template <typename Scalar>
Var<Scalar> lomamba(const Var<Scalar>& x, Index k, const SequenceLayer<Scalar>& forward_layer,
                    const SequenceLayer<Scalar>& reverse_layer, const SequenceLayer<Scalar>& across_layer);

struct SLMambaConfig {
  Index channels = 0;
  Index window = 1;
  bool enable_local = true;
  ResidualMode residual = ResidualMode::intermediate;
  Index mlp_ratio = 2;
  MambaConfig mamba;
};

template <typename Scalar>
struct SLMambaBlock {
  SLMambaConfig config;
  NormAffine<Scalar> layer_norm;
  NormAffine<Scalar> instance_norm;
  MambaLayer<Scalar> slice_f, slice_r;
  std::optional<MambaLayer<Scalar>> local_f, local_r, local_s;  // absent when enable_local is off
  Mlp<Scalar> mlp;
};

template <typename Scalar>
SLMambaBlock<Scalar> make_slmamba_block(ParameterSet<Scalar>& params, const std::string& prefix,
                                        const SLMambaConfig& cfg, Rng& rng);

/// m   = SoMamba(LN(x)) + LoMamba(LN(x)) + x
/// out = MLP(IN(m)) + m      (or + x, per ResidualMode)
template <typename Scalar>
Var<Scalar> slmamba_block(const SLMambaBlock<Scalar>& block, const Var<Scalar>& x);

}  // namespace hybridscan
