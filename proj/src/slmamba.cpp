#include "hybridscan/slmamba.hpp"

namespace hybridscan {

std::string to_string(ResidualMode mode) { return mode == ResidualMode::input ? "input" : "intermediate"; }

ResidualMode parse_residual_mode(const std::string& name) {
  if (name == "intermediate") return ResidualMode::intermediate;
  if (name == "input") return ResidualMode::input;
  throw ConfigError("unknown residual mode '" + name + "' (expected intermediate or input)");
}

template <typename Scalar>
Var<Scalar> scan_along(const Var<Scalar>& x, OrderKind kind, Index k, const SequenceLayer<Scalar>& layer) {
  if (x.value().rank() != 4) throw UsageError("scan_along expects [C,D,H,W], got " + shape_str(x.shape()));
  auto order = cached_order(kind, {x.dim(1), x.dim(2), x.dim(3)}, k);
  return unapply_order(layer(apply_order(x, order)), order);
}

template <typename Scalar>
Var<Scalar> somamba(const Var<Scalar>& x, const SequenceLayer<Scalar>& forward_layer,
                    const SequenceLayer<Scalar>& reverse_layer) {
  return add(scan_along(x, OrderKind::slice_f, 1, forward_layer), scan_along(x, OrderKind::slice_r, 1, reverse_layer));
}

template <typename Scalar>
Var<Scalar> lomamba(const Var<Scalar>& x, Index k, const SequenceLayer<Scalar>& forward_layer,
                    const SequenceLayer<Scalar>& reverse_layer, const SequenceLayer<Scalar>& across_layer) {
  Var<Scalar> y = add(scan_along(x, OrderKind::local_f, k, forward_layer),
                      scan_along(x, OrderKind::local_r, k, reverse_layer));
  return add(y, scan_along(x, OrderKind::local_s, k, across_layer));
}

template <typename Scalar>
SLMambaBlock<Scalar> make_slmamba_block(ParameterSet<Scalar>& params, const std::string& prefix,
                                        const SLMambaConfig& cfg, Rng& rng) {
  if (cfg.channels < 1 || cfg.window < 1 || cfg.mlp_ratio < 1) {
    throw ConfigError(prefix + ": channels, window and mlp_ratio must be positive");
  }
  SLMambaBlock<Scalar> b;
  b.config = cfg;
  const Index C = cfg.channels;
  b.layer_norm = make_norm_affine(params, prefix + ".ln", C);
  b.slice_f = make_mamba_layer(params, prefix + ".so_f", C, cfg.mamba, rng);
  b.slice_r = make_mamba_layer(params, prefix + ".so_r", C, cfg.mamba, rng);
  if (cfg.enable_local) {
    b.local_f = make_mamba_layer(params, prefix + ".lo_f", C, cfg.mamba, rng);
    b.local_r = make_mamba_layer(params, prefix + ".lo_r", C, cfg.mamba, rng);
    b.local_s = make_mamba_layer(params, prefix + ".lo_s", C, cfg.mamba, rng);
  }
  b.instance_norm = make_norm_affine(params, prefix + ".in", C);
  b.mlp = make_mlp(params, prefix + ".mlp", C, cfg.mlp_ratio * C, rng);
  return b;
}

template <typename Scalar>
Var<Scalar> slmamba_block(const SLMambaBlock<Scalar>& block, const Var<Scalar>& x) {
  const Var<Scalar> normed = layer_norm(x, block.layer_norm.gamma, block.layer_norm.beta);
  Var<Scalar> mixed = somamba(normed, bind_layer(block.slice_f), bind_layer(block.slice_r));
  if (block.local_f) {
    mixed = add(mixed, lomamba(normed, block.config.window, bind_layer(*block.local_f), bind_layer(*block.local_r),
                               bind_layer(*block.local_s)));
  }
  const Var<Scalar> m = add(mixed, x);
  const Var<Scalar> refined =
      apply(block.mlp, instance_norm(m, block.instance_norm.gamma, block.instance_norm.beta));
  return add(refined, block.config.residual == ResidualMode::input ? x : m);
}

#define HYBRIDSCAN_INSTANTIATE_SLMAMBA(S)                                                                        \
  template Var<S> scan_along(const Var<S>&, OrderKind, Index, const SequenceLayer<S>&);                          \
  template Var<S> somamba(const Var<S>&, const SequenceLayer<S>&, const SequenceLayer<S>&);                      \
  template Var<S> lomamba(const Var<S>&, Index, const SequenceLayer<S>&, const SequenceLayer<S>&,                \
                          const SequenceLayer<S>&);                                                              \
  template SLMambaBlock<S> make_slmamba_block(ParameterSet<S>&, const std::string&, const SLMambaConfig&, Rng&); \
  template Var<S> slmamba_block(const SLMambaBlock<S>&, const Var<S>&);

HYBRIDSCAN_INSTANTIATE_SLMAMBA(float)
HYBRIDSCAN_INSTANTIATE_SLMAMBA(double)

}  // namespace hybridscan
