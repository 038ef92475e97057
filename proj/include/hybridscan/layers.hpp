#pragma once

#include <string>

#include "hybridscan/ops.hpp"
#include "hybridscan/random.hpp"

namespace hybridscan {

// Small parameter bundles shared by the blocks. Each make_* registers its
// tensors in a ParameterSet under `prefix`.

template <typename Scalar>
struct NormAffine {
  Var<Scalar> gamma;
  Var<Scalar> beta;
};

template <typename Scalar>
NormAffine<Scalar> make_norm_affine(ParameterSet<Scalar>& params, const std::string& prefix, Index channels) {
  return {params.add(prefix + ".gamma", Tensor<Scalar>::constant({channels}, Scalar(1))),
          params.add(prefix + ".beta", Tensor<Scalar>::zeros({channels}))};
}

template <typename Scalar>
struct Conv3dLayer {
  Var<Scalar> weight;  // [Co, Ci, k, k, k]
  Var<Scalar> bias;    // [Co]
  Index stride = 1;
  Index padding = 0;
};

/// He-uniform weights (bound sqrt(6 / fan_in)), zero bias, padding (k-1)/2.
template <typename Scalar>
Conv3dLayer<Scalar> make_conv3d(ParameterSet<Scalar>& params, const std::string& prefix, Index in_channels,
                                Index out_channels, Index kernel, Index stride, Rng& rng) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError(prefix + ": kernel size must be odd");
  const Index fan_in = in_channels * kernel * kernel * kernel;
  Conv3dLayer<Scalar> c;
  c.weight = params.add(prefix + ".weight",
                        uniform_tensor<Scalar>({out_channels, in_channels, kernel, kernel, kernel},
                                               std::sqrt(6.0 / static_cast<double>(fan_in)), rng));
  c.bias = params.add(prefix + ".bias", Tensor<Scalar>::zeros({out_channels}));
  c.stride = stride;
  c.padding = (kernel - 1) / 2;
  return c;
}

template <typename Scalar>
Var<Scalar> apply(const Conv3dLayer<Scalar>& c, const Var<Scalar>& x) {
  return conv3d(x, c.weight, c.bias, c.stride, c.padding);
}

/// conv -> instance norm -> silu.
template <typename Scalar>
struct ConvBlock {
  Conv3dLayer<Scalar> conv;
  NormAffine<Scalar> norm;
};

template <typename Scalar>
ConvBlock<Scalar> make_conv_block(ParameterSet<Scalar>& params, const std::string& prefix, Index in_channels,
                                  Index out_channels, Index kernel, Index stride, Rng& rng) {
  ConvBlock<Scalar> b;
  b.conv = make_conv3d(params, prefix + ".conv", in_channels, out_channels, kernel, stride, rng);
  b.norm = make_norm_affine(params, prefix + ".norm", out_channels);
  return b;
}

template <typename Scalar>
Var<Scalar> apply(const ConvBlock<Scalar>& b, const Var<Scalar>& x) {
  return silu(instance_norm(apply(b.conv, x), b.norm.gamma, b.norm.beta));
}

/// Pointwise (per-position) linear -> silu -> linear.
template <typename Scalar>
struct Mlp {
  Var<Scalar> w1, b1, w2, b2;
};

template <typename Scalar>
Mlp<Scalar> make_mlp(ParameterSet<Scalar>& params, const std::string& prefix, Index channels, Index hidden, Rng& rng) {
  const double b1 = 1.0 / std::sqrt(static_cast<double>(channels));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  return {params.add(prefix + ".w1", uniform_tensor<Scalar>({hidden, channels}, b1, rng)),
          params.add(prefix + ".b1", Tensor<Scalar>::zeros({hidden})),
          params.add(prefix + ".w2", uniform_tensor<Scalar>({channels, hidden}, b2, rng)),
          params.add(prefix + ".b2", Tensor<Scalar>::zeros({channels}))};
}

template <typename Scalar>
Var<Scalar> apply(const Mlp<Scalar>& m, const Var<Scalar>& x) {
  return linear(silu(linear(x, m.w1, m.b1)), m.w2, m.b2);
}

}  // namespace hybridscan
