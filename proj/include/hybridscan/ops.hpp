#pragma once

#include <vector>

#include "hybridscan/autodiff.hpp"

namespace hybridscan {

// Differentiable op set. Feature maps are [C, ...spatial]; ops that talk
// about "positions" treat everything after the channel axis as one flat
// axis of length L.

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar s);
/// 1 - a
template <typename Scalar> Var<Scalar> one_minus(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> neg(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> exp(const Var<Scalar>& a);

/// x [C, ...] times g [1, ...], g broadcast over channels.
template <typename Scalar> Var<Scalar> mul_broadcast_channels(const Var<Scalar>& x, const Var<Scalar>& g);

template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> silu(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> softplus(const Var<Scalar>& a);

template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a);
/// sum(a * w) for a constant weight tensor of the same size.
template <typename Scalar> Var<Scalar> weighted_sum(const Var<Scalar>& a, const Tensor<Scalar>& w);

template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& a, Shape shape);

/// y[o, l] = sum_i w[o, i] x[i, l] + b[o]. `b` may be undefined.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b = {});

/// Cross-correlation over [C_in, D, H, W] with a cubic kernel [C_out, C_in, k, k, k].
template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b, Index stride, Index padding);

/// Normalizes over the channel axis independently at every position.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5));

/// Normalizes each channel over all of its positions.
template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                          Scalar eps = Scalar(1e-5));

template <typename Scalar> Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& xs);
template <typename Scalar> Var<Scalar> slice_channels(const Var<Scalar>& x, Index begin, Index count);

/// Depthwise causal conv along the last axis of x [C, L]; w [C, K], b [C].
/// y[c, t] = b[c] + sum_j w[c, j] x[c, t - (K - 1) + j].
template <typename Scalar>
Var<Scalar> causal_conv1d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b);

/// Nearest-neighbour x2 upsampling of [C, D, H, W].
template <typename Scalar> Var<Scalar> upsample_nearest2(const Var<Scalar>& x);

/// Mean over positions of -log softmax(logits[:, p])[label[p]].
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, const LabelVolume& labels);

/// Plain (non-differentiable) softmax over channels, for inspection.
template <typename Scalar> Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits);

/// argmax over channels of [K, ...] -> labels [...].
template <typename Scalar> LabelVolume argmax_channels(const Tensor<Scalar>& logits);

}  // namespace hybridscan
