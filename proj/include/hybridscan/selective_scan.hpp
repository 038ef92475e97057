#pragma once

#include <string>
#include <utility>

#include "hybridscan/autodiff.hpp"
#include "hybridscan/random.hpp"

namespace hybridscan {

enum class ScanAlgorithm { sequential, parallel };

std::string to_string(ScanAlgorithm algo);
ScanAlgorithm parse_scan_algorithm(const std::string& name);

/// Element of the linear recurrence h -> a * h + b. Composition is
/// associative, which is what makes the tree scan legal.
template <typename Scalar>
struct AffineScanElement {
  Scalar a = Scalar(1);
  Scalar b = Scalar(0);

  static AffineScanElement identity() { return {}; }
};

/// `first` applied, then `second`: (a2 a1, a2 b1 + b2).
template <typename Scalar>
AffineScanElement<Scalar> then(const AffineScanElement<Scalar>& first, const AffineScanElement<Scalar>& second) {
  return {second.a * first.a, second.a * first.b + second.b};
}

/// h_t = a_t h_{t-1} + b_t with h_{-1} = 0, independently along the last
/// axis of every row. a and b share any shape (typically [C, N, L]).
template <typename Scalar>
Tensor<Scalar> scan_sequential(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Same recurrence by a Blelloch up-sweep/down-sweep over AffineScanElement:
/// O(L) work, O(log L) depth per row. Rows run concurrently under OpenMP.
template <typename Scalar>
Tensor<Scalar> scan_parallel(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scan(const Tensor<Scalar>& a, const Tensor<Scalar>& b, ScanAlgorithm algo) {
  return algo == ScanAlgorithm::parallel ? scan_parallel(a, b) : scan_sequential(a, b);
}

/// Zero-order hold on A, Euler on B:
///   a[d, n, t] = exp(delta[d, t] * A[d, n]),  b[d, n, t] = delta[d, t] * B[n, t] * u[d, t].
/// delta, u: [Di, L]; A: [Di, N]; B: [N, L]. Returns (a, b) shaped [Di, N, L].
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> discretize(const Tensor<Scalar>& delta, const Tensor<Scalar>& A,
                                                     const Tensor<Scalar>& B, const Tensor<Scalar>& u);

/// Fused differentiable selective scan:
///   y[d, t] = sum_n C[n, t] h[d, n, t] + D[d] u[d, t]
/// with h the recurrence over discretize(delta, A, B, u).
template <typename Scalar>
Var<Scalar> selective_scan(const Var<Scalar>& u, const Var<Scalar>& delta, const Var<Scalar>& A, const Var<Scalar>& B,
                           const Var<Scalar>& C, const Var<Scalar>& D, ScanAlgorithm algo = ScanAlgorithm::sequential);

struct MambaConfig {
  Index d_state = 16;
  Index expand = 2;
  Index conv_width = 4;
  Index dt_rank = 0;  // 0: ceil(d_model / 16)
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  ScanAlgorithm scan = ScanAlgorithm::sequential;
};

template <typename Scalar>
struct MambaLayer {
  Index d_model = 0;
  Index d_inner = 0;
  Index d_state = 0;
  Index dt_rank = 0;
  Index conv_width = 0;
  ScanAlgorithm scan = ScanAlgorithm::sequential;

  Var<Scalar> in_proj;    // [2 Di, C]
  Var<Scalar> conv_w;     // [Di, K]
  Var<Scalar> conv_b;     // [Di]
  Var<Scalar> x_proj;     // [R + 2N, Di]
  Var<Scalar> dt_proj_w;  // [Di, R]
  Var<Scalar> dt_proj_b;  // [Di]
  Var<Scalar> a_log;      // [Di, N], A = -exp(a_log)
  Var<Scalar> d_skip;     // [Di]
  Var<Scalar> out_proj;   // [C, Di]
};

template <typename Scalar>
MambaLayer<Scalar> make_mamba_layer(ParameterSet<Scalar>& params, const std::string& prefix, Index d_model,
                                    const MambaConfig& cfg, Rng& rng);

/// Full layer on a sequence x [C, L] -> [C, L]: expand, causal depthwise
/// conv + silu, selective scan, silu gate from the second branch, project back.
template <typename Scalar>
Var<Scalar> mamba_layer(const MambaLayer<Scalar>& layer, const Var<Scalar>& x);

}  // namespace hybridscan
