#include "hybridscan/selective_scan.hpp"

#include <cmath>
#include <vector>

#include "hybridscan/ops.hpp"

namespace hybridscan {
namespace {

template <typename Scalar>
using RowArray = Eigen::Array<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using RowMap = Eigen::Map<RowArray<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowArray<Scalar>>;

template <typename Scalar>
void check_scan_inputs(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape() || a.rank() < 1) {
    throw UsageError("scan: a " + shape_str(a.shape()) + " and b " + shape_str(b.shape()) + " must share a shape");
  }
}

template <typename Scalar>
void scan_row_sequential(const Scalar* a, const Scalar* b, Scalar* h, Index L) {
  Scalar state = 0;
  for (Index t = 0; t < L; ++t) {
    state = a[t] * state + b[t];
    h[t] = state;
  }
}

template <typename Scalar>
void scan_row_blelloch(const Scalar* a, const Scalar* b, Scalar* h, Index L,
                       std::vector<AffineScanElement<Scalar>>& tree) {
  Index M = 1;
  while (M < L) M <<= 1;
  tree.assign(static_cast<std::size_t>(M), AffineScanElement<Scalar>::identity());
  for (Index t = 0; t < L; ++t) tree[t] = {a[t], b[t]};

  // Up-sweep: tree[i] becomes the composition of its subtree, earliest first.
  for (Index stride = 1; stride < M; stride <<= 1) {
    for (Index i = 2 * stride - 1; i < M; i += 2 * stride) tree[i] = then(tree[i - stride], tree[i]);
  }
  // Down-sweep to exclusive prefixes.
  tree[M - 1] = AffineScanElement<Scalar>::identity();
  for (Index stride = M / 2; stride >= 1; stride >>= 1) {
    for (Index i = 2 * stride - 1; i < M; i += 2 * stride) {
      const AffineScanElement<Scalar> left = tree[i - stride];
      tree[i - stride] = tree[i];
      tree[i] = then(tree[i], left);
    }
  }
  // h_{-1} = 0, so the exclusive prefix applied to zero is its offset.
  for (Index t = 0; t < L; ++t) h[t] = a[t] * tree[t].b + b[t];
}

template <typename Scalar>
Scalar softplus_inverse(Scalar y) {
  return y + std::log(-std::expm1(-y));
}

}  // namespace

std::string to_string(ScanAlgorithm algo) { return algo == ScanAlgorithm::parallel ? "parallel" : "sequential"; }

ScanAlgorithm parse_scan_algorithm(const std::string& name) {
  if (name == "sequential") return ScanAlgorithm::sequential;
  if (name == "parallel") return ScanAlgorithm::parallel;
  throw ConfigError("unknown scan algorithm '" + name + "' (expected sequential or parallel)");
}

template <typename Scalar>
Tensor<Scalar> scan_sequential(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_scan_inputs(a, b);
  const Index L = a.dim(a.rank() - 1);
  const Index rows = L == 0 ? 0 : a.size() / L;
  Tensor<Scalar> h(a.shape());
  for (Index r = 0; r < rows; ++r) scan_row_sequential(a.data() + r * L, b.data() + r * L, h.data() + r * L, L);
  return h;
}

template <typename Scalar>
Tensor<Scalar> scan_parallel(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_scan_inputs(a, b);
  const Index L = a.dim(a.rank() - 1);
  const Index rows = L == 0 ? 0 : a.size() / L;
  Tensor<Scalar> h(a.shape());
#pragma omp parallel
  {
    std::vector<AffineScanElement<Scalar>> tree;
#pragma omp for schedule(static)
    for (Index r = 0; r < rows; ++r) {
      scan_row_blelloch(a.data() + r * L, b.data() + r * L, h.data() + r * L, L, tree);
    }
  }
  return h;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> discretize(const Tensor<Scalar>& delta, const Tensor<Scalar>& A,
                                                     const Tensor<Scalar>& B, const Tensor<Scalar>& u) {
  const Index Di = delta.dim(0);
  const Index L = delta.dim(1);
  const Index N = A.dim(1);
  if (u.shape() != delta.shape() || A.dim(0) != Di || B.dim(0) != N || B.dim(1) != L) {
    throw UsageError("discretize: inconsistent shapes delta " + shape_str(delta.shape()) + ", A " +
                     shape_str(A.shape()) + ", B " + shape_str(B.shape()) + ", u " + shape_str(u.shape()));
  }
  Tensor<Scalar> a({Di, N, L});
  Tensor<Scalar> b({Di, N, L});
  for (Index d = 0; d < Di; ++d) {
    ConstRowMap<Scalar> dl(delta.data() + d * L, L);
    const RowArray<Scalar> du = dl * ConstRowMap<Scalar>(u.data() + d * L, L);
    for (Index n = 0; n < N; ++n) {
      RowMap<Scalar>(a.data() + (d * N + n) * L, L) = (dl * A[d * N + n]).exp();
      RowMap<Scalar>(b.data() + (d * N + n) * L, L) = du * ConstRowMap<Scalar>(B.data() + n * L, L);
    }
  }
  return {std::move(a), std::move(b)};
}

template <typename Scalar>
Var<Scalar> selective_scan(const Var<Scalar>& u, const Var<Scalar>& delta, const Var<Scalar>& A, const Var<Scalar>& B,
                           const Var<Scalar>& C, const Var<Scalar>& D, ScanAlgorithm algo) {
  const Index Di = u.dim(0);
  const Index L = u.dim(1);
  const Index N = A.dim(1);
  if (C.shape() != B.shape() || D.size() != Di) throw UsageError("selective_scan: inconsistent C/D shapes");
  auto [a, b] = discretize(delta.value(), A.value(), B.value(), u.value());
  Tensor<Scalar> h = scan(a, b, algo);

  Tensor<Scalar> y({Di, L});
  for (Index d = 0; d < Di; ++d) {
    RowMap<Scalar> yr(y.data() + d * L, L);
    yr = ConstRowMap<Scalar>(u.value().data() + d * L, L) * D.value()[d];
    for (Index n = 0; n < N; ++n) {
      yr += ConstRowMap<Scalar>(C.value().data() + n * L, L) * ConstRowMap<Scalar>(h.data() + (d * N + n) * L, L);
    }
  }

  // Tape keeps a and h; b is not needed in the reverse pass.
  return record<Scalar>(
      "selective_scan", std::move(y), {u, delta, A, B, C, D},
      [Di, L, N, a = std::move(a), h = std::move(h)](Node<Scalar>& self) {
        const Tensor<Scalar>& uv = self.parents[0]->value;
        const Tensor<Scalar>& dv = self.parents[1]->value;
        const Tensor<Scalar>& Av = self.parents[2]->value;
        const Tensor<Scalar>& Bv = self.parents[3]->value;
        const Tensor<Scalar>& Cv = self.parents[4]->value;
        const Tensor<Scalar>& Dv = self.parents[5]->value;
        const Tensor<Scalar>& gy = self.grad;

        Tensor<Scalar> gu(uv.shape()), gdelta(dv.shape()), gA(Av.shape()), gB(Bv.shape()), gC(Cv.shape()),
            gD(Dv.shape());
        RowArray<Scalar> gh(L), ga(L);
        for (Index d = 0; d < Di; ++d) {
          ConstRowMap<Scalar> gyr(gy.data() + d * L, L);
          ConstRowMap<Scalar> ur(uv.data() + d * L, L);
          ConstRowMap<Scalar> dr(dv.data() + d * L, L);
          RowMap<Scalar> gur(gu.data() + d * L, L);
          RowMap<Scalar> gdr(gdelta.data() + d * L, L);
          const RowArray<Scalar> du = dr * ur;
          for (Index n = 0; n < N; ++n) {
            const Scalar* ar = a.data() + (d * N + n) * L;
            const Scalar* hr = h.data() + (d * N + n) * L;
            ConstRowMap<Scalar> Br(Bv.data() + n * L, L);
            ConstRowMap<Scalar> Cr(Cv.data() + n * L, L);
            // Reverse recurrence: gh_t = C_t gy_t + a_{t+1} gh_{t+1}.
            Scalar carry = 0;
            for (Index t = L - 1; t >= 0; --t) {
              const Scalar next_a = t + 1 < L ? ar[t + 1] : Scalar(0);
              carry = carry * next_a + Cr[t] * gyr[t];
              gh[t] = carry;
            }
            ga[0] = 0;
            for (Index t = 1; t < L; ++t) ga[t] = gh[t] * hr[t - 1];
            ConstRowMap<Scalar> am(ar, L);
            ConstRowMap<Scalar> hm(hr, L);
            const Scalar An = Av[d * N + n];
            const RowArray<Scalar> ga_a = ga * am;
            gdr += ga_a * An + gh * Br * ur;
            gA[d * N + n] += (ga_a * dr).sum();
            RowMap<Scalar>(gB.data() + n * L, L) += gh * du;
            gur += gh * dr * Br;
            RowMap<Scalar>(gC.data() + n * L, L) += gyr * hm;
          }
          gur += gyr * Dv[d];
          gD[d] = (gyr * ur).sum();
        }
        Tensor<Scalar>* grads[] = {&gu, &gdelta, &gA, &gB, &gC, &gD};
        for (std::size_t i = 0; i < 6; ++i)
          if (auto* p = self.input(i)) p->accumulate(std::move(*grads[i]));
      });
}

template <typename Scalar>
MambaLayer<Scalar> make_mamba_layer(ParameterSet<Scalar>& params, const std::string& prefix, Index d_model,
                                    const MambaConfig& cfg, Rng& rng) {
  if (d_model < 1 || cfg.d_state < 1 || cfg.expand < 1 || cfg.conv_width < 1) {
    throw ConfigError("mamba layer '" + prefix + "': sizes must be positive");
  }
  MambaLayer<Scalar> m;
  m.d_model = d_model;
  m.d_inner = cfg.expand * d_model;
  m.d_state = cfg.d_state;
  m.dt_rank = cfg.dt_rank > 0 ? cfg.dt_rank : (d_model + 15) / 16;
  m.conv_width = cfg.conv_width;
  m.scan = cfg.scan;
  const Index Di = m.d_inner, N = m.d_state, R = m.dt_rank, K = m.conv_width;
  auto bound = [](Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  m.in_proj = params.add(prefix + ".in_proj", uniform_tensor<Scalar>({2 * Di, d_model}, bound(d_model), rng));
  m.conv_w = params.add(prefix + ".conv_w", uniform_tensor<Scalar>({Di, K}, bound(K), rng));
  m.conv_b = params.add(prefix + ".conv_b", uniform_tensor<Scalar>({Di}, bound(K), rng));
  m.x_proj = params.add(prefix + ".x_proj", uniform_tensor<Scalar>({R + 2 * N, Di}, bound(Di), rng));
  m.dt_proj_w = params.add(prefix + ".dt_proj_w", uniform_tensor<Scalar>({Di, R}, bound(R), rng));
  Tensor<Scalar> dt_bias({Di});
  for (Index d = 0; d < Di; ++d) {
    const double dt = std::exp(rng.uniform(std::log(cfg.dt_min), std::log(cfg.dt_max)));
    dt_bias[d] = static_cast<Scalar>(softplus_inverse(dt));
  }
  m.dt_proj_b = params.add(prefix + ".dt_proj_b", std::move(dt_bias));
  Tensor<Scalar> a_log({Di, N});
  for (Index d = 0; d < Di; ++d)
    for (Index n = 0; n < N; ++n) a_log[d * N + n] = static_cast<Scalar>(std::log(static_cast<double>(n + 1)));
  m.a_log = params.add(prefix + ".a_log", std::move(a_log));
  m.d_skip = params.add(prefix + ".d_skip", Tensor<Scalar>::constant({Di}, Scalar(1)));
  m.out_proj = params.add(prefix + ".out_proj", uniform_tensor<Scalar>({d_model, Di}, bound(Di), rng));
  return m;
}

template <typename Scalar>
Var<Scalar> mamba_layer(const MambaLayer<Scalar>& layer, const Var<Scalar>& x) {
  if (x.value().rank() != 2 || x.dim(0) != layer.d_model) {
    throw UsageError("mamba_layer: expected [" + std::to_string(layer.d_model) + ", L], got " + shape_str(x.shape()));
  }
  const Index Di = layer.d_inner, N = layer.d_state, R = layer.dt_rank;
  Var<Scalar> xz = linear(x, layer.in_proj);
  Var<Scalar> xin = slice_channels(xz, 0, Di);
  Var<Scalar> z = slice_channels(xz, Di, Di);
  Var<Scalar> u = silu(causal_conv1d(xin, layer.conv_w, layer.conv_b));
  Var<Scalar> dbc = linear(u, layer.x_proj);
  Var<Scalar> delta = softplus(linear(slice_channels(dbc, 0, R), layer.dt_proj_w, layer.dt_proj_b));
  Var<Scalar> Bm = slice_channels(dbc, R, N);
  Var<Scalar> Cm = slice_channels(dbc, R + N, N);
  Var<Scalar> A = neg(exp(layer.a_log));
  Var<Scalar> y = selective_scan(u, delta, A, Bm, Cm, layer.d_skip, layer.scan);
  return linear(mul(y, silu(z)), layer.out_proj);
}

#define HYBRIDSCAN_INSTANTIATE_SCAN(S)                                                                      \
  template Tensor<S> scan_sequential(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> scan_parallel(const Tensor<S>&, const Tensor<S>&);                                     \
  template std::pair<Tensor<S>, Tensor<S>> discretize(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,  \
                                                      const Tensor<S>&);                                    \
  template Var<S> selective_scan(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&,  \
                                 const Var<S>&, ScanAlgorithm);                                             \
  template MambaLayer<S> make_mamba_layer(ParameterSet<S>&, const std::string&, Index, const MambaConfig&,   \
                                          Rng&);                                                            \
  template Var<S> mamba_layer(const MambaLayer<S>&, const Var<S>&);

HYBRIDSCAN_INSTANTIATE_SCAN(float)
HYBRIDSCAN_INSTANTIATE_SCAN(double)

}  // namespace hybridscan
