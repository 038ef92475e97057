#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hybridscan/gradcheck.hpp"
#include "hybridscan/ops.hpp"
#include "hybridscan/scan_orders.hpp"
#include "hybridscan/selective_scan.hpp"
#include "oracles.hpp"

using namespace hybridscan;

namespace {

constexpr OrderKind kAllKinds[] = {OrderKind::slice_f, OrderKind::slice_r, OrderKind::local_f, OrderKind::local_r,
                                   OrderKind::local_s};

std::vector<Index> iota(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

}  // namespace

TEST_SUITE("scan-orders") {
  TEST_CASE("slice orders are the raster and its reverse") {
    CHECK(slice_forward_order(1, 2, 2).forward == std::vector<Index>{0, 1, 2, 3});
    const auto f = slice_forward_order(2, 2, 2);
    CHECK(f.forward == iota(8));
    CHECK(reverse_order(f).forward == std::vector<Index>{7, 6, 5, 4, 3, 2, 1, 0});
    CHECK(reverse_order(f).kind == OrderKind::slice_r);
  }

  TEST_CASE("window orders on small grids") {
    CHECK(local_window_order(1, 4, 4, 2, WindowVariant::within_slice).forward ==
          std::vector<Index>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
    CHECK(local_window_order(2, 4, 2, 2, WindowVariant::across_slice).forward ==
          std::vector<Index>{0, 1, 2, 3, 8, 9, 10, 11, 4, 5, 6, 7, 12, 13, 14, 15});
    CHECK(local_window_order(3, 5, 4, 1, WindowVariant::within_slice).forward == slice_forward_order(3, 5, 4).forward);
  }

  TEST_CASE("all kinds match the sort-key oracle") {
    for (Index D : {1, 2, 3, 5})
      for (Index H : {1, 2, 4, 5, 6})
        for (Index W : {1, 3, 4, 6})
          for (Index k : {1, 2, 4})
            for (OrderKind kind : kAllKinds) {
              const bool local = kind != OrderKind::slice_f && kind != OrderKind::slice_r;
              if (local && (k > H || k > W)) {
                CHECK_THROWS_AS(make_order(kind, {D, H, W}, k), ConfigError);
                continue;
              }
              const auto o = make_order(kind, {D, H, W}, k);
              INFO(to_string(kind), " ", D, "x", H, "x", W, " k=", k);
              CHECK(o.forward == oracle::order_by_sort(kind, D, H, W, k));
              for (Index s = 0; s < o.length(); ++s) CHECK(o.inverse[o.forward[s]] == s);
            }
  }

  TEST_CASE("name parsing") {
    for (OrderKind kind : kAllKinds) CHECK(parse_order_kind(to_string(kind)) == kind);
    CHECK_THROWS_AS(parse_order_kind("hilbert"), ConfigError);
    CHECK(parse_window_variant("across_slice") == WindowVariant::across_slice);
  }

  TEST_CASE("memoized orders are shared") {
    const auto a = cached_order(OrderKind::local_s, {2, 4, 4}, 2);
    const auto b = cached_order(OrderKind::local_s, {2, 4, 4}, 2);
    CHECK(a.get() == b.get());
    CHECK(a->forward == make_order(OrderKind::local_s, {2, 4, 4}, 2).forward);
  }

  TEST_CASE("apply and unapply") {
    Rng rng(1);
    const auto x = uniform_tensor<double>({3, 2, 4, 6}, 1.0, rng);
    const auto id = slice_forward_order(2, 4, 6);
    CHECK(apply_order(x, id) == x.reshaped({3, 48}));
    for (OrderKind kind : kAllKinds) {
      const auto o = make_order(kind, {2, 4, 6}, 2);
      const auto seq = apply_order(x, o);
      for (Index c = 0; c < 3; ++c)
        for (Index s = 0; s < 48; ++s) CHECK(seq[c * 48 + s] == x[c * 48 + o.forward[s]]);
      CHECK(unapply_order(seq, o) == x);
    }
  }

  TEST_CASE("gradient of apply_order is the inverse permutation") {
    Rng rng(2);
    const auto order = cached_order(OrderKind::local_s, {2, 4, 4}, 2);
    Var<double> x(uniform_tensor<double>({2, 2, 4, 4}, 1.0, rng), true);
    const auto upstream = uniform_tensor<double>({2, 32}, 1.0, rng);
    backward(weighted_sum(apply_order(x, order), upstream));
    CHECK(x.grad() == unapply_order(upstream, *order));
  }

  TEST_CASE("locality statistics") {
    const auto st = locality_stats({2, 8, 8}, 2);
    CHECK(st.max_window_spread_local == 3);
    CHECK(st.max_window_spread_raster == 9);
    CHECK(st.mean_window_spread_local < st.mean_window_spread_raster);
  }
}

TEST_SUITE("selective-scan") {
  TEST_CASE("discretization") {
    const auto A = Tensor<double>::from_values({1, 1}, {-1.0});
    const auto B = Tensor<double>::from_values({1, 1}, {0.7});
    SUBCASE("A = -1, delta = ln 2") {
      const auto [a, b] = discretize(Tensor<double>::from_values({1, 1}, {std::log(2.0)}), A, B,
                                     Tensor<double>::from_values({1, 1}, {1.0}));
      CHECK(a[0] == doctest::Approx(0.5));
      CHECK(b[0] == doctest::Approx(std::log(2.0) * 0.7));
    }
    SUBCASE("delta to zero carries the state") {
      const auto [a, b] = discretize(Tensor<double>::from_values({1, 1}, {1e-12}), A, B,
                                     Tensor<double>::from_values({1, 1}, {1.0}));
      CHECK(a[0] == doctest::Approx(1.0));
      CHECK(std::abs(b[0]) < 1e-11);
    }
    SUBCASE("zero input gives zero drive") {
      const auto [a, b] = discretize(Tensor<double>::from_values({1, 1}, {0.3}), A, B, Tensor<double>::zeros({1, 1}));
      CHECK(b[0] == 0.0);
    }
  }

  TEST_CASE("hand recurrences") {
    const auto h = scan_sequential(Tensor<double>::from_values({1, 2}, {0.5, 0.5}),
                                   Tensor<double>::from_values({1, 2}, {1.0, 2.0}));
    CHECK(h[0] == 1.0);
    CHECK(h[1] == 2.5);
    Rng rng(3);
    const auto b = uniform_tensor<double>({2, 9}, 1.0, rng);
    const auto cumsum = scan_parallel(Tensor<double>::constant({2, 9}, 1.0), b);
    for (Index r = 0; r < 2; ++r) {
      double acc = 0;
      for (Index t = 0; t < 9; ++t) CHECK(cumsum[r * 9 + t] == doctest::Approx(acc += b[r * 9 + t]));
    }
    const auto a = uniform_tensor<double>({2, 9}, 1.0, rng);
    CHECK(scan_parallel(a, Tensor<double>::zeros({2, 9})).array().abs().maxCoeff() == 0.0);
    const auto one = scan_parallel(Tensor<double>::from_values({1, 1}, {0.3}), Tensor<double>::from_values({1, 1}, {0.8}));
    CHECK(one[0] == 0.8);
  }

  TEST_CASE("both scans match the recurrence oracle") {
    for (Index L : {1, 2, 3, 7, 64, 100, 257}) {
      Rng rng(static_cast<std::uint64_t>(L));
      const Index rows = 3;
      Tensor<double> a({rows, L}), b({rows, L});
      for (Index i = 0; i < a.size(); ++i) {
        a[i] = rng.uniform(0.0, 1.0);
        b[i] = rng.uniform(-1.0, 1.0);
      }
      const auto expect = oracle::linear_recurrence(std::vector<double>(a.data(), a.data() + a.size()),
                                                    std::vector<double>(b.data(), b.data() + b.size()), rows, L);
      const auto seq = scan_sequential(a, b), par = scan_parallel(a, b);
      for (Index i = 0; i < a.size(); ++i) {
        CHECK(std::abs(seq[i] - expect[static_cast<std::size_t>(i)]) < 1e-14);
        CHECK(std::abs(par[i] - expect[static_cast<std::size_t>(i)]) < 1e-12);
      }
    }
  }

  TEST_CASE("affine composition is associative") {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
      AffineScanElement<double> x{rng.uniform(-1, 1), rng.uniform(-1, 1)}, y{rng.uniform(-1, 1), rng.uniform(-1, 1)},
          z{rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const auto l = then(then(x, y), z), r = then(x, then(y, z));
      CHECK(std::abs(l.a - r.a) < 1e-12);
      CHECK(std::abs(l.b - r.b) < 1e-12);
    }
  }

  TEST_CASE("selective scan gradients agree across algorithms") {
    Rng rng(5);
    const Index Di = 3, N = 2, L = 6;
    Var<double> u(uniform_tensor<double>({Di, L}, 1.0, rng), true);
    Var<double> delta(Tensor<double>({Di, L}, uniform_tensor<double>({Di, L}, 0.5, rng).array() + 0.6), true);
    Var<double> A(Tensor<double>({Di, N}, uniform_tensor<double>({Di, N}, 0.5, rng).array() - 1.0), true);
    Var<double> B(uniform_tensor<double>({N, L}, 1.0, rng), true), C(uniform_tensor<double>({N, L}, 1.0, rng), true);
    Var<double> D(uniform_tensor<double>({Di}, 1.0, rng), true);
    for (ScanAlgorithm algo : {ScanAlgorithm::sequential, ScanAlgorithm::parallel}) {
      CHECK(check_leaves({u, delta, A, B, C, D}, [&] { return selective_scan(u, delta, A, B, C, D, algo); }, {}, 3) <
            1e-4);
    }
  }

  TEST_CASE("mamba layer") {
    ParameterSet<double> p;
    Rng rng(6);
    MambaConfig cfg;
    cfg.d_state = 3;
    const Index C = 4, L = 9;
    const auto layer = make_mamba_layer(p, "m", C, cfg, rng);

    SUBCASE("zero input gives zero output") {
      CHECK(mamba_layer(layer, Var<double>(Tensor<double>::zeros({C, L}))).value().array().abs().maxCoeff() == 0.0);
    }

    SUBCASE("causality") {
      const auto x = uniform_tensor<double>({C, L}, 1.0, rng);
      const auto y0 = mamba_layer(layer, Var<double>(x)).value();
      for (Index t : {0, 4, 8}) {
        auto x1 = x;
        for (Index c = 0; c < C; ++c) x1[c * L + t] += 0.5;
        const auto y1 = mamba_layer(layer, Var<double>(x1)).value();
        for (Index c = 0; c < C; ++c)
          for (Index s = 0; s < L; ++s) {
            if (s < t) CHECK(y1[c * L + s] == y0[c * L + s]);
          }
        double changed = 0;
        for (Index c = 0; c < C; ++c) changed += std::abs(y1[c * L + t] - y0[c * L + t]);
        CHECK(changed > 0);
      }
    }

    SUBCASE("single position closed form") {
      const auto x = uniform_tensor<double>({C, 1}, 1.0, rng);
      const Index Di = layer.d_inner, N = layer.d_state, R = layer.dt_rank, K = layer.conv_width;
      auto val = [](const Var<double>& v) { return v.value(); };
      const auto Win = val(layer.in_proj), cw = val(layer.conv_w), cb = val(layer.conv_b), Wx = val(layer.x_proj),
                 Wdt = val(layer.dt_proj_w), bdt = val(layer.dt_proj_b), Dk = val(layer.d_skip), Wo = val(layer.out_proj);
      auto silu = [](double v) { return v / (1 + std::exp(-v)); };
      std::vector<double> u(Di), z(Di), gated(Di);
      for (Index d = 0; d < Di; ++d) {
        double xi = 0, zi = 0;
        for (Index c = 0; c < C; ++c) {
          xi += Win[d * C + c] * x[c];
          zi += Win[(Di + d) * C + c] * x[c];
        }
        u[d] = silu(cw[d * K + K - 1] * xi + cb[d]);
        z[d] = zi;
      }
      std::vector<double> dbc(R + 2 * N, 0.0);
      for (Index r = 0; r < R + 2 * N; ++r)
        for (Index d = 0; d < Di; ++d) dbc[r] += Wx[r * Di + d] * u[d];
      for (Index d = 0; d < Di; ++d) {
        double dt = bdt[d];
        for (Index r = 0; r < R; ++r) dt += Wdt[d * R + r] * dbc[r];
        const double delta = std::log1p(std::exp(dt));
        double y = Dk[d] * u[d];
        for (Index n = 0; n < N; ++n) y += dbc[R + N + n] * delta * dbc[R + n] * u[d];
        gated[d] = y * silu(z[d]);
      }
      const auto out = mamba_layer(layer, Var<double>(x)).value();
      for (Index c = 0; c < C; ++c) {
        double expect = 0;
        for (Index d = 0; d < Di; ++d) expect += Wo[c * Di + d] * gated[d];
        CHECK(out[c] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}
