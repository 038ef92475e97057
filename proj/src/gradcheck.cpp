#include "hybridscan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hybridscan/fgm.hpp"
#include "hybridscan/model.hpp"
#include "hybridscan/ops.hpp"
#include "hybridscan/scan_orders.hpp"
#include "hybridscan/selective_scan.hpp"
#include "hybridscan/slmamba.hpp"

namespace hybridscan {

double gradient_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  if (analytic.size() != numeric.size()) throw UsageError("gradient_relative_error: length mismatch");
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), kGradientNormFloor});
}

double check_leaves(const std::vector<Var<double>>& leaves, const std::function<Var<double>()>& f,
                    const GradcheckOptions& opts, std::uint64_t seed, Index* evaluations) {
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + 17);
  for (Var<double> leaf : leaves) leaf.zero_grad();
  const Var<double> out = f();
  const Tensor<double> proj = uniform_tensor<double>(out.shape(), 1.0, rng);
  backward(weighted_sum(out, proj));

  auto objective = [&] {
    NoGradGuard guard;
    return (f().value().array() * proj.array()).sum();
  };

  double worst = 0;
  Index evals = 0;
  for (Var<double> leaf : leaves) {
    const Index n = leaf.size();
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (n > opts.max_elements_per_leaf) {
      for (Index i = 0; i < opts.max_elements_per_leaf; ++i) {
        const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      }
      idx.resize(static_cast<std::size_t>(opts.max_elements_per_leaf));
    }
    std::vector<double> analytic, numeric;
    for (Index i : idx) {
      analytic.push_back(leaf.has_grad() ? leaf.grad()[i] : 0.0);
      double& v = leaf.mutable_value()[i];
      const double saved = v;
      auto at = [&](double offset) {
        v = saved + offset;
        return objective();
      };
      const double h = opts.step;
      const double d = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      v = saved;
      numeric.push_back(d);
      evals += 4;
    }
    worst = std::max(worst, gradient_relative_error(analytic, numeric));
  }
  for (Var<double> leaf : leaves) leaf.zero_grad();
  if (evaluations) *evaluations += evals;
  return worst;
}

namespace {

struct Problem {
  std::vector<Var<double>> leaves;
  std::function<Var<double>()> f;
};

struct Case {
  std::string name;
  std::function<Problem(Rng&)> build;
};

Var<double> leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return Var<double>(std::move(t), true);
}

std::vector<Var<double>> all_parameters(const ParameterSet<double>& ps) {
  std::vector<Var<double>> out;
  for (const auto& p : ps.entries()) out.push_back(p.var);
  return out;
}

Problem unary(Rng& rng, Var<double> (*op)(const Var<double>&)) {
  Var<double> a = leaf(rng, {3, 4});
  return {{a}, [a, op] { return op(a); }};
}

Problem binary(Rng& rng, Var<double> (*op)(const Var<double>&, const Var<double>&)) {
  Var<double> a = leaf(rng, {3, 4}), b = leaf(rng, {3, 4});
  return {{a, b}, [a, b, op] { return op(a, b); }};
}

Problem conv_case(Rng& rng, Index cin, Index cout, Index k, Index stride, Index size) {
  Var<double> x = leaf(rng, {cin, size, size, size});
  Var<double> w = leaf(rng, {cout, cin, k, k, k});
  Var<double> b = leaf(rng, {cout});
  const Index pad = (k - 1) / 2;
  return {{x, w, b}, [=] { return conv3d(x, w, b, stride, pad); }};
}

Problem order_case(Rng& rng, OrderKind kind, bool inverse) {
  const Dims3 dims{3, 5, 4};
  auto order = cached_order(kind, dims, 2);
  if (inverse) {
    Var<double> s = leaf(rng, {2, order->length()});
    return {{s}, [s, order] { return unapply_order(s, order); }};
  }
  Var<double> x = leaf(rng, {2, 3, 5, 4});
  return {{x}, [x, order] { return apply_order(x, order); }};
}

Problem scan_case(Rng& rng, ScanAlgorithm algo) {
  const Index Di = 3, N = 4, L = 9;
  Var<double> u = leaf(rng, {Di, L});
  Var<double> delta = leaf(rng, {Di, L}, 0.05, 1.0);
  Var<double> A = leaf(rng, {Di, N}, -1.0, -0.05);
  Var<double> B = leaf(rng, {N, L});
  Var<double> C = leaf(rng, {N, L});
  Var<double> D = leaf(rng, {Di});
  return {{u, delta, A, B, C, D}, [=] { return selective_scan(u, delta, A, B, C, D, algo); }};
}

MambaConfig small_mamba() {
  MambaConfig m;
  m.d_state = 4;
  return m;
}

Problem mamba_case(Rng& rng, ScanAlgorithm algo) {
  auto ps = std::make_shared<ParameterSet<double>>();
  MambaConfig cfg = small_mamba();
  cfg.scan = algo;
  auto layer = std::make_shared<MambaLayer<double>>(make_mamba_layer(*ps, "m", 4, cfg, rng));
  Var<double> x = leaf(rng, {4, 10});
  auto leaves = all_parameters(*ps);
  leaves.push_back(x);
  return {leaves, [ps, layer, x] { return mamba_layer(*layer, x); }};
}

Problem fft_case(Rng& rng, FilterMode mode) {
  Var<double> x = leaf(rng, {2, 4, 5, 3});
  Var<double> lo(Tensor<double>::scalar(0.4), true);
  Var<double> hi(Tensor<double>::scalar(0.5), true);
  return {{x, mode == FilterMode::low_pass ? lo : hi},
          [=] { return fft_filter(x, lo, hi, mode, 0.1); }};
}

Problem block_case(Rng& rng, ResidualMode residual, bool local) {
  auto ps = std::make_shared<ParameterSet<double>>();
  SLMambaConfig cfg;
  cfg.channels = 4;
  cfg.window = 2;
  cfg.enable_local = local;
  cfg.residual = residual;
  cfg.mamba = small_mamba();
  auto block = std::make_shared<SLMambaBlock<double>>(make_slmamba_block(*ps, "b", cfg, rng));
  Var<double> x = leaf(rng, {4, 4, 4, 4});
  auto leaves = all_parameters(*ps);
  leaves.push_back(x);
  return {leaves, [ps, block, x] { return slmamba_block(*block, x); }};
}

Problem fgm_case(Rng& rng, FilterMode mode) {
  auto ps = std::make_shared<ParameterSet<double>>();
  FgmConfig cfg;
  cfg.channels = 3;
  cfg.mode = mode;
  auto fgm = std::make_shared<FgmParams<double>>(make_fgm(*ps, "f", cfg, rng));
  // Move the thresholds off the init so both masks carry appreciable slope on a 4^3 grid.
  fgm->f_low.mutable_value()[0] = 0.45;
  fgm->f_high.mutable_value()[0] = 0.55;
  Var<double> x = leaf(rng, {3, 4, 4, 4});
  auto leaves = all_parameters(*ps);
  leaves.push_back(x);
  return {leaves, [ps, fgm, x] { return fgm_forward(*fgm, x); }};
}

Problem model_case(Rng& rng) {
  ModelConfig cfg = make_model_config({4, 8}, {1, 1});
  cfg.refine_channels = 4;
  cfg.mamba = small_mamba();
  auto model = std::make_shared<SegModel<double>>(cfg, rng.next());
  // The head starts at zero, which would zero every upstream gradient.
  for (const char* name : {"head.weight", "head.bias"}) {
    Var<double> p = model->parameters().at(name);
    p.mutable_value() = uniform_tensor<double>(p.shape(), 0.5, rng);
  }
  Var<double> x = leaf(rng, {1, 8, 8, 8});
  LabelVolume labels({8, 8, 8});
  for (Index i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int32_t>(rng.below(2));
  auto leaves = all_parameters(model->parameters());
  leaves.push_back(x);
  return {leaves, [model, x, labels] { return softmax_cross_entropy(model->forward(x), labels); }};
}

std::vector<Case> suite() {
  std::vector<Case> cases;
  cases.push_back({"add", [](Rng& r) { return binary(r, add<double>); }});
  cases.push_back({"sub", [](Rng& r) { return binary(r, sub<double>); }});
  cases.push_back({"mul", [](Rng& r) { return binary(r, mul<double>); }});
  cases.push_back({"scale", [](Rng& r) {
                     Var<double> a = leaf(r, {3, 4});
                     return Problem{{a}, [a] { return scale(a, 0.7); }};
                   }});
  cases.push_back({"one_minus", [](Rng& r) { return unary(r, one_minus<double>); }});
  cases.push_back({"neg", [](Rng& r) { return unary(r, neg<double>); }});
  cases.push_back({"exp", [](Rng& r) { return unary(r, exp<double>); }});
  cases.push_back({"sigmoid", [](Rng& r) { return unary(r, sigmoid<double>); }});
  cases.push_back({"silu", [](Rng& r) { return unary(r, silu<double>); }});
  cases.push_back({"softplus", [](Rng& r) { return unary(r, softplus<double>); }});
  cases.push_back({"sum", [](Rng& r) { return unary(r, sum<double>); }});
  cases.push_back({"mean", [](Rng& r) { return unary(r, mean<double>); }});
  cases.push_back({"weighted_sum", [](Rng& r) {
                     Var<double> a = leaf(r, {3, 4});
                     Tensor<double> w = uniform_tensor<double>({3, 4}, 1.0, r);
                     return Problem{{a}, [a, w] { return weighted_sum(a, w); }};
                   }});
  cases.push_back({"reshape", [](Rng& r) {
                     Var<double> a = leaf(r, {3, 4});
                     return Problem{{a}, [a] { return reshape(a, Shape{2, 6}); }};
                   }});
  cases.push_back({"mul_broadcast_channels", [](Rng& r) {
                     Var<double> x = leaf(r, {3, 2, 2, 2}), g = leaf(r, {1, 2, 2, 2});
                     return Problem{{x, g}, [x, g] { return mul_broadcast_channels(x, g); }};
                   }});
  cases.push_back({"linear", [](Rng& r) {
                     Var<double> x = leaf(r, {3, 5}), w = leaf(r, {4, 3}), b = leaf(r, {4});
                     return Problem{{x, w, b}, [=] { return linear(x, w, b); }};
                   }});
  cases.push_back({"linear_nobias", [](Rng& r) {
                     Var<double> x = leaf(r, {3, 5}), w = leaf(r, {4, 3});
                     return Problem{{x, w}, [=] { return linear(x, w); }};
                   }});
  cases.push_back({"conv3d_k3_s1", [](Rng& r) { return conv_case(r, 2, 3, 3, 1, 4); }});
  cases.push_back({"conv3d_k3_s2", [](Rng& r) { return conv_case(r, 2, 3, 3, 2, 5); }});
  cases.push_back({"conv3d_k7_s2", [](Rng& r) { return conv_case(r, 1, 2, 7, 2, 6); }});
  cases.push_back({"conv3d_k1", [](Rng& r) { return conv_case(r, 3, 2, 1, 1, 3); }});
  cases.push_back({"layer_norm", [](Rng& r) {
                     Var<double> x = leaf(r, {4, 2, 3, 2}), g = leaf(r, {4}), b = leaf(r, {4});
                     return Problem{{x, g, b}, [=] { return layer_norm(x, g, b); }};
                   }});
  cases.push_back({"instance_norm", [](Rng& r) {
                     Var<double> x = leaf(r, {3, 2, 3, 2}), g = leaf(r, {3}), b = leaf(r, {3});
                     return Problem{{x, g, b}, [=] { return instance_norm(x, g, b); }};
                   }});
  cases.push_back({"concat_channels", [](Rng& r) {
                     Var<double> a = leaf(r, {2, 3, 2}), b = leaf(r, {1, 3, 2});
                     return Problem{{a, b}, [=] { return concat_channels<double>({a, b}); }};
                   }});
  cases.push_back({"slice_channels", [](Rng& r) {
                     Var<double> a = leaf(r, {4, 3, 2});
                     return Problem{{a}, [=] { return slice_channels(a, 1, 2); }};
                   }});
  cases.push_back({"causal_conv1d", [](Rng& r) {
                     Var<double> x = leaf(r, {3, 7}), w = leaf(r, {3, 4}), b = leaf(r, {3});
                     return Problem{{x, w, b}, [=] { return causal_conv1d(x, w, b); }};
                   }});
  cases.push_back({"upsample_nearest2", [](Rng& r) {
                     Var<double> x = leaf(r, {2, 2, 3, 2});
                     return Problem{{x}, [=] { return upsample_nearest2(x); }};
                   }});
  cases.push_back({"softmax_cross_entropy", [](Rng& r) {
                     Var<double> z = leaf(r, {3, 2, 2, 3});
                     LabelVolume labels({2, 2, 3});
                     for (Index i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int32_t>(r.below(3));
                     return Problem{{z}, [z, labels] { return softmax_cross_entropy(z, labels); }};
                   }});
  for (OrderKind kind : {OrderKind::slice_f, OrderKind::slice_r, OrderKind::local_f, OrderKind::local_r,
                         OrderKind::local_s}) {
    cases.push_back({"apply_order_" + to_string(kind), [kind](Rng& r) { return order_case(r, kind, false); }});
    cases.push_back({"unapply_order_" + to_string(kind), [kind](Rng& r) { return order_case(r, kind, true); }});
  }
  cases.push_back({"selective_scan_sequential", [](Rng& r) { return scan_case(r, ScanAlgorithm::sequential); }});
  cases.push_back({"selective_scan_parallel", [](Rng& r) { return scan_case(r, ScanAlgorithm::parallel); }});
  cases.push_back({"mamba_layer", [](Rng& r) { return mamba_case(r, ScanAlgorithm::sequential); }});
  cases.push_back({"mamba_layer_parallel", [](Rng& r) { return mamba_case(r, ScanAlgorithm::parallel); }});
  cases.push_back({"fft_filter_low_pass", [](Rng& r) { return fft_case(r, FilterMode::low_pass); }});
  cases.push_back({"fft_filter_high_pass", [](Rng& r) { return fft_case(r, FilterMode::high_pass); }});
  cases.push_back({"slmamba_block", [](Rng& r) { return block_case(r, ResidualMode::intermediate, true); }});
  cases.push_back({"slmamba_block_input_residual", [](Rng& r) { return block_case(r, ResidualMode::input, true); }});
  cases.push_back({"slmamba_block_no_local", [](Rng& r) { return block_case(r, ResidualMode::intermediate, false); }});
  cases.push_back({"fgm_high_pass", [](Rng& r) { return fgm_case(r, FilterMode::high_pass); }});
  cases.push_back({"fgm_low_pass", [](Rng& r) { return fgm_case(r, FilterMode::low_pass); }});
  cases.push_back({"model_2stage_8cube", [](Rng& r) { return model_case(r); }});
  return cases;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts,
                                                 const std::function<void(const GradcheckResult&)>& on_result) {
  std::vector<GradcheckResult> results;
  for (const Case& c : suite()) {
    GradcheckResult res;
    res.name = c.name;
    for (std::uint64_t seed : opts.seeds) {
      Rng rng(seed);
      Problem p = c.build(rng);
      res.max_rel_error = std::max(res.max_rel_error, check_leaves(p.leaves, p.f, opts, seed, &res.checked));
    }
    res.passed = res.max_rel_error < opts.tolerance && std::isfinite(res.max_rel_error);
    if (on_result) on_result(res);
    results.push_back(res);
  }
  return results;
}

}  // namespace hybridscan
