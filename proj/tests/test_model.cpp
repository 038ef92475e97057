#include <doctest.h>

#include <cmath>

#include "hybridscan/fft.hpp"
#include "hybridscan/gradcheck.hpp"
#include "hybridscan/model.hpp"
#include "hybridscan/ops.hpp"

using namespace hybridscan;

namespace {

const SequenceLayer<double> kIdentity = [](const Var<double>& s) { return s; };

SLMambaConfig block_config(Index C, Index k, bool local = true) {
  SLMambaConfig cfg;
  cfg.channels = C;
  cfg.window = k;
  cfg.enable_local = local;
  cfg.mamba.d_state = 4;
  return cfg;
}

bool has_prefix(const ParameterSet<float>& p, const std::string& needle) {
  for (const auto& e : p.entries())
    if (e.name.find(needle) != std::string::npos) return true;
  return false;
}

ModelConfig small_config() {
  ModelConfig cfg = make_model_config({4, 8}, {1, 1});
  cfg.mamba.d_state = 4;
  cfg.refine_channels = 4;
  return cfg;
}

}  // namespace

TEST_SUITE("slmamba") {
  TEST_CASE("identity layers") {
    Rng rng(1);
    const auto x = uniform_tensor<double>({3, 2, 4, 4}, 1.0, rng);
    const Var<double> v(x);
    const auto two = somamba(v, kIdentity, kIdentity).value();
    for (Index i = 0; i < x.size(); ++i) CHECK(two[i] == 2 * x[i]);
    const auto three = lomamba(v, 2, kIdentity, kIdentity, kIdentity).value();
    for (Index i = 0; i < x.size(); ++i) CHECK(three[i] == doctest::Approx(3 * x[i]).epsilon(1e-15));
  }

  TEST_CASE("a window covering the slice reduces local_f to slice_f") {
    ParameterSet<double> p;
    Rng rng(2);
    MambaConfig mc;
    mc.d_state = 4;
    const auto layer = bind_layer(make_mamba_layer(p, "m", 3, mc, rng));
    const Var<double> x(uniform_tensor<double>({3, 2, 4, 4}, 1.0, rng));
    CHECK(scan_along(x, OrderKind::local_f, 4, layer).value() == scan_along(x, OrderKind::slice_f, 1, layer).value());
  }

  TEST_CASE("zero input gives zero output") {
    ParameterSet<double> p;
    Rng rng(3);
    const auto block = make_slmamba_block(p, "b", block_config(4, 2), rng);
    CHECK(slmamba_block(block, Var<double>(Tensor<double>::zeros({4, 2, 4, 4}))).value().array().abs().maxCoeff() == 0);
  }

  TEST_CASE("zero weights leave the input") {
    ParameterSet<double> p;
    Rng rng(4);
    const auto block = make_slmamba_block(p, "b", block_config(4, 2), rng);
    for (auto& e : p.entries()) {
      const bool gamma = e.name.ends_with(".gamma");
      e.var.mutable_value().array() = gamma ? 1.0 : 0.0;
    }
    const auto x = uniform_tensor<double>({4, 2, 4, 4}, 1.0, rng);
    CHECK(slmamba_block(block, Var<double>(x)).value() == x);
  }

  TEST_CASE("shape is preserved") {
    Rng rng(5);
    for (const Shape s : {Shape{2, 1, 4, 4}, Shape{4, 3, 6, 5}, Shape{3, 2, 2, 2}})
      for (Index k : {1, 2})
        for (ResidualMode mode : {ResidualMode::intermediate, ResidualMode::input}) {
          ParameterSet<double> p;
          auto cfg = block_config(s[0], k);
          cfg.residual = mode;
          const auto block = make_slmamba_block(p, "b", cfg, rng);
          CHECK(slmamba_block(block, Var<double>(uniform_tensor<double>(s, 1.0, rng))).shape() == s);
        }
  }

  TEST_CASE("disabling the local branch removes its layers") {
    ParameterSet<double> with, without;
    Rng rng(6);
    const auto a = make_slmamba_block(with, "b", block_config(4, 2, true), rng);
    const auto b = make_slmamba_block(without, "b", block_config(4, 2, false), rng);
    CHECK(a.local_f.has_value());
    CHECK_FALSE(b.local_f.has_value());
    CHECK(with.numel() > without.numel());
    for (const auto& e : without.entries()) CHECK(e.name.find(".lo_") == std::string::npos);
  }

  TEST_CASE("block gradients") {
    for (ResidualMode mode : {ResidualMode::intermediate, ResidualMode::input}) {
      ParameterSet<double> p;
      Rng rng(7);
      auto cfg = block_config(4, 2);
      cfg.residual = mode;
      const auto block = make_slmamba_block(p, "b", cfg, rng);
      Var<double> x(uniform_tensor<double>({4, 4, 4, 4}, 1.0, rng), true);
      std::vector<Var<double>> leaves{x};
      for (const auto& e : p.entries()) leaves.push_back(e.var);
      CHECK(check_leaves(leaves, [&] { return slmamba_block(block, x); }, {}, 3) < 1e-4);
    }
  }
}

TEST_SUITE("encoder-net") {
  TEST_CASE("full-width shape trace") {
    const ModelConfig cfg = make_model_config({48, 96, 192, 384}, {1, 1, 1, 1});
    SegModel<float> model(cfg, 1);
    Rng rng(1);
    ForwardTrace trace;
    NoGradGuard guard;
    const auto y = model.forward(Var<float>(uniform_tensor<float>({1, 32, 32, 32}, 1.0, rng)), &trace);
    CHECK(y.shape() == Shape{2, 32, 32, 32});
    CHECK(trace.stem_shape == Shape{48, 16, 16, 16});
    REQUIRE(trace.stage_shapes.size() == 4);
    CHECK(trace.stage_shapes[1] == Shape{96, 8, 8, 8});
    CHECK(trace.stage_shapes[3] == Shape{384, 2, 2, 2});
  }

  TEST_CASE("presets") {
    const auto full = full_model_config();
    REQUIRE(full.stages.size() == 4);
    CHECK(full.stages[3].channels == 384);
    CHECK(full.stages[0].window == 4);
    CHECK(full.stages[3].window == 1);
    CHECK(full.stages[0].fgm_mode == FilterMode::high_pass);
    CHECK(full.stages[2].fgm_mode == FilterMode::low_pass);
    CHECK(required_divisor(full) == 16);
    SegModel<float> desk(desk_model_config(), 0);
    CHECK(desk.parameter_count() < SegModel<float>(full, 0).parameter_count());
  }

  TEST_CASE("module switches") {
    const ModelConfig cfg = desk_model_config();
    SegModel<float> full(cfg, 1), m1(with_modules(cfg, true, false), 1), m2(with_modules(cfg, false, true), 1),
        base(with_modules(cfg, false, false), 1);
    CHECK(full.parameter_count() > m1.parameter_count());
    CHECK(full.parameter_count() > m2.parameter_count());
    CHECK(m1.parameter_count() > base.parameter_count());
    CHECK(m2.parameter_count() > base.parameter_count());
    CHECK_FALSE(has_prefix(m1.parameters(), ".fgm"));
    CHECK_FALSE(has_prefix(m2.parameters(), ".lo_"));
    CHECK(has_prefix(m2.parameters(), ".so_f"));
    CHECK(m1.thresholds().empty());

    Rng rng(2);
    const Var<float> x(uniform_tensor<float>({1, 16, 16, 16}, 1.0, rng));
    NoGradGuard guard;
    auto before = fft3_call_count();
    (void)m1.forward(x);
    CHECK(fft3_call_count() == before);
    before = fft3_call_count();
    (void)full.forward(x);
    CHECK(fft3_call_count() > before);
  }

  TEST_CASE("zero head gives uniform logits") {
    SegModel<float> model(desk_model_config(1, 3), 4);
    Rng rng(3);
    const auto x = uniform_tensor<float>({1, 16, 16, 16}, 1.0, rng);
    LabelVolume labels({16, 16, 16});
    const auto logits = model.forward(Var<float>(x));
    CHECK(logits.value().array().abs().maxCoeff() == 0.0f);
    CHECK(softmax_cross_entropy(logits, labels).value().item() == doctest::Approx(std::log(3.0)).epsilon(1e-6));
  }

  TEST_CASE("construction is deterministic in the seed") {
    SegModel<float> a(desk_model_config(), 9), b(desk_model_config(), 9), c(desk_model_config(), 10);
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.parameters().entries().size(); ++i) {
      same = same && a.parameters().entries()[i].var.value() == b.parameters().entries()[i].var.value();
      differs = differs || !(a.parameters().entries()[i].var.value() == c.parameters().entries()[i].var.value());
    }
    CHECK(same);
    CHECK(differs);
  }

  TEST_CASE("extents must be divisible") {
    SegModel<float> model(desk_model_config(), 0);
    try {
      (void)model.forward(Var<float>(Tensor<float>::zeros({1, 16, 20, 16})));
      FAIL("expected a UsageError");
    } catch (const UsageError& e) {
      CHECK(std::string(e.what()).find("pad by 12 to 32") != std::string::npos);
    }
    CHECK_THROWS_AS(model.forward(Var<float>(Tensor<float>::zeros({2, 16, 16, 16}))), UsageError);
  }

  TEST_CASE("invalid configurations") {
    ModelConfig cfg = desk_model_config();
    cfg.stages.clear();
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = desk_model_config();
    cfg.num_classes = 1;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = desk_model_config();
    cfg.stem_kernel = 4;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }

  TEST_CASE("thresholds are clamped") {
    SegModel<float> model(desk_model_config(), 0);
    for (auto& e : model.parameters().entries()) {
      if (e.name.ends_with(".f_low")) e.var.mutable_value()[0] = -1.0f;
      if (e.name.ends_with(".f_high")) e.var.mutable_value()[0] = 2.0f;
    }
    model.clamp_thresholds();
    for (const auto& t : model.thresholds()) {
      CHECK(t.f_low == doctest::Approx(kThresholdMin));
      CHECK(t.f_high == doctest::Approx(kThresholdMax));
    }
  }

  TEST_CASE("two-stage model gradients") {
    SegModel<double> model(small_config(), 5);
    Rng rng(5);
    for (auto& e : model.parameters().entries())
      if (e.name.starts_with("head.")) e.var.mutable_value() = uniform_tensor<double>(e.var.shape(), 0.5, rng);
    Var<double> x(uniform_tensor<double>({1, 8, 8, 8}, 1.0, rng), true);
    std::vector<Var<double>> leaves{x};
    for (const auto& e : model.parameters().entries()) leaves.push_back(e.var);
    GradcheckOptions opts;
    opts.max_elements_per_leaf = 4;
    CHECK(check_leaves(leaves, [&] { return model.forward(x); }, opts, 1) < 1e-3);
  }
}
