#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "hybridscan/checkpoint.hpp"
#include "hybridscan/run_config.hpp"
#include "hybridscan/train.hpp"

using namespace hybridscan;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hybridscan_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig tiny_model() {
  ModelConfig cfg = make_model_config({4, 8}, {1, 1});
  cfg.mamba.d_state = 4;
  cfg.refine_channels = 4;
  return cfg;
}

std::vector<VolumeSample> tiny_data(Index n) {
  SyntheticSpec spec;
  spec.size = 16;
  spec.radius_min = 2;
  spec.radius_max = 4;
  return generate_dataset(spec, n, 5);
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.lr0 = 0.5;
  t.epochs = 2;
  t.crop_size = 16;
  t.seed = 3;
  return t;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("poly schedule boundaries") {
    CHECK(poly_lr(1e-4, 0, 200, 0.9) == 1e-4);
    CHECK(poly_lr(1e-4, 200, 200, 0.9) == 0.0);
    CHECK(poly_lr(1.0, 100, 200, 0.9) == doctest::Approx(std::pow(0.5, 0.9)));
    CHECK_THROWS_AS(poly_lr(1.0, 201, 200, 0.9), UsageError);
    CHECK_THROWS_AS(poly_lr(1.0, -1, 200, 0.9), UsageError);
  }

  TEST_CASE("split is a disjoint cover") {
    const auto s = split_cases(60, 0.7, 0.1, 9);
    CHECK(s.train.size() == 42);
    CHECK(s.val.size() == 6);
    CHECK(s.test.size() == 12);
    std::set<Index> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 60);
    CHECK(*all.rbegin() == 59);
    const auto again = split_cases(60, 0.7, 0.1, 9);
    CHECK(again.test == s.test);
    CHECK_FALSE(split_cases(60, 0.7, 0.1, 10).test == s.test);
  }

  TEST_CASE("sgd with momentum and weight decay") {
    ParameterSet<float> p;
    Var<float> w = p.add("w", Tensor<float>::from_values({2}, {1.0f, -2.0f}));
    Sgd opt(0.5, 0.1);
    w.node()->grad = Tensor<float>::from_values({2}, {0.5f, 0.25f});
    opt.step(p, 0.1);
    // v = g + wd w = (0.6, 0.05); w -= 0.1 v
    CHECK(w.value()[0] == doctest::Approx(0.94));
    CHECK(w.value()[1] == doctest::Approx(-2.005));
    w.node()->grad = Tensor<float>::from_values({2}, {0.0f, 0.0f});
    opt.step(p, 0.1);
    // v = 0.5 v + wd w
    CHECK(w.value()[0] == doctest::Approx(0.94 - 0.1 * (0.3 + 0.094)));
  }

  TEST_CASE("augmentation keeps image and label aligned") {
    auto data = tiny_data(1);
    VolumeSample s = data[0];
    s.image = Tensor<float>(s.image.shape(), s.label.array().cast<float>());
    TrainConfig cfg = tiny_train();
    cfg.brightness = cfg.gamma = false;
    Rng rng(1);
    for (int i = 0; i < 10; ++i) {
      const auto a = augment(s, cfg, rng);
      for (Index v = 0; v < a.label.size(); ++v) CHECK(a.image[v] == static_cast<float>(a.label[v]));
    }
    cfg.crop_size = 8;
    const auto c = augment(s, cfg, rng);
    CHECK(c.image.shape() == Shape{1, 8, 8, 8});
    CHECK(c.label.shape() == Shape{8, 8, 8});
  }

  TEST_CASE("first loss is ln K with the zero head") {
    SegModel<float> model(tiny_model(), 1);
    const auto data = tiny_data(1);
    CHECK(accumulate_sample(model, data[0], 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }

  TEST_CASE("overfit reduces the loss") {
    SegModel<float> model(tiny_model(), 2);
    TrainConfig cfg = tiny_train();
    const auto losses = overfit(model, tiny_data(1), cfg, 30);
    REQUIRE(losses.size() == 30);
    CHECK(losses.back() < 0.5 * losses.front());
  }

  TEST_CASE("training writes its outputs and is deterministic") {
    const auto data = tiny_data(6);
    const fs::path a = scratch("train_a"), b = scratch("train_b");
    SegModel<float> ma(tiny_model(), 4), mb(tiny_model(), 4);
    const auto ra = train(ma, data, tiny_train(), {a, "{}", {}});
    const auto rb = train(mb, data, tiny_train(), {b, "{}", {}});
    for (const char* f : {"model.hsck", "curves.csv", "report.json"}) CHECK(fs::exists(a / f));
    CHECK(slurp(a / "model.hsck") == slurp(b / "model.hsck"));
    CHECK(slurp(a / "curves.csv") == slurp(b / "curves.csv"));
    REQUIRE(ra.curve.size() == 2);
    CHECK(ra.curve[0].train_ce == rb.curve[0].train_ce);
    CHECK(ra.split.test.size() + ra.split.val.size() + ra.split.train.size() == 6);
    const json report = json::parse(slurp(a / "report.json"));
    CHECK(report["test"]["mean"].contains("Dice"));
    CHECK(report["test"]["mean"].contains("HD95"));
    CHECK(report["thresholds"].size() == 2);
  }

  TEST_CASE("non-finite loss restores the last good parameters") {
    const auto data = tiny_data(6);
    const fs::path dir = scratch("train_nan");
    SegModel<float> model(tiny_model(), 4);
    TrainConfig cfg = tiny_train();
    cfg.lr0 = 1e30;
    cfg.epochs = 3;
    CHECK_THROWS_AS(train(model, data, cfg, {dir, "{}", {}}), NumericalError);
    CHECK(fs::exists(dir / "last_good.hsck"));
    for (const auto& e : model.parameters().entries()) CHECK(e.var.value().array().isFinite().all());
  }

  TEST_CASE("ablation rows") {
    const auto data = tiny_data(6);
    TrainConfig cfg = tiny_train();
    cfg.epochs = 1;
    const fs::path dir = scratch("ablate");
    const auto rows = ablate(tiny_model(), data, cfg, 7, {dir, "{}", {}});
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].name == "baseline");
    CHECK(rows[3].name == "full");
    CHECK_FALSE(rows[0].slmamba_local);
    CHECK(rows[3].fgm);
    for (int i = 0; i < 3; ++i) CHECK(rows[3].parameters > rows[static_cast<std::size_t>(i)].parameters);
    const json table = json::parse(slurp(dir / "ablation.json"));
    REQUIRE(table["rows"].size() == 4);
    for (const auto& r : table["rows"]) {
      CHECK(r.contains("Dice"));
      CHECK(r.contains("HD95"));
      CHECK(r.contains("S-LMamba"));
      CHECK(r.contains("FGM"));
    }
    CHECK(fs::exists(dir / "ablation.csv"));
    CHECK(fs::exists(dir / "M1" / "model.hsck"));
  }
}

TEST_SUITE("run-config") {
  TEST_CASE("presets") {
    const auto desk = preset_config("desk");
    CHECK(desk.train.epochs == 200);
    CHECK(desk.train.batch_size == 2);
    CHECK(desk.num_cases == 60);
    CHECK(desk.data.size == 32);
    CHECK(preset_config("full").model.stages[0].channels == 48);
    CHECK_THROWS_AS(preset_config("huge"), ConfigError);
  }

  TEST_CASE("json roundtrip is exact") {
    RunConfig c = preset_config("desk");
    c.seed = 77;
    c.train.lr0 = 0.3;
    c.data.spacing = {1, 2, 3};
    const json j = to_json(c);
    CHECK(to_json(apply_json(preset_config("desk"), j)) == j);
  }

  TEST_CASE("overlays") {
    const RunConfig c = apply_json(preset_config("desk"),
                                   json::parse(R"({"seed": 5, "train": {"epochs": 3}, "model": {"channels": [4, 8]}})"));
    CHECK(c.seed == 5);
    CHECK(c.train.epochs == 3);
    REQUIRE(c.model.stages.size() == 2);
    CHECK(c.model.stages[1].channels == 8);
    CHECK(c.model.stages[1].window == 2);
  }

  TEST_CASE("errors") {
    const auto base = preset_config("desk");
    CHECK_THROWS_AS(apply_json(base, json::parse(R"({"sead": 1})")), ConfigError);
    CHECK_THROWS_AS(apply_json(base, json::parse(R"({"train": {"lr": 1}})")), ConfigError);
    CHECK_THROWS_AS(apply_json(base, json::parse(R"({"train": {"epochs": "many"}})")), ConfigError);
    CHECK_THROWS_AS(apply_json(base, json::parse(R"({"model": {"channels": [4, 8], "blocks": [1]}})")), ConfigError);
    CHECK_THROWS_AS(apply_json(base, json::parse(R"({"train": {"crop_size": 24}})")), ConfigError);
    CHECK_THROWS_AS(apply_json(base, json::parse(R"({"preset": "full"})")), ConfigError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/run.json"), IoError);
    const fs::path bad = fs::temp_directory_path() / "hybridscan_test_bad.json";
    std::ofstream(bad) << "{not json";
    CHECK_THROWS_AS(load_run_config(bad), ConfigError);
  }

  TEST_CASE("derived seeds differ") {
    RunConfig c;
    c.seed = 1;
    CHECK(c.data_seed() != c.model_seed());
    CHECK(c.model_seed() != c.train_seed());
    CHECK(c.train_config().seed == c.train_seed());
  }

  TEST_CASE("thread resolution") {
    CHECK(resolve_threads(3, 1) == 3);
    ::setenv("HYBRIDSCAN_THREADS", "2", 1);
    CHECK(resolve_threads(0, 1) == 2);
    ::setenv("HYBRIDSCAN_THREADS", "two", 1);
    CHECK_THROWS_AS(resolve_threads(0, 1), ConfigError);
    ::unsetenv("HYBRIDSCAN_THREADS");
    CHECK(resolve_threads(0, 1) == 1);
  }
}
