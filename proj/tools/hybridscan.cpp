#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "hybridscan/checkpoint.hpp"
#include "hybridscan/errors.hpp"
#include "hybridscan/gradcheck.hpp"
#include "hybridscan/run_config.hpp"
#include "hybridscan/scan_orders.hpp"
#include "hybridscan/selective_scan.hpp"
#include "hybridscan/train.hpp"
#include "hybridscan/vseg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hybridscan;

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumerical = 3, kIo = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
  std::string preset;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config; keys override the preset");
  cmd->add_option("--seed", c.seed, "master seed (default: config, else 0)");
  cmd->add_option("--threads", c.threads, "intra-op threads (default: HYBRIDSCAN_THREADS, else config, else 1)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "output directory (default: config 'out')");
  cmd->add_option("--preset", c.preset, "desk or full (default: config 'preset', else desk)")
      ->check(CLI::IsMember({"desk", "full"}));
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? preset_config(c.preset.empty() ? "desk" : c.preset)
                                   : load_run_config(c.config, c.preset);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  cfg.threads = resolve_threads(c.threads, cfg.threads);
  validate(cfg);
  set_threads(cfg.threads);
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

void prepare_out(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw IoError("cannot create " + cfg.out.string() + ": " + ec.message());
  write_json(cfg.out / "config.json", to_json(cfg));
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json report_json(const EvalReport& r) {
  json cases = json::array();
  for (const auto& c : r.cases) cases.push_back({{"case_id", c.case_id}, {"Dice", c.dice}, {"HD95", c.hd95}});
  return {{"cases", cases}, {"mean", {{"Dice", nullable(r.mean_dice)}, {"HD95", nullable(r.mean_hd95)}}}};
}

void log_epoch(const EpochRecord& r) {
  std::fprintf(stderr, "epoch %lld lr %.3g ce %.5f", static_cast<long long>(r.epoch), r.lr, r.train_ce);
  if (std::isfinite(r.val_dice)) std::fprintf(stderr, " val dice %.4f hd95 %.3f", r.val_dice, r.val_hd95);
  std::fputc('\n', stderr);
}

int cmd_gen(const Common& c) {
  const RunConfig cfg = resolve(c);
  if (!cfg.data_dir.empty()) throw ConfigError("gen writes synthetic data; data.dir must be empty");
  prepare_out(cfg);
  const auto cases = load_data(cfg);
  write_dataset(cfg.out, cases);
  std::cout << json{{"cases", cases.size()}, {"dir", cfg.out.string()}}.dump() << "\n";
  return kOk;
}

int cmd_train(const Common& c) {
  const RunConfig cfg = resolve(c);
  prepare_out(cfg);
  const auto data = load_data(cfg);
  SegModel<float> model(cfg.model, cfg.model_seed());
  std::fprintf(stderr, "%zu cases, %lld parameters\n", data.size(), static_cast<long long>(model.parameter_count()));
  TrainHooks hooks{cfg.out, to_json(cfg).dump(), log_epoch};
  const TrainResult r = train(model, data, cfg.train_config(), hooks);
  std::cout << json{{"test", {{"Dice", nullable(r.test.mean_dice)}, {"HD95", nullable(r.test.mean_hd95)}}},
                    {"checkpoint", (cfg.out / "model.hsck").string()},
                    {"seconds", r.seconds}}
                   .dump()
            << "\n";
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& data_dir, const Common& c) {
  json meta;
  try {
    meta = json::parse(read_checkpoint_metadata(checkpoint));
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + checkpoint + " has no usable config metadata: " + e.what());
  }
  const std::string preset = meta.value("preset", "desk");
  RunConfig cfg = apply_json(preset_config(preset), meta);
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  cfg.out = c.out.empty() ? fs::path(checkpoint).parent_path() : fs::path(c.out);
  if (cfg.out.empty()) cfg.out = ".";
  cfg.threads = resolve_threads(c.threads, cfg.threads);
  set_threads(cfg.threads);

  SegModel<float> model(cfg.model, cfg.model_seed());
  load_checkpoint(checkpoint, model.parameters());
  const auto data = load_data(cfg);
  const TrainConfig tc = cfg.train_config();
  const DataSplit s = split_cases(static_cast<Index>(data.size()), tc.train_fraction, tc.val_fraction, tc.seed);
  std::vector<Index> ids;
  if (split == "train") ids = s.train;
  if (split == "val") ids = s.val;
  if (split == "test") ids = s.test;
  if (split == "all") {
    for (Index i = 0; i < static_cast<Index>(data.size()); ++i) ids.push_back(i);
  }
  ForwardTrace gates;
  const EvalReport r = evaluate(model, data, ids, &gates);

  json stages = json::array();
  const auto th = model.thresholds();
  for (std::size_t i = 0; i < cfg.model.stages.size(); ++i) {
    json st = {{"stage", i}, {"mean_gate", nullable(gates.mean_gate.at(i))}};
    for (const auto& t : th) {
      if (static_cast<std::size_t>(t.stage) == i) {
        st["f_low"] = t.f_low;
        st["f_high"] = t.f_high;
      }
    }
    stages.push_back(st);
  }
  json report = report_json(r);
  report["split"] = split;
  report["checkpoint"] = checkpoint;
  report["fgm"] = stages;
  fs::create_directories(cfg.out);
  write_json(cfg.out / "eval.json", report);
  std::cout << report["mean"].dump() << "\n";
  return kOk;
}

int cmd_gradcheck(const Common& c, double tolerance) {
  const RunConfig cfg = resolve(c);
  GradcheckOptions opts;
  opts.tolerance = tolerance;
  json rows = json::array();
  bool ok = true;
  const auto results = run_gradcheck_suite(opts, [&](const GradcheckResult& r) {
    std::printf("%-40s max_rel_err %.3e  %s\n", r.name.c_str(), r.max_rel_error, r.passed ? "ok" : "FAIL");
    std::fflush(stdout);
  });
  for (const auto& r : results) {
    ok = ok && r.passed;
    rows.push_back({{"name", r.name}, {"max_rel_error", r.max_rel_error}, {"checked", r.checked}, {"passed", r.passed}});
  }
  std::printf("%zu checks, %s\n", results.size(), ok ? "all passed" : "FAILURES");
  if (!c.out.empty()) {
    prepare_out(cfg);
    write_json(cfg.out / "gradcheck.json", {{"tolerance", tolerance}, {"results", rows}, {"passed", ok}});
  }
  return ok ? kOk : kNumerical;
}

template <typename F>
double seconds_per_call(F&& f, double budget) {
  using clock = std::chrono::steady_clock;
  f();
  Index reps = 0;
  const auto t0 = clock::now();
  double elapsed = 0;
  do {
    f();
    ++reps;
    elapsed = std::chrono::duration<double>(clock::now() - t0).count();
  } while (elapsed < budget);
  return elapsed / static_cast<double>(reps);
}

int cmd_bench(const Common& c, const std::vector<Index>& lengths, Index rows, double budget) {
  const RunConfig cfg = resolve(c);
  Rng rng(cfg.seed);
  json out = json::array();
  std::printf("%10s %16s %16s\n", "length", "sequential el/s", "parallel el/s");
  for (Index L : lengths) {
    if (L < 1) throw ConfigError("bench lengths must be positive");
    Tensor<float> a({rows, L}), b({rows, L});
    for (Index i = 0; i < a.size(); ++i) {
      a[i] = static_cast<float>(rng.uniform(0.5, 1.0));
      b[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    const double n = static_cast<double>(rows * L);
    const double seq = n / seconds_per_call([&] { return scan_sequential(a, b); }, budget);
    const double par = n / seconds_per_call([&] { return scan_parallel(a, b); }, budget);
    std::printf("%10lld %16.4g %16.4g\n", static_cast<long long>(L), seq, par);
    out.push_back({{"length", L}, {"rows", rows}, {"sequential_elements_per_second", seq},
                   {"parallel_elements_per_second", par}});
  }
  if (!c.out.empty()) {
    prepare_out(cfg);
    write_json(cfg.out / "bench.json", {{"threads", cfg.threads}, {"results", out}});
  }
  return kOk;
}

int cmd_orders(const Common& c, const std::vector<Index>& dims, Index k, const std::string& kind_name,
               const std::string& variant) {
  const RunConfig cfg = resolve(c);
  OrderKind kind = OrderKind::local_f;
  if (!kind_name.empty()) kind = parse_order_kind(kind_name);
  if (!variant.empty()) {
    const OrderKind implied =
        parse_window_variant(variant) == WindowVariant::within_slice ? OrderKind::local_f : OrderKind::local_s;
    if (!kind_name.empty() && kind != implied) {
      throw ConfigError("--kind " + kind_name + " conflicts with --variant " + variant);
    }
    kind = implied;
  }
  const Dims3 d{dims[0], dims[1], dims[2]};
  const ScanOrder o = make_order(kind, d, k);
  const LocalityStats st = locality_stats(d, k);
  json j = {{"dims", dims},
            {"k", k},
            {"kind", to_string(kind)},
            {"forward", o.forward},
            {"inverse", o.inverse},
            {"locality",
             {{"max_window_spread_local", st.max_window_spread_local},
              {"max_window_spread_raster", st.max_window_spread_raster},
              {"mean_window_spread_local", st.mean_window_spread_local},
              {"mean_window_spread_raster", st.mean_window_spread_raster},
              {"mean_neighbor_distance_local", st.mean_neighbor_distance_local},
              {"mean_neighbor_distance_raster", st.mean_neighbor_distance_raster}}}};
  std::cout << j.dump() << "\n";
  if (!c.out.empty()) {
    prepare_out(cfg);
    write_json(cfg.out / "orders.json", j);
  }
  return kOk;
}

int cmd_ablate(const Common& c) {
  const RunConfig cfg = resolve(c);
  prepare_out(cfg);
  const auto data = load_data(cfg);
  TrainHooks hooks{cfg.out, to_json(cfg).dump(), log_epoch};
  const auto rows = ablate(cfg.model, data, cfg.train_config(), cfg.model_seed(), hooks, [](const AblationRow& r) {
    std::fprintf(stderr, "%s: Dice %.4f HD95 %.3f\n", r.name.c_str(), r.test.mean_dice, r.test.mean_hd95);
  });
  std::printf("%-9s %-9s %-5s %8s %8s %11s\n", "method", "S-LMamba", "FGM", "Dice", "HD95", "parameters");
  for (const auto& r : rows) {
    std::printf("%-9s %-9s %-5s %8.4f %8.3f %11lld\n", r.name.c_str(), r.slmamba_local ? "yes" : "no",
                r.fgm ? "yes" : "no", r.test.mean_dice, r.test.mean_hd95, static_cast<long long>(r.parameters));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice/local-window selective scans and FFT gating for 3D segmentation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common common;
  std::string checkpoint, split = "test", data_dir;
  double tolerance = GradcheckOptions{}.tolerance;
  std::vector<Index> lengths{256, 4096, 65536};
  Index bench_rows = 64;
  double budget = 0.5;
  std::vector<Index> dims;
  Index k = 2;
  std::string kind, variant;

  auto* gen = app.add_subcommand("gen", "write a synthetic .vseg dataset to --out");
  auto* train_cmd = app.add_subcommand("train", "train a model; writes model.hsck, curves.csv, report.json");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes eval.json");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite in double precision");
  auto* bench = app.add_subcommand("bench", "sequential vs parallel scan throughput");
  auto* orders = app.add_subcommand("orders", "dump a scan order and locality statistics as JSON");
  auto* abl = app.add_subcommand("ablate", "train the four S-LMamba/FGM combinations; writes ablation.json/csv");
  for (auto* cmd : {gen, train_cmd, grad, bench, orders, abl}) add_common(cmd, common);

  eval->add_option("--checkpoint", checkpoint, "model.hsck written by train")->required();
  eval->add_option("--split", split, "cases to evaluate")->check(CLI::IsMember({"train", "val", "test", "all"}))
      ->capture_default_str();
  eval->add_option("--data-dir", data_dir, "read cases from this vseg dataset instead of the training data");
  eval->add_option("--out", common.out, "output directory (default: the checkpoint's directory)");
  eval->add_option("--threads", common.threads, "intra-op threads")->check(CLI::PositiveNumber);

  grad->add_option("--tolerance", tolerance, "max relative error")->capture_default_str();
  bench->add_option("--lengths", lengths, "sequence lengths")->delimiter(',')->capture_default_str();
  bench->add_option("--rows", bench_rows, "independent rows per scan")->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench->add_option("--seconds", budget, "timing budget per measurement")->capture_default_str();
  orders->add_option("--dims", dims, "D,H,W")->delimiter(',')->expected(3)->required();
  orders->add_option("--k", k, "window edge")->check(CLI::PositiveNumber)->capture_default_str();
  orders->add_option("--kind", kind, "slice_f, slice_r, local_f, local_r or local_s (default local_f)");
  orders->add_option("--variant", variant, "within_slice (local_f) or across_slice (local_s)")
      ->check(CLI::IsMember({"within_slice", "across_slice"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen(common);
    if (*train_cmd) return cmd_train(common);
    if (*eval) return cmd_eval(checkpoint, split, data_dir, common);
    if (*grad) return cmd_gradcheck(common, tolerance);
    if (*bench) return cmd_bench(common, lengths, bench_rows, budget);
    if (*orders) return cmd_orders(common, dims, k, kind, variant);
    if (*abl) return cmd_ablate(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  }
  return kConfig;
}
