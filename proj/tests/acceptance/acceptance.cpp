// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hybridscan/fft.hpp"
#include "hybridscan/fgm.hpp"
#include "hybridscan/gradcheck.hpp"
#include "hybridscan/run_config.hpp"
#include "hybridscan/scan_orders.hpp"
#include "hybridscan/selective_scan.hpp"
#include "oracles.hpp"

using namespace hybridscan;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- scans

Outcome scan_equivalence() {
  double worst32 = 0, worst64 = 0;
  const Index rows = 16;
  for (Index L : {1, 2, 7, 256, 4096})
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed * 1000 + static_cast<std::uint64_t>(L));
      Tensor<double> a({rows, L}), b({rows, L});
      for (Index i = 0; i < a.size(); ++i) {
        a[i] = rng.uniform(0.0, 1.0);
        b[i] = rng.uniform(-1.0, 1.0);
      }
      worst64 = std::max(worst64, (scan_parallel(a, b).array() - scan_sequential(a, b).array()).abs().maxCoeff());
      const auto af = a.cast<float>(), bf = b.cast<float>();
      worst32 = std::max(worst32, static_cast<double>(
                                      (scan_parallel(af, bf).array() - scan_sequential(af, bf).array()).abs().maxCoeff()));
    }
  return {worst32 < 1e-5 && worst64 < 1e-10,
          "max |parallel - sequential| real32 " + fmt("%.2e", worst32) + ", real64 " + fmt("%.2e", worst64)};
}

// ------------------------------------------------------------ gradients

bool is_block(const std::string& name) {
  for (const char* p : {"mamba_layer", "slmamba_block", "fgm", "model"})
    if (name.starts_with(p)) return true;
  return false;
}

Outcome gradient_suite() {
  GradcheckOptions opts;
  double worst_op = 0, worst_block = 0;
  std::vector<std::string> failed;
  const auto results = run_gradcheck_suite(opts);
  for (const auto& r : results) {
    const bool block = is_block(r.name);
    (block ? worst_block : worst_op) = std::max(block ? worst_block : worst_op, r.max_rel_error);
    if (r.max_rel_error >= (block ? 1e-3 : 1e-4)) failed.push_back(r.name);
  }
  std::string detail = std::to_string(results.size()) + " checks, worst op " + fmt("%.2e", worst_op) + ", worst block " +
                       fmt("%.2e", worst_block);
  for (const auto& f : failed) detail += "; failed " + f;
  return {failed.empty(), detail};
}

// ---------------------------------------------------------- permutations

Outcome permutation_suite() {
  Index combos = 0;
  std::vector<std::string> errors;
  auto fail = [&](const std::string& what, Index D, Index H, Index W, Index k) {
    if (errors.size() < 5)
      errors.push_back(what + " at " + std::to_string(D) + "x" + std::to_string(H) + "x" + std::to_string(W) +
                       " k=" + std::to_string(k));
  };
  for (Index D = 1; D <= 8; ++D)
    for (Index H = 1; H <= 8; ++H)
      for (Index W = 1; W <= 8; ++W)
        for (Index k : {1, 2, 4}) {
          if (k > H || k > W) continue;
          ++combos;
          const Index L = D * H * W;
          std::vector<Index> iota(static_cast<std::size_t>(L));
          std::iota(iota.begin(), iota.end(), Index{0});
          for (OrderKind kind :
               {OrderKind::slice_f, OrderKind::slice_r, OrderKind::local_f, OrderKind::local_r, OrderKind::local_s}) {
            const auto o = make_order(kind, {D, H, W}, k);
            auto sorted = o.forward;
            std::sort(sorted.begin(), sorted.end());
            if (sorted != iota) fail("not a bijection (" + to_string(kind) + ")", D, H, W, k);
            if (o.forward != oracle::order_by_sort(kind, D, H, W, k)) fail("oracle mismatch (" + to_string(kind) + ")", D, H, W, k);
          }
          const auto lf = make_order(OrderKind::local_f, {D, H, W}, k);
          const auto lr = make_order(OrderKind::local_r, {D, H, W}, k);
          const auto ls = make_order(OrderKind::local_s, {D, H, W}, k);
          if (!std::equal(lf.forward.begin(), lf.forward.end(), lr.forward.rbegin())) fail("reversal", D, H, W, k);
          const auto sf = make_order(OrderKind::slice_f, {D, H, W});
          const auto sr = make_order(OrderKind::slice_r, {D, H, W});
          if (!std::equal(sf.forward.begin(), sf.forward.end(), sr.forward.rbegin())) fail("slice reversal", D, H, W, k);

          // Window and tube contiguity. Border windows of non-divisible
          // extents hold fewer than k*k voxels.
          for (Index wh = 0; wh < (H + k - 1) / k; ++wh)
            for (Index ww = 0; ww < (W + k - 1) / k; ++ww) {
              Index tube_lo = L, tube_hi = -1, tube_n = 0;
              for (Index d = 0; d < D; ++d) {
                Index lo = L, hi = -1, n = 0;
                for (Index h = wh * k; h < std::min(H, wh * k + k); ++h)
                  for (Index w = ww * k; w < std::min(W, ww * k + k); ++w) {
                    const Index v = (d * H + h) * W + w;
                    lo = std::min(lo, lf.inverse[v]);
                    hi = std::max(hi, lf.inverse[v]);
                    tube_lo = std::min(tube_lo, ls.inverse[v]);
                    tube_hi = std::max(tube_hi, ls.inverse[v]);
                    ++n;
                    ++tube_n;
                  }
                if (hi - lo != n - 1) fail("window not contiguous", D, H, W, k);
                if (n == k * k && hi - lo != k * k - 1) fail("full window span", D, H, W, k);
              }
              if (tube_hi - tube_lo != tube_n - 1) fail("tube not contiguous", D, H, W, k);
            }
        }

  // Locality bound on 8x8 slices.
  Index pairs = 0;
  for (Index D : {1, 3})
    for (Index k : {2, 4}) {
      const Index H = 8, W = 8;
      const auto lf = make_order(OrderKind::local_f, {D, H, W}, k);
      const auto sf = make_order(OrderKind::slice_f, {D, H, W});
      Index worst_local = 0, worst_raster = 0;
      for (Index d = 0; d < D; ++d)
        for (Index h0 = 0; h0 < H; h0 += k)
          for (Index w0 = 0; w0 < W; w0 += k)
            for (Index a = 0; a < k * k; ++a)
              for (Index b = 0; b < k * k; ++b) {
                const Index va = (d * H + h0 + a / k) * W + w0 + a % k, vb = (d * H + h0 + b / k) * W + w0 + b % k;
                worst_local = std::max(worst_local, std::abs(lf.inverse[va] - lf.inverse[vb]));
                worst_raster = std::max(worst_raster, std::abs(sf.inverse[va] - sf.inverse[vb]));
                ++pairs;
              }
      if (worst_local >= k * k) fail("local distance bound", D, H, W, k);
      if (worst_raster != (k - 1) * W + (k - 1)) fail("raster distance", D, H, W, k);
    }

  std::string detail = std::to_string(combos) + " grid/window combinations, " + std::to_string(pairs) + " window pairs";
  for (const auto& e : errors) detail += "; " + e;
  return {errors.empty(), detail};
}

// ------------------------------------------------------------------ FFT

Outcome fft_suite() {
  std::vector<std::string> errors;
  Rng rng(21);

  const auto x = uniform_tensor<float>({2, 4, 6, 5}, 1.0, rng);
  const double roundtrip = (real_part(ifft3(fft3(x))).array() - x.array()).abs().maxCoeff();
  if (!(roundtrip < 1e-5)) errors.push_back("roundtrip " + fmt("%.2e", roundtrip));

  const auto xd = uniform_tensor<double>({2, 4, 6, 5}, 1.0, rng);
  const auto X = fft3(xd);
  double ex = 0, eX = 0;
  for (Index i = 0; i < xd.size(); ++i) ex += xd[i] * xd[i];
  for (Index i = 0; i < X.size(); ++i) eX += std::norm(X[i]);
  const double parseval = std::abs(ex - eX / (4.0 * 6 * 5)) / ex;
  if (!(parseval < 1e-4)) errors.push_back("Parseval " + fmt("%.2e", parseval));

  auto scalar = [](double v, bool g = false) { return Var<double>(Tensor<double>::scalar(v), g); };
  const double c = 2.5;
  const auto cst = Tensor<double>::constant({2, 4, 4, 4}, c);
  double lowpass = 0;
  for (double f_low : {0.1, 0.5, 0.9}) {
    const auto y = fft_filter(Var<double>(cst), scalar(f_low), scalar(0.9), FilterMode::low_pass, 0.01).value();
    lowpass = std::max(lowpass, (y.array() - c).abs().maxCoeff() / c);
  }
  if (!(lowpass < 1e-4)) errors.push_back("low-pass identity " + fmt("%.2e", lowpass));
  const auto yh = fft_filter(Var<double>(cst), scalar(0.1), scalar(0.9), FilterMode::high_pass, 0.01).value();
  const double highpass = yh.array().abs().maxCoeff() / c;
  if (!(highpass < 1e-3)) errors.push_back("high-pass suppression " + fmt("%.2e", highpass));

  ParameterSet<double> p;
  const auto fgm = make_fgm(p, "fgm", FgmConfig{.channels = 2}, rng);
  if (fgm.f_low.value().item() != 0.1 || fgm.f_high.value().item() != 0.9) errors.push_back("threshold init");

  // Energy on the shell |k| = 2 of an 8^3 grid, between the thresholds' transition bands.
  const Index n = 8;
  Tensor<double> shell({1, n, n, n});
  for (Index d = 0; d < n; ++d)
    for (Index h = 0; h < n; ++h)
      for (Index w = 0; w < n; ++w)
        shell[(d * n + h) * n + w] =
            std::cos(2 * std::numbers::pi * 2 * static_cast<double>(w) / n) + std::cos(2 * std::numbers::pi * 2 * static_cast<double>(d) / n);
  double min_grad = 1e300;
  for (FilterMode mode : {FilterMode::low_pass, FilterMode::high_pass}) {
    Var<double> fl = scalar(0.25, true), fh = scalar(0.35, true);
    const auto y = fft_filter(Var<double>(shell), fl, fh, mode, 0.05);
    backward(sum(mul(y, y)));
    const auto& used = mode == FilterMode::low_pass ? fl : fh;
    min_grad = std::min(min_grad, used.has_grad() ? std::abs(used.grad().item()) : 0.0);
  }
  if (!(min_grad > 0)) errors.push_back("threshold gradient is zero");

  std::string detail = "roundtrip " + fmt("%.1e", roundtrip) + ", Parseval " + fmt("%.1e", parseval) + ", low-pass " +
                       fmt("%.1e", lowpass) + ", high-pass " + fmt("%.1e", highpass) + ", min |dL/df| " +
                       fmt("%.2e", min_grad);
  for (const auto& e : errors) detail += "; failed " + e;
  return {errors.empty(), detail};
}

// -------------------------------------------------------------- metrics

BinaryMask random_blob(Index D, Index H, Index W, Rng& rng) {
  BinaryMask m({D, H, W});
  const double cd = rng.uniform(0, static_cast<double>(D)), ch = rng.uniform(0, static_cast<double>(H)),
               cw = rng.uniform(0, static_cast<double>(W));
  const double r = rng.uniform(1.0, 6.0);
  for (Index d = 0; d < D; ++d)
    for (Index h = 0; h < H; ++h)
      for (Index w = 0; w < W; ++w) {
        const double q = (d - cd) * (d - cd) + (h - ch) * (h - ch) + (w - cw) * (w - cw);
        m[(d * H + h) * W + w] = q <= r * r ? 1 : (rng.coin(0.03) ? 1 : 0);
      }
  return m;
}

Outcome metrics_oracle() {
  Rng rng(31);
  double worst_dice = 0, worst_hd = 0;
  int compared = 0;
  bool scaling = true;
  for (int pair = 0; pair < 100; ++pair) {
    const Index D = 2 + static_cast<Index>(rng.below(15)), H = 2 + static_cast<Index>(rng.below(15)),
                W = 2 + static_cast<Index>(rng.below(15));
    const auto a = random_blob(D, H, W, rng), b = random_blob(D, H, W, rng);
    const Spacing sp{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
    worst_dice = std::max(worst_dice, std::abs(dice(a, b) - oracle::dice(a, b)));
    if (!oracle::surface_voxels(a).empty() && !oracle::surface_voxels(b).empty()) {
      worst_hd = std::max(worst_hd, std::abs(hd95(a, b, sp) - oracle::hd95(a, b, sp)));
      ++compared;
      const double base = hd95(a, b, sp);
      for (double s : {0.5, 2.0, 4.0}) scaling = scaling && hd95(a, b, {s * sp[0], s * sp[1], s * sp[2]}) == s * base;
    }
  }
  return {worst_dice < 1e-9 && worst_hd < 1e-9 && compared > 0 && scaling,
          "100 pairs (" + std::to_string(compared) + " with surfaces): max dice err " + fmt("%.1e", worst_dice) +
              ", max hd95 err " + fmt("%.1e", worst_hd) + ", spacing scaling " + (scaling ? "exact" : "NOT exact")};
}

// ------------------------------------------------------------- training

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism(const fs::path& out) {
  RunConfig cfg = preset_config("desk");
  cfg.seed = 17;
  cfg.num_cases = 6;
  cfg.train.epochs = 2;
  std::string bytes[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = out / ("determinism_" + std::to_string(run));
    const auto data = load_data(cfg);
    SegModel<float> model(cfg.model, cfg.model_seed());
    train(model, data, cfg.train_config(), {dir, to_json(cfg).dump(), {}});
    bytes[run] = slurp(dir / "model.hsck");
  }
  const bool same = !bytes[0].empty() && bytes[0] == bytes[1];
  return {same, std::to_string(bytes[0].size()) + "-byte checkpoints " + (same ? "identical" : "differ")};
}

Outcome overfit_check(double* final_ce) {
  const RunConfig cfg = preset_config("desk");
  const auto sample = generate_dataset(cfg.data, 1, cfg.data_seed());
  SegModel<float> model(cfg.model, cfg.model_seed());
  const auto losses = overfit(model, sample, cfg.train_config(), 200);
  *final_ce = losses.back();
  auto first = std::find_if(losses.begin(), losses.end(), [](double l) { return l < 0.01; });
  const bool pass = first != losses.end();
  return {pass, "CE " + fmt("%.4f", losses.front()) + " -> " + fmt("%.5f", losses.back()) +
                    (pass ? ", below 0.01 at step " + std::to_string(first - losses.begin()) : ", never below 0.01")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_out";
  std::vector<std::string> only;
  app.add_option("--out", out, "working directory for training runs")->capture_default_str();
  app.add_option("--only", only, "run only these criteria")
      ->check(CLI::IsMember({"scan", "gradient", "permutation", "fft", "metrics", "determinism", "learning", "ablation"}));
  CLI11_PARSE(app, argc, argv);
  set_threads(1);

  auto wanted = [&](const char* name) { return only.empty() || std::find(only.begin(), only.end(), name) != only.end(); };
  const fs::path dir = fs::absolute(out);
  fs::create_directories(dir);
  json record = json::array();
  int failures = 0;
  auto report = [&](const std::string& name, const Outcome& o, double seconds) {
    std::printf("%s %-22s %s (%.0f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds);
    std::fflush(stdout);
    failures += !o.pass;
    record.push_back({{"criterion", name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", seconds}});
    std::ofstream(dir / "acceptance.json") << record.dump(2) << "\n";
  };
  auto timed = [&](const std::string& name, const std::function<Outcome()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    report(name, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  if (wanted("scan")) timed("scan-equivalence", scan_equivalence);
  if (wanted("gradient")) timed("gradient-suite", gradient_suite);
  if (wanted("permutation")) timed("permutation-suite", permutation_suite);
  if (wanted("fft")) timed("fft-suite", fft_suite);
  if (wanted("metrics")) timed("metrics-oracle", metrics_oracle);
  if (wanted("determinism")) timed("determinism", [&] { return determinism(dir); });

  // The desk learning run is the ablation's full row: same preset, seed, data and split.
  if (wanted("learning") || wanted("ablation")) {
    double overfit_ce = 0;
    Outcome overfit_outcome;
    const auto t0 = std::chrono::steady_clock::now();
    if (wanted("learning")) {
      try {
        overfit_outcome = overfit_check(&overfit_ce);
      } catch (const std::exception& e) {
        overfit_outcome = {false, std::string("overfit threw: ") + e.what()};
      }
    }
    const double overfit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const RunConfig cfg = preset_config("desk");
    std::vector<AblationRow> rows;
    std::string error;
    const auto t1 = std::chrono::steady_clock::now();
    try {
      const auto data = load_data(cfg);
      rows = ablate(cfg.model, data, cfg.train_config(), cfg.model_seed(), {dir / "ablation", to_json(cfg).dump(), {}},
                    [](const AblationRow& r) {
                      std::fprintf(stderr, "ablation row %s: Dice %.4f HD95 %.3f\n", r.name.c_str(), r.test.mean_dice,
                                   r.test.mean_hd95);
                    });
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();

    const AblationRow* full = nullptr;
    for (const auto& r : rows)
      if (r.name == "full") full = &r;

    if (wanted("learning")) {
      Outcome o;
      if (!full) {
        o = {false, "training failed: " + error};
      } else {
        const double dice = full->test.mean_dice, hd = full->test.mean_hd95;
        o.pass = dice >= 0.80 && hd <= 6.0 && overfit_outcome.pass;
        o.detail = "held-out Dice " + fmt("%.4f", dice) + " (>= 0.80), HD95 " + fmt("%.3f", hd) +
                   " (<= 6); overfit " + overfit_outcome.detail;
      }
      report("desk-learning", o, overfit_seconds + train_seconds / 4);
    }
    if (wanted("ablation")) {
      Outcome o;
      if (rows.size() != 4 || !full) {
        o = {false, "ablation incomplete: " + error};
      } else {
        o.pass = true;
        for (const auto& r : rows) {
          o.detail += r.name + " " + fmt("%.4f", r.test.mean_dice) + "/" + fmt("%.2f", r.test.mean_hd95) + ", ";
          if ((r.name == "M1" || r.name == "M2") && full->test.mean_dice < r.test.mean_dice) o.pass = false;
        }
        o.detail += "full Dice ";
        o.detail += o.pass ? ">= each single-module row" : "< a single-module row";
      }
      report("ablation-ordering", o, train_seconds);
    }
  }

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
