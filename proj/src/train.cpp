#include "hybridscan/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "hybridscan/checkpoint.hpp"
#include "hybridscan/errors.hpp"
#include "hybridscan/ops.hpp"

namespace hybridscan {
namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void shuffle(std::vector<Index>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::vector<Tensor<float>> snapshot(const ParameterSet<float>& params) {
  std::vector<Tensor<float>> out;
  for (const auto& p : params.entries()) out.push_back(p.var.value());
  return out;
}

void restore(ParameterSet<float>& params, const std::vector<Tensor<float>>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    Var<float> v = params.entries()[i].var;
    v.mutable_value() = values[i];
  }
}

bool all_finite(const ParameterSet<float>& params) {
  for (const auto& p : params.entries())
    if (!p.var.value().array().isFinite().all()) return false;
  return true;
}

// Flips one spatial axis (0 = D, 1 = H, 2 = W) of a [..., D, H, W] block.
template <typename T>
Tensor<T> flip(const Tensor<T>& t, int axis) {
  const Index r = t.rank();
  const Index D = t.dim(r - 3), H = t.dim(r - 2), W = t.dim(r - 1);
  const Index blocks = t.size() / (D * H * W);
  Tensor<T> out(t.shape());
  for (Index c = 0; c < blocks; ++c)
    for (Index d = 0; d < D; ++d)
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) {
          const Index sd = axis == 0 ? D - 1 - d : d;
          const Index sh = axis == 1 ? H - 1 - h : h;
          const Index sw = axis == 2 ? W - 1 - w : w;
          out[((c * D + d) * H + h) * W + w] = t[((c * D + sd) * H + sh) * W + sw];
        }
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& t, Index od, Index oh, Index ow, Index size) {
  const Index r = t.rank();
  const Index D = t.dim(r - 3), H = t.dim(r - 2), W = t.dim(r - 1);
  const Index blocks = t.size() / (D * H * W);
  Shape shape = t.shape();
  shape[static_cast<std::size_t>(r - 3)] = size;
  shape[static_cast<std::size_t>(r - 2)] = size;
  shape[static_cast<std::size_t>(r - 1)] = size;
  Tensor<T> out(shape);
  for (Index c = 0; c < blocks; ++c)
    for (Index d = 0; d < size; ++d)
      for (Index h = 0; h < size; ++h)
        for (Index w = 0; w < size; ++w)
          out[((c * size + d) * size + h) * size + w] = t[((c * D + od + d) * H + oh + h) * W + ow + w];
  return out;
}

json report_json(const EvalReport& r) {
  json cases = json::array();
  for (const auto& c : r.cases) cases.push_back({{"case_id", c.case_id}, {"Dice", c.dice}, {"HD95", c.hd95}});
  return {{"cases", cases}, {"mean", {{"Dice", r.mean_dice}, {"HD95", r.mean_hd95}}}};
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

void validate(const TrainConfig& cfg) {
  if (!(cfg.lr0 >= 0)) throw ConfigError("lr0 must be >= 0");
  if (!(cfg.poly_power > 0)) throw ConfigError("poly_power must be positive");
  if (!(cfg.weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(cfg.momentum >= 0 && cfg.momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.crop_size < 1) throw ConfigError("crop_size must be >= 1");
  if (cfg.val_every < 1) throw ConfigError("val_every must be >= 1");
  if (!(cfg.train_fraction > 0) || !(cfg.val_fraction >= 0) || cfg.train_fraction + cfg.val_fraction > 1) {
    throw ConfigError("split fractions must satisfy train > 0, val >= 0, train + val <= 1");
  }
}

double poly_lr(double lr0, Index epoch, Index epochs, double power) {
  if (epochs < 1 || epoch < 0 || epoch > epochs) throw UsageError("poly_lr: epoch outside [0, epochs]");
  if (epoch == 0) return lr0;
  return lr0 * std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(epochs), power);
}

DataSplit split_cases(Index n, double train_fraction, double val_fraction, std::uint64_t seed) {
  std::vector<Index> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), Index{0});
  Rng rng(seed ^ 0x5EEDULL);
  shuffle(ids, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train_fraction));
  const auto n_val = std::min(ids.size() - std::min(ids.size(), n_train),
                              static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction)));
  DataSplit s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, ids.size())));
  s.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(s.train.size()),
               ids.begin() + static_cast<std::ptrdiff_t>(s.train.size() + n_val));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(s.train.size() + n_val), ids.end());
  return s;
}

VolumeSample augment(const VolumeSample& s, const TrainConfig& cfg, Rng& rng) {
  VolumeSample out = s;
  const Index D = s.label.dim(0), H = s.label.dim(1), W = s.label.dim(2);
  if (D < cfg.crop_size || H < cfg.crop_size || W < cfg.crop_size) {
    throw DataError(s.case_id + ": volume " + shape_str(s.label.shape()) + " smaller than crop " +
                    std::to_string(cfg.crop_size));
  }
  if (D > cfg.crop_size || H > cfg.crop_size || W > cfg.crop_size) {
    const auto od = static_cast<Index>(rng.below(static_cast<std::uint64_t>(D - cfg.crop_size + 1)));
    const auto oh = static_cast<Index>(rng.below(static_cast<std::uint64_t>(H - cfg.crop_size + 1)));
    const auto ow = static_cast<Index>(rng.below(static_cast<std::uint64_t>(W - cfg.crop_size + 1)));
    out.image = crop(out.image, od, oh, ow, cfg.crop_size);
    out.label = crop(out.label, od, oh, ow, cfg.crop_size);
  }
  if (cfg.mirror) {
    for (int axis = 0; axis < 3; ++axis) {
      if (rng.coin(0.5)) {
        out.image = flip(out.image, axis);
        out.label = flip(out.label, axis);
      }
    }
  }
  if (cfg.brightness && rng.coin(0.3)) {
    const auto shift = static_cast<float>(0.1 * rng.normal());
    out.image.array() += shift;
  }
  if (cfg.gamma && rng.coin(0.3)) {
    const double g = rng.uniform(0.7, 1.5);
    const auto& a = out.image.array();
    const float lo = a.minCoeff(), hi = a.maxCoeff();
    const float range = hi - lo;
    if (range > 0) {
      for (Index i = 0; i < out.image.size(); ++i) {
        const double t = static_cast<double>(out.image[i] - lo) / range;
        out.image[i] = lo + range * static_cast<float>(std::pow(t, g));
      }
    }
  }
  return out;
}

void Sgd::step(ParameterSet<float>& params, double lr) {
  auto& entries = params.entries();
  if (velocity_.empty()) {
    for (const auto& p : entries) velocity_.push_back(Tensor<float>::zeros(p.var.shape()));
  }
  if (velocity_.size() != entries.size()) throw UsageError("Sgd: parameter set changed between steps");
  const auto mu = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_), eta = static_cast<float>(lr);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var<float> w = entries[i].var;
    auto& v = velocity_[i].array();
    if (w.has_grad()) {
      v = mu * v + w.grad().array() + wd * w.value().array();
    } else {
      v = mu * v + wd * w.value().array();
    }
    w.mutable_value().array() -= eta * v;
  }
}

LabelVolume predict(const SegModel<float>& model, const Tensor<float>& image, ForwardTrace* trace) {
  NoGradGuard guard;
  return argmax_channels(model.forward(Var<float>(image), trace).value());
}

EvalReport evaluate(const SegModel<float>& model, const std::vector<VolumeSample>& data,
                    const std::vector<Index>& ids, ForwardTrace* gates) {
  EvalReport r;
  if (gates) gates->mean_gate.assign(model.config().stages.size(), 0.0);
  for (Index id : ids) {
    const VolumeSample& s = data.at(static_cast<std::size_t>(id));
    ForwardTrace trace;
    const BinaryMask pred = foreground(predict(model, s.image, &trace));
    if (gates) {
      for (std::size_t i = 0; i < gates->mean_gate.size(); ++i) {
        gates->mean_gate[i] += trace.mean_gate.at(i) / static_cast<double>(ids.size());
      }
    }
    const BinaryMask truth = foreground(s.label);
    r.cases.push_back({s.case_id, dice(pred, truth), hd95(pred, truth, s.spacing)});
  }
  if (!r.cases.empty()) {
    for (const auto& c : r.cases) {
      r.mean_dice += c.dice;
      r.mean_hd95 += c.hd95;
    }
    r.mean_dice /= static_cast<double>(r.cases.size());
    r.mean_hd95 /= static_cast<double>(r.cases.size());
  } else {
    r.mean_dice = r.mean_hd95 = kNaN;
  }
  return r;
}

double accumulate_sample(const SegModel<float>& model, const VolumeSample& s, double weight) {
  const Var<float> ce = softmax_cross_entropy(model.forward(Var<float>(s.image)), s.label);
  const double value = static_cast<double>(ce.value().item());
  if (std::isfinite(value)) backward(scale(ce, static_cast<float>(weight)));
  return value;
}

TrainResult train(SegModel<float>& model, const std::vector<VolumeSample>& data, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  validate(cfg);
  const Index div = required_divisor(model.config());
  if (cfg.crop_size % div != 0) {
    throw UsageError("crop_size " + std::to_string(cfg.crop_size) + " is not a multiple of " + std::to_string(div));
  }
  for (const auto& s : data) validate(s, model.config().num_classes);

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  result.split = split_cases(static_cast<Index>(data.size()), cfg.train_fraction, cfg.val_fraction, cfg.seed);
  if (result.split.train.empty()) throw ConfigError("training split is empty");
  if (!hooks.out_dir.empty()) std::filesystem::create_directories(hooks.out_dir);

  ParameterSet<float>& params = model.parameters();
  Sgd opt(cfg.momentum, cfg.weight_decay);
  Rng rng(cfg.seed);
  std::vector<Tensor<float>> last_good = snapshot(params);

  auto abort_numerical = [&](const std::string& what, Index epoch) {
    restore(params, last_good);
    std::string where;
    if (!hooks.out_dir.empty()) {
      save_checkpoint(hooks.out_dir / "last_good.hsck", params, hooks.checkpoint_metadata);
      write_curves_csv(hooks.out_dir / "curves.csv", result.curve);
      where = "; last good parameters written to " + (hooks.out_dir / "last_good.hsck").string();
    }
    throw NumericalError(what + " in epoch " + std::to_string(epoch) + where);
  };

  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = poly_lr(cfg.lr0, epoch, cfg.epochs, cfg.poly_power);
    std::vector<Index> order = result.split.train;
    shuffle(order, rng);
    double ce_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const double weight = 1.0 / static_cast<double>(end - b);
      params.zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        const VolumeSample s = augment(data[static_cast<std::size_t>(order[i])], cfg, rng);
        const double ce = accumulate_sample(model, s, weight);
        if (!std::isfinite(ce)) abort_numerical("non-finite training loss", epoch);
        ce_sum += ce;
      }
      opt.step(params, rec.lr);
      model.clamp_thresholds();
      if (!all_finite(params)) abort_numerical("non-finite parameters after update", epoch);
    }
    params.zero_grad();
    rec.train_ce = ce_sum / static_cast<double>(order.size());
    rec.val_dice = rec.val_hd95 = kNaN;
    if (!result.split.val.empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs)) {
      const EvalReport v = evaluate(model, data, result.split.val);
      rec.val_dice = v.mean_dice;
      rec.val_hd95 = v.mean_hd95;
    }
    last_good = snapshot(params);
    result.curve.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }

  result.val = evaluate(model, data, result.split.val);
  result.test = evaluate(model, data, result.split.test);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!hooks.out_dir.empty()) {
    save_checkpoint(hooks.out_dir / "model.hsck", params, hooks.checkpoint_metadata);
    write_curves_csv(hooks.out_dir / "curves.csv", result.curve);
    json curve = json::array();
    for (const auto& r : result.curve) {
      curve.push_back({{"epoch", r.epoch},
                       {"lr", r.lr},
                       {"train_ce", r.train_ce},
                       {"val_dice", nullable(r.val_dice)},
                       {"val_hd95", nullable(r.val_hd95)}});
    }
    auto ids = [&](const std::vector<Index>& v) {
      json a = json::array();
      for (Index i : v) a.push_back(data[static_cast<std::size_t>(i)].case_id);
      return a;
    };
    json thresholds = json::array();
    for (const auto& t : model.thresholds()) {
      thresholds.push_back({{"stage", t.stage}, {"f_low", t.f_low}, {"f_high", t.f_high}});
    }
    write_json(hooks.out_dir / "report.json",
               {{"split", {{"train", ids(result.split.train)}, {"val", ids(result.split.val)},
                           {"test", ids(result.split.test)}}},
                {"epochs", curve},
                {"val", report_json(result.val)},
                {"test", report_json(result.test)},
                {"parameters", model.parameter_count()},
                {"thresholds", thresholds},
                {"seconds", result.seconds}});
  }
  return result;
}

std::vector<double> overfit(SegModel<float>& model, const std::vector<VolumeSample>& batch, const TrainConfig& cfg,
                            Index steps) {
  validate(cfg);
  if (batch.empty()) throw UsageError("overfit needs at least one sample");
  ParameterSet<float>& params = model.parameters();
  Sgd opt(cfg.momentum, cfg.weight_decay);
  std::vector<double> losses;
  const double weight = 1.0 / static_cast<double>(batch.size());
  for (Index step = 0; step < steps; ++step) {
    params.zero_grad();
    double ce = 0;
    for (const auto& s : batch) ce += weight * accumulate_sample(model, s, weight);
    if (!std::isfinite(ce)) throw NumericalError("non-finite loss at overfit step " + std::to_string(step));
    losses.push_back(ce);
    opt.step(params, cfg.lr0);
    model.clamp_thresholds();
  }
  params.zero_grad();
  return losses;
}

void write_curves_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(10);
  out << "epoch,lr,train_ce,val_dice,val_hd95\n";
  for (const auto& r : curve) {
    out << r.epoch << ',' << r.lr << ',' << r.train_ce << ',';
    if (std::isfinite(r.val_dice)) out << r.val_dice;
    out << ',';
    if (std::isfinite(r.val_hd95)) out << r.val_hd95;
    out << '\n';
  }
}

void write_eval_report(const std::filesystem::path& path, const EvalReport& report) {
  write_json(path, report_json(report));
}

std::vector<AblationRow> ablate(const ModelConfig& base, const std::vector<VolumeSample>& data,
                                const TrainConfig& cfg, std::uint64_t model_seed, const TrainHooks& hooks,
                                const std::function<void(const AblationRow&)>& on_row) {
  const struct {
    const char* name;
    bool local;
    bool fgm;
  } rows[] = {{"baseline", false, false}, {"M1", true, false}, {"M2", false, true}, {"full", true, true}};
  std::vector<AblationRow> out;
  for (const auto& r : rows) {
    SegModel<float> model(with_modules(base, r.local, r.fgm), model_seed);
    TrainHooks h = hooks;
    if (!hooks.out_dir.empty()) h.out_dir = hooks.out_dir / r.name;
    const TrainResult res = train(model, data, cfg, h);
    AblationRow row{r.name, r.local, r.fgm, model.parameter_count(), res.test};
    if (on_row) on_row(row);
    out.push_back(std::move(row));
  }
  if (!hooks.out_dir.empty()) write_ablation(hooks.out_dir, out);
  return out;
}

void write_ablation(const std::filesystem::path& dir, const std::vector<AblationRow>& rows) {
  std::filesystem::create_directories(dir);
  json table = json::array();
  std::ofstream csv(dir / "ablation.csv");
  if (!csv) throw IoError("cannot write " + (dir / "ablation.csv").string());
  csv.precision(10);
  csv << "method,S-LMamba,FGM,Dice,HD95,parameters\n";
  for (const auto& r : rows) {
    table.push_back({{"method", r.name},
                     {"S-LMamba", r.slmamba_local},
                     {"FGM", r.fgm},
                     {"Dice", r.test.mean_dice},
                     {"HD95", r.test.mean_hd95},
                     {"parameters", r.parameters}});
    csv << r.name << ',' << r.slmamba_local << ',' << r.fgm << ',' << r.test.mean_dice << ',' << r.test.mean_hd95
        << ',' << r.parameters << '\n';
  }
  write_json(dir / "ablation.json", {{"rows", table}});
}

}  // namespace hybridscan
