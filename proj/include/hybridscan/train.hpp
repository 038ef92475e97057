#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hybridscan/model.hpp"
#include "hybridscan/synthetic.hpp"

namespace hybridscan {

struct TrainConfig {
  double lr0 = 1e-4;
  double poly_power = 0.9;
  double weight_decay = 3e-5;
  double momentum = 0.9;
  Index epochs = 200;
  Index batch_size = 2;
  Index crop_size = 32;
  bool mirror = true;
  bool brightness = true;
  bool gamma = true;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  Index val_every = 1;  // validate every n epochs and after the last one
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);

/// lr0 * (1 - epoch / epochs)^power; exactly lr0 at 0 and 0 at `epochs`.
double poly_lr(double lr0, Index epoch, Index epochs, double power);

struct DataSplit {
  std::vector<Index> train, val, test;
};

/// Shuffled partition: round(n * train), round(n * val), rest to test.
DataSplit split_cases(Index n, double train_fraction, double val_fraction, std::uint64_t seed);

/// Random crop to crop_size^3 (if larger), then per-axis mirroring,
/// additive brightness and gamma correction as enabled in cfg.
VolumeSample augment(const VolumeSample& s, const TrainConfig& cfg, Rng& rng);

/// SGD with momentum and L2 weight decay folded into the gradient:
///   v = momentum * v + (g + wd * w);  w -= lr * v
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(ParameterSet<float>& params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<float>> velocity_;
};

/// Argmax labels for one image [Cin, D, H, W].
LabelVolume predict(const SegModel<float>& model, const Tensor<float>& image, ForwardTrace* trace = nullptr);

struct CaseMetrics {
  std::string case_id;
  double dice = 0;
  double hd95 = 0;
};

struct EvalReport {
  std::vector<CaseMetrics> cases;
  double mean_dice = 0;
  double mean_hd95 = 0;
};

/// Foreground (label > 0) Dice and HD95 per case, in the cases' spacing.
/// `gates`, if given, receives the per-stage FGM gate means averaged over cases.
EvalReport evaluate(const SegModel<float>& model, const std::vector<VolumeSample>& data,
                    const std::vector<Index>& ids, ForwardTrace* gates = nullptr);

struct EpochRecord {
  Index epoch = 0;
  double lr = 0;
  double train_ce = 0;
  double val_dice = 0;  // NaN on epochs without validation
  double val_hd95 = 0;
};

struct TrainResult {
  DataSplit split;
  std::vector<EpochRecord> curve;
  EvalReport val;
  EvalReport test;
  double seconds = 0;
};

struct TrainHooks {
  std::filesystem::path out_dir;  // empty: nothing written
  std::string checkpoint_metadata = "{}";
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Mean cross-entropy of one sample; accumulates its gradient scaled by
/// `weight` into the model parameters.
double accumulate_sample(const SegModel<float>& model, const VolumeSample& s, double weight);

/// Trains on split.train for cfg.epochs, validating on split.val, then
/// evaluates split.test. Writes model.hsck, curves.csv and report.json to
/// hooks.out_dir when set. A non-finite loss writes the previous epoch's
/// parameters to last_good.hsck and throws NumericalError.
TrainResult train(SegModel<float>& model, const std::vector<VolumeSample>& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// Repeated SGD steps at constant lr0 on one fixed batch, no augmentation.
/// Returns the batch CE before each step.
std::vector<double> overfit(SegModel<float>& model, const std::vector<VolumeSample>& batch, const TrainConfig& cfg,
                            Index steps);

void write_curves_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& curve);

/// {"cases": [{"case_id", "Dice", "HD95"}...], "mean": {"Dice", "HD95"}}
void write_eval_report(const std::filesystem::path& path, const EvalReport& report);

struct AblationRow {
  std::string name;  // baseline, M1, M2, full
  bool slmamba_local = false;
  bool fgm = false;
  Index parameters = 0;
  EvalReport test;
};

/// Trains and evaluates the four module combinations from the same seed,
/// data and split. Row outputs go to <out_dir>/<name> when out_dir is set.
std::vector<AblationRow> ablate(const ModelConfig& base, const std::vector<VolumeSample>& data,
                                const TrainConfig& cfg, std::uint64_t model_seed, const TrainHooks& hooks = {},
                                const std::function<void(const AblationRow&)>& on_row = {});

/// ablation.json (rows with S-LMamba, FGM, Dice, HD95, parameters) and
/// ablation.csv with the same columns.
void write_ablation(const std::filesystem::path& dir, const std::vector<AblationRow>& rows);

}  // namespace hybridscan
