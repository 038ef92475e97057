#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "hybridscan/train.hpp"

namespace hybridscan {

/// Everything a subcommand needs, loadable from one JSON file. Model, data
/// and training seeds are all derived from `seed`.
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  int threads = 1;
  std::filesystem::path out = "runs/desk";
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec data;
  Index num_cases = 60;
  std::filesystem::path data_dir;  // empty: generate the synthetic set in memory

  std::uint64_t data_seed() const;
  std::uint64_t model_seed() const;
  std::uint64_t train_seed() const;

  /// `train` with its seed filled in from train_seed().
  TrainConfig train_config() const;
};

/// Reads data_dir if set, else generates num_cases synthetic cases.
std::vector<VolumeSample> load_data(const RunConfig& cfg);

/// "desk": 32^3 synthetic cases, [8,16,32,64] channels, one block per
/// stage, lr0 0.1, 200 epochs. "full": [48,96,192,384], two blocks per
/// stage, lr0 1e-4, 1000 epochs, 128^3 crops.
RunConfig preset_config(const std::string& name);

nlohmann::json to_json(const RunConfig& cfg);

/// Overlays `j` on `base`. Unknown keys, wrong types and inconsistent
/// stage lists throw ConfigError.
RunConfig apply_json(RunConfig base, const nlohmann::json& j);

/// Reads a JSON file (IoError if missing, ConfigError if malformed) and
/// overlays it on a preset: `preset` if non-empty, else the file's "preset"
/// key, else desk.
RunConfig load_run_config(const std::filesystem::path& path, const std::string& preset = "");

void validate(const RunConfig& cfg);

/// Intra-op thread count for Eigen and OpenMP.
void set_threads(int threads);

/// --threads if given (> 0), else HYBRIDSCAN_THREADS, else `fallback`.
int resolve_threads(int flag, int fallback);

}  // namespace hybridscan
