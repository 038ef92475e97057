#include "hybridscan/run_config.hpp"

#include <Eigen/Core>
#include <cstdlib>
#include <fstream>
#include <set>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "hybridscan/errors.hpp"
#include "hybridscan/random.hpp"
#include "hybridscan/vseg.hpp"

namespace hybridscan {
namespace {

using nlohmann::json;

// Reads known keys out of one JSON object and rejects everything else.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  bool has(const char* key) {
    known_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  void get(const char* key, T& dst) {
    if (!has(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <typename Enum, typename Parse>
  void get_enum(const char* key, Enum& dst, Parse parse) {
    std::string name;
    if (!has(key)) return;
    get(key, name);
    dst = parse(name);
  }

  const json& at(const char* key) const { return j_.at(key); }

  std::string where(const std::string& key = "") const {
    const std::string p = path_.empty() ? key : key.empty() ? path_ : path_ + "." + key;
    return p.empty() ? "config" : "config key '" + p + "'";
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!known_.count(key)) throw ConfigError("unknown " + where(key));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

void read_model(ModelConfig& m, const json& j) {
  Section s(j, "model");
  s.get("in_channels", m.in_channels);
  s.get("num_classes", m.num_classes);
  std::vector<Index> channels, blocks, windows;
  std::vector<std::string> modes;
  for (const auto& st : m.stages) {
    channels.push_back(st.channels);
    blocks.push_back(st.num_blocks);
    windows.push_back(st.window);
    modes.push_back(to_string(st.fgm_mode));
  }
  const bool new_depth = s.has("channels");
  s.get("channels", channels);
  if (new_depth) {
    // A new stage list resets the per-stage defaults to that depth.
    const ModelConfig d = make_model_config(channels, std::vector<Index>(channels.size(), 1));
    blocks.assign(channels.size(), m.stages.empty() ? 1 : m.stages.front().num_blocks);
    windows.clear();
    modes.clear();
    for (const auto& st : d.stages) {
      windows.push_back(st.window);
      modes.push_back(to_string(st.fgm_mode));
    }
  }
  s.get("blocks", blocks);
  s.get("windows", windows);
  s.get("fgm_modes", modes);
  if (blocks.size() != channels.size() || windows.size() != channels.size() || modes.size() != channels.size()) {
    throw ConfigError("model.channels, blocks, windows and fgm_modes must have the same length");
  }
  bool local = m.stages.empty() || m.stages.front().enable_slmamba_local;
  bool fgm = m.stages.empty() || m.stages.front().enable_fgm;
  s.get("enable_slmamba_local", local);
  s.get("enable_fgm", fgm);
  m.stages.clear();
  for (std::size_t i = 0; i < channels.size(); ++i) {
    StageConfig st;
    st.channels = channels[i];
    st.num_blocks = blocks[i];
    st.window = windows[i];
    st.fgm_mode = parse_filter_mode(modes[i]);
    st.enable_slmamba_local = local;
    st.enable_fgm = fgm;
    m.stages.push_back(st);
  }
  s.get("stem_kernel", m.stem_kernel);
  s.get("stem_stride", m.stem_stride);
  s.get("refine_channels", m.refine_channels);
  s.get("mlp_ratio", m.mlp_ratio);
  s.get_enum("residual", m.residual, parse_residual_mode);
  s.get("d_state", m.mamba.d_state);
  s.get("expand", m.mamba.expand);
  s.get("conv_width", m.mamba.conv_width);
  s.get("dt_rank", m.mamba.dt_rank);
  s.get("dt_min", m.mamba.dt_min);
  s.get("dt_max", m.mamba.dt_max);
  s.get_enum("scan", m.mamba.scan, parse_scan_algorithm);
  s.get("fgm_tau", m.fgm_tau);
  s.get_enum("fgm_mask", m.fgm_mask, parse_mask_kind);
  s.finish();
}

void read_train(TrainConfig& t, const json& j) {
  Section s(j, "train");
  s.get("lr0", t.lr0);
  s.get("poly_power", t.poly_power);
  s.get("weight_decay", t.weight_decay);
  s.get("momentum", t.momentum);
  s.get("epochs", t.epochs);
  s.get("batch_size", t.batch_size);
  s.get("crop_size", t.crop_size);
  s.get("mirror", t.mirror);
  s.get("brightness", t.brightness);
  s.get("gamma", t.gamma);
  s.get("train_fraction", t.train_fraction);
  s.get("val_fraction", t.val_fraction);
  s.get("val_every", t.val_every);
  s.finish();
}

void read_data(RunConfig& c, const json& j) {
  Section s(j, "data");
  SyntheticSpec& d = c.data;
  s.get("num_cases", c.num_cases);
  s.get("size", d.size);
  s.get("lesions_min", d.lesions_min);
  s.get("lesions_max", d.lesions_max);
  s.get("radius_min", d.radius_min);
  s.get("radius_max", d.radius_max);
  s.get("background", d.background);
  s.get("contrast", d.contrast);
  s.get("noise_sigma", d.noise_sigma);
  s.get("blur_sigma", d.blur_sigma);
  std::vector<double> spacing(d.spacing.begin(), d.spacing.end());
  s.get("spacing", spacing);
  if (spacing.size() != 3) throw ConfigError("data.spacing must have 3 entries");
  d.spacing = {spacing[0], spacing[1], spacing[2]};
  std::string dir = c.data_dir.string();
  s.get("dir", dir);
  c.data_dir = dir;
  s.finish();
}

}  // namespace

std::uint64_t RunConfig::data_seed() const { return Rng(seed).next(); }

std::uint64_t RunConfig::model_seed() const {
  Rng r(seed);
  r.next();
  return r.next();
}

std::uint64_t RunConfig::train_seed() const {
  Rng r(seed);
  r.next();
  r.next();
  return r.next();
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = train_seed();
  return t;
}

std::vector<VolumeSample> load_data(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return read_dataset(cfg.data_dir);
  return generate_dataset(cfg.data, cfg.num_cases, cfg.data_seed());
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "desk") {
    c.out = "runs/desk";
    c.model = desk_model_config();
    c.train.lr0 = 0.1;
    c.train.epochs = 200;
    c.train.crop_size = 32;
    c.data.size = 32;
    c.num_cases = 60;
  } else if (name == "full") {
    c.out = "runs/full";
    c.model = full_model_config();
    c.train.lr0 = 1e-4;
    c.train.epochs = 1000;
    c.train.crop_size = 128;
    c.data.size = 128;
    c.num_cases = 60;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected desk or full)");
  }
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  std::vector<Index> channels, blocks, windows;
  std::vector<std::string> modes;
  for (const auto& st : c.model.stages) {
    channels.push_back(st.channels);
    blocks.push_back(st.num_blocks);
    windows.push_back(st.window);
    modes.push_back(to_string(st.fgm_mode));
  }
  const bool local = c.model.stages.empty() || c.model.stages.front().enable_slmamba_local;
  const bool fgm = c.model.stages.empty() || c.model.stages.front().enable_fgm;
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& d = c.data;
  return {{"preset", c.preset},
          {"seed", c.seed},
          {"threads", c.threads},
          {"out", c.out.string()},
          {"model",
           {{"in_channels", m.in_channels},
            {"num_classes", m.num_classes},
            {"channels", channels},
            {"blocks", blocks},
            {"windows", windows},
            {"fgm_modes", modes},
            {"enable_slmamba_local", local},
            {"enable_fgm", fgm},
            {"stem_kernel", m.stem_kernel},
            {"stem_stride", m.stem_stride},
            {"refine_channels", m.refine_channels},
            {"mlp_ratio", m.mlp_ratio},
            {"residual", to_string(m.residual)},
            {"d_state", m.mamba.d_state},
            {"expand", m.mamba.expand},
            {"conv_width", m.mamba.conv_width},
            {"dt_rank", m.mamba.dt_rank},
            {"dt_min", m.mamba.dt_min},
            {"dt_max", m.mamba.dt_max},
            {"scan", to_string(m.mamba.scan)},
            {"fgm_tau", m.fgm_tau},
            {"fgm_mask", to_string(m.fgm_mask)}}},
          {"train",
           {{"lr0", t.lr0},
            {"poly_power", t.poly_power},
            {"weight_decay", t.weight_decay},
            {"momentum", t.momentum},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"crop_size", t.crop_size},
            {"mirror", t.mirror},
            {"brightness", t.brightness},
            {"gamma", t.gamma},
            {"train_fraction", t.train_fraction},
            {"val_fraction", t.val_fraction},
            {"val_every", t.val_every}}},
          {"data",
           {{"num_cases", c.num_cases},
            {"size", d.size},
            {"lesions_min", d.lesions_min},
            {"lesions_max", d.lesions_max},
            {"radius_min", d.radius_min},
            {"radius_max", d.radius_max},
            {"background", d.background},
            {"contrast", d.contrast},
            {"noise_sigma", d.noise_sigma},
            {"blur_sigma", d.blur_sigma},
            {"spacing", {d.spacing[0], d.spacing[1], d.spacing[2]}},
            {"dir", c.data_dir.string()}}}};
}

RunConfig apply_json(RunConfig c, const nlohmann::json& j) {
  Section s(j, "");
  std::string preset = c.preset;
  s.get("preset", preset);
  if (preset != c.preset) throw ConfigError("preset '" + preset + "' does not match the base preset '" + c.preset + "'");
  s.get("seed", c.seed);
  s.get("threads", c.threads);
  std::string out = c.out.string();
  s.get("out", out);
  c.out = out;
  if (s.has("model")) read_model(c.model, s.at("model"));
  if (s.has("train")) read_train(c.train, s.at("train"));
  if (s.has("data")) read_data(c, s.at("data"));
  s.finish();
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::string& preset) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + " must contain a JSON object");
  std::string name = preset;
  if (name.empty()) name = j.contains("preset") && j["preset"].is_string() ? j["preset"].get<std::string>() : "desk";
  // The flag wins over the file.
  if (!preset.empty()) j["preset"] = preset;
  return apply_json(preset_config(name), j);
}

void validate(const RunConfig& c) {
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
  validate(c.model);
  validate(c.train);
  validate(c.data);
  if (c.num_cases < 1) throw ConfigError("data.num_cases must be >= 1");
  if (c.data_dir.empty() && c.data.size < c.train.crop_size) {
    throw ConfigError("data.size " + std::to_string(c.data.size) + " is smaller than train.crop_size " +
                      std::to_string(c.train.crop_size));
  }
  const Index div = required_divisor(c.model);
  if (c.train.crop_size % div != 0) {
    throw ConfigError("train.crop_size " + std::to_string(c.train.crop_size) + " must be a multiple of " +
                      std::to_string(div));
  }
}

void set_threads(int threads) {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  Eigen::setNbThreads(threads);
#ifdef _OPENMP
  omp_set_num_threads(threads);
#endif
}

int resolve_threads(int flag, int fallback) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("HYBRIDSCAN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("HYBRIDSCAN_THREADS must be a positive integer");
    return static_cast<int>(v);
  }
  return fallback;
}

}  // namespace hybridscan
