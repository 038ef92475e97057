#include "hybridscan/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hybridscan {

ModelConfig make_model_config(const std::vector<Index>& channels, const std::vector<Index>& blocks, Index in_channels,
                              Index num_classes) {
  if (channels.size() != blocks.size()) throw ConfigError("channels and blocks lists differ in length");
  ModelConfig cfg;
  cfg.in_channels = in_channels;
  cfg.num_classes = num_classes;
  Index window = 4;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    StageConfig s;
    s.channels = channels[i];
    s.num_blocks = blocks[i];
    s.window = std::max<Index>(1, window);
    s.fgm_mode = i < 2 ? FilterMode::high_pass : FilterMode::low_pass;
    cfg.stages.push_back(s);
    window /= 2;
  }
  return cfg;
}

ModelConfig full_model_config(Index in_channels, Index num_classes) {
  ModelConfig cfg = make_model_config({48, 96, 192, 384}, {2, 2, 2, 2}, in_channels, num_classes);
  cfg.refine_channels = 24;
  return cfg;
}

ModelConfig desk_model_config(Index in_channels, Index num_classes) {
  ModelConfig cfg = make_model_config({8, 16, 32, 64}, {1, 1, 1, 1}, in_channels, num_classes);
  cfg.refine_channels = 8;
  return cfg;
}

ModelConfig with_modules(ModelConfig cfg, bool slmamba_local, bool fgm) {
  for (auto& s : cfg.stages) {
    s.enable_slmamba_local = slmamba_local;
    s.enable_fgm = fgm;
  }
  return cfg;
}

void validate(const ModelConfig& cfg) {
  if (cfg.in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (cfg.stages.empty()) throw ConfigError("model needs at least one stage");
  if (cfg.stem_kernel < 1 || cfg.stem_kernel % 2 == 0) throw ConfigError("stem_kernel must be odd");
  if (cfg.stem_stride != 1 && cfg.stem_stride != 2) throw ConfigError("stem_stride must be 1 or 2");
  if (cfg.refine_channels < 1 || cfg.mlp_ratio < 1) throw ConfigError("refine_channels and mlp_ratio must be >= 1");
  if (!(cfg.fgm_tau > 0)) throw ConfigError("fgm_tau must be positive");
  if (cfg.mamba.d_state < 1 || cfg.mamba.expand < 1 || cfg.mamba.conv_width < 1) {
    throw ConfigError("mamba d_state, expand and conv_width must be >= 1");
  }
  if (!(cfg.mamba.dt_min > 0) || !(cfg.mamba.dt_max >= cfg.mamba.dt_min)) {
    throw ConfigError("mamba dt range must satisfy 0 < dt_min <= dt_max");
  }
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageConfig& s = cfg.stages[i];
    if (s.channels < 1 || s.num_blocks < 0 || s.window < 1) {
      throw ConfigError("stage " + std::to_string(i) + ": channels >= 1, num_blocks >= 0, window >= 1 required");
    }
  }
}

Index required_divisor(const ModelConfig& cfg) {
  Index div = cfg.stem_stride;
  for (std::size_t i = 1; i < cfg.stages.size(); ++i) div *= 2;
  return div;
}

template <typename Scalar>
SegModel<Scalar>::SegModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  Rng rng(seed);
  const Index n = static_cast<Index>(cfg_.stages.size());
  stem_ = make_conv3d(params_, "stem", cfg_.in_channels, cfg_.stages[0].channels, cfg_.stem_kernel, cfg_.stem_stride,
                      rng);
  for (Index i = 0; i < n; ++i) {
    const StageConfig& sc = cfg_.stages[i];
    const std::string prefix = "stage" + std::to_string(i);
    Stage stage;
    if (i > 0) {
      stage.down = make_conv3d(params_, prefix + ".down", cfg_.stages[i - 1].channels, sc.channels, 3, 2, rng);
    }
    SLMambaConfig bc;
    bc.channels = sc.channels;
    bc.window = sc.window;
    bc.enable_local = sc.enable_slmamba_local;
    bc.residual = cfg_.residual;
    bc.mlp_ratio = cfg_.mlp_ratio;
    bc.mamba = cfg_.mamba;
    for (Index b = 0; b < sc.num_blocks; ++b) {
      stage.blocks.push_back(make_slmamba_block(params_, prefix + ".block" + std::to_string(b), bc, rng));
    }
    if (sc.enable_fgm) {
      FgmConfig fc;
      fc.channels = sc.channels;
      fc.mode = sc.fgm_mode;
      fc.tau = cfg_.fgm_tau;
      fc.mask = cfg_.fgm_mask;
      stage.fgm = make_fgm(params_, prefix + ".fgm", fc, rng);
    }
    stages_.push_back(std::move(stage));
  }
  for (Index i = 0; i + 1 < n; ++i) {
    const std::string prefix = "decoder" + std::to_string(i);
    const Index c = cfg_.stages[i].channels;
    const Index below = cfg_.stages[i + 1].channels;
    decoder_.push_back({make_conv_block(params_, prefix + ".fuse", below + c, c, 3, 1, rng),
                        make_conv_block(params_, prefix + ".refine", c, c, 3, 1, rng)});
  }
  full_res_ = make_conv_block(params_, "full_res", cfg_.stages[0].channels + cfg_.in_channels, cfg_.refine_channels, 3,
                              1, rng);
  head_.weight = params_.add("head.weight", Tensor<Scalar>::zeros({cfg_.num_classes, cfg_.refine_channels, 1, 1, 1}));
  head_.bias = params_.add("head.bias", Tensor<Scalar>::zeros({cfg_.num_classes}));
  head_.stride = 1;
  head_.padding = 0;
}

template <typename Scalar>
Var<Scalar> SegModel<Scalar>::forward(const Var<Scalar>& x, ForwardTrace* trace) const {
  if (x.value().rank() != 4 || x.dim(0) != cfg_.in_channels) {
    throw UsageError("model expects input [" + std::to_string(cfg_.in_channels) + ",D,H,W], got " +
                     shape_str(x.shape()));
  }
  const Index div = required_divisor(cfg_);
  for (Index a = 1; a <= 3; ++a) {
    if (x.dim(a) % div != 0) {
      const Index padded = (x.dim(a) + div - 1) / div * div;
      throw UsageError("spatial extent " + std::to_string(x.dim(a)) + " on axis " + std::to_string(a) +
                       " is not a multiple of " + std::to_string(div) + "; pad by " + std::to_string(padded - x.dim(a)) +
                       " to " + std::to_string(padded));
    }
  }
  if (trace) *trace = {};

  Var<Scalar> h = apply(stem_, x);
  if (trace) trace->stem_shape = h.shape();
  std::vector<Var<Scalar>> skips;
  for (const Stage& stage : stages_) {
    if (stage.down) h = apply(*stage.down, h);
    for (const auto& block : stage.blocks) h = slmamba_block(block, h);
    double gate = std::numeric_limits<double>::quiet_NaN();
    if (stage.fgm) h = fgm_forward(*stage.fgm, h, &gate);
    if (trace) {
      trace->mean_gate.push_back(gate);
      trace->stage_shapes.push_back(h.shape());
    }
    skips.push_back(h);
  }
  Var<Scalar> d = skips.back();
  for (Index i = static_cast<Index>(decoder_.size()) - 1; i >= 0; --i) {
    d = concat_channels<Scalar>({upsample_nearest2(d), skips[static_cast<std::size_t>(i)]});
    d = apply(decoder_[i].refine, apply(decoder_[i].fuse, d));
  }
  if (cfg_.stem_stride == 2) d = upsample_nearest2(d);
  d = apply(full_res_, concat_channels<Scalar>({d, x}));
  return apply(head_, d);
}

template <typename Scalar>
void SegModel<Scalar>::clamp_thresholds() {
  for (Stage& s : stages_)
    if (s.fgm) hybridscan::clamp_thresholds(*s.fgm);
}

template <typename Scalar>
std::vector<typename SegModel<Scalar>::Thresholds> SegModel<Scalar>::thresholds() const {
  std::vector<Thresholds> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (!stages_[i].fgm) continue;
    out.push_back({static_cast<Index>(i), static_cast<double>(stages_[i].fgm->f_low.value().item()),
                   static_cast<double>(stages_[i].fgm->f_high.value().item())});
  }
  return out;
}

template class SegModel<float>;
template class SegModel<double>;

}  // namespace hybridscan
