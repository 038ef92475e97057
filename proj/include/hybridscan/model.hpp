#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hybridscan/fgm.hpp"
#include "hybridscan/slmamba.hpp"

namespace hybridscan {

struct StageConfig {
  Index channels = 48;
  Index num_blocks = 2;
  Index window = 4;
  FilterMode fgm_mode = FilterMode::high_pass;
  bool enable_slmamba_local = true;
  bool enable_fgm = true;
};

struct ModelConfig {
  Index in_channels = 1;
  Index num_classes = 2;
  std::vector<StageConfig> stages;
  Index stem_kernel = 7;
  Index stem_stride = 2;
  Index refine_channels = 8;  // width of the full-resolution conv block before the head
  Index mlp_ratio = 2;
  ResidualMode residual = ResidualMode::intermediate;
  MambaConfig mamba;
  double fgm_tau = 0.05;
  MaskKind fgm_mask = MaskKind::soft;
};

/// Stages with the given channels/blocks, window 4 halved per stage (floor 1),
/// high-pass FGM on the first two stages and low-pass on the rest.
ModelConfig make_model_config(const std::vector<Index>& channels, const std::vector<Index>& blocks,
                              Index in_channels = 1, Index num_classes = 2);

/// [48, 96, 192, 384] channels, two blocks per stage.
ModelConfig full_model_config(Index in_channels = 1, Index num_classes = 2);

/// Single-core preset used by the synthetic learning and ablation runs.
ModelConfig desk_model_config(Index in_channels = 1, Index num_classes = 2);

/// Sets the S-LMamba local branch and FGM switches on every stage.
ModelConfig with_modules(ModelConfig cfg, bool slmamba_local, bool fgm);

/// Throws ConfigError on inconsistent configurations.
void validate(const ModelConfig& cfg);

/// Spatial extents must be multiples of this (stem stride times the
/// inter-stage downsampling).
Index required_divisor(const ModelConfig& cfg);

struct ForwardTrace {
  std::vector<double> mean_gate;  // per stage; NaN where the stage has no FGM
  Shape stem_shape;
  std::vector<Shape> stage_shapes;  // encoder output of each stage
};

/// Stem conv, staged S-LMamba/FGM encoder with stride-2 downsampling, a
/// U-shaped decoder (nearest upsample, skip concat, two conv blocks per
/// level), a full-resolution refinement block and a 1x1x1 head.
template <typename Scalar>
class SegModel {
 public:
  SegModel(const ModelConfig& cfg, std::uint64_t seed);

  /// x [Cin, D, H, W] -> logits [K, D, H, W].
  Var<Scalar> forward(const Var<Scalar>& x, ForwardTrace* trace = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }
  Index parameter_count() const { return params_.numel(); }

  /// Projects every FGM threshold back into [0.01, 0.99].
  void clamp_thresholds();

  struct Thresholds {
    Index stage;
    double f_low;
    double f_high;
  };
  std::vector<Thresholds> thresholds() const;

 private:
  struct Stage {
    std::optional<Conv3dLayer<Scalar>> down;
    std::vector<SLMambaBlock<Scalar>> blocks;
    std::optional<FgmParams<Scalar>> fgm;
  };
  struct DecoderLevel {
    ConvBlock<Scalar> fuse;
    ConvBlock<Scalar> refine;
  };

  ModelConfig cfg_;
  ParameterSet<Scalar> params_;
  Conv3dLayer<Scalar> stem_;
  std::vector<Stage> stages_;
  std::vector<DecoderLevel> decoder_;  // decoder_[i] produces stage i's resolution
  ConvBlock<Scalar> full_res_;
  Conv3dLayer<Scalar> head_;
};

}  // namespace hybridscan
