#pragma once

#include <array>
#include <string>
#include <vector>

#include "ctdg/clip.hpp"
#include "ctdg/keyvalue.hpp"
#include "ctdg/nn.hpp"

namespace ctdg {

inline constexpr int64_t kPositionalDims = 8;
inline constexpr int64_t kEncoderLevels = 5;

/// Sinusoidal encoding of temporal position p: entry 2i is
/// sin(p / 10000^(2i/dims)), entry 2i+1 the matching cosine.
std::vector<double> positional_encoding(int64_t p, int64_t dims = kPositionalDims);

/// Softmax over memories of beta-scaled cosine similarity to the query.
/// feat [n, T, k, d] holds query (last step) and memory vectors per head;
/// beta [n, k]. Returns [n, k, T-1], entry i-1 weighting time step T-1-i.
Var attention_weights(const Var& feat, const Var& beta);

struct GeneratorConfig {
  std::array<int64_t, kEncoderLevels> encoder_channels{64, 64, 128, 256, 256};
  int64_t heads = 8;
  int64_t head_channels = 32;
  std::array<int64_t, 4> decoder_channels{256, 256, 128, 64};
  int64_t final_channels = 32;
  int64_t temperature_hidden = 16;
  double dropout = 0.25;
  // Also merge the query frame's level-1 features into the last decoder stage.
  bool skip_level1 = false;
  // Replace attention and gating by a 1x1 projection of all frames' maps.
  bool unet_skip_only = false;

  int64_t attention_channels() const { return heads * head_channels; }

  static GeneratorConfig paper();
  /// Narrow widths for single-core training.
  static GeneratorConfig desk();
  /// Minimal widths for finite-difference checks on 16x16 frames.
  static GeneratorConfig tiny();

  void validate() const;
  void write(KeyValue& kv) const;
  static GeneratorConfig read(const KeyValue& kv);
};

/// SSG dilation factors for attention levels 2..5.
std::array<int64_t, 4> gate_dilations(int64_t level);

/// Attention record for one encoder level.
struct AttentionLevel {
  int64_t level = 0;
  Tensor weights;  // [n, heads, T-1]
  Tensor beta;     // [n, heads]
  Tensor gate;     // [n, h, w, C]
};

struct GeneratorOutput {
  Var prediction;  // [n, h, w, 4]
  std::vector<AttentionLevel> trace;
};

class Generator {
 public:
  Generator(ParameterStore& store, const GeneratorConfig& config, Rng init_rng, std::string prefix = "generator");

  /// clip [n, T, h, w, 4] -> next frame [n, h, w, 4]. `dropout_rng` is
  /// required in training mode.
  GeneratorOutput forward(const Var& clip, const ForwardMode& mode, Rng* dropout_rng = nullptr) const;

  /// frames [N, h, w, 4] -> the five level maps.
  std::vector<Var> encode(const Var& frames, const ForwardMode& mode, Rng* dropout_rng = nullptr) const;

  const GeneratorConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

 private:
  struct EncoderBlock {
    Conv2dLayer conv1;
    BatchNormLayer bn;
    Conv2dLayer conv2;  // unused in block 1
    bool dropout = false;
  };
  struct AttentionModule {
    int64_t level = 0;
    Conv2dLayer project;
    DenseLayer temperature_hidden;
    DenseLayer temperature_out;
    std::array<Conv2dLayer, 5> gate_conv;
    std::array<BatchNormLayer, 3> gate_bn;
    Conv2dLayer skip_project;  // used only for skip-only generators
  };
  struct DecoderStage {
    ConvTranspose2dLayer up;
    Conv2dLayer merge;
    bool has_merge = false;
  };

  Var attend(const AttentionModule& m, const Var& level_map, int64_t n, const ForwardMode& mode,
             AttentionLevel* record) const;

  GeneratorConfig config_;
  std::string prefix_;
  std::vector<EncoderBlock> encoder_;
  std::vector<AttentionModule> attention_;
  std::vector<DecoderStage> decoder_;
  Conv2dLayer final_conv_;
  Conv2dLayer out_conv_;
};

}  // namespace ctdg
