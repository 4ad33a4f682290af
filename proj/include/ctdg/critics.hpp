#pragma once

#include <array>
#include <string>
#include <vector>

#include "ctdg/clip.hpp"
#include "ctdg/keyvalue.hpp"
#include "ctdg/nn.hpp"

namespace ctdg {

struct CriticConfig {
  std::array<int64_t, 4> channels{64, 128, 256, 512};
  double slope = 0.2;
  int power_iterations = 1;
  // Video critic sees image+flow stacks; otherwise the image channel only.
  bool video_uses_flow = true;

  static CriticConfig paper();
  /// Narrow widths for single-core training.
  static CriticConfig desk();

  void validate() const;
  void write(KeyValue& kv) const;
  static CriticConfig read(const KeyValue& kv);
};

enum class CriticKind { image, video };

/// Spectrally normalized kernels for one forward pass.
struct CriticWeights {
  std::vector<Var> kernels;
};

struct CriticOutput {
  Var patches;  // [n, p_h, p_w]
  Var score;    // [n], mean over the patch map
};

/// PatchGAN critic. Image input [n, h, w, 4]; video input [n, 6, h, w, 4]
/// (five past frames and the judged frame).
class Critic {
 public:
  Critic(ParameterStore& store, const CriticConfig& config, CriticKind kind, Rng init_rng, std::string prefix = "");

  /// Normalizes every kernel; `update` persists the power-iteration vectors.
  CriticWeights normalized_weights(bool update) const;

  CriticOutput forward(const Var& x, const CriticWeights& w) const;
  CriticOutput forward(const Var& x, bool update = false) const { return forward(x, normalized_weights(update)); }

  /// d score_i / d x_i for every sample, differentiable in the critic
  /// parameters. Same shape as x.
  Var input_gradient(const Tensor& x, const CriticWeights& w) const;

  /// Patch map extents for square frames of side `extent`.
  static int64_t patch_extent(int64_t extent);

  CriticKind kind() const { return kind_; }
  const std::string& prefix() const { return prefix_; }
  const CriticConfig& config() const { return config_; }

 private:
  struct Layer {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
    Tensor* u = nullptr;
    Tensor* v = nullptr;
    int64_t stride = 1;
    int64_t temporal_kernel = 1;
  };

  Var to_stack(const Var& x) const;
  ConvGeometry geometry(const Layer& layer, int64_t batch, const std::array<int64_t, 3>& in) const;

  CriticConfig config_;
  CriticKind kind_;
  std::string prefix_;
  int64_t in_channels_ = kFrameChannels;
  std::vector<Layer> layers_;  // four blocks then the final 1-channel conv
};

/// real * eps + fake * (1 - eps) with one eps per leading-axis sample.
Tensor interpolate(const Tensor& real, const Tensor& fake, const std::vector<double>& eps);

/// lambda * mean_i (||g_i|| - 1)^2 over per-sample gradients g [n, ...].
Var penalty_from_gradient(const Var& gradient, double lambda = 10.0);

struct PenaltyTerm {
  Var penalty;
  Tensor interpolate;
  Tensor gradient_norms;  // [n]
};

/// WGAN-GP term at random interpolates of real and fake critic inputs.
PenaltyTerm gradient_penalty(const Critic& critic, const CriticWeights& w, const Tensor& real, const Tensor& fake,
                             Rng& rng, double lambda = 10.0);

/// Stacks past frames [n, T, h, w, 4] with a frame [n, h, w, 4] along time.
Var stack_with_past(const Var& past, const Var& frame);

}  // namespace ctdg
