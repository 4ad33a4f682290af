#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ctdg/critics.hpp"
#include "ctdg/data.hpp"
#include "ctdg/generator.hpp"
#include "ctdg/optim.hpp"

namespace ctdg {

struct TrainConfig {
  GeneratorConfig generator = GeneratorConfig::desk();
  CriticConfig critic = CriticConfig::desk();
  int64_t epochs = 10;
  int64_t batch_size = 5;
  AdamConfig adam;
  int64_t n_critic = 1;
  double lambda = 10.0;
  bool image_critic = true;
  bool video_critic = true;
  ImageRange range = ImageRange::unit;
  // Stop after this many generator steps when positive.
  int64_t max_steps = 0;
  // Also write the checkpoint every this many epochs when positive.
  int64_t checkpoint_every = 0;
  uint64_t seed = 7;

  void validate() const;
  void write(KeyValue& kv) const;
  static TrainConfig read(const KeyValue& kv);
};

/// Losses of one training step. Terms of a disabled critic stay empty.
struct LossReport {
  int64_t step = 0;
  int64_t epoch = 0;
  std::optional<double> critic_video_loss;
  std::optional<double> critic_image_loss;
  std::optional<double> gp_video;
  std::optional<double> gp_image;
  double generator_adv_loss = 0.0;
  double l1_loss = 0.0;
  // Objectives actually minimized.
  double critic_objective = 0.0;
  double generator_objective = 0.0;
};

/// Mean absolute error over all elements.
Var l1_loss(const Var& prediction, const Tensor& target);

inline constexpr const char* kLossCsvHeader = "step,epoch,cv_loss,ci_loss,gp_v,gp_i,g_adv,l1";
std::string loss_csv_row(const LossReport& r);

/// Generator, critics and their optimizer state.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);

  /// Updates the enabled critics on a fresh generator prediction.
  /// inputs [n, T, h, w, 4], targets [n, h, w, 4].
  LossReport critic_step(const Tensor& inputs, const Tensor& targets);
  /// Updates the generator against the (frozen) critics.
  LossReport generator_step(const Tensor& inputs, const Tensor& targets);

  /// Critic objective for an explicit prediction, without updating anything.
  LossReport critic_losses(const Tensor& inputs, const Tensor& targets, const Tensor& prediction);

  ParameterStore& store() { return store_; }
  const Generator& generator() const { return *generator_; }
  const Critic* image_critic() const { return image_.get(); }
  const Critic* video_critic() const { return video_.get(); }
  const TrainConfig& config() const { return config_; }

 private:
  Var critic_objective(const Tensor& inputs, const Tensor& targets, const Tensor& prediction, LossReport& report);
  void check_batch(const Tensor& inputs, const Tensor& targets) const;

  TrainConfig config_;
  ParameterStore store_;
  std::unique_ptr<Generator> generator_;
  std::unique_ptr<Critic> image_;
  std::unique_ptr<Critic> video_;
  Rng dropout_rng_;
  Rng penalty_rng_;
};

struct TrainOutputs {
  std::filesystem::path checkpoint;  // written with a .cfg sidecar
  std::filesystem::path loss_csv;    // optional
  std::ostream* progress = nullptr;
};

struct TrainSummary {
  std::vector<LossReport> log;
  double initial_l1 = 0.0;
  // Mean l1 over the last epoch (or the last 20 steps of a truncated run).
  double final_l1 = 0.0;
};

/// Shuffled sliding-window epochs over `dataset`.
TrainSummary train(const VideoDataset& dataset, const TrainConfig& config, const TrainOutputs& outputs);

/// Path of the configuration written next to a checkpoint.
std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint);

}  // namespace ctdg
