#include "ctdg/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ctdg/checkpoint.hpp"

namespace ctdg {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what + " (" + fmt(v) + ")");
}

void require_finite_grads(const std::vector<Parameter*>& params) {
  for (const Parameter* p : params)
    if (p->value.grad().numel() && !p->value.grad().all_finite())
      throw NumericError("non-finite gradient for " + p->name);
}

Tensor concat_time(const Tensor& inputs, const Tensor& frame) {
  NoGradGuard guard;
  return stack_with_past(Var(inputs), Var(frame)).value();
}

}  // namespace

void TrainConfig::validate() const {
  generator.validate();
  critic.validate();
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (n_critic < 1) throw ConfigError("n_critic must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("gradient penalty weight must be >= 0");
  if (max_steps < 0 || checkpoint_every < 0) throw ConfigError("step and checkpoint intervals must be >= 0");
}

void TrainConfig::write(KeyValue& kv) const {
  generator.write(kv);
  critic.write(kv);
  kv.set("train.epochs", epochs);
  kv.set("train.batch_size", batch_size);
  kv.set("train.lr", adam.lr);
  kv.set("train.beta1", adam.beta1);
  kv.set("train.beta2", adam.beta2);
  kv.set("train.n_critic", n_critic);
  kv.set("train.lambda", lambda);
  kv.set("train.image_critic", image_critic);
  kv.set("train.video_critic", video_critic);
  kv.set("train.range", to_string(range));
  kv.set("train.max_steps", max_steps);
  kv.set("train.checkpoint_every", checkpoint_every);
  kv.set("train.seed", std::to_string(seed));
}

TrainConfig TrainConfig::read(const KeyValue& kv) {
  TrainConfig c;
  c.generator = GeneratorConfig::read(kv);
  c.critic = CriticConfig::read(kv);
  c.epochs = kv.get_int("train.epochs", c.epochs);
  c.batch_size = kv.get_int("train.batch_size", c.batch_size);
  c.adam.lr = kv.get_double("train.lr", c.adam.lr);
  c.adam.beta1 = kv.get_double("train.beta1", c.adam.beta1);
  c.adam.beta2 = kv.get_double("train.beta2", c.adam.beta2);
  c.n_critic = kv.get_int("train.n_critic", c.n_critic);
  c.lambda = kv.get_double("train.lambda", c.lambda);
  c.image_critic = kv.get_bool("train.image_critic", c.image_critic);
  c.video_critic = kv.get_bool("train.video_critic", c.video_critic);
  c.range = parse_image_range(kv.get("train.range", to_string(c.range)));
  c.max_steps = kv.get_int("train.max_steps", c.max_steps);
  c.checkpoint_every = kv.get_int("train.checkpoint_every", c.checkpoint_every);
  c.seed = static_cast<uint64_t>(std::stoull(kv.get("train.seed", std::to_string(c.seed))));
  c.validate();
  return c;
}

Var l1_loss(const Var& prediction, const Tensor& target) {
  return ops::mean(ops::abs(ops::sub(prediction, Var(target))));
}

std::string loss_csv_row(const LossReport& r) {
  std::ostringstream os;
  os << r.step << ',' << r.epoch << ',' << fmt(r.critic_video_loss) << ',' << fmt(r.critic_image_loss) << ','
     << fmt(r.gp_video) << ',' << fmt(r.gp_image) << ',' << fmt(r.generator_adv_loss) << ',' << fmt(r.l1_loss);
  return os.str();
}

Trainer::Trainer(const TrainConfig& config) : config_(config) {
  config_.validate();
  const Rng root(config_.seed);
  generator_ = std::make_unique<Generator>(store_, config_.generator, root.substream("init.generator"));
  if (config_.image_critic)
    image_ = std::make_unique<Critic>(store_, config_.critic, CriticKind::image, root.substream("init.critic_image"));
  if (config_.video_critic)
    video_ = std::make_unique<Critic>(store_, config_.critic, CriticKind::video, root.substream("init.critic_video"));
  dropout_rng_ = root.substream("dropout");
  penalty_rng_ = root.substream("penalty");
}

void Trainer::check_batch(const Tensor& inputs, const Tensor& targets) const {
  const Shape& s = inputs.shape();
  if (s.size() != 5 || s[0] < 1) throw ShapeError("training batch must hold at least one [T, h, w, 4] clip");
  if (targets.shape() != Shape{s[0], s[2], s[3], s[4]})
    throw ShapeError("targets " + shape_str(targets.shape()) + " do not match inputs " + shape_str(s));
}

Var Trainer::critic_objective(const Tensor& inputs, const Tensor& targets, const Tensor& prediction,
                              LossReport& report) {
  Var total(Tensor::scalar(0.0));
  if (video_) {
    const CriticWeights w = video_->normalized_weights(true);
    const Tensor real = concat_time(inputs, targets), fake = concat_time(inputs, prediction);
    Var adv = ops::sub(ops::mean(video_->forward(Var(fake), w).score), ops::mean(video_->forward(Var(real), w).score));
    PenaltyTerm gp = gradient_penalty(*video_, w, real, fake, penalty_rng_, config_.lambda);
    report.critic_video_loss = adv.value().item();
    report.gp_video = gp.penalty.value().item();
    total = ops::add(total, ops::add(adv, gp.penalty));
  }
  if (image_) {
    const CriticWeights w = image_->normalized_weights(true);
    Var adv = ops::sub(ops::mean(image_->forward(Var(prediction), w).score),
                       ops::mean(image_->forward(Var(targets), w).score));
    PenaltyTerm gp = gradient_penalty(*image_, w, targets, prediction, penalty_rng_, config_.lambda);
    report.critic_image_loss = adv.value().item();
    report.gp_image = gp.penalty.value().item();
    total = ops::add(total, ops::add(adv, gp.penalty));
  }
  report.critic_objective = total.value().item();
  return total;
}

LossReport Trainer::critic_losses(const Tensor& inputs, const Tensor& targets, const Tensor& prediction) {
  check_batch(inputs, targets);
  LossReport report;
  critic_objective(inputs, targets, prediction, report);
  return report;
}

LossReport Trainer::critic_step(const Tensor& inputs, const Tensor& targets) {
  check_batch(inputs, targets);
  LossReport report;
  if (!image_ && !video_) return report;
  Tensor prediction;
  {
    NoGradGuard guard;
    ForwardMode mode{.training = true, .update_stats = false};
    prediction = generator_->forward(Var(inputs), mode, &dropout_rng_).prediction.value();
  }
  Var loss = critic_objective(inputs, targets, prediction, report);
  require_finite(report.critic_objective, "critic loss");
  std::vector<Parameter*> params;
  for (const Critic* c : {video_.get(), image_.get()})
    if (c)
      for (Parameter* p : store_.parameters(c->prefix())) params.push_back(p);
  store_.zero_grad();
  backward(loss);
  require_finite_grads(params);
  adam_step(params, config_.adam);
  store_.zero_grad();
  return report;
}

LossReport Trainer::generator_step(const Tensor& inputs, const Tensor& targets) {
  check_batch(inputs, targets);
  LossReport report;
  GeneratorOutput out = generator_->forward(Var(inputs), {.training = true}, &dropout_rng_);
  const Var& pred = out.prediction;
  Var l1 = l1_loss(pred, targets);
  Var adv(Tensor::scalar(0.0));
  if (video_) {
    const CriticWeights w = video_->normalized_weights(false);
    adv = ops::sub(adv, ops::mean(video_->forward(stack_with_past(Var(inputs), pred), w).score));
  }
  if (image_) {
    const CriticWeights w = image_->normalized_weights(false);
    adv = ops::sub(adv, ops::mean(image_->forward(pred, w).score));
  }
  Var loss = ops::add(adv, l1);
  report.generator_adv_loss = adv.value().item();
  report.l1_loss = l1.value().item();
  report.generator_objective = loss.value().item();
  require_finite(report.generator_objective, "generator loss");
  std::vector<Parameter*> params = store_.parameters(generator_->prefix());
  store_.zero_grad();
  backward(loss);
  require_finite_grads(params);
  adam_step(params, config_.adam);
  store_.zero_grad();
  return report;
}

std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint) {
  std::filesystem::path p = checkpoint;
  p += ".cfg";
  return p;
}

namespace {

void save_checkpoint(const Trainer& trainer, ParameterStore& store, const std::filesystem::path& path) {
  write_checkpoint(path, snapshot(store));
  KeyValue kv;
  trainer.config().write(kv);
  kv.save(config_sidecar(path));
}

}  // namespace

TrainSummary train(const VideoDataset& dataset, const TrainConfig& config, const TrainOutputs& outputs) {
  config.validate();
  std::vector<std::string> warnings;
  const std::vector<WindowRef> windows = assemble_windows(dataset, &warnings);
  if (windows.empty())
    throw ValidationError("dataset has no clip with at least " + std::to_string(kClipLength + 1) + " frames");
  if (outputs.progress)
    for (const std::string& w : warnings) *outputs.progress << "warning: " << w << '\n';

  for (const VideoClip& clip : dataset.clips) {
    if (clip.height % 16 != 0 || clip.width % 16 != 0)
      throw ConfigError("frame extents must be multiples of 16, got " + std::to_string(clip.height) + "x" +
                        std::to_string(clip.width));
    if ((config.image_critic || config.video_critic) &&
        (Critic::patch_extent(clip.height) < 1 || Critic::patch_extent(clip.width) < 1))
      throw ConfigError("critics need frames of at least 32x32 pixels");
  }

  Trainer trainer(config);
  std::ofstream csv;
  if (!outputs.loss_csv.empty()) {
    csv.open(outputs.loss_csv, std::ios::binary | std::ios::trunc);
    if (!csv) throw ValidationError("cannot write loss log " + outputs.loss_csv.string());
    csv << kLossCsvHeader << '\n';
  }

  TrainSummary summary;
  const Rng shuffle_root = Rng(config.seed).substream("shuffle");
  std::vector<WindowRef> order = windows;
  Tensor inputs, targets;
  int64_t step = 0;
  bool done = false;
  for (int64_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    Rng shuffle = shuffle_root.substream("epoch" + std::to_string(epoch));
    order = windows;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    double epoch_l1 = 0.0;
    int64_t epoch_steps = 0;
    for (size_t start = 0; start < order.size() && !done; start += config.batch_size) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      make_batch(dataset, {order.begin() + start, order.begin() + end}, config.range, inputs, targets);
      LossReport critic;
      for (int64_t k = 0; k < config.n_critic; ++k) critic = trainer.critic_step(inputs, targets);
      LossReport r = trainer.generator_step(inputs, targets);
      r.critic_video_loss = critic.critic_video_loss;
      r.critic_image_loss = critic.critic_image_loss;
      r.gp_video = critic.gp_video;
      r.gp_image = critic.gp_image;
      r.critic_objective = critic.critic_objective;
      r.step = step;
      r.epoch = epoch;
      if (step == 0) summary.initial_l1 = r.l1_loss;
      summary.log.push_back(r);
      if (csv.is_open()) csv << loss_csv_row(r) << '\n';
      epoch_l1 += r.l1_loss;
      ++epoch_steps;
      ++step;
      if (config.max_steps > 0 && step >= config.max_steps) done = true;
    }
    if (outputs.progress) {
      *outputs.progress << "epoch " << epoch + 1 << '/' << config.epochs << " steps=" << epoch_steps
                        << " mean_l1=" << fmt(epoch_l1 / static_cast<double>(epoch_steps)) << std::endl;
    }
    if (!done) summary.final_l1 = epoch_l1 / static_cast<double>(epoch_steps);
    if (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && !outputs.checkpoint.empty())
      save_checkpoint(trainer, trainer.store(), outputs.checkpoint);
  }
  if (done) {
    const size_t tail = std::min<size_t>(20, summary.log.size());
    double s = 0.0;
    for (size_t i = summary.log.size() - tail; i < summary.log.size(); ++i) s += summary.log[i].l1_loss;
    summary.final_l1 = s / static_cast<double>(tail);
  }
  if (!outputs.checkpoint.empty()) save_checkpoint(trainer, trainer.store(), outputs.checkpoint);
  return summary;
}

}  // namespace ctdg
