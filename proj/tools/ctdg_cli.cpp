#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "ctdg/checkpoint.hpp"
#include "ctdg/gradcheck.hpp"
#include "ctdg/scoring.hpp"
#include "ctdg/training.hpp"

using namespace ctdg;

namespace {

struct SynthArgs {
  std::string preset = "moving-squares";
  std::string split = "train";
  std::string scene;
  uint64_t seed = 7;
  std::string out;
  int64_t resolution = 0;
  int64_t clips = 0;
  int64_t frames = 0;
  std::string flow;
};

struct TrainArgs {
  std::string data;
  std::string out = "model.ckpt";
  std::string loss_log = "losses.csv";
  std::string model = "desk";
  int64_t epochs = 10;
  int64_t batch = 5;
  double lr = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int64_t n_critic = 1;
  double lambda = 10.0;
  uint64_t seed = 7;
  bool no_image_critic = false;
  bool no_video_critic = false;
  bool unet_skip_only = false;
  bool skip_level1 = false;
  bool video_critic_image_only = false;
  std::string range = "unit";
  int64_t max_steps = 0;
  int64_t checkpoint_every = 0;
};

struct ScoreArgs {
  std::string data;
  std::string model = "model.ckpt";
  std::string out = "scores.csv";
  std::string normalization = "per-clip";
  std::string source = "error";
  int64_t batch = 8;
};

struct PerturbArgs {
  std::string data;
  std::string model = "model.ckpt";
  std::string out;
  std::string windows_csv;
  int64_t windows = 100;
  double noise = 0.1;
  double flow_scale = 0.9;
  uint64_t seed = 7;
  bool control = false;
};

struct GradcheckArgs {
  int instances = 5;
  uint64_t seed = 7;
  double tolerance = 1e-4;
  int generator_params = 200;
  double generator_tolerance = 1e-3;
};

struct LoadedModel {
  TrainConfig config;
  ParameterStore store;
  std::unique_ptr<Generator> generator;
};

std::unique_ptr<LoadedModel> load_model(const std::string& path) {
  if (!std::filesystem::exists(config_sidecar(path)))
    throw ValidationError("missing model configuration " + config_sidecar(path).string());
  auto m = std::make_unique<LoadedModel>();
  m->config = TrainConfig::read(KeyValue::load(config_sidecar(path)));
  m->generator = std::make_unique<Generator>(m->store, m->config.generator, Rng(0));
  // Only the generator is needed for inference.
  std::vector<CheckpointEntry> entries;
  for (CheckpointEntry& e : read_checkpoint(path))
    if (e.name.rfind("generator.", 0) == 0) entries.push_back(std::move(e));
  restore(m->store, entries);
  return m;
}

int run_synth(const SynthArgs& a) {
  SceneConfig sc = SceneConfig::preset(a.preset, a.split);
  if (!a.scene.empty()) {
    KeyValue kv = sc.to_keyvalue();
    for (const auto& [k, v] : KeyValue::load(a.scene).entries()) kv.set(k, v);
    sc = SceneConfig::from_keyvalue(kv);
  }
  if (a.resolution > 0) sc.resolution = a.resolution;
  if (a.clips > 0) sc.clips = a.clips;
  if (a.frames > 0) sc.frames_per_clip = a.frames;
  if (!a.flow.empty()) {
    KeyValue kv = sc.to_keyvalue();
    kv.set("flow", a.flow);
    sc = SceneConfig::from_keyvalue(kv);
  }
  const VideoDataset ds = synth_generate(sc, mix_seed(a.seed, a.split));
  save_dataset(a.out, ds);
  int64_t anomalous = 0;
  for (const VideoClip& c : ds.clips) anomalous += std::count(c.labels.begin(), c.labels.end(), 1);
  std::cout << "wrote " << a.out << ": " << ds.clips.size() << " clips, " << ds.frame_count() << " frames ("
            << anomalous << " anomalous)\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  TrainConfig c;
  if (a.model == "desk") {
    c.generator = GeneratorConfig::desk();
    c.critic = CriticConfig::desk();
  } else if (a.model == "paper") {
    c.generator = GeneratorConfig::paper();
    c.critic = CriticConfig::paper();
  } else if (a.model == "tiny") {
    c.generator = GeneratorConfig::tiny();
    c.critic = CriticConfig::desk();
  } else {
    throw ConfigError("unknown model '" + a.model + "' (desk, paper or tiny)");
  }
  c.generator.unet_skip_only = a.unet_skip_only;
  c.generator.skip_level1 = a.skip_level1;
  c.critic.video_uses_flow = !a.video_critic_image_only;
  c.epochs = a.epochs;
  c.batch_size = a.batch;
  c.adam.lr = a.lr;
  c.adam.beta1 = a.beta1;
  c.adam.beta2 = a.beta2;
  c.n_critic = a.n_critic;
  c.lambda = a.lambda;
  c.seed = a.seed;
  c.image_critic = !a.no_image_critic;
  c.video_critic = !a.no_video_critic;
  c.range = parse_image_range(a.range);
  c.max_steps = a.max_steps;
  c.checkpoint_every = a.checkpoint_every;
  c.validate();
  const VideoDataset ds = load_dataset(a.data);
  const TrainSummary s = train(ds, c, {a.out, a.loss_log, &std::cout});
  std::cout << "steps=" << s.log.size() << '\n'
            << "initial_l1=" << s.initial_l1 << '\n'
            << "final_l1=" << s.final_l1 << '\n'
            << "checkpoint=" << a.out << '\n';
  return 0;
}

int run_score(const ScoreArgs& a) {
  auto m = load_model(a.model);
  const VideoDataset ds = load_dataset(a.data);
  ScoreOptions o;
  o.range = m->config.range;
  o.normalization = parse_normalization(a.normalization);
  o.source = parse_score_source(a.source);
  o.batch_size = a.batch;
  std::vector<std::string> warnings;
  const ScoreSeries s = score_dataset(*m->generator, ds, o, &warnings);
  for (const std::string& w : warnings) std::cerr << "warning: " << w << '\n';
  write_scores(a.out, s);
  std::cout << "wrote " << a.out << ": " << s.rows.size() << " frames\n";
  return 0;
}

int run_eval(const std::string& scores) {
  std::cout << evaluate(read_scores(scores)).report();
  return 0;
}

int run_perturb(const PerturbArgs& a) {
  auto m = load_model(a.model);
  const VideoDataset ds = load_dataset(a.data);
  PerturbConfig c;
  c.windows = a.windows;
  c.noise_sigma = a.noise;
  c.flow_scale = a.flow_scale;
  c.seed = a.seed;
  c.control = a.control;
  const PerturbReport r = perturb_experiment(*m->generator, ds, m->config.range, c);
  std::cout << r.report();
  if (!a.out.empty()) write_file_bytes(a.out, r.report());
  if (!a.windows_csv.empty()) write_file_bytes(a.windows_csv, r.windows_csv());
  return 0;
}

int run_gradcheck(const GradcheckArgs& a) {
  bool ok = true;
  for (const GradCheckResult& r : run_operation_gradchecks(a.instances, a.seed, a.tolerance)) {
    std::printf("%-24s max_rel_err=%.3e entries=%lld %s\n", r.name.c_str(), r.max_relative_error,
                static_cast<long long>(r.entries_checked), r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
  }
  const GradCheckResult g = run_generator_gradcheck(a.generator_params, a.seed, a.generator_tolerance);
  std::printf("%-24s max_rel_err=%.3e entries=%lld %s\n", "generator(tiny,16x16)", g.max_relative_error,
              static_cast<long long>(g.entries_checked), g.passed() ? "ok" : "FAIL");
  ok = ok && g.passed();
  std::cout << "gradcheck=" << (ok ? "pass" : "fail") << '\n';
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional-transformer video anomaly detection"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic video dataset (CTDS)");
  synth->add_option("--preset", sa.preset, "Scene preset: moving-squares or static");
  synth->add_option("--split", sa.split, "Preset split: train or test; also keys the seed")
      ->check(CLI::IsMember({"train", "test"}));
  synth->add_option("--scene", sa.scene, "key=value file overriding preset fields (empty: none)");
  synth->add_option("--seed", sa.seed, "Random seed");
  synth->add_option("--out", sa.out, "Output dataset path")->required();
  synth->add_option("--resolution", sa.resolution, "Frame side in pixels (0: preset)");
  synth->add_option("--clips", sa.clips, "Number of clips (0: preset)");
  synth->add_option("--frames", sa.frames, "Frames per clip (0: preset)");
  synth->add_option("--flow", sa.flow, "Flow source: analytic or block (empty: preset)");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train generator and critics");
  trn->add_option("--data", ta.data, "Training dataset (CTDS)")->required();
  trn->add_option("--out", ta.out, "Checkpoint path; a .cfg file is written next to it");
  trn->add_option("--loss-log", ta.loss_log, "Per-step loss CSV (empty: none)");
  trn->add_option("--model", ta.model, "Width preset: desk, paper or tiny");
  trn->add_option("--epochs", ta.epochs, "Training epochs");
  trn->add_option("--batch", ta.batch, "Batch size");
  trn->add_option("--lr", ta.lr, "Adam learning rate");
  trn->add_option("--beta1", ta.beta1, "Adam first-moment decay");
  trn->add_option("--beta2", ta.beta2, "Adam second-moment decay");
  trn->add_option("--n-critic", ta.n_critic, "Critic steps per generator step");
  trn->add_option("--lambda", ta.lambda, "Gradient penalty weight");
  trn->add_option("--seed", ta.seed, "Random seed (weights, shuffling, dropout, penalty)");
  trn->add_flag("--no-image-critic", ta.no_image_critic, "Disable the image critic (default: off)");
  trn->add_flag("--no-video-critic", ta.no_video_critic, "Disable the video critic (default: off)");
  trn->add_flag("--unet-skip-only", ta.unet_skip_only, "Replace attention by plain skip connections (default: off)");
  trn->add_flag("--skip-level1", ta.skip_level1, "Also merge level-1 features of the query frame (default: off)");
  trn->add_flag("--video-critic-image-only", ta.video_critic_image_only,
                "Video critic sees image channels only (default: off)");
  trn->add_option("--range", ta.range, "Image range: unit or symmetric");
  trn->add_option("--max-steps", ta.max_steps, "Stop after this many steps (0: run all epochs)");
  trn->add_option("--checkpoint-every", ta.checkpoint_every, "Also checkpoint every N epochs (0: end only)");

  ScoreArgs sc;
  auto* score = app.add_subcommand("score", "Score every predictable frame of a dataset");
  score->add_option("--data", sc.data, "Dataset to score (CTDS)")->required();
  score->add_option("--model", sc.model, "Checkpoint written by train");
  score->add_option("--out", sc.out, "Score CSV path");
  score->add_option("--normalization", sc.normalization, "Regularity range: per-clip or global");
  score->add_option("--source", sc.source, "Score source: error (log MSE) or psnr");
  score->add_option("--batch", sc.batch, "Inference batch size");

  std::string scores_path;
  auto* ev = app.add_subcommand("eval", "Frame-level AUC of a score CSV");
  ev->add_option("--scores", scores_path, "Score CSV written by score")->required();

  PerturbArgs pa;
  auto* pert = app.add_subcommand("perturb", "Attention response to perturbed memory frames");
  pert->add_option("--data", pa.data, "Dataset (CTDS)")->required();
  pert->add_option("--model", pa.model, "Checkpoint written by train");
  pert->add_option("--windows", pa.windows, "Number of sampled windows");
  pert->add_option("--noise", pa.noise, "Noise standard deviation on one image");
  pert->add_option("--flow-scale", pa.flow_scale, "Scale applied to another frame's flow");
  pert->add_option("--seed", pa.seed, "Random seed");
  pert->add_flag("--control", pa.control, "Record slots without perturbing (default: off)");
  pert->add_option("--out", pa.out, "Report path (empty: stdout only)");
  pert->add_option("--windows-csv", pa.windows_csv, "Per-window CSV path (empty: none)");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--instances", ga.instances, "Random instances per operation");
  gc->add_option("--seed", ga.seed, "Random seed");
  gc->add_option("--tolerance", ga.tolerance, "Max relative error per operation");
  gc->add_option("--generator-params", ga.generator_params, "Sampled parameters of the tiny generator");
  gc->add_option("--generator-tolerance", ga.generator_tolerance, "Max relative error for the generator");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*trn) return run_train(ta);
    if (*score) return run_score(sc);
    if (*ev) return run_eval(scores_path);
    if (*pert) return run_perturb(pa);
    if (*gc) return run_gradcheck(ga);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
