#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ctdg/checkpoint.hpp"
#include "ctdg/gradcheck.hpp"
#include "ctdg/scoring.hpp"
#include "ctdg/training.hpp"

namespace py = pybind11;
using namespace ctdg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

py::dict score_dict(const ScoreSeries& s) {
  std::vector<int64_t> clip, frame;
  std::vector<double> e_mse, e_t, reg;
  std::vector<int> label;
  for (const ScoreRow& r : s.rows) {
    clip.push_back(r.clip);
    frame.push_back(r.frame);
    e_mse.push_back(r.e_mse);
    e_t.push_back(r.e_t);
    reg.push_back(r.regularity);
    label.push_back(r.label);
  }
  py::dict d;
  d["clip"] = clip;
  d["frame"] = frame;
  d["e_mse"] = e_mse;
  d["e_t"] = e_t;
  d["regularity"] = reg;
  d["label"] = label;
  return d;
}

struct Model {
  TrainConfig config;
  ParameterStore store;
  std::unique_ptr<Generator> generator;
};

std::shared_ptr<Model> load_model(const std::string& path) {
  auto m = std::make_shared<Model>();
  m->config = TrainConfig::read(KeyValue::load(config_sidecar(path)));
  m->generator = std::make_unique<Generator>(m->store, m->config.generator, Rng(0));
  std::vector<CheckpointEntry> entries;
  for (CheckpointEntry& e : read_checkpoint(path))
    if (e.name.rfind("generator.", 0) == 0) entries.push_back(std::move(e));
  restore(m->store, entries);
  return m;
}

}  // namespace

PYBIND11_MODULE(_ctdg, m) {
  m.doc() = "Convolutional-transformer video anomaly detection";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("positional_encoding", &positional_encoding, py::arg("p"), py::arg("dims") = kPositionalDims);
  m.def(
      "attention_weights",
      [](const Array& feat, const Array& beta) {
        NoGradGuard guard;
        return to_array(attention_weights(Var(to_tensor(feat)), Var(to_tensor(beta))).value());
      },
      py::arg("features"), py::arg("beta"), "Softmax attention over memories: [n,T,k,d], [n,k] -> [n,k,T-1]");
  m.def(
      "spectral_sigma",
      [](const Array& w, int iterations) {
        Tensor t = to_tensor(w);
        Tensor u({t.dim(-1)}, 1.0), v({t.numel() / t.dim(-1)}, 1.0);
        return ops::spectral_sigma(t, {&u, &v}, iterations);
      },
      py::arg("weight"), py::arg("iterations") = 50);
  m.def(
      "gradient_penalty",
      [](const Array& grad, double lambda) {
        NoGradGuard guard;
        return penalty_from_gradient(Var(to_tensor(grad)), lambda).value().item();
      },
      py::arg("gradient"), py::arg("lam") = 10.0);
  m.def(
      "prediction_error", [](const Array& p, const Array& t) { return prediction_error(to_tensor(p), to_tensor(t)); },
      py::arg("prediction"), py::arg("truth"));
  m.def(
      "psnr", [](const Array& p, const Array& t) { return psnr(to_tensor(p), to_tensor(t)); }, py::arg("prediction"),
      py::arg("truth"));
  m.def("regularity", [](const std::vector<double>& e) { return regularity(e); }, py::arg("e_t"));
  m.def("rank_auc", &rank_auc, py::arg("scores"), py::arg("labels"));
  m.def("regularity_auc", &regularity_auc, py::arg("regularity"), py::arg("labels"));

  m.def(
      "synth",
      [](const std::string& preset, const std::string& split, uint64_t seed, int64_t resolution, int64_t clips,
         int64_t frames, const std::string& out) {
        SceneConfig sc = SceneConfig::preset(preset, split);
        if (resolution > 0) sc.resolution = resolution;
        if (clips > 0) sc.clips = clips;
        if (frames > 0) sc.frames_per_clip = frames;
        save_dataset(out, synth_generate(sc, mix_seed(seed, split)));
      },
      py::arg("preset"), py::arg("split"), py::arg("seed"), py::arg("resolution") = 0, py::arg("clips") = 0,
      py::arg("frames") = 0, py::arg("out"), "Write a synthetic CTDS dataset");
  m.def(
      "load_clip",
      [](const std::string& path, int64_t index) {
        const VideoDataset ds = load_dataset(path);
        if (index < 0 || index >= static_cast<int64_t>(ds.clips.size())) throw py::index_error("clip index");
        const VideoClip& c = ds.clips[index];
        py::array_t<float> images({c.frames, c.height, c.width});
        py::array_t<float> flows({c.frames, c.height, c.width, int64_t{3}});
        std::copy(c.images.begin(), c.images.end(), images.mutable_data());
        std::copy(c.flows.begin(), c.flows.end(), flows.mutable_data());
        return py::make_tuple(images, flows, std::vector<int>(c.labels.begin(), c.labels.end()));
      },
      py::arg("path"), py::arg("index"), "Images [T,h,w], flows [T,h,w,3] and labels of one clip");

  m.def(
      "train",
      [](const std::string& data, const std::string& out, const std::string& loss_log, const std::string& model,
         int64_t epochs, int64_t max_steps, int64_t batch, uint64_t seed, bool image_critic, bool video_critic,
         bool unet_skip_only) {
        TrainConfig c;
        if (model == "tiny") {
          c.generator = GeneratorConfig::tiny();
        } else if (model == "paper") {
          c.generator = GeneratorConfig::paper();
          c.critic = CriticConfig::paper();
        } else if (model != "desk") {
          throw ConfigError("unknown model '" + model + "' (desk, paper or tiny)");
        }
        c.generator.unet_skip_only = unet_skip_only;
        c.epochs = epochs;
        c.max_steps = max_steps;
        c.batch_size = batch;
        c.seed = seed;
        c.image_critic = image_critic;
        c.video_critic = video_critic;
        TrainSummary s;
        {
          py::gil_scoped_release release;
          s = train(load_dataset(data), c, {out, loss_log});
        }
        return py::make_tuple(s.initial_l1, s.final_l1, static_cast<int64_t>(s.log.size()));
      },
      py::arg("data"), py::arg("out"), py::arg("loss_log") = "", py::arg("model") = "desk", py::arg("epochs") = 10,
      py::arg("max_steps") = 0, py::arg("batch") = 5, py::arg("seed") = 7, py::arg("image_critic") = true,
      py::arg("video_critic") = true, py::arg("unet_skip_only") = false,
      "Train and write a checkpoint; returns (initial_l1, final_l1, steps)");
  m.def(
      "score",
      [](const std::string& data, const std::string& model, const std::string& normalization) {
        auto mdl = load_model(model);
        ScoreOptions o;
        o.range = mdl->config.range;
        o.normalization = parse_normalization(normalization);
        return score_dict(score_dataset(*mdl->generator, load_dataset(data), o));
      },
      py::arg("data"), py::arg("model"), py::arg("normalization") = "per-clip");
  m.def(
      "perturb",
      [](const std::string& data, const std::string& model, int64_t windows, uint64_t seed) {
        auto mdl = load_model(model);
        PerturbConfig c;
        c.windows = windows;
        c.seed = seed;
        const PerturbReport r = perturb_experiment(*mdl->generator, load_dataset(data), mdl->config.range, c);
        return py::make_tuple(r.fraction_lower, r.max_row_sum_error);
      },
      py::arg("data"), py::arg("model"), py::arg("windows") = 100, py::arg("seed") = 7,
      "Returns (fraction of windows with lower weight on perturbed frames, max row-sum error)");
  m.def(
      "gradcheck",
      [](int instances, uint64_t seed) {
        py::dict d;
        for (const GradCheckResult& r : run_operation_gradchecks(instances, seed)) d[py::str(r.name)] = r.max_relative_error;
        return d;
      },
      py::arg("instances") = 5, py::arg("seed") = 7, "Max relative finite-difference error per operation");
}
