#include "ctdg/critics.hpp"

#include <cmath>

namespace ctdg {

namespace {

constexpr int64_t kKernel = 4;
constexpr int64_t kPad = 1;
constexpr int64_t kVideoFrames = kClipLength + 1;
constexpr int64_t kTemporalKernel = 2;
// Power iterations run once at construction so the first forward already
// sees converged vectors.
constexpr int kWarmStartIterations = 300;

Tensor random_unit(int64_t n, Rng& rng) {
  Tensor t({n});
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    t[i] = rng.normal();
    s += t[i] * t[i];
  }
  const double norm = std::sqrt(s);
  for (int64_t i = 0; i < n; ++i) t[i] /= norm;
  return t;
}

Tensor leaky_mask(const Tensor& z, double slope) {
  Tensor m(z.shape());
  for (int64_t i = 0; i < z.numel(); ++i) m[i] = z[i] > 0.0 ? 1.0 : slope;
  return m;
}

}  // namespace

CriticConfig CriticConfig::paper() { return {}; }

CriticConfig CriticConfig::desk() {
  CriticConfig c;
  c.channels = {16, 32, 64, 128};
  return c;
}

void CriticConfig::validate() const {
  for (int64_t c : channels)
    if (c < 1) throw ConfigError("critic channels must be positive");
  if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("critic leaky slope must lie in [0, 1)");
  if (power_iterations < 1) throw ConfigError("critic power iterations must be >= 1");
}

void CriticConfig::write(KeyValue& kv) const {
  kv.set("critic.channels", join_ints({channels.begin(), channels.end()}));
  kv.set("critic.slope", slope);
  kv.set("critic.power_iterations", static_cast<int64_t>(power_iterations));
  kv.set("critic.video_uses_flow", video_uses_flow);
}

CriticConfig CriticConfig::read(const KeyValue& kv) {
  CriticConfig c;
  const auto ch = kv.get_ints("critic.channels", {c.channels.begin(), c.channels.end()});
  if (ch.size() != 4) throw ConfigError("critic.channels needs 4 entries");
  std::copy(ch.begin(), ch.end(), c.channels.begin());
  c.slope = kv.get_double("critic.slope", c.slope);
  c.power_iterations = static_cast<int>(kv.get_int("critic.power_iterations", c.power_iterations));
  c.video_uses_flow = kv.get_bool("critic.video_uses_flow", c.video_uses_flow);
  c.validate();
  return c;
}

Critic::Critic(ParameterStore& store, const CriticConfig& config, CriticKind kind, Rng init_rng, std::string prefix)
    : config_(config), kind_(kind), prefix_(std::move(prefix)) {
  config_.validate();
  if (prefix_.empty()) prefix_ = kind == CriticKind::image ? "critic_image" : "critic_video";
  const bool video = kind == CriticKind::video;
  in_channels_ = video && !config_.video_uses_flow ? 1 : kFrameChannels;
  const int64_t kt = video ? kTemporalKernel : 1;
  const int64_t strides[] = {2, 2, 2, 1, 1};
  int64_t cin = in_channels_;
  for (int j = 0; j < 5; ++j) {
    const int64_t cout = j < 4 ? config_.channels[j] : 1;
    // The final conv runs after the temporal mean.
    const int64_t layer_kt = j < 4 ? kt : 1;
    const std::string name = prefix_ + (j < 4 ? ".block" + std::to_string(j + 1) : std::string(".final"));
    Shape shape = video ? Shape{layer_kt, kKernel, kKernel, cin, cout} : Shape{kKernel, kKernel, cin, cout};
    const int64_t fan_in = layer_kt * kKernel * kKernel * cin;
    Layer layer;
    layer.weight = &store.add(name + ".weight", fan_in_normal(std::move(shape), fan_in, init_rng));
    layer.bias = &store.add(name + ".bias", Tensor({cout}, 0.0));
    layer.u = &store.add_buffer(name + ".sn_u", random_unit(cout, init_rng));
    layer.v = &store.add_buffer(name + ".sn_v", random_unit(fan_in, init_rng));
    ops::spectral_sigma(layer.weight->value.value(), {layer.u, layer.v}, kWarmStartIterations);
    layer.stride = strides[j];
    layer.temporal_kernel = layer_kt;
    layers_.push_back(layer);
    cin = cout;
  }
}

CriticWeights Critic::normalized_weights(bool update) const {
  CriticWeights w;
  for (const Layer& l : layers_)
    w.kernels.push_back(ops::spectral_normalize(l.weight->value, {l.u, l.v}, config_.power_iterations, update));
  return w;
}

int64_t Critic::patch_extent(int64_t extent) {
  for (int64_t s : {2, 2, 2, 1, 1}) extent = (extent + 2 * kPad - kKernel) / s + 1;
  return extent;
}

Var Critic::to_stack(const Var& x) const {
  const Shape& s = x.shape();
  if (kind_ == CriticKind::image) {
    if (s.size() != 4 || s[3] != kFrameChannels)
      throw ShapeError("image critic expects [n, h, w, 4], got " + shape_str(s));
    return ops::reshape(x, {s[0], 1, s[1], s[2], s[3]});
  }
  if (s.size() != 5 || s[1] != kVideoFrames || s[4] != kFrameChannels)
    throw ShapeError("video critic expects [n, 6, h, w, 4], got " + shape_str(s));
  return config_.video_uses_flow ? x : ops::slice(x, 4, 0, 1);
}

ConvGeometry Critic::geometry(const Layer& layer, int64_t batch, const std::array<int64_t, 3>& in) const {
  const Shape& ws = layer.weight->value.shape();
  ConvGeometry g;
  g.batch = batch;
  g.in = in;
  g.in_channels = ws[ws.size() - 2];
  g.out_channels = ws.back();
  g.kernel = {layer.temporal_kernel, kKernel, kKernel};
  g.stride = {1, layer.stride, layer.stride};
  g.pad_before = g.pad_after = {0, kPad, kPad};
  g.resolve_output();
  return g;
}

CriticOutput Critic::forward(const Var& x, const CriticWeights& w) const {
  Var a = to_stack(x);
  const int64_t n = a.dim(0);
  for (int j = 0; j < 4; ++j) {
    const ConvGeometry g = geometry(layers_[j], n, {a.dim(1), a.dim(2), a.dim(3)});
    a = ops::leaky_relu(ops::add_bias(ops::conv_general(a, w.kernels[j], g), layers_[j].bias->value), config_.slope);
  }
  if (kind_ == CriticKind::video) {
    a = ops::mean_axis(a, 1);
    a = ops::reshape(a, {n, 1, a.dim(1), a.dim(2), a.dim(3)});
  }
  const ConvGeometry g = geometry(layers_[4], n, {1, a.dim(2), a.dim(3)});
  Var y = ops::add_bias(ops::conv_general(a, w.kernels[4], g), layers_[4].bias->value);
  CriticOutput out;
  out.patches = ops::reshape(y, {n, g.out[1], g.out[2]});
  out.score = ops::mean_axis(ops::reshape(y, {n, g.out[1] * g.out[2]}), 1);
  return out;
}

Var Critic::input_gradient(const Tensor& x, const CriticWeights& w) const {
  // Forward values for the activation masks.
  std::vector<ConvGeometry> geoms;
  std::vector<Tensor> masks;
  Shape stack_shape;
  {
    NoGradGuard guard;
    Var a = to_stack(Var(x));
    stack_shape = a.shape();
    const int64_t n = a.dim(0);
    for (int j = 0; j < 4; ++j) {
      geoms.push_back(geometry(layers_[j], n, {a.dim(1), a.dim(2), a.dim(3)}));
      Var z = ops::add_bias(ops::conv_general(a, w.kernels[j].detach(), geoms.back()), layers_[j].bias->value.detach());
      masks.push_back(leaky_mask(z.value(), config_.slope));
      a = ops::leaky_relu(z, config_.slope);
    }
    if (kind_ == CriticKind::video) a = ops::mean_axis(a, 1);
    const int64_t h = a.dim(-3), wd = a.dim(-2);
    geoms.push_back(geometry(layers_[4], n, {1, h, wd}));
  }
  const ConvGeometry& gf = geoms[4];
  const int64_t n = gf.batch;
  const double inv_patches = 1.0 / static_cast<double>(gf.out[1] * gf.out[2]);
  Var g(Tensor({n, 1, gf.out[1], gf.out[2], 1}, inv_patches));
  g = ops::conv_general_adjoint(g, w.kernels[4], gf);
  if (kind_ == CriticKind::video) {
    const int64_t t = geoms[3].out[0];
    g = ops::reshape(g, {n, g.dim(2), g.dim(3), g.dim(4)});
    g = ops::scale(ops::repeat_axis(g, 1, t), 1.0 / static_cast<double>(t));
  }
  for (int j = 3; j >= 0; --j) {
    g = ops::mul(g, Var(masks[j]));
    g = ops::conv_general_adjoint(g, w.kernels[j], geoms[j]);
  }
  g = ops::reshape(g, stack_shape);
  if (kind_ == CriticKind::image) return ops::reshape(g, x.shape());
  if (!config_.video_uses_flow) {
    // Flow channels do not reach the critic.
    Shape rest = x.shape();
    rest[4] = kFrameChannels - 1;
    return ops::concat({g, Var(Tensor(rest, 0.0))}, 4);
  }
  return g;
}

Tensor interpolate(const Tensor& real, const Tensor& fake, const std::vector<double>& eps) {
  if (real.shape() != fake.shape()) throw ShapeError("interpolate: real and fake shapes differ");
  const int64_t n = real.dim(0);
  if (static_cast<int64_t>(eps.size()) != n) throw ShapeError("interpolate: one eps per sample required");
  const int64_t per = real.numel() / n;
  Tensor out(real.shape());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = b * per; i < (b + 1) * per; ++i) out[i] = eps[b] * real[i] + (1.0 - eps[b]) * fake[i];
  return out;
}

Var penalty_from_gradient(const Var& gradient, double lambda) {
  return ops::scale(ops::mean(ops::square(ops::add_scalar(ops::row_norms(gradient), -1.0))), lambda);
}

PenaltyTerm gradient_penalty(const Critic& critic, const CriticWeights& w, const Tensor& real, const Tensor& fake,
                             Rng& rng, double lambda) {
  const int64_t n = real.dim(0);
  if (n < 1) throw ShapeError("gradient_penalty: empty batch");
  std::vector<double> eps(n);
  for (double& e : eps) e = rng.uniform(0.0, 1.0);
  PenaltyTerm term;
  term.interpolate = interpolate(real, fake, eps);
  Var g = critic.input_gradient(term.interpolate, w);
  term.gradient_norms = ops::row_norms(g.detach()).value();
  term.penalty = penalty_from_gradient(g, lambda);
  return term;
}

Var stack_with_past(const Var& past, const Var& frame) {
  const Shape& p = past.shape();
  const Shape& f = frame.shape();
  if (p.size() != 5 || f.size() != 4 || p[0] != f[0] || p[2] != f[1] || p[3] != f[2] || p[4] != f[3])
    throw ShapeError("stack_with_past: past " + shape_str(p) + " does not match frame " + shape_str(f));
  return ops::concat({past, ops::reshape(frame, {f[0], 1, f[1], f[2], f[3]})}, 1);
}

}  // namespace ctdg
