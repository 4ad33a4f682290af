#include "ctdg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ctdg {

void ParameterStore::claim(const std::string& name) {
  if (name.empty()) throw ConfigError("parameter name must not be empty");
  if (names_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
}

Parameter& ParameterStore::add(std::string name, Tensor init) {
  claim(name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->adam_m = Tensor(init.shape(), 0.0);
  p->adam_v = Tensor(init.shape(), 0.0);
  p->value = Var(std::move(init), true);
  names_.insert(name);
  params_.push_back(std::move(p));
  return *params_.back();
}

Tensor& ParameterStore::add_buffer(std::string name, Tensor init) {
  claim(name);
  names_.insert(name);
  buffers_.emplace_back(std::move(name), std::make_unique<Tensor>(std::move(init)));
  return *buffers_.back().second;
}

bool ParameterStore::contains(std::string_view name) const { return names_.count(std::string(name)) != 0; }

Parameter& ParameterStore::param(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

Tensor& ParameterStore::buffer(std::string_view name) {
  for (auto& [n, t] : buffers_)
    if (n == name) return *t;
  throw ConfigError("unknown buffer '" + std::string(name) + "'");
}

std::vector<Parameter*> ParameterStore::parameters(std::string_view prefix) const {
  std::vector<Parameter*> out;
  for (const auto& p : params_)
    if (std::string_view(p->name).starts_with(prefix)) out.push_back(p.get());
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ParameterStore::buffers(std::string_view prefix) const {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (const auto& [n, t] : buffers_)
    if (std::string_view(n).starts_with(prefix)) out.emplace_back(n, t.get());
  return out;
}

void ParameterStore::zero_grad(std::string_view prefix) {
  for (Parameter* p : parameters(prefix)) p->value.zero_grad();
}

int64_t ParameterStore::parameter_count(std::string_view prefix) const {
  int64_t n = 0;
  for (Parameter* p : parameters(prefix)) n += p->value.value().numel();
  return n;
}

Tensor fan_in_normal(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

Conv2dLayer::Conv2dLayer(ParameterStore& store, const std::string& name, int64_t kernel, int64_t in_channels,
                         int64_t out_channels, ops::Conv2dOptions opt, Rng& rng)
    : options(opt) {
  weight = &store.add(name + ".weight",
                      fan_in_normal({kernel, kernel, in_channels, out_channels}, kernel * kernel * in_channels, rng));
  bias = &store.add(name + ".bias", Tensor({out_channels}, 0.0));
}

Var Conv2dLayer::forward(const Var& x) const {
  return ops::add_bias(ops::conv2d(x, weight->value, options), bias->value);
}

ConvTranspose2dLayer::ConvTranspose2dLayer(ParameterStore& store, const std::string& name, int64_t kernel,
                                           int64_t in_channels, int64_t out_channels, Rng& rng) {
  // Each output pixel of a stride-2 transpose sees about k*k*in/4 taps.
  const int64_t fan_in = std::max<int64_t>(1, kernel * kernel * in_channels / 4);
  weight = &store.add(name + ".weight", fan_in_normal({kernel, kernel, out_channels, in_channels}, fan_in, rng));
  bias = &store.add(name + ".bias", Tensor({out_channels}, 0.0));
}

Var ConvTranspose2dLayer::forward(const Var& x) const {
  return ops::add_bias(ops::conv2d_transpose(x, weight->value, 2), bias->value);
}

BatchNormLayer::BatchNormLayer(ParameterStore& store, const std::string& name, int64_t channels) {
  gamma = &store.add(name + ".gamma", Tensor({channels}, 1.0));
  shift = &store.add(name + ".beta", Tensor({channels}, 0.0));
  running_mean = &store.add_buffer(name + ".running_mean", Tensor({channels}, 0.0));
  running_var = &store.add_buffer(name + ".running_var", Tensor({channels}, 1.0));
}

Var BatchNormLayer::forward(const Var& x, const ops::BatchNormOptions& opt) const {
  return ops::batch_norm(x, gamma->value, shift->value, {running_mean, running_var}, opt);
}

DenseLayer::DenseLayer(ParameterStore& store, const std::string& name, int64_t in_features, int64_t out_features,
                       Rng& rng) {
  weight = &store.add(name + ".weight", fan_in_normal({in_features, out_features}, in_features, rng));
  bias = &store.add(name + ".bias", Tensor({out_features}, 0.0));
}

Var DenseLayer::forward(const Var& x) const { return ops::add_bias(ops::matmul(x, weight->value), bias->value); }

}  // namespace ctdg
