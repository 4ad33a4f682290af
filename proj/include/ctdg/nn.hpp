#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "ctdg/ops.hpp"

namespace ctdg {

/// A trainable tensor with its optimizer state.
struct Parameter {
  std::string name;
  Var value;  // leaf with requires_grad
  Tensor adam_m;
  Tensor adam_v;
  int64_t step_count = 0;
};

/// Owns every parameter and non-trainable buffer (running statistics, power
/// iteration vectors) of a model, keyed by unique dotted names. Addresses
/// are stable for the store's lifetime.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(std::string name, Tensor init);
  Tensor& add_buffer(std::string name, Tensor init);

  bool contains(std::string_view name) const;
  Parameter& param(std::string_view name);
  Tensor& buffer(std::string_view name);

  /// Parameters whose name starts with `prefix`, in registration order.
  std::vector<Parameter*> parameters(std::string_view prefix = "") const;
  std::vector<std::pair<std::string, Tensor*>> buffers(std::string_view prefix = "") const;

  void zero_grad(std::string_view prefix = "");
  int64_t parameter_count(std::string_view prefix = "") const;

 private:
  void claim(const std::string& name);

  std::vector<std::unique_ptr<Parameter>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::unordered_set<std::string> names_;
};

/// Normal init with std sqrt(1 / fan_in).
Tensor fan_in_normal(Shape shape, int64_t fan_in, Rng& rng);

struct Conv2dLayer {
  Conv2dLayer() = default;
  Conv2dLayer(ParameterStore& store, const std::string& name, int64_t kernel, int64_t in_channels,
              int64_t out_channels, ops::Conv2dOptions options, Rng& rng);
  Var forward(const Var& x) const;

  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  ops::Conv2dOptions options;
};

/// Stride-2 upsampling layer; kernel stored as [k, k, out, in].
struct ConvTranspose2dLayer {
  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(ParameterStore& store, const std::string& name, int64_t kernel, int64_t in_channels,
                       int64_t out_channels, Rng& rng);
  Var forward(const Var& x) const;

  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
};

struct BatchNormLayer {
  BatchNormLayer() = default;
  BatchNormLayer(ParameterStore& store, const std::string& name, int64_t channels);
  Var forward(const Var& x, const ops::BatchNormOptions& opt) const;

  Parameter* gamma = nullptr;
  Parameter* shift = nullptr;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
};

struct DenseLayer {
  DenseLayer() = default;
  DenseLayer(ParameterStore& store, const std::string& name, int64_t in_features, int64_t out_features, Rng& rng);
  /// x [n, in] -> [n, out]
  Var forward(const Var& x) const;

  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
};

/// Train/inference switch threaded through model forwards.
struct ForwardMode {
  bool training = false;
  // Running statistics are only refreshed when this is also set.
  bool update_stats = true;

  ops::BatchNormOptions batch_norm() const {
    ops::BatchNormOptions o;
    o.training = training;
    o.update_stats = training && update_stats;
    return o;
  }
};

}  // namespace ctdg
