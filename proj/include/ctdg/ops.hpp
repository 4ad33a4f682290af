#pragma once

#include <vector>

#include "ctdg/autograd.hpp"
#include "ctdg/conv.hpp"
#include "ctdg/rng.hpp"

// Differentiable operations. All tensors are channels-last; leading axes are
// batch axes unless documented otherwise.
namespace ctdg::ops {

inline constexpr double kSeluScale = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

// Elementwise arithmetic on identically shaped operands.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Adds a [c] bias along the last axis.
Var add_bias(const Var& x, const Var& bias);

Var sum(const Var& a);
Var mean(const Var& a);
/// Mean over one axis, which is removed.
Var mean_axis(const Var& a, int64_t axis);
/// Inserts a new axis of extent `count`, copying the input along it.
Var repeat_axis(const Var& a, int64_t axis, int64_t count);
/// Euclidean norm of each leading-axis slice: [n, ...] -> [n]. The gradient
/// at a zero slice is taken as zero.
Var row_norms(const Var& a);

Var reshape(const Var& a, Shape shape);
Var concat(const std::vector<Var>& parts, int64_t axis);
Var slice(const Var& a, int64_t axis, int64_t begin, int64_t end);

Var selu(const Var& x);
Var sigmoid(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.2);
Var softplus(const Var& x);
Var abs(const Var& x);
Var square(const Var& x);
Var softmax(const Var& x, int64_t axis = -1);

/// [n, d] x [d, m] -> [n, m]
Var matmul(const Var& x, const Var& w);

/// Spatial mean: [..., h, w, c] -> [..., c]
Var global_average_pool(const Var& x);

/// Inverted dropout: kept entries are scaled by 1/(1 - rate). Identity when
/// not training.
Var dropout(const Var& x, double rate, bool training, Rng& rng);

struct Conv2dOptions {
  int64_t stride = 1;
  int64_t dilation = 1;
  Padding padding = Padding::same;
};

/// x [n, h, w, c_in] (or [h, w, c_in]), kernel [k, k, c_in, c_out].
Var conv2d(const Var& x, const Var& kernel, const Conv2dOptions& opt = {});

/// Fractionally strided convolution: the adjoint of conv2d with the same
/// kernel, stride and `same` padding taken on an input `stride` times larger.
/// x [n, h, w, c], kernel [k, k, c_out, c] -> [n, stride*h, stride*w, c_out].
Var conv2d_transpose(const Var& x, const Var& kernel, int64_t stride = 2);

/// x [n, d, h, w, c_in], kernel [kt, k, k, c_in, c_out]. No temporal padding.
Var conv3d(const Var& x, const Var& kernel, int64_t spatial_stride, int64_t temporal_stride = 1,
           int64_t spatial_padding = 0);

/// Convolution with an explicit geometry. `x` holds [n, d, h, w, c_in] in
/// any rank with matching element count; the result takes `out_shape`, or
/// [n, od, oh, ow, c_out] when empty.
Var conv_general(const Var& x, const Var& kernel, const ConvGeometry& g, Shape out_shape = {});
/// Adjoint of conv_general for the same geometry, differentiable in both
/// arguments: dy [n, od, oh, ow, c_out] -> [n, d, h, w, c_in] (or `out_shape`).
Var conv_general_adjoint(const Var& dy, const Var& kernel, const ConvGeometry& g, Shape out_shape = {});

/// Running statistics for batch_norm.
struct BatchNormStats {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
};

struct BatchNormOptions {
  bool training = true;
  bool update_stats = true;
  double epsilon = 1e-5;
  double momentum = 0.1;
};

/// Per-channel normalization over all leading axes; gamma and shift are [c].
Var batch_norm(const Var& x, const Var& gamma, const Var& shift, BatchNormStats stats,
               const BatchNormOptions& opt = {});

/// Cosine similarity between the query (last time step) and each earlier
/// time step: feat [n, T, k, d] -> [n, k, T-1], entry i-1 compares the query
/// with time step T-1-i. Norms are floored at `floor`.
Var query_memory_cosine(const Var& feat, double floor = 1e-12);

/// x [n, k, m] scaled by s [n, k] along the last axis.
Var scale_rows(const Var& x, const Var& s);

/// Multi-head weighted sum of memory maps. values [n, T, h, w, C] with C split
/// into k equal head groups; weights [n, k, T-1], entry i-1 weighting time
/// step T-1-i. Returns [n, h, w, C].
Var attend_memories(const Var& values, const Var& weights);

/// g * f + (1 - g) * h, elementwise.
Var gate_blend(const Var& g, const Var& f, const Var& h);

/// Persistent power-iteration vectors for one weight.
struct SpectralState {
  Tensor* u = nullptr;  // [c_out]
  Tensor* v = nullptr;  // [numel / c_out]
};

/// Largest-singular-value estimate of `weight` viewed as a c_out x rest
/// matrix (c_out is the last axis). Runs `iterations` power steps, updating
/// the state vectors when `update` is set. Floored at 1e-12.
double spectral_sigma(const Tensor& weight, SpectralState state, int iterations, bool update = true);

/// weight / sigma, with sigma = u^T W v from the (post-iteration) state.
/// The state vectors are treated as constants for differentiation.
Var spectral_normalize(const Var& weight, SpectralState state, int iterations = 1, bool update = true);

}  // namespace ctdg::ops
