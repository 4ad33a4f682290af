#include "ctdg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace ctdg::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Adds contrib(i) into the gradient of input `idx`, if that input wants one.
template <class F>
void accumulate_into(Node& self, size_t idx, F&& contrib) {
  Node& in = *self.inputs[idx];
  if (!in.requires_grad) return;
  auto dst = in.grad_buffer().data();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += contrib(i);
}

double* grad_ptr(Node& self, size_t idx) {
  Node& in = *self.inputs[idx];
  return in.requires_grad ? in.grad_buffer().data().data() : nullptr;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

int64_t normalize_axis(int64_t axis, int64_t rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

struct AxisSplit {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int64_t axis) {
  AxisSplit r;
  for (int64_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class F>
Var unary(const Var& x, const char* op, F&& fn) {
  Tensor y(x.shape());
  Tensor dydx(x.shape());
  const auto xs = x.value().data();
  for (int64_t i = 0; i < y.numel(); ++i) {
    auto [v, d] = fn(xs[i]);
    y[i] = v;
    dydx[i] = d;
  }
  return make_result(std::move(y), {x},
                     [dydx = std::move(dydx)](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i] * dydx[i]; });
                     },
                     op);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(y), {a, b},
                     [](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i]; });
                       accumulate_into(self, 1, [&](size_t i) { return g[i]; });
                     },
                     "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(y), {a, b},
                     [](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i]; });
                       accumulate_into(self, 1, [&](size_t i) { return -g[i]; });
                     },
                     "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(y), {a, b},
                     [](Node& self) {
                       const auto g = self.grad.data();
                       const auto av = self.inputs[0]->value.data();
                       const auto bv = self.inputs[1]->value.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i] * bv[i]; });
                       accumulate_into(self, 1, [&](size_t i) { return g[i] * av[i]; });
                     },
                     "mul");
}

Var scale(const Var& a, double s) {
  Tensor y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * s;
  return make_result(std::move(y), {a},
                     [s](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i] * s; });
                     },
                     "scale");
}

Var add_scalar(const Var& a, double s) {
  Tensor y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + s;
  return make_result(std::move(y), {a},
                     [](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i]; });
                     },
                     "add_scalar");
}

Var add_bias(const Var& x, const Var& bias) {
  const int64_t c = x.value().dim(-1);
  if (bias.value().rank() != 1 || bias.dim(0) != c) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match channels of " +
                     shape_str(x.shape()));
  }
  Tensor y(x.shape());
  const auto xs = x.value().data();
  const auto bs = bias.value().data();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = xs[i] + bs[i % c];
  return make_result(std::move(y), {x, bias},
                     [c](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i]; });
                       if (double* gb = grad_ptr(self, 1)) {
                         for (size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
                       }
                     },
                     "add_bias");
}

Var sum(const Var& a) {
  const auto xs = a.value().data();
  const double s = std::accumulate(xs.begin(), xs.end(), 0.0);
  return make_result(Tensor::scalar(s), {a},
                     [](Node& self) {
                       const double g = self.grad[0];
                       accumulate_into(self, 0, [&](size_t) { return g; });
                     },
                     "sum");
}

Var mean(const Var& a) {
  const auto xs = a.value().data();
  const double n = static_cast<double>(xs.size());
  const double s = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  return make_result(Tensor::scalar(s), {a},
                     [n](Node& self) {
                       const double g = self.grad[0] / n;
                       accumulate_into(self, 0, [&](size_t) { return g; });
                     },
                     "mean");
}

Var mean_axis(const Var& a, int64_t axis) {
  axis = normalize_axis(axis, a.value().rank(), "mean_axis");
  const AxisSplit sp = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  Tensor y(out_shape.empty() ? Shape{} : out_shape, 0.0);
  const auto xs = a.value().data();
  const double inv = 1.0 / static_cast<double>(sp.extent);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t e = 0; e < sp.extent; ++e)
      for (int64_t i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += xs[(o * sp.extent + e) * sp.inner + i] * inv;
  return make_result(std::move(y), {a},
                     [sp, inv](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       if (!gx) return;
                       const auto g = self.grad.data();
                       for (int64_t o = 0; o < sp.outer; ++o)
                         for (int64_t e = 0; e < sp.extent; ++e)
                           for (int64_t i = 0; i < sp.inner; ++i)
                             gx[(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i] * inv;
                     },
                     "mean_axis");
}

Var repeat_axis(const Var& a, int64_t axis, int64_t count) {
  const int64_t rank = a.value().rank();
  if (axis < 0) axis += rank + 1;
  if (axis < 0 || axis > rank || count < 1) throw ShapeError("repeat_axis: bad axis or count");
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.begin() + axis, count);
  AxisSplit sp = split_at(out_shape, axis);
  Tensor y(out_shape);
  const auto xs = a.value().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t e = 0; e < sp.extent; ++e)
      std::copy_n(xs.data() + o * sp.inner, sp.inner, y.data().data() + (o * sp.extent + e) * sp.inner);
  return make_result(std::move(y), {a},
                     [sp](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       if (!gx) return;
                       const auto g = self.grad.data();
                       for (int64_t o = 0; o < sp.outer; ++o)
                         for (int64_t e = 0; e < sp.extent; ++e)
                           for (int64_t i = 0; i < sp.inner; ++i)
                             gx[o * sp.inner + i] += g[(o * sp.extent + e) * sp.inner + i];
                     },
                     "repeat_axis");
}

Var row_norms(const Var& a) {
  if (a.value().rank() < 1) throw ShapeError("row_norms needs a leading axis");
  const int64_t n = a.dim(0);
  const int64_t m = a.value().numel() / n;
  Tensor y(Shape{n});
  const auto xs = a.value().data();
  for (int64_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < m; ++j) s += xs[r * m + j] * xs[r * m + j];
    y[r] = std::sqrt(s);
  }
  return make_result(y, {a},
                     [y, m](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       if (!gx) return;
                       const auto xs = self.inputs[0]->value.data();
                       for (int64_t r = 0; r < y.numel(); ++r) {
                         if (y[r] == 0.0) continue;
                         const double f = self.grad[r] / y[r];
                         for (int64_t j = 0; j < m; ++j) gx[r * m + j] += f * xs[r * m + j];
                       }
                     },
                     "row_norms");
}

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return make_result(std::move(y), {a},
                     [](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i]; });
                     },
                     "reshape");
}

Var concat(const std::vector<Var>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  axis = normalize_axis(axis, static_cast<int64_t>(s0.size()), "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (size_t i = 0; ok && i < s.size(); ++i) ok = (static_cast<int64_t>(i) == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const AxisSplit out_sp = split_at(out_shape, axis);
  std::vector<int64_t> offsets;
  Tensor y(out_shape);
  int64_t offset = 0;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    const int64_t block = p.shape()[axis] * out_sp.inner;
    const auto xs = p.value().data();
    for (int64_t o = 0; o < out_sp.outer; ++o)
      std::copy_n(xs.data() + o * block, block, y.data().data() + o * out_sp.extent * out_sp.inner + offset);
    offset += block;
  }
  return make_result(std::move(y), parts,
                     [out_sp, offsets](Node& self) {
                       const auto g = self.grad.data();
                       const int64_t row = out_sp.extent * out_sp.inner;
                       for (size_t k = 0; k < self.inputs.size(); ++k) {
                         double* gx = grad_ptr(self, k);
                         if (!gx) continue;
                         const int64_t block = self.inputs[k]->value.numel() / out_sp.outer;
                         for (int64_t o = 0; o < out_sp.outer; ++o)
                           for (int64_t j = 0; j < block; ++j) gx[o * block + j] += g[o * row + offsets[k] + j];
                       }
                     },
                     "concat");
}

Var slice(const Var& a, int64_t axis, int64_t begin, int64_t end) {
  axis = normalize_axis(axis, a.value().rank(), "slice");
  const AxisSplit sp = split_at(a.shape(), axis);
  if (begin < 0 || end > sp.extent || begin >= end) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const int64_t block = (end - begin) * sp.inner;
  Tensor y(out_shape);
  const auto xs = a.value().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(xs.data() + (o * sp.extent + begin) * sp.inner, block, y.data().data() + o * block);
  return make_result(std::move(y), {a},
                     [sp, begin, block](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       if (!gx) return;
                       const auto g = self.grad.data();
                       for (int64_t o = 0; o < sp.outer; ++o)
                         for (int64_t j = 0; j < block; ++j) gx[(o * sp.extent + begin) * sp.inner + j] += g[o * block + j];
                     },
                     "slice");
}

Var selu(const Var& x) {
  return unary(x, "selu", [](double v) -> std::pair<double, double> {
    if (v > 0.0) return {kSeluScale * v, kSeluScale};
    const double e = std::exp(v);
    return {kSeluScale * kSeluAlpha * (e - 1.0), kSeluScale * kSeluAlpha * e};
  });
}

Var sigmoid(const Var& x) {
  return unary(x, "sigmoid", [](double v) -> std::pair<double, double> {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    return {s, s * (1.0 - s)};
  });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(x, "leaky_relu", [slope](double v) -> std::pair<double, double> {
    return v > 0.0 ? std::pair{v, 1.0} : std::pair{slope * v, slope};
  });
}

Var softplus(const Var& x) {
  return unary(x, "softplus", [](double v) -> std::pair<double, double> {
    const double value = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    return {value, s};
  });
}

Var abs(const Var& x) {
  return unary(x, "abs", [](double v) -> std::pair<double, double> {
    return {std::abs(v), v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0)};
  });
}

Var square(const Var& x) {
  return unary(x, "square", [](double v) -> std::pair<double, double> { return {v * v, 2.0 * v}; });
}

Var softmax(const Var& x, int64_t axis) {
  axis = normalize_axis(axis, x.value().rank(), "softmax");
  const AxisSplit sp = split_at(x.shape(), axis);
  Tensor y(x.shape());
  const auto xs = x.value().data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      auto at = [&](int64_t e) { return (o * sp.extent + e) * sp.inner + i; };
      double mx = xs[at(0)];
      for (int64_t e = 1; e < sp.extent; ++e) mx = std::max(mx, xs[at(e)]);
      double z = 0.0;
      for (int64_t e = 0; e < sp.extent; ++e) z += (y[at(e)] = std::exp(xs[at(e)] - mx));
      for (int64_t e = 0; e < sp.extent; ++e) y[at(e)] /= z;
    }
  return make_result(y, {x},
                     [y, sp](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       if (!gx) return;
                       const auto g = self.grad.data();
                       for (int64_t o = 0; o < sp.outer; ++o)
                         for (int64_t i = 0; i < sp.inner; ++i) {
                           auto at = [&](int64_t e) { return (o * sp.extent + e) * sp.inner + i; };
                           double dotp = 0.0;
                           for (int64_t e = 0; e < sp.extent; ++e) dotp += g[at(e)] * y[at(e)];
                           for (int64_t e = 0; e < sp.extent; ++e) gx[at(e)] += y[at(e)] * (g[at(e)] - dotp);
                         }
                     },
                     "softmax");
}

Var matmul(const Var& x, const Var& w) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.dim(1) != w.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const int64_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
  Tensor y(Shape{n, m});
  Eigen::Map<RowMat>(y.data().data(), n, m).noalias() =
      Eigen::Map<const RowMat>(x.value().data().data(), n, d) * Eigen::Map<const RowMat>(w.value().data().data(), d, m);
  return make_result(std::move(y), {x, w},
                     [n, d, m](Node& self) {
                       Eigen::Map<const RowMat> G(self.grad.data().data(), n, m);
                       if (double* gx = grad_ptr(self, 0)) {
                         Eigen::Map<const RowMat> W(self.inputs[1]->value.data().data(), d, m);
                         Eigen::Map<RowMat>(gx, n, d).noalias() += G * W.transpose();
                       }
                       if (double* gw = grad_ptr(self, 1)) {
                         Eigen::Map<const RowMat> X(self.inputs[0]->value.data().data(), n, d);
                         Eigen::Map<RowMat>(gw, d, m).noalias() += X.transpose() * G;
                       }
                     },
                     "matmul");
}

Var global_average_pool(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() < 3) throw ShapeError("global_average_pool expects [..., h, w, c], got " + shape_str(s));
  const int64_t c = s.back();
  const int64_t hw = s[s.size() - 2] * s[s.size() - 3];
  const int64_t outer = x.value().numel() / (hw * c);
  Shape out_shape(s.begin(), s.end() - 3);
  out_shape.push_back(c);
  Tensor y(out_shape, 0.0);
  const auto xs = x.value().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t p = 0; p < hw; ++p)
      for (int64_t k = 0; k < c; ++k) y[o * c + k] += xs[(o * hw + p) * c + k];
    for (int64_t k = 0; k < c; ++k) y[o * c + k] /= static_cast<double>(hw);
  }
  return make_result(std::move(y), {x},
                     [outer, hw, c](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       if (!gx) return;
                       const auto g = self.grad.data();
                       const double inv = 1.0 / static_cast<double>(hw);
                       for (int64_t o = 0; o < outer; ++o)
                         for (int64_t p = 0; p < hw; ++p)
                           for (int64_t k = 0; k < c; ++k) gx[(o * hw + p) * c + k] += g[o * c + k] * inv;
                     },
                     "global_average_pool");
}

Var dropout(const Var& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(x.shape());
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor y(x.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = x.value()[i] * mask[i];
  return make_result(std::move(y), {x},
                     [mask = std::move(mask)](Node& self) {
                       const auto g = self.grad.data();
                       accumulate_into(self, 0, [&](size_t i) { return g[i] * mask[i]; });
                     },
                     "dropout");
}

Var conv_general(const Var& x, const Var& kernel, const ConvGeometry& g, Shape out_shape) {
  const int64_t expected_in = g.batch * g.in_positions() * g.in_channels;
  if (x.value().numel() != expected_in || x.value().dim(-1) != g.in_channels) {
    throw ShapeError("conv: input " + shape_str(x.shape()) + " does not match geometry with " +
                     std::to_string(g.in_channels) + " input channels");
  }
  if (kernel.value().numel() != g.patch_size() * g.out_channels || kernel.value().dim(-1) != g.out_channels) {
    throw ShapeError("conv: kernel " + shape_str(kernel.shape()) + " does not match geometry");
  }
  if (out_shape.empty()) out_shape = {g.batch, g.out[0], g.out[1], g.out[2], g.out_channels};
  Tensor y(out_shape, 0.0);
  kernels::conv_forward(g, x.value().data().data(), kernel.value().data().data(), y.data().data());
  return make_result(std::move(y), {x, kernel},
                     [g](Node& self) {
                       const double* dy = self.grad.data().data();
                       if (double* gx = grad_ptr(self, 0)) {
                         kernels::conv_backward_data(g, dy, self.inputs[1]->value.data().data(), gx);
                       }
                       if (double* gw = grad_ptr(self, 1)) {
                         kernels::conv_backward_weight(g, self.inputs[0]->value.data().data(), dy, gw);
                       }
                     },
                     "conv");
}

Var conv_general_adjoint(const Var& dy, const Var& kernel, const ConvGeometry& g, Shape out_shape) {
  if (dy.value().numel() != g.batch * g.out_positions() * g.out_channels) {
    throw ShapeError("conv adjoint: input " + shape_str(dy.shape()) + " does not match geometry");
  }
  if (kernel.value().numel() != g.patch_size() * g.out_channels) {
    throw ShapeError("conv adjoint: kernel " + shape_str(kernel.shape()) + " does not match geometry");
  }
  if (out_shape.empty()) out_shape = {g.batch, g.in[0], g.in[1], g.in[2], g.in_channels};
  Tensor x(out_shape, 0.0);
  kernels::conv_backward_data(g, dy.value().data().data(), kernel.value().data().data(), x.data().data());
  return make_result(std::move(x), {dy, kernel},
                     [g](Node& self) {
                       // self.grad lives in the (un-strided) input space of the forward conv.
                       const double* gx = self.grad.data().data();
                       if (double* gdy = grad_ptr(self, 0)) {
                         Tensor tmp(self.inputs[0]->value.shape(), 0.0);
                         kernels::conv_forward(g, gx, self.inputs[1]->value.data().data(), tmp.data().data());
                         for (int64_t i = 0; i < tmp.numel(); ++i) gdy[i] += tmp[i];
                       }
                       if (double* gw = grad_ptr(self, 1)) {
                         kernels::conv_backward_weight(g, gx, self.inputs[0]->value.data().data(), gw);
                       }
                     },
                     "conv_adjoint");
}

Var conv2d(const Var& x, const Var& kernel, const Conv2dOptions& opt) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 3 && xs.size() != 4) throw ShapeError("conv2d expects [n,h,w,c] or [h,w,c], got " + shape_str(xs));
  if (ks.size() != 4) throw ShapeError("conv2d kernel must be [k,k,c_in,c_out], got " + shape_str(ks));
  const bool batched = xs.size() == 4;
  const int64_t off = batched ? 1 : 0;
  if (xs[off + 2] != ks[2]) {
    throw ShapeError("conv2d: input has " + std::to_string(xs[off + 2]) + " channels but kernel " + shape_str(ks) +
                     " expects " + std::to_string(ks[2]));
  }
  if (opt.stride < 1 || opt.dilation < 1) throw ConfigError("conv2d: stride and dilation must be >= 1");
  ConvGeometry g;
  g.batch = batched ? xs[0] : 1;
  g.in = {1, xs[off], xs[off + 1]};
  g.in_channels = ks[2];
  g.out_channels = ks[3];
  g.kernel = {1, ks[0], ks[1]};
  g.stride = {1, opt.stride, opt.stride};
  g.dilation = {1, opt.dilation, opt.dilation};
  apply_padding(g, 1, opt.padding);
  apply_padding(g, 2, opt.padding);
  g.resolve_output();
  Shape out = batched ? Shape{g.batch, g.out[1], g.out[2], g.out_channels} : Shape{g.out[1], g.out[2], g.out_channels};
  return conv_general(x, kernel, g, std::move(out));
}

Var conv2d_transpose(const Var& x, const Var& kernel, int64_t stride) {
  if (stride != 1 && stride != 2) {
    throw ConfigError("conv2d_transpose: unsupported stride " + std::to_string(stride) + " (1 or 2)");
  }
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 3 && xs.size() != 4) throw ShapeError("conv2d_transpose expects [n,h,w,c], got " + shape_str(xs));
  if (ks.size() != 4) throw ShapeError("conv2d_transpose kernel must be [k,k,c_out,c_in], got " + shape_str(ks));
  const bool batched = xs.size() == 4;
  const int64_t off = batched ? 1 : 0;
  if (xs[off + 2] != ks[3]) {
    throw ShapeError("conv2d_transpose: input has " + std::to_string(xs[off + 2]) + " channels but kernel " +
                     shape_str(ks) + " expects " + std::to_string(ks[3]));
  }
  ConvGeometry g;
  g.batch = batched ? xs[0] : 1;
  g.in = {1, stride * xs[off], stride * xs[off + 1]};
  g.in_channels = ks[2];
  g.out_channels = ks[3];
  g.kernel = {1, ks[0], ks[1]};
  g.stride = {1, stride, stride};
  apply_padding(g, 1, Padding::same);
  apply_padding(g, 2, Padding::same);
  g.resolve_output();
  Shape out = batched ? Shape{g.batch, g.in[1], g.in[2], g.in_channels} : Shape{g.in[1], g.in[2], g.in_channels};
  return conv_general_adjoint(x, kernel, g, std::move(out));
}

Var conv3d(const Var& x, const Var& kernel, int64_t spatial_stride, int64_t temporal_stride, int64_t spatial_padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 5) throw ShapeError("conv3d expects [n,d,h,w,c], got " + shape_str(xs));
  if (ks.size() != 5) throw ShapeError("conv3d kernel must be [kt,k,k,c_in,c_out], got " + shape_str(ks));
  if (xs[4] != ks[3]) {
    throw ShapeError("conv3d: input has " + std::to_string(xs[4]) + " channels but kernel " + shape_str(ks) +
                     " expects " + std::to_string(ks[3]));
  }
  if (xs[1] < ks[0]) {
    throw ShapeError("conv3d: temporal extent " + std::to_string(xs[1]) + " is smaller than temporal kernel " +
                     std::to_string(ks[0]));
  }
  ConvGeometry g;
  g.batch = xs[0];
  g.in = {xs[1], xs[2], xs[3]};
  g.in_channels = ks[3];
  g.out_channels = ks[4];
  g.kernel = {ks[0], ks[1], ks[2]};
  g.stride = {temporal_stride, spatial_stride, spatial_stride};
  g.pad_before = g.pad_after = {0, spatial_padding, spatial_padding};
  g.resolve_output();
  return conv_general(x, kernel, g);
}

Var batch_norm(const Var& x, const Var& gamma, const Var& shift, BatchNormStats stats, const BatchNormOptions& opt) {
  const int64_t c = x.value().dim(-1);
  if (gamma.value().numel() != c || shift.value().numel() != c) {
    throw ShapeError("batch_norm: affine parameters do not match " + std::to_string(c) + " channels");
  }
  if (!stats.running_mean || !stats.running_var) throw ConfigError("batch_norm: missing running statistics");
  const int64_t m = x.value().numel() / c;
  const auto xs = x.value().data();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (opt.training) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t k = 0; k < c; ++k) mu[k] += xs[i * c + k];
    for (int64_t k = 0; k < c; ++k) mu[k] /= static_cast<double>(m);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t k = 0; k < c; ++k) {
        const double d = xs[i * c + k] - mu[k];
        var[k] += d * d;
      }
    for (int64_t k = 0; k < c; ++k) var[k] /= static_cast<double>(m);
    if (opt.update_stats) {
      const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
      for (int64_t k = 0; k < c; ++k) {
        (*stats.running_mean)[k] = (1.0 - opt.momentum) * (*stats.running_mean)[k] + opt.momentum * mu[k];
        (*stats.running_var)[k] = (1.0 - opt.momentum) * (*stats.running_var)[k] + opt.momentum * var[k] * unbias;
      }
    }
  } else {
    for (int64_t k = 0; k < c; ++k) {
      mu[k] = (*stats.running_mean)[k];
      var[k] = (*stats.running_var)[k];
    }
  }
  std::vector<double> inv_std(c);
  for (int64_t k = 0; k < c; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + opt.epsilon);
  Tensor xhat(x.shape());
  Tensor y(x.shape());
  const auto gs = gamma.value().data();
  const auto bs = shift.value().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t k = 0; k < c; ++k) {
      const int64_t j = i * c + k;
      xhat[j] = (xs[j] - mu[k]) * inv_std[k];
      y[j] = gs[k] * xhat[j] + bs[k];
    }
  const bool training = opt.training;
  return make_result(std::move(y), {x, gamma, shift},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), c, m, training](Node& self) {
                       const auto g = self.grad.data();
                       const auto gam = self.inputs[1]->value.data();
                       std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                       for (int64_t i = 0; i < m; ++i)
                         for (int64_t k = 0; k < c; ++k) {
                           sum_g[k] += g[i * c + k];
                           sum_gx[k] += g[i * c + k] * xhat[i * c + k];
                         }
                       if (double* gg = grad_ptr(self, 1))
                         for (int64_t k = 0; k < c; ++k) gg[k] += sum_gx[k];
                       if (double* gb = grad_ptr(self, 2))
                         for (int64_t k = 0; k < c; ++k) gb[k] += sum_g[k];
                       double* gx = grad_ptr(self, 0);
                       if (!gx) return;
                       if (!training) {
                         for (int64_t i = 0; i < m; ++i)
                           for (int64_t k = 0; k < c; ++k) gx[i * c + k] += g[i * c + k] * gam[k] * inv_std[k];
                         return;
                       }
                       const double inv_m = 1.0 / static_cast<double>(m);
                       for (int64_t i = 0; i < m; ++i)
                         for (int64_t k = 0; k < c; ++k) {
                           const int64_t j = i * c + k;
                           gx[j] += gam[k] * inv_std[k] * (g[j] - inv_m * sum_g[k] - xhat[j] * inv_m * sum_gx[k]);
                         }
                     },
                     "batch_norm");
}

Var query_memory_cosine(const Var& feat, double floor) {
  const Shape& s = feat.shape();
  if (s.size() != 4 || s[1] < 2) throw ShapeError("query_memory_cosine expects [n,T,k,d] with T>=2, got " + shape_str(s));
  const int64_t n = s[0], T = s[1], K = s[2], d = s[3];
  const auto fs = feat.value().data();
  auto at = [&](int64_t b, int64_t t, int64_t k) { return ((b * T + t) * K + k) * d; };
  Tensor y(Shape{n, K, T - 1});
  Tensor norms(Shape{n, T, K});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t k = 0; k < K; ++k) {
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += fs[at(b, t, k) + j] * fs[at(b, t, k) + j];
        norms[(b * T + t) * K + k] = std::sqrt(ss);
      }
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < K; ++k) {
      const double nq = std::max(norms[(b * T + T - 1) * K + k], floor);
      for (int64_t i = 1; i < T; ++i) {
        const int64_t t = T - 1 - i;
        const double nm = std::max(norms[(b * T + t) * K + k], floor);
        double dp = 0.0;
        for (int64_t j = 0; j < d; ++j) dp += fs[at(b, T - 1, k) + j] * fs[at(b, t, k) + j];
        y[(b * K + k) * (T - 1) + i - 1] = dp / (nq * nm);
      }
    }
  return make_result(y, {feat},
                     [y, norms, n, T, K, d, floor](Node& self) {
                       double* gf = grad_ptr(self, 0);
                       if (!gf) return;
                       const auto fs = self.inputs[0]->value.data();
                       const auto g = self.grad.data();
                       auto at = [&](int64_t b, int64_t t, int64_t k) { return ((b * T + t) * K + k) * d; };
                       for (int64_t b = 0; b < n; ++b)
                         for (int64_t k = 0; k < K; ++k) {
                           const double rq = norms[(b * T + T - 1) * K + k];
                           const double nq = std::max(rq, floor);
                           const int64_t q = at(b, T - 1, k);
                           for (int64_t i = 1; i < T; ++i) {
                             const int64_t t = T - 1 - i;
                             const double rm = norms[(b * T + t) * K + k];
                             const double nm = std::max(rm, floor);
                             const int64_t mo = at(b, t, k);
                             const double gy = g[(b * K + k) * (T - 1) + i - 1];
                             const double cosv = y[(b * K + k) * (T - 1) + i - 1];
                             const double cq = rq > floor ? cosv / (nq * nq) : 0.0;
                             const double cm = rm > floor ? cosv / (nm * nm) : 0.0;
                             for (int64_t j = 0; j < d; ++j) {
                               gf[q + j] += gy * (fs[mo + j] / (nq * nm) - cq * fs[q + j]);
                               gf[mo + j] += gy * (fs[q + j] / (nq * nm) - cm * fs[mo + j]);
                             }
                           }
                         }
                     },
                     "query_memory_cosine");
}

Var scale_rows(const Var& x, const Var& s) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || s.shape() != Shape{xs[0], xs[1]}) {
    throw ShapeError("scale_rows: " + shape_str(xs) + " vs " + shape_str(s.shape()));
  }
  const int64_t rows = xs[0] * xs[1], m = xs[2];
  Tensor y(xs);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < m; ++j) y[r * m + j] = x.value()[r * m + j] * s.value()[r];
  return make_result(std::move(y), {x, s},
                     [rows, m](Node& self) {
                       const auto g = self.grad.data();
                       const auto xv = self.inputs[0]->value.data();
                       const auto sv = self.inputs[1]->value.data();
                       if (double* gx = grad_ptr(self, 0))
                         for (int64_t r = 0; r < rows; ++r)
                           for (int64_t j = 0; j < m; ++j) gx[r * m + j] += g[r * m + j] * sv[r];
                       if (double* gs = grad_ptr(self, 1))
                         for (int64_t r = 0; r < rows; ++r)
                           for (int64_t j = 0; j < m; ++j) gs[r] += g[r * m + j] * xv[r * m + j];
                     },
                     "scale_rows");
}

Var attend_memories(const Var& values, const Var& weights) {
  const Shape& vs = values.shape();
  const Shape& ws = weights.shape();
  if (vs.size() != 5 || ws.size() != 3 || ws[0] != vs[0] || ws[2] != vs[1] - 1 || vs[4] % ws[1] != 0) {
    throw ShapeError("attend_memories: values " + shape_str(vs) + " incompatible with weights " + shape_str(ws));
  }
  const int64_t n = vs[0], T = vs[1], P = vs[2] * vs[3], C = vs[4], K = ws[1], ch = C / K;
  Tensor y(Shape{n, vs[2], vs[3], C}, 0.0);
  const auto v = values.value().data();
  const auto w = weights.value().data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 1; i < T; ++i) {
      const int64_t t = T - 1 - i;
      const double* src = v.data() + (b * T + t) * P * C;
      double* dst = y.data().data() + b * P * C;
      for (int64_t p = 0; p < P; ++p)
        for (int64_t c = 0; c < C; ++c) dst[p * C + c] += w[(b * K + c / ch) * (T - 1) + i - 1] * src[p * C + c];
    }
  return make_result(std::move(y), {values, weights},
                     [n, T, P, C, K, ch](Node& self) {
                       const auto g = self.grad.data();
                       const auto v = self.inputs[0]->value.data();
                       const auto w = self.inputs[1]->value.data();
                       double* gv = grad_ptr(self, 0);
                       double* gw = grad_ptr(self, 1);
                       for (int64_t b = 0; b < n; ++b)
                         for (int64_t i = 1; i < T; ++i) {
                           const int64_t t = T - 1 - i;
                           const int64_t vo = (b * T + t) * P * C;
                           const int64_t go = b * P * C;
                           for (int64_t p = 0; p < P; ++p)
                             for (int64_t c = 0; c < C; ++c) {
                               const int64_t wi = (b * K + c / ch) * (T - 1) + i - 1;
                               if (gv) gv[vo + p * C + c] += g[go + p * C + c] * w[wi];
                               if (gw) gw[wi] += g[go + p * C + c] * v[vo + p * C + c];
                             }
                         }
                     },
                     "attend_memories");
}

Var gate_blend(const Var& g, const Var& f, const Var& h) {
  require_same_shape(g, f, "gate_blend");
  require_same_shape(g, h, "gate_blend");
  Tensor y(g.shape());
  const auto gs = g.value().data(), fs = f.value().data(), hs = h.value().data();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = gs[i] * fs[i] + (1.0 - gs[i]) * hs[i];
  return make_result(std::move(y), {g, f, h},
                     [](Node& self) {
                       const auto G = self.grad.data();
                       const auto gs = self.inputs[0]->value.data();
                       const auto fs = self.inputs[1]->value.data();
                       const auto hs = self.inputs[2]->value.data();
                       accumulate_into(self, 0, [&](size_t i) { return G[i] * (fs[i] - hs[i]); });
                       accumulate_into(self, 1, [&](size_t i) { return G[i] * gs[i]; });
                       accumulate_into(self, 2, [&](size_t i) { return G[i] * (1.0 - gs[i]); });
                     },
                     "gate_blend");
}

namespace {

constexpr double kSigmaFloor = 1e-12;

// Weight data viewed as M (rest x c_out); the normalized matrix is W = M^T.
double normalize_in_place(std::vector<double>& v) {
  double s = 0.0;
  for (double e : v) s += e * e;
  const double n = std::max(std::sqrt(s), kSigmaFloor);
  for (double& e : v) e /= n;
  return n;
}

}  // namespace

double spectral_sigma(const Tensor& weight, SpectralState state, int iterations, bool update) {
  if (!state.u || !state.v) throw ConfigError("spectral_sigma: missing power-iteration state");
  const int64_t cout = weight.dim(-1);
  const int64_t rest = weight.numel() / cout;
  if (state.u->numel() != cout || state.v->numel() != rest) {
    throw ShapeError("spectral_sigma: state vectors do not match weight " + shape_str(weight.shape()));
  }
  Eigen::Map<const RowMat> M(weight.data().data(), rest, cout);
  std::vector<double> u(state.u->data().begin(), state.u->data().end());
  std::vector<double> v(state.v->data().begin(), state.v->data().end());
  for (int it = 0; it < iterations; ++it) {
    Eigen::Map<Eigen::VectorXd> uv(u.data(), cout), vv(v.data(), rest);
    vv.noalias() = M * uv;
    normalize_in_place(v);
    uv.noalias() = M.transpose() * vv;
    normalize_in_place(u);
  }
  Eigen::Map<const Eigen::VectorXd> uv(u.data(), cout), vv(v.data(), rest);
  const double sigma = vv.dot(M * uv);
  if (update) {
    std::copy(u.begin(), u.end(), state.u->data().begin());
    std::copy(v.begin(), v.end(), state.v->data().begin());
  }
  return std::max(sigma, kSigmaFloor);
}

Var spectral_normalize(const Var& weight, SpectralState state, int iterations, bool update) {
  Tensor u_before = *state.u, v_before = *state.v;
  const double sigma = spectral_sigma(weight.value(), state, iterations, true);
  Tensor u = *state.u, v = *state.v;
  if (!update) {
    *state.u = std::move(u_before);
    *state.v = std::move(v_before);
  }
  const bool floored = sigma <= kSigmaFloor;
  Tensor y(weight.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = weight.value()[i] / sigma;
  return make_result(std::move(y), {weight},
                     [sigma, floored, u = std::move(u), v = std::move(v)](Node& self) {
                       double* gw = grad_ptr(self, 0);
                       if (!gw) return;
                       const auto g = self.grad.data();
                       const auto w = self.inputs[0]->value.data();
                       const int64_t cout = u.numel();
                       const int64_t rest = v.numel();
                       double gdotw = 0.0;
                       for (size_t i = 0; i < g.size(); ++i) gdotw += g[i] * w[i];
                       const double c = floored ? 0.0 : gdotw / (sigma * sigma);
                       for (int64_t r = 0; r < rest; ++r)
                         for (int64_t k = 0; k < cout; ++k)
                           gw[r * cout + k] += g[r * cout + k] / sigma - c * v[r] * u[k];
                     },
                     "spectral_normalize");
}

}  // namespace ctdg::ops
