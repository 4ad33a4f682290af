#include "ctdg/conv.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <vector>

namespace ctdg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Upper bound on im2col buffer size (elements) before splitting a batch.
constexpr int64_t kColumnBudget = int64_t{1} << 22;

int64_t samples_per_chunk(const ConvGeometry& g) {
  const int64_t per_sample = g.out_positions() * g.patch_size();
  return std::max<int64_t>(1, kColumnBudget / std::max<int64_t>(per_sample, 1));
}

// Gathers receptive fields for samples [n0, n0 + count) into `cols`
// (rows = output positions, columns ordered as the kernel's [kd,kh,kw,c_in]).
void im2col(const ConvGeometry& g, const double* x, int64_t n0, int64_t count, double* cols) {
  const int64_t cin = g.in_channels;
  const int64_t K = g.patch_size();
  const int64_t in_sample = g.in_positions() * cin;
  int64_t row = 0;
  for (int64_t n = n0; n < n0 + count; ++n) {
    const double* xs = x + n * in_sample;
    for (int64_t od = 0; od < g.out[0]; ++od)
      for (int64_t oh = 0; oh < g.out[1]; ++oh)
        for (int64_t ow = 0; ow < g.out[2]; ++ow, ++row) {
          double* dst = cols + row * K;
          for (int64_t kd = 0; kd < g.kernel[0]; ++kd) {
            const int64_t id = od * g.stride[0] - g.pad_before[0] + kd * g.dilation[0];
            for (int64_t kh = 0; kh < g.kernel[1]; ++kh) {
              const int64_t ih = oh * g.stride[1] - g.pad_before[1] + kh * g.dilation[1];
              for (int64_t kw = 0; kw < g.kernel[2]; ++kw, dst += cin) {
                const int64_t iw = ow * g.stride[2] - g.pad_before[2] + kw * g.dilation[2];
                if (id < 0 || id >= g.in[0] || ih < 0 || ih >= g.in[1] || iw < 0 || iw >= g.in[2]) {
                  std::fill(dst, dst + cin, 0.0);
                } else {
                  const double* src = xs + ((id * g.in[1] + ih) * g.in[2] + iw) * cin;
                  std::memcpy(dst, src, static_cast<size_t>(cin) * sizeof(double));
                }
              }
            }
          }
        }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, int64_t n0, int64_t count, double* dx) {
  const int64_t cin = g.in_channels;
  const int64_t K = g.patch_size();
  const int64_t in_sample = g.in_positions() * cin;
  int64_t row = 0;
  for (int64_t n = n0; n < n0 + count; ++n) {
    double* xs = dx + n * in_sample;
    for (int64_t od = 0; od < g.out[0]; ++od)
      for (int64_t oh = 0; oh < g.out[1]; ++oh)
        for (int64_t ow = 0; ow < g.out[2]; ++ow, ++row) {
          const double* src = cols + row * K;
          for (int64_t kd = 0; kd < g.kernel[0]; ++kd) {
            const int64_t id = od * g.stride[0] - g.pad_before[0] + kd * g.dilation[0];
            for (int64_t kh = 0; kh < g.kernel[1]; ++kh) {
              const int64_t ih = oh * g.stride[1] - g.pad_before[1] + kh * g.dilation[1];
              for (int64_t kw = 0; kw < g.kernel[2]; ++kw, src += cin) {
                const int64_t iw = ow * g.stride[2] - g.pad_before[2] + kw * g.dilation[2];
                if (id < 0 || id >= g.in[0] || ih < 0 || ih >= g.in[1] || iw < 0 || iw >= g.in[2]) continue;
                double* dst = xs + ((id * g.in[1] + ih) * g.in[2] + iw) * cin;
                for (int64_t c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
        }
  }
}

}  // namespace

bool ConvGeometry::pointwise() const {
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] != 1 || stride[a] != 1 || pad_before[a] != 0 || pad_after[a] != 0) return false;
  }
  return true;
}

void ConvGeometry::resolve_output() {
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] < 1 || stride[a] < 1 || dilation[a] < 1) {
      throw ShapeError("convolution kernel, stride and dilation must be positive");
    }
    const int64_t span = dilation[a] * (kernel[a] - 1) + 1;
    const int64_t padded = in[a] + pad_before[a] + pad_after[a];
    if (padded < span) {
      throw ShapeError("convolution input extent " + std::to_string(in[a]) + " on axis " + std::to_string(a) +
                       " is smaller than the kernel span " + std::to_string(span));
    }
    out[a] = (padded - span) / stride[a] + 1;
  }
}

void apply_padding(ConvGeometry& g, int axis, Padding mode) {
  if (mode == Padding::valid) {
    g.pad_before[axis] = g.pad_after[axis] = 0;
    return;
  }
  const int64_t out = (g.in[axis] + g.stride[axis] - 1) / g.stride[axis];
  const int64_t span = g.dilation[axis] * (g.kernel[axis] - 1) + 1;
  const int64_t total = std::max<int64_t>((out - 1) * g.stride[axis] + span - g.in[axis], 0);
  g.pad_before[axis] = total / 2;
  g.pad_after[axis] = total - total / 2;
}

namespace kernels {

void conv_forward(const ConvGeometry& g, const double* x, const double* w, double* y) {
  const int64_t K = g.patch_size();
  const int64_t P = g.out_positions();
  ConstMap W(w, K, g.out_channels);
  if (g.pointwise()) {
    ConstMap X(x, g.batch * P, K);
    MutMap Y(y, g.batch * P, g.out_channels);
    Y.noalias() = X * W;
    return;
  }
  const int64_t chunk = samples_per_chunk(g);
  std::vector<double> cols;
  for (int64_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const int64_t count = std::min(chunk, g.batch - n0);
    cols.resize(static_cast<size_t>(count * P * K));
    im2col(g, x, n0, count, cols.data());
    ConstMap C(cols.data(), count * P, K);
    MutMap Y(y + n0 * P * g.out_channels, count * P, g.out_channels);
    Y.noalias() = C * W;
  }
}

void conv_backward_data(const ConvGeometry& g, const double* dy, const double* w, double* dx) {
  const int64_t K = g.patch_size();
  const int64_t P = g.out_positions();
  ConstMap W(w, K, g.out_channels);
  if (g.pointwise()) {
    ConstMap DY(dy, g.batch * P, g.out_channels);
    MutMap DX(dx, g.batch * P, K);
    DX.noalias() += DY * W.transpose();
    return;
  }
  const int64_t chunk = samples_per_chunk(g);
  std::vector<double> cols;
  for (int64_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const int64_t count = std::min(chunk, g.batch - n0);
    cols.resize(static_cast<size_t>(count * P * K));
    MutMap C(cols.data(), count * P, K);
    ConstMap DY(dy + n0 * P * g.out_channels, count * P, g.out_channels);
    C.noalias() = DY * W.transpose();
    col2im_add(g, cols.data(), n0, count, dx);
  }
}

void conv_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw) {
  const int64_t K = g.patch_size();
  const int64_t P = g.out_positions();
  MutMap DW(dw, K, g.out_channels);
  if (g.pointwise()) {
    ConstMap X(x, g.batch * P, K);
    ConstMap DY(dy, g.batch * P, g.out_channels);
    DW.noalias() += X.transpose() * DY;
    return;
  }
  const int64_t chunk = samples_per_chunk(g);
  std::vector<double> cols;
  for (int64_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const int64_t count = std::min(chunk, g.batch - n0);
    cols.resize(static_cast<size_t>(count * P * K));
    im2col(g, x, n0, count, cols.data());
    ConstMap C(cols.data(), count * P, K);
    ConstMap DY(dy + n0 * P * g.out_channels, count * P, g.out_channels);
    DW.noalias() += C.transpose() * DY;
  }
}

}  // namespace kernels

}  // namespace ctdg
