#pragma once

#include <array>
#include <cstdint>

#include "ctdg/tensor.hpp"

namespace ctdg {

enum class Padding { same, valid };

/// Geometry of a channels-last convolution over up to three spatial axes
/// (depth, height, width). Two-dimensional convolutions use depth 1 with a
/// unit temporal kernel.
///
/// Input layout [n, d, h, w, c_in], kernel [kd, kh, kw, c_in, c_out], output
/// [n, od, oh, ow, c_out].
struct ConvGeometry {
  int64_t batch = 1;
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  std::array<int64_t, 3> in{1, 1, 1};
  std::array<int64_t, 3> out{1, 1, 1};
  std::array<int64_t, 3> kernel{1, 1, 1};
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> dilation{1, 1, 1};
  std::array<int64_t, 3> pad_before{0, 0, 0};
  std::array<int64_t, 3> pad_after{0, 0, 0};

  int64_t in_positions() const { return in[0] * in[1] * in[2]; }
  int64_t out_positions() const { return out[0] * out[1] * out[2]; }
  int64_t patch_size() const { return kernel[0] * kernel[1] * kernel[2] * in_channels; }
  bool pointwise() const;

  /// Fills `out` from the other fields; throws ShapeError if any extent
  /// would be non-positive.
  void resolve_output();
};

/// Per-axis padding resolution. `same` pads so that out = ceil(in / stride),
/// with any odd remainder placed after.
void apply_padding(ConvGeometry& g, int axis, Padding mode);

namespace kernels {

/// y = conv(x, w)
void conv_forward(const ConvGeometry& g, const double* x, const double* w, double* y);
/// dx += conv^T(dy, w)
void conv_backward_data(const ConvGeometry& g, const double* dy, const double* w, double* dx);
/// dw += correlation of x with dy
void conv_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw);

}  // namespace kernels

}  // namespace ctdg
