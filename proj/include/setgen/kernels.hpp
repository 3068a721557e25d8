#pragma once

// Dense CPU kernels shared by the differentiable ops. Every kernel works on a
// spatial domain padded to three axes (2-D data uses a leading extent-1 depth
// axis) and is templated on the scalar type.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "setgen/ndarray.hpp"

namespace setgen::kernels {

using Extent3 = std::array<Index, 3>;

inline Index volume(const Extent3& e) { return e[0] * e[1] * e[2]; }

/// Index maps of one strided, zero-padded cross-correlation. `in` is the
/// dense side (conv input / transposed-conv output), `out` the strided side.
struct ConvGeometry {
  Index batch = 1;
  Index in_channels = 1;
  Index out_channels = 1;
  Index spatial_rank = 2;
  Extent3 in{1, 1, 1};
  Extent3 out{1, 1, 1};
  Extent3 kernel{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 pad{0, 0, 0};

  Index in_voxels() const { return volume(in); }
  Index out_voxels() const { return volume(out); }
  Index kernel_voxels() const { return volume(kernel); }
  Index patch_rows() const { return in_channels * kernel_voxels(); }
};

inline void check_conv_args(const char* op, const Shape& input, const Shape& kernel, int stride,
                            int padding) {
  if (input.size() < 3 || input.size() > 5)
    throw ShapeError(op, "rank", "input must be [B,C,spatial...] with 1-3 spatial axes, got " +
                                     shape_string(input));
  if (kernel.size() != input.size())
    throw ShapeError(op, "rank", "kernel " + shape_string(kernel) + " vs input " + shape_string(input));
  if (stride != 1 && stride != 2)
    throw ShapeError(op, "stride", "stride must be 1 or 2, got " + std::to_string(stride));
  if (padding != 0 && padding != 1)
    throw ShapeError(op, "padding", "padding must be 0 or 1, got " + std::to_string(padding));
  for (std::size_t a = 2; a < kernel.size(); ++a)
    if (kernel[a] != 3)
      throw ShapeError(op, "kernel[" + std::to_string(a) + "]",
                       "only k=3 supported, got " + std::to_string(kernel[a]));
}

/// Geometry of conv(input [B,C,s...], kernel [F,C,k...]).
inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, int stride, int padding) {
  check_conv_args("conv_nd", input, kernel, stride, padding);
  if (kernel[1] != input[1])
    throw ShapeError("conv_nd", "channels", "kernel expects " + std::to_string(kernel[1]) +
                                                " input channels, input has " + std::to_string(input[1]));
  ConvGeometry g;
  g.batch = input[0];
  g.in_channels = input[1];
  g.out_channels = kernel[0];
  g.spatial_rank = static_cast<Index>(input.size()) - 2;
  const std::size_t offset = 3 - static_cast<std::size_t>(g.spatial_rank);
  for (std::size_t a = 0; a < static_cast<std::size_t>(g.spatial_rank); ++a) {
    const Index s = input[a + 2];
    const Index k = kernel[a + 2];
    const Index span = s + 2 * padding - k;
    if (span < 0)
      throw ShapeError("conv_nd", "spatial[" + std::to_string(a) + "]",
                       "extent " + std::to_string(s) + " smaller than kernel");
    g.in[offset + a] = s;
    g.kernel[offset + a] = k;
    g.stride[offset + a] = stride;
    g.pad[offset + a] = padding;
    g.out[offset + a] = span / stride + 1;
  }
  return g;
}

/// Geometry of conv_transpose(input [B,F,s...], kernel [F,C,k...]). The
/// output extent is (s-1)*stride - 2*padding + k + (stride-1), the exact
/// preimage of conv's shape map, so stride-2 layers double each axis.
inline ConvGeometry conv_transpose_geometry(const Shape& input, const Shape& kernel, int stride,
                                            int padding) {
  check_conv_args("conv_transpose_nd", input, kernel, stride, padding);
  if (kernel[0] != input[1])
    throw ShapeError("conv_transpose_nd", "channels",
                     "kernel expects " + std::to_string(kernel[0]) + " input channels, input has " +
                         std::to_string(input[1]));
  ConvGeometry g;
  g.batch = input[0];
  g.in_channels = kernel[1];
  g.out_channels = kernel[0];
  g.spatial_rank = static_cast<Index>(input.size()) - 2;
  const std::size_t offset = 3 - static_cast<std::size_t>(g.spatial_rank);
  for (std::size_t a = 0; a < static_cast<std::size_t>(g.spatial_rank); ++a) {
    const Index s = input[a + 2];
    const Index k = kernel[a + 2];
    const Index dense = (s - 1) * stride - 2 * padding + k + (stride - 1);
    if (dense <= 0)
      throw ShapeError("conv_transpose_nd", "spatial[" + std::to_string(a) + "]",
                       "non-positive output extent");
    g.in[offset + a] = dense;
    g.kernel[offset + a] = k;
    g.stride[offset + a] = stride;
    g.pad[offset + a] = padding;
    g.out[offset + a] = s;
  }
  return g;
}

inline Shape dense_shape(const ConvGeometry& g) {
  Shape s{g.batch, g.in_channels};
  for (Index a = 3 - g.spatial_rank; a < 3; ++a) s.push_back(g.in[static_cast<std::size_t>(a)]);
  return s;
}

inline Shape strided_shape(const ConvGeometry& g) {
  Shape s{g.batch, g.out_channels};
  for (Index a = 3 - g.spatial_rank; a < 3; ++a) s.push_back(g.out[static_cast<std::size_t>(a)]);
  return s;
}

/// Gathers patches of one image [C, in...] into col [C*kvol, out_voxels].
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* col) {
  const Index out_vox = g.out_voxels();
  Index row = 0;
  for (Index c = 0; c < g.in_channels; ++c) {
    const Scalar* plane = image + c * g.in_voxels();
    for (Index kd = 0; kd < g.kernel[0]; ++kd)
      for (Index kh = 0; kh < g.kernel[1]; ++kh)
        for (Index kw = 0; kw < g.kernel[2]; ++kw, ++row) {
          Scalar* dst = col + row * out_vox;
          for (Index od = 0; od < g.out[0]; ++od) {
            const Index id = od * g.stride[0] - g.pad[0] + kd;
            const bool d_ok = id >= 0 && id < g.in[0];
            for (Index oh = 0; oh < g.out[1]; ++oh) {
              const Index ih = oh * g.stride[1] - g.pad[1] + kh;
              const bool h_ok = d_ok && ih >= 0 && ih < g.in[1];
              const Scalar* src = plane + (id * g.in[1] + ih) * g.in[2];
              for (Index ow = 0; ow < g.out[2]; ++ow) {
                const Index iw = ow * g.stride[2] - g.pad[2] + kw;
                *dst++ = (h_ok && iw >= 0 && iw < g.in[2]) ? src[iw] : Scalar(0);
              }
            }
          }
        }
  }
}

/// Adjoint of im2col: scatter-adds col back into image [C, in...].
template <typename Scalar>
void col2im(const Scalar* col, const ConvGeometry& g, Scalar* image) {
  const Index out_vox = g.out_voxels();
  Index row = 0;
  for (Index c = 0; c < g.in_channels; ++c) {
    Scalar* plane = image + c * g.in_voxels();
    for (Index kd = 0; kd < g.kernel[0]; ++kd)
      for (Index kh = 0; kh < g.kernel[1]; ++kh)
        for (Index kw = 0; kw < g.kernel[2]; ++kw, ++row) {
          const Scalar* src = col + row * out_vox;
          for (Index od = 0; od < g.out[0]; ++od) {
            const Index id = od * g.stride[0] - g.pad[0] + kd;
            const bool d_ok = id >= 0 && id < g.in[0];
            for (Index oh = 0; oh < g.out[1]; ++oh) {
              const Index ih = oh * g.stride[1] - g.pad[1] + kh;
              const bool h_ok = d_ok && ih >= 0 && ih < g.in[1];
              Scalar* dst = plane + (id * g.in[1] + ih) * g.in[2];
              for (Index ow = 0; ow < g.out[2]; ++ow, ++src) {
                const Index iw = ow * g.stride[2] - g.pad[2] + kw;
                if (h_ok && iw >= 0 && iw < g.in[2]) dst[iw] += *src;
              }
            }
          }
        }
  }
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// strided[B,F,out] = conv(dense[B,C,in], kernel[F,C,k]).
template <typename Scalar>
void conv_forward(const Scalar* dense, const Scalar* kernel, const ConvGeometry& g, Scalar* strided) {
  std::vector<Scalar> col(static_cast<std::size_t>(g.patch_rows() * g.out_voxels()));
  Eigen::Map<const RowMatrix<Scalar>> w(kernel, g.out_channels, g.patch_rows());
  Eigen::Map<const RowMatrix<Scalar>> patches(col.data(), g.patch_rows(), g.out_voxels());
  for (Index b = 0; b < g.batch; ++b) {
    im2col(dense + b * g.in_channels * g.in_voxels(), g, col.data());
    Eigen::Map<RowMatrix<Scalar>> y(strided + b * g.out_channels * g.out_voxels(), g.out_channels,
                                    g.out_voxels());
    y.noalias() = w * patches;
  }
}

/// dense[B,C,in] += conv^T(strided[B,F,out], kernel): the input-gradient of
/// conv_forward and the forward map of the transposed convolution.
template <typename Scalar>
void conv_adjoint(const Scalar* strided, const Scalar* kernel, const ConvGeometry& g, Scalar* dense) {
  std::vector<Scalar> col(static_cast<std::size_t>(g.patch_rows() * g.out_voxels()));
  Eigen::Map<const RowMatrix<Scalar>> w(kernel, g.out_channels, g.patch_rows());
  Eigen::Map<RowMatrix<Scalar>> patches(col.data(), g.patch_rows(), g.out_voxels());
  for (Index b = 0; b < g.batch; ++b) {
    Eigen::Map<const RowMatrix<Scalar>> y(strided + b * g.out_channels * g.out_voxels(),
                                          g.out_channels, g.out_voxels());
    patches.noalias() = w.transpose() * y;
    col2im(col.data(), g, dense + b * g.in_channels * g.in_voxels());
  }
}

/// kernel_grad[F,C,k] += sum_b strided_b * im2col(dense_b)^T.
template <typename Scalar>
void conv_kernel_grad(const Scalar* dense, const Scalar* strided, const ConvGeometry& g,
                      Scalar* kernel_grad) {
  std::vector<Scalar> col(static_cast<std::size_t>(g.patch_rows() * g.out_voxels()));
  Eigen::Map<RowMatrix<Scalar>> dw(kernel_grad, g.out_channels, g.patch_rows());
  Eigen::Map<const RowMatrix<Scalar>> patches(col.data(), g.patch_rows(), g.out_voxels());
  for (Index b = 0; b < g.batch; ++b) {
    im2col(dense + b * g.in_channels * g.in_voxels(), g, col.data());
    Eigen::Map<const RowMatrix<Scalar>> y(strided + b * g.out_channels * g.out_voxels(),
                                          g.out_channels, g.out_voxels());
    dw.noalias() += y * patches.transpose();
  }
}

/// Geometry of sampling image [B,C,in...] at map [B,d,out...] (voxel units,
/// channel a addresses spatial axis a).
struct SampleGeometry {
  Index batch = 1;
  Index channels = 1;
  Index spatial_rank = 2;
  Extent3 in{1, 1, 1};
  Extent3 out{1, 1, 1};
};

inline SampleGeometry sample_geometry(const char* op, const Shape& image, const Shape& map) {
  if (image.size() < 3 || image.size() > 5)
    throw ShapeError(op, "rank", "image must be [B,C,spatial...], got " + shape_string(image));
  if (map.size() != image.size())
    throw ShapeError(op, "rank", "map " + shape_string(map) + " vs image " + shape_string(image));
  const Index d = static_cast<Index>(image.size()) - 2;
  if (map[0] != image[0])
    throw ShapeError(op, "batch", std::to_string(map[0]) + " vs " + std::to_string(image[0]));
  if (map[1] != d)
    throw ShapeError(op, "channels", "map needs " + std::to_string(d) + " coordinate channels, has " +
                                         std::to_string(map[1]));
  SampleGeometry g;
  g.batch = image[0];
  g.channels = image[1];
  g.spatial_rank = d;
  const std::size_t offset = 3 - static_cast<std::size_t>(d);
  for (std::size_t a = 0; a < static_cast<std::size_t>(d); ++a) {
    g.in[offset + a] = image[a + 2];
    g.out[offset + a] = map[a + 2];
  }
  return g;
}

/// Interpolation stencil of a single coordinate along one axis, with
/// border clamping. `inside` is false when the raw coordinate was clamped,
/// which zeroes the coordinate derivative.
template <typename Scalar>
struct AxisStencil {
  Index lo = 0;
  Index hi = 0;
  Scalar frac = 0;
  bool inside = true;
};

template <typename Scalar>
inline AxisStencil<Scalar> axis_stencil(Scalar coord, Index extent) {
  AxisStencil<Scalar> s;
  const Scalar upper = static_cast<Scalar>(extent - 1);
  Scalar c = coord;
  if (!(c >= Scalar(0))) {
    c = Scalar(0);
    s.inside = false;
  } else if (c > upper) {
    c = upper;
    s.inside = false;
  }
  const Scalar fl = std::floor(c);
  s.lo = static_cast<Index>(fl);
  s.frac = c - fl;
  s.hi = s.lo + 1 < extent ? s.lo + 1 : s.lo;
  return s;
}

/// out[B,C,out...] = multilinear sample of image at map.
template <typename Scalar>
void grid_sample_forward(const Scalar* image, const Scalar* map, const SampleGeometry& g, Scalar* out) {
  const Index in_vox = volume(g.in);
  const Index out_vox = volume(g.out);
  const Index d = g.spatial_rank;
  const Index first = 3 - d;
  const Index corners = Index{1} << d;
  for (Index b = 0; b < g.batch; ++b) {
    const Scalar* img_b = image + b * g.channels * in_vox;
    const Scalar* map_b = map + b * d * out_vox;
    Scalar* out_b = out + b * g.channels * out_vox;
    for (Index v = 0; v < out_vox; ++v) {
      std::array<AxisStencil<Scalar>, 3> st{};
      for (Index a = first; a < 3; ++a) st[a] = axis_stencil(map_b[(a - first) * out_vox + v], g.in[a]);
      std::array<Index, 8> offsets{};
      for (Index k = 0; k < corners; ++k) {
        Index idx[3] = {0, 0, 0};
        for (Index a = first; a < 3; ++a) idx[a] = ((k >> (2 - a)) & 1) ? st[a].hi : st[a].lo;
        offsets[k] = (idx[0] * g.in[1] + idx[1]) * g.in[2] + idx[2];
      }
      // Nested lerps a + t (b - a), fastest axis first: exact for constant
      // neighbourhoods and for integer coordinates.
      for (Index c = 0; c < g.channels; ++c) {
        const Scalar* plane = img_b + c * in_vox;
        std::array<Scalar, 8> vals{};
        for (Index k = 0; k < corners; ++k) vals[k] = plane[offsets[k]];
        Index n = corners;
        for (Index a = 2; a >= first; --a) {
          n /= 2;
          for (Index j = 0; j < n; ++j) vals[j] = vals[2 * j] + st[a].frac * (vals[2 * j + 1] - vals[2 * j]);
        }
        out_b[c * out_vox + v] = vals[0];
      }
    }
  }
}

/// Vector-Jacobian products of grid_sample_forward. Either output pointer
/// may be null; both are accumulated into.
template <typename Scalar>
void grid_sample_backward(const Scalar* image, const Scalar* map, const Scalar* grad_out,
                          const SampleGeometry& g, Scalar* grad_image, Scalar* grad_map) {
  const Index in_vox = volume(g.in);
  const Index out_vox = volume(g.out);
  const Index d = g.spatial_rank;
  const Index first = 3 - d;
  const Index corners = Index{1} << d;
  for (Index b = 0; b < g.batch; ++b) {
    const Scalar* img_b = image + b * g.channels * in_vox;
    const Scalar* map_b = map + b * d * out_vox;
    const Scalar* gout_b = grad_out + b * g.channels * out_vox;
    for (Index v = 0; v < out_vox; ++v) {
      std::array<AxisStencil<Scalar>, 3> st{};
      for (Index a = first; a < 3; ++a) st[a] = axis_stencil(map_b[(a - first) * out_vox + v], g.in[a]);
      std::array<Index, 8> offsets{};
      std::array<Scalar, 8> weights{};
      // dweights[k][a]: derivative of corner weight k along axis a.
      std::array<std::array<Scalar, 3>, 8> dweights{};
      for (Index k = 0; k < corners; ++k) {
        Index idx[3] = {0, 0, 0};
        Scalar lin[3] = {1, 1, 1};
        Scalar slope[3] = {0, 0, 0};
        for (Index a = first; a < 3; ++a) {
          const bool upper = (k >> (2 - a)) & 1;
          idx[a] = upper ? st[a].hi : st[a].lo;
          lin[a] = upper ? st[a].frac : Scalar(1) - st[a].frac;
          slope[a] = st[a].inside ? (upper ? Scalar(1) : Scalar(-1)) : Scalar(0);
        }
        offsets[k] = (idx[0] * g.in[1] + idx[1]) * g.in[2] + idx[2];
        weights[k] = lin[0] * lin[1] * lin[2];
        for (Index a = first; a < 3; ++a) {
          Scalar w = slope[a];
          for (Index o = first; o < 3; ++o)
            if (o != a) w *= lin[o];
          dweights[k][a] = w;
        }
      }
      Scalar dcoord[3] = {0, 0, 0};
      for (Index c = 0; c < g.channels; ++c) {
        const Scalar go = gout_b[c * out_vox + v];
        if (go == Scalar(0)) continue;
        if (grad_image) {
          Scalar* gplane = grad_image + (b * g.channels + c) * in_vox;
          for (Index k = 0; k < corners; ++k) gplane[offsets[k]] += weights[k] * go;
        }
        if (grad_map) {
          const Scalar* plane = img_b + c * in_vox;
          for (Index k = 0; k < corners; ++k) {
            const Scalar val = plane[offsets[k]] * go;
            for (Index a = first; a < 3; ++a) dcoord[a] += dweights[k][a] * val;
          }
        }
      }
      if (grad_map)
        for (Index a = first; a < 3; ++a) grad_map[(b * d + (a - first)) * out_vox + v] += dcoord[a];
    }
  }
}

/// Round half away from zero.
template <typename Scalar>
inline Index round_half_away(Scalar x) {
  return static_cast<Index>(x < Scalar(0) ? std::ceil(x - Scalar(0.5)) : std::floor(x + Scalar(0.5)));
}

/// Nearest-neighbour resampling of arbitrary values (labels) at map.
template <typename Value, typename Scalar>
void sample_nearest(const Value* image, const Scalar* map, const SampleGeometry& g, Value* out) {
  const Index in_vox = volume(g.in);
  const Index out_vox = volume(g.out);
  const Index d = g.spatial_rank;
  const Index first = 3 - d;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index v = 0; v < out_vox; ++v) {
      Index idx[3] = {0, 0, 0};
      for (Index a = first; a < 3; ++a) {
        const Scalar c = map[(b * d + (a - first)) * out_vox + v];
        Index i = std::isfinite(c) ? round_half_away(c) : 0;
        if (i < 0) i = 0;
        if (i > g.in[a] - 1) i = g.in[a] - 1;
        idx[a] = i;
      }
      const Index off = (idx[0] * g.in[1] + idx[1]) * g.in[2] + idx[2];
      for (Index c = 0; c < g.channels; ++c)
        out[(b * g.channels + c) * out_vox + v] = image[(b * g.channels + c) * in_vox + off];
    }
  }
}

}  // namespace setgen::kernels
