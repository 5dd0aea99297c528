#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "conceptflow/tensor.hpp"

// Differentiable primitives for the fixed backbone. Convolutions are 3x3,
// stride 1, zero padding 1; the reference semantics are the direct sum
//   out[o,y,x] = bias[o] + sum_{c,ky,kx} k[o,c,ky,kx] * in[c, y+ky-1, x+kx-1]
// and the implementation lowers that to one GEMM over an im2col buffer.
namespace conceptflow {

inline constexpr Index kKernel = 3;
inline constexpr Index kKernelArea = kKernel * kKernel;

namespace detail {

// Writes the (C*9) x (H*W) patch matrix of one image into `cols`. `in(c, p)`
// reads channel c at flat position p = y*W + x. Row c*9 + ky*3 + kx, column p.
// Loops run patch-major so column-major buffers are filled contiguously.
template <typename In, typename Cols>
void im2col(const In& in, Index channels, Index height, Index width, Cols&& cols) {
  using Scalar = std::decay_t<decltype(cols(0, 0))>;
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      const Index p = y * width + x;
      for (Index c = 0; c < channels; ++c) {
        for (Index ky = 0; ky < kKernel; ++ky) {
          const Index sy = y + ky - 1;
          for (Index kx = 0; kx < kKernel; ++kx) {
            const Index sx = x + kx - 1;
            cols(c * kKernelArea + ky * kKernel + kx, p) =
                (sy >= 0 && sy < height && sx >= 0 && sx < width) ? Scalar(in(c, sy * width + sx)) : Scalar(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: `out(c, p)` is zeroed, then receives the accumulated patch gradients.
template <typename Cols, typename Out>
void col2im(const Cols& cols, Index channels, Index height, Index width, Out&& out) {
  for (Index p = 0; p < height * width; ++p)
    for (Index c = 0; c < channels; ++c) out(c, p) = 0;
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      const Index p = y * width + x;
      for (Index c = 0; c < channels; ++c) {
        for (Index ky = 0; ky < kKernel; ++ky) {
          const Index sy = y + ky - 1;
          if (sy < 0 || sy >= height) continue;
          for (Index kx = 0; kx < kKernel; ++kx) {
            const Index sx = x + kx - 1;
            if (sx < 0 || sx >= width) continue;
            out(c, sy * width + sx) += cols(c * kKernelArea + ky * kKernel + kx, p);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void check_conv_shapes(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& kernels) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  if (kernels.dim(2) != kKernel || kernels.dim(3) != kKernel)
    throw DimensionError("conv2d kernels must be 3x3, got " + shape_string(kernels.shape()));
  if (kernels.dim(1) != input.dim(0))
    throw DimensionError("conv2d kernels expect " + std::to_string(kernels.dim(1)) +
                         " input channels, input has " + std::to_string(input.dim(0)));
}

}  // namespace detail

template <typename Scalar>
BasicTensor<Scalar> conv2d(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& kernels,
                           const BasicTensor<Scalar>& bias) {
  detail::check_conv_shapes(input, kernels);
  const Index out_channels = kernels.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != out_channels)
    throw DimensionError("conv2d bias must have shape [" + std::to_string(out_channels) + "], got " +
                         shape_string(bias.shape()));
  const Index c = input.dim(0), h = input.dim(1), w = input.dim(2);
  typename Types<Scalar>::Matrix cols(c * kKernelArea, h * w);
  detail::im2col(input.as_matrix(c, h * w), c, h, w, cols);
  BasicTensor<Scalar> out({out_channels, h, w});
  out.as_matrix(out_channels, h * w).noalias() = kernels.as_matrix(out_channels, c * kKernelArea) * cols;
  out.as_matrix(out_channels, h * w).colwise() += bias.data();
  require_finite(out, "conv2d");
  return out;
}

template <typename Scalar>
struct Conv2dGradients {
  BasicGradient<Scalar> input;
  BasicGradient<Scalar> kernels;
  BasicGradient<Scalar> bias;
};

template <typename Scalar>
Conv2dGradients<Scalar> conv2d_backward(const BasicGradient<Scalar>& upstream, const BasicTensor<Scalar>& input,
                                        const BasicTensor<Scalar>& kernels) {
  detail::check_conv_shapes(input, kernels);
  const Index co = kernels.dim(0), c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (upstream.shape() != Shape{co, h, w})
    throw DimensionError("conv2d_backward upstream must have shape " + shape_string({co, h, w}) + ", got " +
                         shape_string(upstream.shape()));
  using Matrix = typename Types<Scalar>::Matrix;
  Matrix cols(c * kKernelArea, h * w);
  detail::im2col(input.as_matrix(c, h * w), c, h, w, cols);
  const auto g = upstream.as_matrix(co, h * w);

  Conv2dGradients<Scalar> grads{BasicTensor<Scalar>({c, h, w}), BasicTensor<Scalar>(kernels.shape()),
                                BasicTensor<Scalar>({co})};
  grads.kernels.as_matrix(co, c * kKernelArea).noalias() = g * cols.transpose();
  grads.bias.data() = g.rowwise().sum();
  const Matrix grad_cols = kernels.as_matrix(co, c * kKernelArea).transpose() * g;
  detail::col2im(grad_cols, c, h, w, grads.input.as_matrix(c, h * w));
  require_finite(grads.input, "conv2d_backward");
  require_finite(grads.kernels, "conv2d_backward");
  return grads;
}

template <typename Scalar>
BasicTensor<Scalar> relu(const BasicTensor<Scalar>& x) {
  BasicTensor<Scalar> out = x;
  out.data() = x.data().cwiseMax(Scalar(0));
  return out;
}

template <typename Scalar>
BasicGradient<Scalar> relu_backward(const BasicGradient<Scalar>& upstream, const BasicTensor<Scalar>& x) {
  if (upstream.shape() != x.shape())
    throw DimensionError("relu_backward: upstream " + shape_string(upstream.shape()) + " vs input " +
                         shape_string(x.shape()));
  BasicGradient<Scalar> out = upstream;
  out.data() = (x.data().array() > Scalar(0)).select(upstream.data(), Scalar(0));
  return out;
}

// Row-wise softmax on any Eigen matrix expression; subtracts the row max first.
template <typename Derived>
typename Derived::PlainObject softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  if (m.cols() == 0) throw DimensionError("softmax_rows: empty row dimension");
  typename Derived::PlainObject out = (m.colwise() - m.rowwise().maxCoeff()).array().exp().matrix();
  out.array().colwise() /= out.array().rowwise().sum();
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> softmax_rows(const BasicTensor<Scalar>& m) {
  require_rank(m, 2, "softmax_rows input");
  BasicTensor<Scalar> out(m.shape());
  out.as_matrix() = softmax_rows(m.as_matrix());
  require_finite(out, "softmax_rows");
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  BasicTensor<Scalar> out({a.dim(0), b.dim(1)});
  out.as_matrix().noalias() = a.as_matrix() * b.as_matrix();
  require_finite(out, "matmul");
  return out;
}

// p - lr * (g + weight_decay * p)
template <typename Scalar>
BasicTensor<Scalar> sgd_step(const BasicTensor<Scalar>& param, const BasicGradient<Scalar>& grad, Scalar lr,
                             Scalar weight_decay) {
  if (!(lr > Scalar(0))) throw ValidationError("sgd_step: learning rate must be positive");
  if (param.shape() != grad.shape())
    throw DimensionError("sgd_step: gradient " + shape_string(grad.shape()) + " does not match parameter " +
                         shape_string(param.shape()));
  BasicTensor<Scalar> out = param;
  out.data() -= lr * (grad.data() + weight_decay * param.data());
  require_finite(out, "sgd_step");
  return out;
}

// 2x2 max-pool with stride 2 on [C,H,W]; odd trailing rows/columns are dropped.
// `argmax` receives the flat input offset chosen for each output cell.
template <typename Scalar>
BasicTensor<Scalar> maxpool2x2(const BasicTensor<Scalar>& x, std::vector<Index>* argmax = nullptr) {
  require_rank(x, 3, "maxpool2x2 input");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 2 || w < 2) throw DimensionError("maxpool2x2 needs spatial size >= 2, got " + shape_string(x.shape()));
  const Index oh = h / 2, ow = w / 2;
  BasicTensor<Scalar> out({c, oh, ow});
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  const Scalar* in = x.raw();
  Index o = 0;
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < oh; ++y) {
      for (Index xx = 0; xx < ow; ++xx, ++o) {
        Index best = ch * h * w + (2 * y) * w + 2 * xx;
        for (Index dy = 0; dy < 2; ++dy)
          for (Index dx = 0; dx < 2; ++dx) {
            const Index idx = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
            if (in[idx] > in[best]) best = idx;
          }
        out.raw()[o] = in[best];
        if (argmax) (*argmax)[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return out;
}

template <typename Scalar>
BasicGradient<Scalar> maxpool2x2_backward(const BasicGradient<Scalar>& upstream, const Shape& input_shape,
                                          const std::vector<Index>& argmax) {
  if (static_cast<Index>(argmax.size()) != upstream.size())
    throw DimensionError("maxpool2x2_backward: argmax size does not match upstream");
  BasicGradient<Scalar> out(input_shape);
  for (Index i = 0; i < upstream.size(); ++i) out.raw()[argmax[static_cast<std::size_t>(i)]] += upstream.raw()[i];
  return out;
}

}  // namespace conceptflow
