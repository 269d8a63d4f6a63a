#ifndef SCI_OPS_HPP
#define SCI_OPS_HPP

#include <vector>

#include "sci/tensor.hpp"

// Differentiable tensor operations. Every function records its backward
// closure on the active tape when one of its inputs requires a gradient.
// Layouts are row-major; images are [batch, channels, rows, cols].

namespace sci {

// Elementwise with numpy-style trailing broadcasting.
template <class S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);

template <class S> Tensor<S> scale(const Tensor<S>& x, S factor);
template <class S> Tensor<S> add_scalar(const Tensor<S>& x, S value);
template <class S> Tensor<S> gelu(const Tensor<S>& x);
template <class S> Tensor<S> abs(const Tensor<S>& x);
template <class S> Tensor<S> exp(const Tensor<S>& x);

template <class S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

// Reductions. sum/mean return a rank-0 tensor.
template <class S> Tensor<S> sum(const Tensor<S>& x);
template <class S> Tensor<S> mean(const Tensor<S>& x);
template <class S> Tensor<S> mean_axis(const Tensor<S>& x, int axis, bool keepdim);

/// Max-subtracted softmax along one axis. Throws NumericError on NaN input.
template <class S> Tensor<S> softmax(const Tensor<S>& x, int axis);

template <class S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
/// Batched product of [B,m,k] and [B,k,n].
template <class S> Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b);

// Layout. reshape accepts one -1 extent.
template <class S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <class S> Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& dims);
template <class S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <class S> Tensor<S> slice(const Tensor<S>& x, int axis, std::int64_t start, std::int64_t length);

struct Conv2dOptions {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dilation_h = 1, dilation_w = 1;
  int groups = 1;

  static Conv2dOptions same(int kh, int kw, int dilation_h = 1, int dilation_w = 1) {
    Conv2dOptions o;
    o.pad_h = dilation_h * (kh - 1) / 2;
    o.pad_w = dilation_w * (kw - 1) / 2;
    o.dilation_h = dilation_h;
    o.dilation_w = dilation_w;
    return o;
  }
};

/// Cross-correlation of x [B,C,H,W] with w [O,C/groups,kh,kw]; bias [O] is optional.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, const Conv2dOptions& opt);

/// Adjoint of a strided convolution; w is [Cin,Cout,kh,kw].
template <class S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride, int pad);

template <class S> Tensor<S> avg_pool2(const Tensor<S>& x);
/// Half-pixel-centred bilinear upsampling by two with edge clamping.
template <class S> Tensor<S> upsample_bilinear2(const Tensor<S>& x);
/// Block average down to a grid_h x grid_w output; extents must divide evenly.
template <class S> Tensor<S> adaptive_avg_pool(const Tensor<S>& x, std::int64_t grid_h, std::int64_t grid_w);

}  // namespace sci

#endif
