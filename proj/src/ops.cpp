#include "sci/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace sci {

namespace {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

using i64 = std::int64_t;

int normalize_axis(int axis, std::size_t rank, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int k = axis < 0 ? axis + r : axis;
  if (k < 0 || k >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  return k;
}

// outer x extent x inner factorisation around one axis.
struct AxisSplit {
  i64 outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int d = 0; d < axis; ++d) s.outer *= shape[static_cast<std::size_t>(d)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

struct BroadcastPlan {
  Shape out;
  std::vector<i64> stride_a, stride_b;
  bool same = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  i64 sa = 1, sb = 1;
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t d = r - 1 - k;
    const i64 ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    const i64 eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out[d] = std::max(ea, eb);
    p.stride_a[d] = ea == 1 ? 0 : sa;
    p.stride_b[d] = eb == 1 ? 0 : sb;
    sa *= ea;
    sb *= eb;
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const i64 n = numel(p.out);
  if (p.same) {
    for (i64 i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const int r = static_cast<int>(p.out.size());
  std::vector<i64> idx(static_cast<std::size_t>(r), 0);
  i64 ia = 0, ib = 0;
  for (i64 i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      ia += p.stride_a[du];
      ib += p.stride_b[du];
      if (idx[du] < p.out[du]) break;
      ia -= p.stride_a[du] * p.out[du];
      ib -= p.stride_b[du] * p.out[du];
      idx[du] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul };

template <class S>
Tensor<S> binary(const Tensor<S>& a, const Tensor<S>& b, BinaryKind kind) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  const bool diff = autograd::needs_grad<S>({&a, &b});
  auto out = autograd::make_result<S>(plan.out, diff);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  switch (kind) {
    case BinaryKind::add: for_each_broadcast(plan, [&](i64 i, i64 ia, i64 ib) { po[i] = pa[ia] + pb[ib]; }); break;
    case BinaryKind::sub: for_each_broadcast(plan, [&](i64 i, i64 ia, i64 ib) { po[i] = pa[ia] - pb[ib]; }); break;
    case BinaryKind::mul: for_each_broadcast(plan, [&](i64 i, i64 ia, i64 ib) { po[i] = pa[ia] * pb[ib]; }); break;
  }
  if (diff) {
    autograd::record([an = a.node(), bn = b.node(), on = out.node(), plan = std::move(plan), kind] {
      if (on->grad.empty()) return;
      const S* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        S* ga = an->grad.data();
        const S* vb = bn->data.data();
        if (kind == BinaryKind::mul)
          for_each_broadcast(plan, [&](i64 i, i64 ia, i64 ib) { ga[ia] += g[i] * vb[ib]; });
        else
          for_each_broadcast(plan, [&](i64 i, i64 ia, i64) { ga[ia] += g[i]; });
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        S* gb = bn->grad.data();
        const S* va = an->data.data();
        if (kind == BinaryKind::mul)
          for_each_broadcast(plan, [&](i64 i, i64 ia, i64 ib) { gb[ib] += g[i] * va[ia]; });
        else if (kind == BinaryKind::sub)
          for_each_broadcast(plan, [&](i64 i, i64, i64 ib) { gb[ib] -= g[i]; });
        else
          for_each_broadcast(plan, [&](i64 i, i64, i64 ib) { gb[ib] += g[i]; });
      }
    });
  }
  return out;
}

template <class S>
constexpr S kInvSqrt2 = S(1) / std::numbers::sqrt2_v<S>;

// y = f(x); dx = g * df(x, y).
template <class S, class F, class DF>
Tensor<S> unary(const Tensor<S>& x, F f, DF df) {
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>(x.shape(), diff);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  if (diff) {
    autograd::record([xn = x.node(), on = out.node(), df] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += on->grad[i] * df(xn->data[i], on->data[i]);
    });
  }
  return out;
}

template <class S>
void check_rank(const Tensor<S>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank)
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

}  // namespace

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(a, b, BinaryKind::add);
}
template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(a, b, BinaryKind::sub);
}
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary(a, b, BinaryKind::mul);
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return unary(x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S value) {
  return unary(x, [value](S v) { return v + value; }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  return unary(
      x, [](S v) { return S(0.5) * v * (S(1) + std::erf(v * kInvSqrt2<S>)); },
      [](S v, S) {
        const S cdf = S(0.5) * (S(1) + std::erf(v * kInvSqrt2<S>));
        const S pdf = std::exp(S(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<S> * kInvSqrt2<S>;
        return cdf + v * pdf;
      });
}

template <class S>
Tensor<S> abs(const Tensor<S>& x) {
  return unary(x, [](S v) { return std::abs(v); }, [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>({}, diff);
  S acc = 0;
  for (S v : x.data()) acc += v;
  out.mutable_data()[0] = acc;
  if (diff) {
    autograd::record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      const S g = on->grad[0];
      for (auto& v : xn->grad) v += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <class S>
Tensor<S> mean_axis(const Tensor<S>& x, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  Shape shape = x.shape();
  if (keepdim)
    shape[static_cast<std::size_t>(ax)] = 1;
  else
    shape.erase(shape.begin() + ax);
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>(shape, diff);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  const S inv = S(1) / static_cast<S>(sp.extent);
  for (i64 o = 0; o < sp.outer; ++o)
    for (i64 k = 0; k < sp.extent; ++k)
      for (i64 i = 0; i < sp.inner; ++i) po[o * sp.inner + i] += px[(o * sp.extent + k) * sp.inner + i];
  for (i64 j = 0; j < sp.outer * sp.inner; ++j) po[j] *= inv;
  if (diff) {
    autograd::record([xn = x.node(), on = out.node(), sp, inv] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (i64 o = 0; o < sp.outer; ++o)
        for (i64 k = 0; k < sp.extent; ++k)
          for (i64 i = 0; i < sp.inner; ++i)
            xn->grad[static_cast<std::size_t>((o * sp.extent + k) * sp.inner + i)] +=
                on->grad[static_cast<std::size_t>(o * sp.inner + i)] * inv;
    });
  }
  return out;
}

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>(x.shape(), diff);
  const S* px = x.data().data();
  S* py = out.mutable_data().data();
  for (i64 o = 0; o < sp.outer; ++o) {
    for (i64 i = 0; i < sp.inner; ++i) {
      const i64 base = o * sp.extent * sp.inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (i64 k = 0; k < sp.extent; ++k) {
        const S v = px[base + k * sp.inner];
        if (std::isnan(v)) throw NumericError("softmax input contains NaN");
        mx = std::max(mx, v);
      }
      S z = 0;
      for (i64 k = 0; k < sp.extent; ++k) {
        const S e = std::exp(px[base + k * sp.inner] - mx);
        py[base + k * sp.inner] = e;
        z += e;
      }
      const S invz = S(1) / z;
      for (i64 k = 0; k < sp.extent; ++k) py[base + k * sp.inner] *= invz;
    }
  }
  if (diff) {
    autograd::record([xn = x.node(), on = out.node(), sp] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      const S* y = on->data.data();
      const S* g = on->grad.data();
      S* gx = xn->grad.data();
      for (i64 o = 0; o < sp.outer; ++o) {
        for (i64 i = 0; i < sp.inner; ++i) {
          const i64 base = o * sp.extent * sp.inner + i;
          S dot = 0;
          for (i64 k = 0; k < sp.extent; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
          for (i64 k = 0; k < sp.extent; ++k) {
            const i64 j = base + k * sp.inner;
            gx[j] += y[j] * (g[j] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto a3 = reshape(a, {1, a.dim(0), a.dim(1)});
  auto b3 = reshape(b, {1, b.dim(0), b.dim(1)});
  return reshape(bmm(a3, b3), {a.dim(0), b.dim(1)});
}

template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  check_rank(a, 3, "bmm");
  check_rank(b, 3, "bmm");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const i64 B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const bool diff = autograd::needs_grad<S>({&a, &b});
  auto out = autograd::make_result<S>({B, m, n}, diff);
  for (i64 i = 0; i < B; ++i) {
    CMapMat<S> A(a.data().data() + i * m * k, m, k);
    CMapMat<S> Bm(b.data().data() + i * k * n, k, n);
    MapMat<S> C(out.mutable_data().data() + i * m * n, m, n);
    C.noalias() = A * Bm;
  }
  if (diff) {
    autograd::record([an = a.node(), bn = b.node(), on = out.node(), B, m, k, n] {
      if (on->grad.empty()) return;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (i64 i = 0; i < B; ++i) {
        CMapMat<S> G(on->grad.data() + i * m * n, m, n);
        if (an->requires_grad) {
          CMapMat<S> Bm(bn->data.data() + i * k * n, k, n);
          MapMat<S> GA(an->grad.data() + i * m * k, m, k);
          GA.noalias() += G * Bm.transpose();
        }
        if (bn->requires_grad) {
          CMapMat<S> A(an->data.data() + i * m * k, m, k);
          MapMat<S> GB(bn->grad.data() + i * k * n, k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  i64 known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape allows a single -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  if (numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>(std::move(shape), diff);
  std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  if (diff) {
    autograd::record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& dims) {
  const std::size_t r = x.rank();
  if (dims.size() != r) throw DimensionError("permute needs " + std::to_string(r) + " axes");
  std::vector<i64> in_stride(r, 1);
  for (int d = static_cast<int>(r) - 2; d >= 0; --d)
    in_stride[static_cast<std::size_t>(d)] = in_stride[static_cast<std::size_t>(d) + 1] * x.shape()[static_cast<std::size_t>(d) + 1];
  Shape shape(r);
  std::vector<i64> src_stride(r);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    const int d = dims[i];
    if (d < 0 || static_cast<std::size_t>(d) >= r || seen[static_cast<std::size_t>(d)])
      throw DimensionError("invalid permutation for " + shape_str(x.shape()));
    seen[static_cast<std::size_t>(d)] = true;
    shape[i] = x.shape()[static_cast<std::size_t>(d)];
    src_stride[i] = in_stride[static_cast<std::size_t>(d)];
  }
  // Source offset for every destination element, in destination order.
  const i64 n = x.numel();
  std::vector<i64> src(static_cast<std::size_t>(n));
  {
    std::vector<i64> idx(r, 0);
    i64 off = 0;
    for (i64 i = 0; i < n; ++i) {
      src[static_cast<std::size_t>(i)] = off;
      for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        ++idx[du];
        off += src_stride[du];
        if (idx[du] < shape[du]) break;
        off -= src_stride[du] * shape[du];
        idx[du] = 0;
      }
    }
  }
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>(shape, diff);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (i64 i = 0; i < n; ++i) po[i] = px[src[static_cast<std::size_t>(i)]];
  if (diff) {
    autograd::record([xn = x.node(), on = out.node(), src = std::move(src)] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < src.size(); ++i) xn->grad[static_cast<std::size_t>(src[i])] += on->grad[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const int ax = normalize_axis(axis, parts[0].rank(), parts[0].shape());
  Shape shape = parts[0].shape();
  shape[static_cast<std::size_t>(ax)] = 0;
  bool diff = false;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d)
      if (static_cast<int>(d) != ax && p.shape()[d] != parts[0].shape()[d])
        throw DimensionError("concat extents differ: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    shape[static_cast<std::size_t>(ax)] += p.shape()[static_cast<std::size_t>(ax)];
    diff = diff || autograd::needs_grad<S>({&p});
  }
  const auto sp = split_at(shape, ax);
  auto out = autograd::make_result<S>(shape, diff);
  S* po = out.mutable_data().data();
  i64 offset = 0;
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  std::vector<i64> offsets;
  for (const auto& p : parts) {
    const i64 chunk = p.shape()[static_cast<std::size_t>(ax)] * sp.inner;
    for (i64 o = 0; o < sp.outer; ++o)
      std::copy_n(p.data().data() + o * chunk, chunk, po + o * sp.extent * sp.inner + offset);
    nodes.push_back(p.node());
    offsets.push_back(offset);
    offset += chunk;
  }
  if (diff) {
    autograd::record([nodes = std::move(nodes), offsets = std::move(offsets), on = out.node(), sp, ax] {
      if (on->grad.empty()) return;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        auto& pn = *nodes[k];
        if (!pn.requires_grad) continue;
        pn.ensure_grad();
        const i64 chunk = pn.shape[static_cast<std::size_t>(ax)] * sp.inner;
        for (i64 o = 0; o < sp.outer; ++o)
          for (i64 j = 0; j < chunk; ++j)
            pn.grad[static_cast<std::size_t>(o * chunk + j)] +=
                on->grad[static_cast<std::size_t>(o * sp.extent * sp.inner + offsets[k] + j)];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, int axis, i64 start, i64 length) {
  const int ax = normalize_axis(axis, x.rank(), x.shape());
  const auto sp = split_at(x.shape(), ax);
  if (start < 0 || length < 0 || start + length > sp.extent)
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside " +
                         shape_str(x.shape()));
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(ax)] = length;
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>(shape, diff);
  const i64 chunk = length * sp.inner;
  const i64 src_off = start * sp.inner;
  for (i64 o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().data() + o * sp.extent * sp.inner + src_off, chunk, out.mutable_data().data() + o * chunk);
  if (diff) {
    autograd::record([xn = x.node(), on = out.node(), sp, chunk, src_off] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (i64 o = 0; o < sp.outer; ++o)
        for (i64 j = 0; j < chunk; ++j)
          xn->grad[static_cast<std::size_t>(o * sp.extent * sp.inner + src_off + j)] +=
              on->grad[static_cast<std::size_t>(o * chunk + j)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions

namespace {

struct ConvGeom {
  i64 channels, h, w;  // input plane stack
  i64 kh, kw;
  int sh, sw, ph, pw, dh, dw;
  i64 oh, ow;
};

// Output positions o in [lo, hi) whose input index o*stride - pad + k*dil lies in [0, n).
struct TapRange {
  i64 lo, hi;
};

inline TapRange tap_range(i64 n, i64 out, int stride, int pad, i64 offset) {
  const i64 shift = pad - offset;  // need o*stride >= shift and o*stride < n + shift
  i64 lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  i64 hi = n + shift <= 0 ? 0 : (n + shift + stride - 1) / stride;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// col[(c*kh + i)*kw + j][oy*ow + ox] = x[c][oy*sh - ph + i*dh][ox*sw - pw + j*dw]
template <class S>
void im2col(const S* x, const ConvGeom& g, S* col) {
  const i64 plane = g.oh * g.ow;
  for (i64 c = 0; c < g.channels; ++c)
    for (i64 i = 0; i < g.kh; ++i)
      for (i64 j = 0; j < g.kw; ++j) {
        S* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (i64 oy = 0; oy < g.oh; ++oy) {
          const i64 iy = oy * g.sh - g.ph + i * g.dh;
          S* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.ow, S(0));
            continue;
          }
          const S* src = x + (c * g.h + iy) * g.w;
          for (i64 ox = 0; ox < g.ow; ++ox) {
            const i64 ix = ox * g.sw - g.pw + j * g.dw;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : S(0);
          }
        }
      }
}

template <class S>
void col2im(const S* col, const ConvGeom& g, S* x) {
  const i64 plane = g.oh * g.ow;
  for (i64 c = 0; c < g.channels; ++c)
    for (i64 i = 0; i < g.kh; ++i)
      for (i64 j = 0; j < g.kw; ++j) {
        const S* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (i64 oy = 0; oy < g.oh; ++oy) {
          const i64 iy = oy * g.sh - g.ph + i * g.dh;
          if (iy < 0 || iy >= g.h) continue;
          S* dst = x + (c * g.h + iy) * g.w;
          const S* src = row + oy * g.ow;
          for (i64 ox = 0; ox < g.ow; ++ox) {
            const i64 ix = ox * g.sw - g.pw + j * g.dw;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;
}

}  // namespace

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, const Conv2dOptions& opt) {
  check_rank(x, 4, "conv2d input");
  check_rank(w, 4, "conv2d weight");
  const i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const i64 O = w.dim(0), Cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int G = opt.groups;
  if (G < 1 || C != Cg * G || O % G != 0)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                         ", groups " + std::to_string(G));
  if (opt.stride_h < 1 || opt.stride_w < 1 || opt.dilation_h < 1 || opt.dilation_w < 1 || opt.pad_h < 0 || opt.pad_w < 0)
    throw DimensionError("conv2d needs positive stride/dilation and nonnegative padding");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
    throw DimensionError("conv2d bias " + shape_str(bias.shape()) + " does not match " + std::to_string(O) + " outputs");
  const i64 span_h = static_cast<i64>(opt.dilation_h) * (kh - 1) + 1;
  const i64 span_w = static_cast<i64>(opt.dilation_w) * (kw - 1) + 1;
  if (span_h > H + 2 * opt.pad_h || span_w > W + 2 * opt.pad_w)
    throw DimensionError("conv2d kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  ConvGeom g{Cg, H, W, kh, kw, opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w, opt.dilation_h, opt.dilation_w, 0, 0};
  g.oh = (H + 2 * opt.pad_h - span_h) / opt.stride_h + 1;
  g.ow = (W + 2 * opt.pad_w - span_w) / opt.stride_w + 1;
  const i64 Og = O / G, K = Cg * kh * kw, P = g.oh * g.ow;
  const bool depthwise = Cg == 1 && Og == 1;
  const bool pointwise = is_pointwise(g);

  const bool diff = autograd::needs_grad<S>({&x, &w, &bias});
  auto out = autograd::make_result<S>({B, O, g.oh, g.ow}, diff);
  const S* px = x.data().data();
  const S* pw = w.data().data();
  S* po = out.mutable_data().data();

  if (depthwise) {
    for (i64 b = 0; b < B; ++b)
      for (i64 c = 0; c < C; ++c) {
        const S* xc = px + (b * C + c) * H * W;
        S* oc = po + (b * C + c) * P;
        for (i64 i = 0; i < kh; ++i)
          for (i64 j = 0; j < kw; ++j) {
            const S wv = pw[(c * kh + i) * kw + j];
            const auto ry = tap_range(H, g.oh, g.sh, g.ph, i * g.dh);
            const auto rx = tap_range(W, g.ow, g.sw, g.pw, j * g.dw);
            for (i64 oy = ry.lo; oy < ry.hi; ++oy) {
              const S* xrow = xc + (oy * g.sh - g.ph + i * g.dh) * W - g.pw + j * g.dw;
              S* orow = oc + oy * g.ow;
              if (g.sw == 1)
                for (i64 ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * xrow[ox];
              else
                for (i64 ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * xrow[ox * g.sw];
            }
          }
      }
  } else {
    std::vector<S> col(pointwise ? 0 : static_cast<std::size_t>(K * P));
    for (i64 b = 0; b < B; ++b)
      for (int gi = 0; gi < G; ++gi) {
        const S* xg = px + (b * C + gi * Cg) * H * W;
        if (!pointwise) im2col(xg, g, col.data());
        CMapMat<S> Wg(pw + gi * Og * K, Og, K);
        CMapMat<S> X(pointwise ? xg : col.data(), K, P);
        MapMat<S> Y(po + (b * O + gi * Og) * P, Og, P);
        Y.noalias() = Wg * X;
      }
  }
  if (bias.defined()) {
    const S* pb = bias.data().data();
    for (i64 b = 0; b < B; ++b)
      for (i64 o = 0; o < O; ++o) {
        S* oc = po + (b * O + o) * P;
        for (i64 p = 0; p < P; ++p) oc[p] += pb[o];
      }
  }

  if (diff) {
    autograd::record([xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node(), g, B, C, O, G, Og, K, P,
                      depthwise, pointwise] {
      if (on->grad.empty()) return;
      const S* go = on->grad.data();
      const i64 H = g.h, W = g.w, Cg = g.channels;
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (i64 b = 0; b < B; ++b)
          for (i64 o = 0; o < O; ++o) {
            S acc = 0;
            const S* gc = go + (b * O + o) * P;
            for (i64 p = 0; p < P; ++p) acc += gc[p];
            bn->grad[static_cast<std::size_t>(o)] += acc;
          }
      }
      const bool need_x = xn->requires_grad, need_w = wn->requires_grad;
      if (need_x) xn->ensure_grad();
      if (need_w) wn->ensure_grad();
      const S* px = xn->data.data();
      const S* pw = wn->data.data();
      if (depthwise) {
        for (i64 b = 0; b < B; ++b)
          for (i64 c = 0; c < C; ++c) {
            const S* xc = px + (b * C + c) * H * W;
            const S* gc = go + (b * C + c) * P;
            S* gxc = need_x ? xn->grad.data() + (b * C + c) * H * W : nullptr;
            for (i64 i = 0; i < g.kh; ++i)
              for (i64 j = 0; j < g.kw; ++j) {
                const std::size_t widx = static_cast<std::size_t>((c * g.kh + i) * g.kw + j);
                const S wv = pw[widx];
                S gw = 0;
                const auto ry = tap_range(H, g.oh, g.sh, g.ph, i * g.dh);
                const auto rx = tap_range(W, g.ow, g.sw, g.pw, j * g.dw);
                for (i64 oy = ry.lo; oy < ry.hi; ++oy) {
                  const i64 base = (oy * g.sh - g.ph + i * g.dh) * W - g.pw + j * g.dw;
                  const S* xrow = xc + base;
                  const S* grow = gc + oy * g.ow;
                  for (i64 ox = rx.lo; ox < rx.hi; ++ox) gw += grow[ox] * xrow[ox * g.sw];
                  if (gxc) {
                    S* gxrow = gxc + base;
                    for (i64 ox = rx.lo; ox < rx.hi; ++ox) gxrow[ox * g.sw] += grow[ox] * wv;
                  }
                }
                if (need_w) wn->grad[widx] += gw;
              }
          }
        return;
      }
      std::vector<S> col(pointwise ? 0 : static_cast<std::size_t>(K * P));
      std::vector<S> dcol(need_x && !pointwise ? static_cast<std::size_t>(K * P) : 0);
      for (i64 b = 0; b < B; ++b)
        for (int gi = 0; gi < G; ++gi) {
          const S* xg = px + (b * C + gi * Cg) * H * W;
          CMapMat<S> GY(go + (b * O + gi * Og) * P, Og, P);
          if (need_w) {
            if (!pointwise) im2col(xg, g, col.data());
            CMapMat<S> X(pointwise ? xg : col.data(), K, P);
            MapMat<S> GW(wn->grad.data() + gi * Og * K, Og, K);
            GW.noalias() += GY * X.transpose();
          }
          if (need_x) {
            CMapMat<S> Wg(pw + gi * Og * K, Og, K);
            S* gx = xn->grad.data() + (b * C + gi * Cg) * H * W;
            if (pointwise) {
              MapMat<S> GX(gx, K, P);
              GX.noalias() += Wg.transpose() * GY;
            } else {
              MapMat<S> DC(dcol.data(), K, P);
              DC.noalias() = Wg.transpose() * GY;
              col2im(dcol.data(), g, gx);
            }
          }
        }
    });
  }
  return out;
}

template <class S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride, int pad) {
  check_rank(x, 4, "conv_transpose2d input");
  check_rank(w, 4, "conv_transpose2d weight");
  const i64 B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const i64 Cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != Cin)
    throw DimensionError("conv_transpose2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
    throw DimensionError("conv_transpose2d bias does not match outputs");
  const i64 OH = (H - 1) * stride - 2 * pad + kh;
  const i64 OW = (W - 1) * stride - 2 * pad + kw;
  if (OH <= 0 || OW <= 0) throw DimensionError("conv_transpose2d produces an empty output");
  // Geometry of the forward convolution this operator is the adjoint of.
  ConvGeom g{Cout, OH, OW, kh, kw, stride, stride, pad, pad, 1, 1, H, W};
  const i64 K = Cout * kh * kw, P = H * W;
  const bool diff = autograd::needs_grad<S>({&x, &w, &bias});
  auto out = autograd::make_result<S>({B, Cout, OH, OW}, diff);
  std::vector<S> col(static_cast<std::size_t>(K * P));
  CMapMat<S> Wm(w.data().data(), Cin, K);
  for (i64 b = 0; b < B; ++b) {
    CMapMat<S> X(x.data().data() + b * Cin * P, Cin, P);
    MapMat<S> Cm(col.data(), K, P);
    Cm.noalias() = Wm.transpose() * X;
    col2im(col.data(), g, out.mutable_data().data() + b * Cout * OH * OW);
  }
  if (bias.defined())
    for (i64 b = 0; b < B; ++b)
      for (i64 c = 0; c < Cout; ++c)
        for (i64 p = 0; p < OH * OW; ++p) out.mutable_data()[static_cast<std::size_t>((b * Cout + c) * OH * OW + p)] += bias[c];
  if (diff) {
    autograd::record([xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node(), g, B, Cin, Cout, K, P] {
      if (on->grad.empty()) return;
      const i64 plane = g.h * g.w;
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (i64 b = 0; b < B; ++b)
          for (i64 c = 0; c < Cout; ++c) {
            S acc = 0;
            for (i64 p = 0; p < plane; ++p) acc += on->grad[static_cast<std::size_t>((b * Cout + c) * plane + p)];
            bn->grad[static_cast<std::size_t>(c)] += acc;
          }
      }
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      std::vector<S> col(static_cast<std::size_t>(K * P));
      CMapMat<S> Wm(wn->data.data(), Cin, K);
      for (i64 b = 0; b < B; ++b) {
        im2col(on->grad.data() + b * Cout * plane, g, col.data());
        CMapMat<S> Cm(col.data(), K, P);
        if (xn->requires_grad) {
          MapMat<S> GX(xn->grad.data() + b * Cin * P, Cin, P);
          GX.noalias() += Wm * Cm;
        }
        if (wn->requires_grad) {
          CMapMat<S> X(xn->data.data() + b * Cin * P, Cin, P);
          MapMat<S> GW(wn->grad.data(), Cin, K);
          GW.noalias() += X * Cm.transpose();
        }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> avg_pool2(const Tensor<S>& x) {
  check_rank(x, 4, "avg_pool2");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw DimensionError("avg_pool2 needs even spatial extents, got " + shape_str(x.shape()));
  return adaptive_avg_pool(x, x.dim(2) / 2, x.dim(3) / 2);
}

template <class S>
Tensor<S> adaptive_avg_pool(const Tensor<S>& x, i64 grid_h, i64 grid_w) {
  check_rank(x, 4, "adaptive_avg_pool");
  const i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (grid_h < 1 || grid_w < 1 || H % grid_h != 0 || W % grid_w != 0)
    throw DimensionError("cannot pool " + shape_str(x.shape()) + " onto a " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w) + " grid");
  const i64 fh = H / grid_h, fw = W / grid_w;
  const S inv = S(1) / static_cast<S>(fh * fw);
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>({B, C, grid_h, grid_w}, diff);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (i64 bc = 0; bc < B * C; ++bc)
    for (i64 y = 0; y < H; ++y)
      for (i64 xx = 0; xx < W; ++xx) po[(bc * grid_h + y / fh) * grid_w + xx / fw] += px[(bc * H + y) * W + xx];
  for (auto& v : out.mutable_data()) v *= inv;
  if (diff) {
    autograd::record([xn = x.node(), on = out.node(), B, C, H, W, grid_h, grid_w, fh, fw, inv] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (i64 bc = 0; bc < B * C; ++bc)
        for (i64 y = 0; y < H; ++y)
          for (i64 xx = 0; xx < W; ++xx)
            xn->grad[static_cast<std::size_t>((bc * H + y) * W + xx)] +=
                on->grad[static_cast<std::size_t>((bc * grid_h + y / fh) * grid_w + xx / fw)] * inv;
    });
  }
  return out;
}

namespace {

struct LerpTap {
  i64 i0, i1;
  double w0, w1;
};

std::vector<LerpTap> upsample_taps(i64 n) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(2 * n));
  for (i64 o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    const i64 i0 = std::min(static_cast<i64>(src), n - 1);
    const i64 i1 = std::min(i0 + 1, n - 1);
    const double w1 = src - static_cast<double>(i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

template <class S>
Tensor<S> upsample_bilinear2(const Tensor<S>& x) {
  check_rank(x, 4, "upsample_bilinear2");
  const i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = upsample_taps(H), tx = upsample_taps(W);
  const i64 OH = 2 * H, OW = 2 * W;
  const bool diff = autograd::needs_grad<S>({&x});
  auto out = autograd::make_result<S>({B, C, OH, OW}, diff);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (i64 bc = 0; bc < B * C; ++bc) {
    const S* xc = px + bc * H * W;
    for (i64 oy = 0; oy < OH; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      for (i64 ox = 0; ox < OW; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const S top = static_cast<S>(b.w0) * xc[a.i0 * W + b.i0] + static_cast<S>(b.w1) * xc[a.i0 * W + b.i1];
        const S bot = static_cast<S>(b.w0) * xc[a.i1 * W + b.i0] + static_cast<S>(b.w1) * xc[a.i1 * W + b.i1];
        po[(bc * OH + oy) * OW + ox] = static_cast<S>(a.w0) * top + static_cast<S>(a.w1) * bot;
      }
    }
  }
  if (diff) {
    autograd::record([xn = x.node(), on = out.node(), ty, tx, B, C, H, W, OH, OW] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (i64 bc = 0; bc < B * C; ++bc) {
        S* gx = xn->grad.data() + bc * H * W;
        for (i64 oy = 0; oy < OH; ++oy) {
          const auto& a = ty[static_cast<std::size_t>(oy)];
          for (i64 ox = 0; ox < OW; ++ox) {
            const auto& b = tx[static_cast<std::size_t>(ox)];
            const S gv = on->grad[static_cast<std::size_t>((bc * OH + oy) * OW + ox)];
            gx[a.i0 * W + b.i0] += gv * static_cast<S>(a.w0 * b.w0);
            gx[a.i0 * W + b.i1] += gv * static_cast<S>(a.w0 * b.w1);
            gx[a.i1 * W + b.i0] += gv * static_cast<S>(a.w1 * b.w0);
            gx[a.i1 * W + b.i1] += gv * static_cast<S>(a.w1 * b.w1);
          }
        }
      }
    });
  }
  return out;
}

#define SCI_INSTANTIATE_OPS(S)                                                                                 \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> scale(const Tensor<S>&, S);                                                               \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                                          \
  template Tensor<S> gelu(const Tensor<S>&);                                                                   \
  template Tensor<S> abs(const Tensor<S>&);                                                                    \
  template Tensor<S> exp(const Tensor<S>&);                                                                    \
  template Tensor<S> sum(const Tensor<S>&);                                                                    \
  template Tensor<S> mean(const Tensor<S>&);                                                                   \
  template Tensor<S> mean_axis(const Tensor<S>&, int, bool);                                                   \
  template Tensor<S> softmax(const Tensor<S>&, int);                                                           \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> bmm(const Tensor<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                         \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<int>&);                                       \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                                               \
  template Tensor<S> slice(const Tensor<S>&, int, i64, i64);                                                   \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Conv2dOptions&);       \
  template Tensor<S> conv_transpose2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);         \
  template Tensor<S> avg_pool2(const Tensor<S>&);                                                              \
  template Tensor<S> upsample_bilinear2(const Tensor<S>&);                                                     \
  template Tensor<S> adaptive_avg_pool(const Tensor<S>&, i64, i64);

SCI_INSTANTIATE_OPS(float)
SCI_INSTANTIATE_OPS(double)

}  // namespace sci
