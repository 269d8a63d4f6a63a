#include "sci/nn.hpp"

#include <cmath>

namespace sci {

template <class S>
Tensor<S> ParamSet<S>::add(const std::string& name, Tensor<S> t) {
  if (find(name) != nullptr) throw UsageError("duplicate parameter name '" + name + "'");
  t.set_requires_grad(true);
  entries_.push_back({name, t});
  return t;
}

template <class S>
const Tensor<S>* ParamSet<S>::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

template <class S>
std::int64_t ParamSet<S>::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

template <class S>
void ParamSet<S>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <class S>
void ParamSet<S>::set_trainable(bool on) {
  for (auto& e : entries_) e.tensor.set_requires_grad(on);
}

template <class S>
void ParamSet<S>::merge(const std::string& prefix, const ParamSet& other) {
  for (const auto& e : other.entries_) {
    if (find(prefix + e.name) != nullptr) throw UsageError("duplicate parameter name '" + prefix + e.name + "'");
    entries_.push_back({prefix + e.name, e.tensor});
  }
}

template <class S>
Tensor<S> Initializer::fan_in_uniform(Shape shape, std::int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<S> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = static_cast<S>(dist(rng_));
  return Tensor<S>::from(std::move(shape), std::move(values));
}

template Tensor<float> Initializer::fan_in_uniform<float>(Shape, std::int64_t);
template Tensor<double> Initializer::fan_in_uniform<double>(Shape, std::int64_t);

template <class S>
Conv2d<S>::Conv2d(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t in, std::int64_t out,
                  std::int64_t kh, std::int64_t kw, Conv2dOptions opt, bool with_bias, InitMode mode)
    : options(opt) {
  const std::int64_t cin = in / opt.groups;
  Shape shape{out, cin, kh, kw};
  Tensor<S> w;
  switch (mode) {
    case InitMode::random: w = init.fan_in_uniform<S>(shape, cin * kh * kw); break;
    case InitMode::zero: w = Tensor<S>::zeros(shape); break;
    case InitMode::identity: {
      if ((cin != 1 && cin != out) || kh % 2 == 0 || kw % 2 == 0)
        throw UsageError("identity init needs odd kernel and matching channels for " + name);
      w = Tensor<S>::zeros(shape);
      for (std::int64_t o = 0; o < out; ++o) {
        const std::int64_t c = cin == 1 ? 0 : o;
        w.mutable_data()[static_cast<std::size_t>(((o * cin + c) * kh + kh / 2) * kw + kw / 2)] = S(1);
      }
      break;
    }
  }
  weight = params.add(name + ".weight", w);
  if (with_bias) bias = params.add(name + ".bias", Tensor<S>::zeros({out}));
}

template <class S>
Linear<S>::Linear(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t in, std::int64_t out,
                  bool with_bias, InitMode mode) {
  Tensor<S> w;
  switch (mode) {
    case InitMode::random: w = init.fan_in_uniform<S>({in, out}, in); break;
    case InitMode::zero: w = Tensor<S>::zeros({in, out}); break;
    case InitMode::identity:
      if (in != out) throw UsageError("identity init needs a square map for " + name);
      w = Tensor<S>::zeros({in, out});
      for (std::int64_t i = 0; i < in; ++i) w.mutable_data()[static_cast<std::size_t>(i * out + i)] = S(1);
      break;
  }
  weight = params.add(name + ".weight", w);
  if (with_bias) bias = params.add(name + ".bias", Tensor<S>::zeros({out}));
}

template <class S>
Tensor<S> Linear<S>::operator()(const Tensor<S>& x) const {
  Shape out_shape = x.shape();
  const std::int64_t in = weight.dim(0);
  if (out_shape.empty() || out_shape.back() != in)
    throw DimensionError("linear expects last extent " + std::to_string(in) + ", got " + shape_str(x.shape()));
  out_shape.back() = weight.dim(1);
  auto y = matmul(reshape(x, {-1, in}), weight);
  if (bias.defined()) y = y + bias;
  return reshape(y, out_shape);
}

template <class S>
DscBlock<S>::DscBlock(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels,
                      InitMode pointwise_mode) {
  Conv2dOptions dw = Conv2dOptions::same(3, 3);
  dw.groups = static_cast<int>(channels);
  depthwise = Conv2d<S>(params, name + ".dw", init, channels, channels, 3, 3, dw, true);
  pointwise = Conv2d<S>(params, name + ".pw", init, channels, channels, 1, 1, {}, true, pointwise_mode);
}

template <class S>
Tensor<S> DscBlock<S>::operator()(const Tensor<S>& x) const {
  if (x.rank() != 4 || x.dim(1) != depthwise.weight.dim(0))
    throw DimensionError("DSC block expects " + std::to_string(depthwise.weight.dim(0)) + " channels, got " +
                         shape_str(x.shape()));
  return pointwise(depthwise(x));
}

template <class S>
MBlock<S>::MBlock(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t in, std::int64_t out,
                  int stride, std::int64_t expansion)
    : residual(stride == 1 && in == out) {
  const std::int64_t hidden = in * expansion;
  expand = Conv2d<S>(params, name + ".expand", init, in, hidden, 1, 1, {}, true);
  Conv2dOptions dw = Conv2dOptions::same(3, 3);
  dw.groups = static_cast<int>(hidden);
  dw.stride_h = dw.stride_w = stride;
  depthwise = Conv2d<S>(params, name + ".dw", init, hidden, hidden, 3, 3, dw, true);
  project = Conv2d<S>(params, name + ".project", init, hidden, out, 1, 1, {}, true);
}

template <class S>
Tensor<S> MBlock<S>::operator()(const Tensor<S>& x) const {
  auto h = project(gelu(depthwise(expand(x))));
  return residual ? x + h : h;
}

template class ParamSet<float>;
template class ParamSet<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct DscBlock<float>;
template struct DscBlock<double>;
template struct MBlock<float>;
template struct MBlock<double>;

}  // namespace sci
