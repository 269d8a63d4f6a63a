#ifndef SCI_NN_HPP
#define SCI_NN_HPP

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sci/ops.hpp"

namespace sci {

/// Named learnable tensors. Layers keep handles to the same nodes, so an
/// optimizer updating a ParamSet updates the layers in place.
template <class S>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<S> tensor;
  };

  Tensor<S> add(const std::string& name, Tensor<S> t);
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  const Tensor<S>* find(const std::string& name) const;
  std::int64_t scalar_count() const;
  void zero_grad();
  void set_trainable(bool on);
  /// Appends all entries of another set under a prefix.
  void merge(const std::string& prefix, const ParamSet& other);

 private:
  std::vector<Entry> entries_;
};

/// Deterministic parameter initialisation source.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  template <class S>
  Tensor<S> fan_in_uniform(Shape shape, std::int64_t fan_in);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

enum class InitMode { random, zero, identity };

template <class S>
struct Conv2d {
  Tensor<S> weight, bias;
  Conv2dOptions options;

  Conv2d() = default;
  /// Square or rectangular kernel; bias optional. `identity` requires a
  /// pointwise or centred-delta compatible shape.
  Conv2d(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t in, std::int64_t out,
         std::int64_t kh, std::int64_t kw, Conv2dOptions opt, bool with_bias, InitMode mode = InitMode::random);
  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, options); }
};

/// Affine map over the last axis: [..., in] -> [..., out].
template <class S>
struct Linear {
  Tensor<S> weight, bias;  // weight [in, out]

  Linear() = default;
  Linear(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t in, std::int64_t out,
         bool with_bias = true, InitMode mode = InitMode::random);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

/// Depthwise 3x3 convolution followed by a pointwise 1x1 convolution.
template <class S>
struct DscBlock {
  Conv2d<S> depthwise, pointwise;

  DscBlock() = default;
  DscBlock(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels,
           InitMode pointwise_mode = InitMode::random);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

/// Inverted residual block without normalisation: pointwise expand,
/// depthwise 3x3 (optionally strided), GELU, pointwise project. The residual
/// path is present when the block keeps both shape and channel count.
template <class S>
struct MBlock {
  Conv2d<S> expand, depthwise, project;
  bool residual = false;

  MBlock() = default;
  MBlock(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t in, std::int64_t out,
         int stride = 1, std::int64_t expansion = 4);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;
extern template struct Conv2d<float>;
extern template struct Conv2d<double>;
extern template struct Linear<float>;
extern template struct Linear<double>;
extern template struct DscBlock<float>;
extern template struct DscBlock<double>;
extern template struct MBlock<float>;
extern template struct MBlock<double>;

}  // namespace sci

#endif
