#ifndef SCI_TRIDENT_HPP
#define SCI_TRIDENT_HPP

#include <array>
#include <vector>

#include "sci/nn.hpp"

// U-shaped stage denoiser built from three-branch transformer blocks: a
// convolutional spatial flow, spectral (channels-as-tokens) attention with
// spatially compressed queries/keys, and cross-attention from image tokens
// to latent prior tokens.

namespace sci {

/// Prior tokens at three scales: [B,N,C], [B,N/2,2C], [B,N/4,4C].
template <class S>
struct PriorPyramid {
  std::array<Tensor<S>, 3> levels;
};

/// Merges adjacent token pairs ([B,N,C] -> [B,N/2,2C]) through a square
/// linear map that starts as the identity.
template <class S>
struct PriorDownsample {
  Linear<S> merge;

  PriorDownsample() = default;
  PriorDownsample(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels);
  Tensor<S> operator()(const Tensor<S>& z) const;
};

template <class S>
struct PriorPyramidBuilder {
  PriorDownsample<S> to_level2, to_level3;

  PriorPyramidBuilder() = default;
  PriorPyramidBuilder(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels);
  PriorPyramid<S> operator()(const Tensor<S>& z) const;
};

template <class S>
struct SpatialFlowOutput {
  Tensor<S> feature;  // [B,c,H,W]
  Tensor<S> gate_qk;  // [B,2c], per-channel gate on attention logit rows
  Tensor<S> gate_v;   // [B,c,H,W]
};

/// MBlock stack with the compensation maps handed to the spectral branch.
template <class S>
struct SpatialFlow {
  std::vector<MBlock<S>> blocks;
  Conv2d<S> to_gate_qk, to_gate_v;

  SpatialFlow() = default;
  SpatialFlow(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels, int depth,
              std::int64_t expansion);
  SpatialFlowOutput<S> operator()(const Tensor<S>& x) const;
};

template <class S>
struct AcsOutput {
  Tensor<S> out;        // [B,c,H,W]
  Tensor<S> query;      // [B,2c,H/2,W/2]
  Tensor<S> value;      // [B,2c,H,W]
  Tensor<S> attention;  // [B,heads,d,d], rows sum to one
};

/// Spectral multi-head self-attention with 2x2-strided Q/K and a dilated
/// 5x3 (rows x cols) V. Channels are tokens; logits are averaged over the
/// compressed spatial positions.
template <class S>
struct AcsAttention {
  Conv2d<S> query, key, value, project;
  Tensor<S> log_alpha;  // [heads]
  int heads = 1;
  bool uniform_attention = false;  // test hook: all logits zero

  AcsAttention() = default;
  AcsAttention(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels, int heads);
  AcsOutput<S> operator()(const Tensor<S>& x, const Tensor<S>& gate_qk, const Tensor<S>& gate_v) const;
};

template <class S>
struct CpfOutput {
  Tensor<S> out;        // [B,c,H,W]
  Tensor<S> attention;  // [B,heads,tokens,N]
};

/// Cross-attention from image tokens to prior tokens. Queries come from a
/// 2c-channel source map: the spectral branch's value (full resolution) by
/// default, or its compressed query (half resolution, output upsampled).
template <class S>
struct CpfAttention {
  Conv2d<S> query, project;
  Linear<S> key, value;
  Tensor<S> log_alpha;
  int heads = 1;
  bool query_from_compressed = false;

  CpfAttention() = default;
  CpfAttention(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels,
               std::int64_t prior_channels, int heads, bool query_from_compressed);
  CpfOutput<S> operator()(const Tensor<S>& source, const Tensor<S>& prior) const;
};

struct TridentConfig {
  std::int64_t channels = 16;       // level-1 width C
  std::int64_t prior_channels = 32; // level-1 prior token width
  int heads = 4;                    // level-1 head count, doubled per level
  int spatial_depth = 2;
  std::int64_t expansion = 4;
  bool cpf_query_from_compressed = false;
};

template <class S>
struct TridentBlock {
  SpatialFlow<S> spatial;
  AcsAttention<S> spectral;
  CpfAttention<S> prior;
  Conv2d<S> bridge_spectral, bridge_prior;
  Conv2d<S> aggregate1, aggregate2;
  Conv2d<S> ffn1, ffn2;
  std::int64_t channels = 0;

  TridentBlock() = default;
  TridentBlock(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels,
               std::int64_t prior_channels, int heads, const TridentConfig& cfg);
  /// x [B,C,H,W] with even H, W; prior [B,N,prior_channels].
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& prior) const;
};

template <class S>
struct Denoiser {
  Conv2d<S> embed, down1, down2, up2, up1, fuse2, fuse1, output;
  std::array<TridentBlock<S>, 5> blocks;  // levels 1, 2, 3, 2, 1
  std::int64_t bands = 0;

  Denoiser() = default;
  Denoiser(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t bands,
           const TridentConfig& cfg);
  /// x [B,L,H,W], H and W divisible by 8. Returns x + residual.
  Tensor<S> operator()(const Tensor<S>& x, const PriorPyramid<S>& pyramid) const;
};

extern template struct PriorDownsample<float>;
extern template struct PriorDownsample<double>;
extern template struct PriorPyramidBuilder<float>;
extern template struct PriorPyramidBuilder<double>;
extern template struct SpatialFlow<float>;
extern template struct SpatialFlow<double>;
extern template struct AcsAttention<float>;
extern template struct AcsAttention<double>;
extern template struct CpfAttention<float>;
extern template struct CpfAttention<double>;
extern template struct TridentBlock<float>;
extern template struct TridentBlock<double>;
extern template struct Denoiser<float>;
extern template struct Denoiser<double>;

}  // namespace sci

#endif
