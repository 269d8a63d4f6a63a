#ifndef SCI_DIFFUSION_HPP
#define SCI_DIFFUSION_HPP

#include <random>
#include <vector>

#include "sci/nn.hpp"

// Latent diffusion over prior tokens [B,N,C]: encoders that produce the
// tokens, the noise schedule, forward noising, the reverse chain and its
// noise-prediction MLP.

namespace sci {

struct DiffusionSchedule {
  int steps = 0;
  // Index t-1 holds the value for step t.
  std::vector<double> beta, alpha, alpha_bar;

  /// beta linear from beta_start to beta_end. If the product of alphas
  /// still exceeds max_final_alpha_bar, the last alpha is lowered so that
  /// alpha_bar_T = max_final_alpha_bar / 2.
  static DiffusionSchedule linear(int steps, double beta_start = 0.1, double beta_end = 0.99,
                                  double max_final_alpha_bar = 1e-4);
  /// Throws NumericError unless betas lie in (0,1) and alpha_bar strictly decreases.
  void validate() const;
  /// alpha_bar at step t, with alpha_bar(0) = 1.
  double alpha_bar_at(int t) const;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. t = 0 returns z0.
template <class S>
Tensor<S> diffuse_forward(const Tensor<S>& z0, int t, const Tensor<S>& eps, const DiffusionSchedule& schedule);

/// z_{t-1} = (z_t - (1 - alpha_t)/sqrt(1 - abar_t) eps_pred)/sqrt(alpha_t) + sqrt(1 - alpha_t) noise.
/// `noise` may be undefined and is ignored at t = 1.
template <class S>
Tensor<S> reverse_step(const Tensor<S>& z_t, int t, const Tensor<S>& eps_pred, const DiffusionSchedule& schedule,
                       const Tensor<S>& noise);

/// Sinusoidal embedding of step t into `dim` values.
template <class S>
std::vector<S> time_embedding(int t, std::int64_t dim);

/// Per-token MLP on concat(z_t, c, embed(t)) with three GELU hidden layers.
/// Its output is a z_0 estimate (see predict_noise); the output layer starts at zero.
template <class S>
struct EpsilonMlp {
  std::vector<Linear<S>> layers;
  std::int64_t channels = 0;

  EpsilonMlp() = default;
  EpsilonMlp(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t channels,
             std::int64_t hidden);
  Tensor<S> operator()(const Tensor<S>& z_t, const Tensor<S>& c, int t) const;
};

/// eps_theta(z_t, c, t) = (z_t - sqrt(abar_t) f(z_t, c, t)) / sqrt(1 - abar_t), f the MLP.
template <class S>
Tensor<S> predict_noise(const EpsilonMlp<S>& eps_net, const Tensor<S>& z_t, const Tensor<S>& c, int t,
                        const DiffusionSchedule& schedule);

template <class S>
Tensor<S> standard_normal(const Shape& shape, std::mt19937_64& rng);

/// z_T ~ N(0,I), then T reverse steps driven by eps_net. Fresh noise is
/// drawn for t > 1 when `stochastic`.
template <class S>
Tensor<S> generate_prior(const Tensor<S>& c, const DiffusionSchedule& schedule, const EpsilonMlp<S>& eps_net,
                         std::mt19937_64& rng, bool stochastic = true);

struct EncoderConfig {
  std::int64_t width = 16;           // stem channels; doubled by the second downsampling block
  int downsamples = 3;               // stride-2 MBlocks
  std::int64_t grid = 4;             // tokens = grid * grid
  std::int64_t latent_channels = 32;
  std::int64_t token_hidden = 32;
  std::int64_t channel_hidden_mult = 2;
};

/// MBlock feature extractor, average pooling onto a token grid, one
/// MLP-Mixer block, linear head: [B,in,H,W] -> [B,grid^2,latent_channels].
template <class S>
struct LatentEncoder {
  Conv2d<S> stem;
  std::vector<MBlock<S>> blocks;
  Linear<S> token1, token2, channel1, channel2, head;
  EncoderConfig config;

  LatentEncoder() = default;
  LatentEncoder(ParamSet<S>& params, const std::string& name, Initializer& init, std::int64_t in_channels,
                const EncoderConfig& cfg);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

extern template struct EpsilonMlp<float>;
extern template struct EpsilonMlp<double>;
extern template struct LatentEncoder<float>;
extern template struct LatentEncoder<double>;

}  // namespace sci

#endif
