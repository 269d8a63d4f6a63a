#include "sci/diffusion.hpp"

#include <cmath>

namespace sci {

using i64 = std::int64_t;

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end,
                                            double max_final_alpha_bar) {
  if (steps < 1) throw UsageError("diffusion needs at least one step");
  DiffusionSchedule s;
  s.steps = steps;
  for (int t = 0; t < steps; ++t) {
    const double b = steps == 1 ? beta_end : beta_start + (beta_end - beta_start) * t / (steps - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
  }
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) s.alpha_bar.push_back(prod *= s.alpha[static_cast<std::size_t>(t)]);
  if (s.alpha_bar.back() > max_final_alpha_bar) {
    const double before = steps == 1 ? 1.0 : s.alpha_bar[static_cast<std::size_t>(steps - 2)];
    const double a = 0.5 * max_final_alpha_bar / before;
    s.alpha.back() = a;
    s.beta.back() = 1.0 - a;
    s.alpha_bar.back() = before * a;
  }
  s.validate();
  return s;
}

void DiffusionSchedule::validate() const {
  if (steps < 1 || beta.size() != static_cast<std::size_t>(steps))
    throw UsageError("diffusion schedule has inconsistent length");
  double prev = 1.0;
  for (int t = 0; t < steps; ++t) {
    const auto i = static_cast<std::size_t>(t);
    if (!(beta[i] > 0.0 && beta[i] < 1.0))
      throw NumericError("beta at step " + std::to_string(t + 1) + " outside (0,1)");
    if (!(alpha_bar[i] < prev)) throw NumericError("alpha_bar is not strictly decreasing at step " + std::to_string(t + 1));
    prev = alpha_bar[i];
  }
}

double DiffusionSchedule::alpha_bar_at(int t) const {
  if (t < 0 || t > steps)
    throw UsageError("diffusion step " + std::to_string(t) + " outside [0," + std::to_string(steps) + "]");
  return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
}

template <class S>
Tensor<S> diffuse_forward(const Tensor<S>& z0, int t, const Tensor<S>& eps, const DiffusionSchedule& schedule) {
  const double ab = schedule.alpha_bar_at(t);
  if (z0.shape() != eps.shape())
    throw DimensionError("noise " + shape_str(eps.shape()) + " does not match latent " + shape_str(z0.shape()));
  if (t == 0) return z0;
  return add(scale(z0, static_cast<S>(std::sqrt(ab))), scale(eps, static_cast<S>(std::sqrt(1.0 - ab))));
}

template <class S>
Tensor<S> reverse_step(const Tensor<S>& z_t, int t, const Tensor<S>& eps_pred, const DiffusionSchedule& schedule,
                       const Tensor<S>& noise) {
  if (t < 1 || t > schedule.steps)
    throw UsageError("reverse step " + std::to_string(t) + " outside [1," + std::to_string(schedule.steps) + "]");
  const auto i = static_cast<std::size_t>(t - 1);
  const double a = schedule.alpha[i], ab = schedule.alpha_bar[i];
  auto mean = scale(sub(z_t, scale(eps_pred, static_cast<S>((1.0 - a) / std::sqrt(1.0 - ab)))),
                    static_cast<S>(1.0 / std::sqrt(a)));
  if (t == 1 || !noise.defined()) return mean;
  return add(mean, scale(noise, static_cast<S>(std::sqrt(1.0 - a))));
}

template <class S>
std::vector<S> time_embedding(int t, i64 dim) {
  std::vector<S> e(static_cast<std::size_t>(dim));
  const i64 half = dim / 2;
  for (i64 i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(std::max<i64>(half, 1)));
    e[static_cast<std::size_t>(2 * i)] = static_cast<S>(std::sin(t * freq));
    e[static_cast<std::size_t>(2 * i + 1)] = static_cast<S>(std::cos(t * freq));
  }
  if (dim % 2 == 1) e.back() = static_cast<S>(std::sin(static_cast<double>(t)));
  return e;
}

template <class S>
EpsilonMlp<S>::EpsilonMlp(ParamSet<S>& params, const std::string& name, Initializer& init, i64 channels_, i64 hidden)
    : channels(channels_) {
  layers.emplace_back(params, name + ".fc0", init, 3 * channels, hidden);
  layers.emplace_back(params, name + ".fc1", init, hidden, hidden);
  layers.emplace_back(params, name + ".fc2", init, hidden, hidden);
  layers.emplace_back(params, name + ".fc3", init, hidden, channels, true, InitMode::zero);
}

template <class S>
Tensor<S> EpsilonMlp<S>::operator()(const Tensor<S>& z_t, const Tensor<S>& c, int t) const {
  if (z_t.shape() != c.shape() || z_t.rank() != 3 || z_t.dim(2) != channels)
    throw DimensionError("noise predictor expects matching [B,N," + std::to_string(channels) + "] inputs, got " +
                         shape_str(z_t.shape()) + " and " + shape_str(c.shape()));
  const auto emb = time_embedding<S>(t, channels);
  std::vector<S> tiled(static_cast<std::size_t>(z_t.numel()));
  for (std::size_t i = 0; i < tiled.size(); ++i) tiled[i] = emb[i % emb.size()];
  auto h = concat<S>({z_t, c, Tensor<S>::from(z_t.shape(), std::move(tiled))}, 2);
  for (std::size_t k = 0; k + 1 < layers.size(); ++k) h = gelu(layers[k](h));
  return layers.back()(h);
}

template <class S>
Tensor<S> predict_noise(const EpsilonMlp<S>& eps_net, const Tensor<S>& z_t, const Tensor<S>& c, int t,
                        const DiffusionSchedule& schedule) {
  if (t < 1 || t > schedule.steps)
    throw UsageError("noise prediction step " + std::to_string(t) + " outside [1," + std::to_string(schedule.steps) + "]");
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t - 1)];
  return scale(sub(z_t, scale(eps_net(z_t, c, t), static_cast<S>(std::sqrt(ab)))), static_cast<S>(1.0 / std::sqrt(1.0 - ab)));
}

template <class S>
Tensor<S> standard_normal(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(n(rng));
  return Tensor<S>::from(shape, std::move(v));
}

template <class S>
Tensor<S> generate_prior(const Tensor<S>& c, const DiffusionSchedule& schedule, const EpsilonMlp<S>& eps_net,
                         std::mt19937_64& rng, bool stochastic) {
  Tensor<S> z = standard_normal<S>(c.shape(), rng);
  for (int t = schedule.steps; t >= 1; --t) {
    const Tensor<S> noise = stochastic && t > 1 ? standard_normal<S>(c.shape(), rng) : Tensor<S>{};
    z = reverse_step(z, t, predict_noise(eps_net, z, c, t, schedule), schedule, noise);
  }
  return z;
}

template <class S>
LatentEncoder<S>::LatentEncoder(ParamSet<S>& params, const std::string& name, Initializer& init, i64 in_channels,
                                const EncoderConfig& cfg)
    : config(cfg) {
  if (cfg.downsamples < 1 || cfg.grid < 1) throw UsageError(name + ": encoder needs downsamples >= 1 and grid >= 1");
  stem = Conv2d<S>(params, name + ".stem", init, in_channels, cfg.width, 3, 3, Conv2dOptions::same(3, 3), true);
  i64 ch = cfg.width;
  for (int i = 0; i < cfg.downsamples; ++i) {
    const i64 out = i == 1 ? 2 * ch : ch;
    blocks.emplace_back(params, name + ".mblock" + std::to_string(i), init, ch, out, 2);
    ch = out;
  }
  const i64 n = cfg.grid * cfg.grid;
  token1 = Linear<S>(params, name + ".token1", init, n, cfg.token_hidden);
  token2 = Linear<S>(params, name + ".token2", init, cfg.token_hidden, n);
  channel1 = Linear<S>(params, name + ".channel1", init, ch, cfg.channel_hidden_mult * ch);
  channel2 = Linear<S>(params, name + ".channel2", init, cfg.channel_hidden_mult * ch, ch);
  head = Linear<S>(params, name + ".head", init, ch, cfg.latent_channels);
}

template <class S>
Tensor<S> LatentEncoder<S>::operator()(const Tensor<S>& x) const {
  const i64 factor = (i64{1} << config.downsamples) * config.grid;
  if (x.rank() != 4 || x.dim(1) != stem.weight.dim(1) || x.dim(2) % factor != 0 || x.dim(3) % factor != 0)
    throw DimensionError("latent encoder expects [B," + std::to_string(stem.weight.dim(1)) +
                         ",H,W] with H, W divisible by " + std::to_string(factor) + ", got " + shape_str(x.shape()));
  auto f = stem(x);
  for (const auto& b : blocks) f = b(f);
  const i64 B = f.dim(0), ch = f.dim(1);
  auto tokens = reshape(adaptive_avg_pool(f, config.grid, config.grid), {B, ch, config.grid * config.grid});
  tokens = tokens + token2(gelu(token1(tokens)));
  tokens = permute(tokens, {0, 2, 1});
  tokens = tokens + channel2(gelu(channel1(tokens)));
  return head(tokens);
}

#define SCI_INSTANTIATE_DIFFUSION(S)                                                                          \
  template Tensor<S> diffuse_forward(const Tensor<S>&, int, const Tensor<S>&, const DiffusionSchedule&);     \
  template Tensor<S> reverse_step(const Tensor<S>&, int, const Tensor<S>&, const DiffusionSchedule&,        \
                                  const Tensor<S>&);                                                          \
  template std::vector<S> time_embedding(int, i64);                                                           \
  template Tensor<S> predict_noise(const EpsilonMlp<S>&, const Tensor<S>&, const Tensor<S>&, int,                \
                                   const DiffusionSchedule&);                                              \
  template Tensor<S> standard_normal(const Shape&, std::mt19937_64&);                                         \
  template Tensor<S> generate_prior(const Tensor<S>&, const DiffusionSchedule&, const EpsilonMlp<S>&,         \
                                    std::mt19937_64&, bool);                                                  \
  template struct EpsilonMlp<S>;                                                                              \
  template struct LatentEncoder<S>;

SCI_INSTANTIATE_DIFFUSION(float)
SCI_INSTANTIATE_DIFFUSION(double)

}  // namespace sci
