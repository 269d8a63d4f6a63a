#include "sci/trident.hpp"

#include <cmath>

namespace sci {

using i64 = std::int64_t;

namespace {

template <class S>
Tensor<S> init_log_alpha(ParamSet<S>& params, const std::string& name, int heads, i64 head_dim) {
  const S v = static_cast<S>(0.5 * std::log(static_cast<double>(head_dim)));
  return params.add(name + ".log_alpha", Tensor<S>::full({heads}, v));
}

/// exp(-log_alpha) shaped [1,heads,1,1] for broadcasting over logits.
template <class S>
Tensor<S> inverse_temperature(const Tensor<S>& log_alpha) {
  return reshape(exp(scale(log_alpha, S(-1))), {1, log_alpha.dim(0), 1, 1});
}

Conv2dOptions strided(int stride, int pad) {
  Conv2dOptions o;
  o.stride_h = o.stride_w = stride;
  o.pad_h = o.pad_w = pad;
  return o;
}

}  // namespace

template <class S>
PriorDownsample<S>::PriorDownsample(ParamSet<S>& params, const std::string& name, Initializer& init, i64 channels)
    : merge(params, name, init, 2 * channels, 2 * channels, true, InitMode::identity) {}

template <class S>
Tensor<S> PriorDownsample<S>::operator()(const Tensor<S>& z) const {
  if (z.rank() != 3 || z.dim(1) % 2 != 0)
    throw DimensionError("prior downsampling needs [B,N,C] with even N, got " + shape_str(z.shape()));
  return merge(reshape(z, {z.dim(0), z.dim(1) / 2, 2 * z.dim(2)}));
}

template <class S>
PriorPyramidBuilder<S>::PriorPyramidBuilder(ParamSet<S>& params, const std::string& name, Initializer& init,
                                            i64 channels)
    : to_level2(params, name + ".down2", init, channels), to_level3(params, name + ".down3", init, 2 * channels) {}

template <class S>
PriorPyramid<S> PriorPyramidBuilder<S>::operator()(const Tensor<S>& z) const {
  PriorPyramid<S> p;
  p.levels[0] = z;
  p.levels[1] = to_level2(z);
  p.levels[2] = to_level3(p.levels[1]);
  return p;
}

template <class S>
SpatialFlow<S>::SpatialFlow(ParamSet<S>& params, const std::string& name, Initializer& init, i64 channels, int depth,
                            i64 expansion) {
  for (int i = 0; i < depth; ++i)
    blocks.emplace_back(params, name + ".mblock" + std::to_string(i), init, channels, channels, 1, expansion);
  to_gate_qk = Conv2d<S>(params, name + ".gate_qk", init, channels, 2 * channels, 1, 1, {}, false);
  to_gate_v = Conv2d<S>(params, name + ".gate_v", init, channels, channels, 1, 1, {}, false);
}

template <class S>
SpatialFlowOutput<S> SpatialFlow<S>::operator()(const Tensor<S>& x) const {
  SpatialFlowOutput<S> o;
  o.feature = x;
  for (const auto& b : blocks) o.feature = b(o.feature);
  auto q = avg_pool2(to_gate_qk(o.feature));
  o.gate_qk = mean_axis(reshape(q, {q.dim(0), q.dim(1), -1}), 2, false);
  o.gate_v = to_gate_v(o.feature);
  return o;
}

template <class S>
AcsAttention<S>::AcsAttention(ParamSet<S>& params, const std::string& name, Initializer& init, i64 channels,
                              int heads_)
    : heads(heads_) {
  if ((2 * channels) % heads != 0)
    throw UsageError(name + ": " + std::to_string(2 * channels) + " tokens do not split into " +
                     std::to_string(heads) + " heads");
  query = Conv2d<S>(params, name + ".query", init, channels, 2 * channels, 2, 2, strided(2, 0), false);
  key = Conv2d<S>(params, name + ".key", init, channels, 2 * channels, 2, 2, strided(2, 0), false);
  value = Conv2d<S>(params, name + ".value", init, channels, 2 * channels, 5, 3, Conv2dOptions::same(5, 3, 2, 2),
                    false);
  project = Conv2d<S>(params, name + ".project", init, 2 * channels, channels, 1, 1, {}, false);
  log_alpha = init_log_alpha(params, name, heads, 2 * channels / heads);
}

template <class S>
AcsOutput<S> AcsAttention<S>::operator()(const Tensor<S>& x, const Tensor<S>& gate_qk, const Tensor<S>& gate_v) const {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw DimensionError("spectral attention needs even spatial extents, got " + shape_str(x.shape()));
  const i64 B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const i64 tokens = query.weight.dim(0), d = tokens / heads;
  AcsOutput<S> o;
  o.query = query(x);
  o.value = value(x);
  const i64 n = o.query.dim(2) * o.query.dim(3);
  auto q = reshape(o.query, {B * heads, d, n});
  auto k = permute(reshape(key(x), {B * heads, d, n}), {0, 2, 1});
  auto logits = reshape(scale(bmm(q, k), S(1) / static_cast<S>(n)), {B, heads, d, d});
  logits = mul(logits, reshape(gate_qk, {B, heads, d, 1}));
  logits = mul(logits, inverse_temperature(log_alpha));
  if (uniform_attention) logits = scale(logits, S(0));
  o.attention = softmax(logits, 3);
  auto mixed = bmm(reshape(o.attention, {B * heads, d, d}), reshape(o.value, {B * heads, d, H * W}));
  o.out = mul(project(reshape(mixed, {B, tokens, H, W})), gate_v);
  return o;
}

template <class S>
CpfAttention<S>::CpfAttention(ParamSet<S>& params, const std::string& name, Initializer& init, i64 channels,
                              i64 prior_channels, int heads_, bool from_compressed)
    : heads(heads_), query_from_compressed(from_compressed) {
  if (channels % heads != 0)
    throw UsageError(name + ": " + std::to_string(channels) + " channels do not split into " +
                     std::to_string(heads) + " heads");
  query = Conv2d<S>(params, name + ".query", init, 2 * channels, channels, 1, 1, {}, false);
  key = Linear<S>(params, name + ".key", init, prior_channels, channels);
  value = Linear<S>(params, name + ".value", init, prior_channels, channels);
  project = Conv2d<S>(params, name + ".project", init, channels, channels, 1, 1, {}, true);
  log_alpha = init_log_alpha(params, name, heads, channels / heads);
}

template <class S>
CpfOutput<S> CpfAttention<S>::operator()(const Tensor<S>& source, const Tensor<S>& prior) const {
  const i64 c = query.weight.dim(0), dh = c / heads;
  if (prior.rank() != 3 || prior.dim(0) != source.dim(0))
    throw DimensionError("prior tokens " + shape_str(prior.shape()) + " do not match image batch " +
                         shape_str(source.shape()));
  if (prior.dim(2) != key.weight.dim(0))
    throw DimensionError("prior width " + std::to_string(prior.dim(2)) + " does not match key projection input " +
                         std::to_string(key.weight.dim(0)));
  const i64 B = source.dim(0), h = source.dim(2), w = source.dim(3), n = h * w, N = prior.dim(1);
  auto q = permute(reshape(query(source), {B, heads, dh, n}), {0, 1, 3, 2});
  auto k = permute(reshape(key(prior), {B, N, heads, dh}), {0, 2, 3, 1});
  auto v = permute(reshape(value(prior), {B, N, heads, dh}), {0, 2, 1, 3});
  auto logits = reshape(bmm(reshape(q, {B * heads, n, dh}), reshape(k, {B * heads, dh, N})), {B, heads, n, N});
  CpfOutput<S> o;
  o.attention = softmax(mul(logits, inverse_temperature(log_alpha)), 3);
  auto mixed = bmm(reshape(o.attention, {B * heads, n, N}), reshape(v, {B * heads, N, dh}));
  auto image = reshape(permute(reshape(mixed, {B, heads, n, dh}), {0, 1, 3, 2}), {B, c, h, w});
  if (query_from_compressed) image = upsample_bilinear2(image);
  o.out = project(image);
  return o;
}

template <class S>
TridentBlock<S>::TridentBlock(ParamSet<S>& params, const std::string& name, Initializer& init, i64 channels_,
                              i64 prior_channels, int heads, const TridentConfig& cfg)
    : channels(channels_) {
  if (channels % 2 != 0) throw UsageError(name + ": channel count must be even");
  const i64 c = channels / 2;
  spatial = SpatialFlow<S>(params, name + ".spatial", init, c, cfg.spatial_depth, cfg.expansion);
  spectral = AcsAttention<S>(params, name + ".spectral", init, c, heads);
  prior = CpfAttention<S>(params, name + ".prior", init, c, prior_channels, heads, cfg.cpf_query_from_compressed);
  bridge_spectral = Conv2d<S>(params, name + ".bridge_spectral", init, c, c, 1, 1, {}, true);
  bridge_prior = Conv2d<S>(params, name + ".bridge_prior", init, c, c, 1, 1, {}, true);
  aggregate1 = Conv2d<S>(params, name + ".aggregate1", init, 3 * c, channels, 1, 1, {}, true);
  aggregate2 = Conv2d<S>(params, name + ".aggregate2", init, channels, channels, 1, 1, {}, true);
  ffn1 = Conv2d<S>(params, name + ".ffn1", init, channels, 2 * channels, 1, 1, {}, true);
  ffn2 = Conv2d<S>(params, name + ".ffn2", init, 2 * channels, channels, 1, 1, {}, true);
}

template <class S>
Tensor<S> TridentBlock<S>::operator()(const Tensor<S>& x, const Tensor<S>& z) const {
  if (x.rank() != 4 || x.dim(1) != channels)
    throw DimensionError("trident block expects " + std::to_string(channels) + " channels, got " +
                         shape_str(x.shape()));
  const i64 c = channels / 2;
  auto cross_in = slice(x, 1, 0, c);
  auto spatial_in = slice(x, 1, c, c);
  auto sf = spatial(spatial_in);
  auto csf = spectral(cross_in, sf.gate_qk, sf.gate_v);
  auto cpf = prior(prior.query_from_compressed ? csf.query : csf.value, z);
  auto s = sf.feature + bridge_spectral(csf.out) + bridge_prior(cpf.out);
  auto u = x + aggregate2(gelu(aggregate1(concat<S>({s, csf.out, cpf.out}, 1))));
  return u + ffn2(gelu(ffn1(u)));
}

template <class S>
Denoiser<S>::Denoiser(ParamSet<S>& params, const std::string& name, Initializer& init, i64 bands_,
                      const TridentConfig& cfg)
    : bands(bands_) {
  const i64 C = cfg.channels, Z = cfg.prior_channels;
  const int h = cfg.heads;
  embed = Conv2d<S>(params, name + ".embed", init, bands, C, 3, 3, Conv2dOptions::same(3, 3), true);
  blocks[0] = TridentBlock<S>(params, name + ".tt1", init, C, Z, h, cfg);
  down1 = Conv2d<S>(params, name + ".down1", init, C, 2 * C, 4, 4, strided(2, 1), true);
  blocks[1] = TridentBlock<S>(params, name + ".tt2", init, 2 * C, 2 * Z, 2 * h, cfg);
  down2 = Conv2d<S>(params, name + ".down2", init, 2 * C, 4 * C, 4, 4, strided(2, 1), true);
  blocks[2] = TridentBlock<S>(params, name + ".tt3", init, 4 * C, 4 * Z, 4 * h, cfg);
  up2 = Conv2d<S>(params, name + ".up2", init, 4 * C, 2 * C, 1, 1, {}, true);
  fuse2 = Conv2d<S>(params, name + ".fuse2", init, 4 * C, 2 * C, 1, 1, {}, true);
  blocks[3] = TridentBlock<S>(params, name + ".tt4", init, 2 * C, 2 * Z, 2 * h, cfg);
  up1 = Conv2d<S>(params, name + ".up1", init, 2 * C, C, 1, 1, {}, true);
  fuse1 = Conv2d<S>(params, name + ".fuse1", init, 2 * C, C, 1, 1, {}, true);
  blocks[4] = TridentBlock<S>(params, name + ".tt5", init, C, Z, h, cfg);
  output = Conv2d<S>(params, name + ".output", init, C, bands, 3, 3, Conv2dOptions::same(3, 3), true,
                     InitMode::zero);
}

template <class S>
Tensor<S> Denoiser<S>::operator()(const Tensor<S>& x, const PriorPyramid<S>& p) const {
  if (x.rank() != 4 || x.dim(1) != bands || x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
    throw DimensionError("denoiser expects [B," + std::to_string(bands) +
                         ",H,W] with H, W divisible by 8, got " + shape_str(x.shape()));
  auto e1 = blocks[0](embed(x), p.levels[0]);
  auto e2 = blocks[1](down1(e1), p.levels[1]);
  auto e3 = blocks[2](down2(e2), p.levels[2]);
  auto d2 = blocks[3](fuse2(concat<S>({up2(upsample_bilinear2(e3)), e2}, 1)), p.levels[1]);
  auto d1 = blocks[4](fuse1(concat<S>({up1(upsample_bilinear2(d2)), e1}, 1)), p.levels[0]);
  return x + output(d1);
}

template struct PriorDownsample<float>;
template struct PriorDownsample<double>;
template struct PriorPyramidBuilder<float>;
template struct PriorPyramidBuilder<double>;
template struct SpatialFlow<float>;
template struct SpatialFlow<double>;
template struct AcsAttention<float>;
template struct AcsAttention<double>;
template struct CpfAttention<float>;
template struct CpfAttention<double>;
template struct TridentBlock<float>;
template struct TridentBlock<double>;
template struct Denoiser<float>;
template struct Denoiser<double>;

}  // namespace sci
