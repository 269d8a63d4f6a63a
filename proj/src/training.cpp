#include "sci/training.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "sci/metrics.hpp"

namespace sci {

using i64 = std::int64_t;
using json = nlohmann::json;

template <class S>
Tensor<S> loss_rec(const Tensor<S>& x_hat, const Tensor<S>& x) {
  if (x_hat.shape() != x.shape())
    throw DimensionError("reconstruction " + shape_str(x_hat.shape()) + " vs truth " + shape_str(x.shape()));
  return mean(abs(sub(x_hat, x)));
}

template <class S>
Tensor<S> loss_all(const Tensor<S>& x_hat, const Tensor<S>& x, const Tensor<S>& z_hat, const Tensor<S>& z_gt) {
  if (z_hat.shape() != z_gt.shape())
    throw DimensionError("prior " + shape_str(z_hat.shape()) + " vs target " + shape_str(z_gt.shape()));
  return add(loss_rec(x_hat, x), mean(abs(sub(z_hat, z_gt))));
}

template Tensor<float> loss_rec(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> loss_rec(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> loss_all(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> loss_all(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                 const Tensor<double>&);

void adam_step(ParamSet<float>& params, AdamState& state, double lr, const AdamOptions& opt, const std::string& group) {
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& e : entries) {
      state.m.emplace_back(static_cast<std::size_t>(e.tensor.numel()), 0.0f);
      state.v.emplace_back(static_cast<std::size_t>(e.tensor.numel()), 0.0f);
    }
  }
  if (state.m.size() != entries.size()) throw UsageError("optimizer state does not match parameter group " + group);
  for (const auto& e : entries) {
    if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
    for (float g : e.tensor.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter group '" + group + "' (" + e.name + ")");
  }
  ++state.steps;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.steps));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& t = entries[k].tensor;
    if (!t.requires_grad()) continue;
    auto w = t.mutable_data();
    auto g = t.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      const double mi = opt.beta1 * m[i] + (1 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1 - opt.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      w[i] = static_cast<float>(w[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + opt.eps));
    }
  }
}

double cosine_lr(int epoch, int total, double lr_max, double lr_min) {
  if (total < 1 || epoch < 0 || epoch >= total)
    throw UsageError("cosine_lr needs 0 <= epoch < total, got " + std::to_string(epoch) + "/" + std::to_string(total));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * epoch / total));
}

double clip_grad_norm(const std::vector<ParamSet<float>*>& groups, double max_norm) {
  double sq = 0;
  for (auto* g : groups)
    for (const auto& e : g->entries())
      if (e.tensor.requires_grad() && e.tensor.has_grad())
        for (float v : e.tensor.grad()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto f = static_cast<float>(max_norm / norm);
    for (auto* g : groups)
      for (auto& e : g->entries())
        if (e.tensor.requires_grad() && e.tensor.has_grad())
          for (auto& v : e.tensor.node()->grad) v *= f;
  }
  return norm;
}

// ---- configuration ----

namespace {

// Reads keys of one JSON object, rejecting unknown ones on finish().
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw UsageError("config: " + where_ + " must be an object");
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    const std::string path = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw UsageError("config: " + path + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw UsageError("config: " + path + " must be an integer");
      if (std::is_unsigned_v<T> && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
        throw UsageError("config: " + path + " must be nonnegative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw UsageError("config: " + path + " must be a number");
    } else {
      if (!v.is_string()) throw UsageError("config: " + path + " must be a string");
    }
    out = v.get<T>();
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw UsageError("config: unknown key " + where_ + "." + k);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError("config: " + msg);
}

void validate(const TrainConfig& c) {
  require(c.phase == 1 || c.phase == 2, "phase must be 1 or 2");
  require(c.epochs >= 1, "epochs must be >= 1");
  require(c.batch_size >= 1, "batch_size must be >= 1");
  require(c.lr_max > 0 && c.lr_min >= 0 && c.lr_min <= c.lr_max, "need 0 <= lr_min <= lr_max, lr_max > 0");
  require(c.adam.beta1 >= 0 && c.adam.beta1 < 1 && c.adam.beta2 >= 0 && c.adam.beta2 < 1 && c.adam.eps > 0,
          "adam betas must lie in [0,1) and eps > 0");
  require(c.diffusion_loss == "l1" || c.diffusion_loss == "eps_mse", "diffusion_loss must be \"l1\" or \"eps_mse\"");
  require(c.max_cpu_seconds >= 0, "max_cpu_seconds must be >= 0");
  const auto& d = c.data;
  require(d.train_scenes >= 1 && d.test_scenes >= 1, "need at least one training and one held-out scene");
  require(d.bands >= 1 && d.step >= 0 && d.noise_sigma >= 0, "need bands >= 1, step >= 0, noise_sigma >= 0");
  const auto& m = c.model;
  const i64 factor = std::max<i64>(8, (i64{1} << m.encoder.downsamples) * m.encoder.grid);
  require(d.width > 0 && d.height > 0 && d.width % factor == 0 && d.height % factor == 0,
          "width and height must be positive multiples of " + std::to_string(factor));
  require(m.stages >= 1, "stages must be >= 1");
  require(m.trident.channels >= 2 && m.trident.channels % 2 == 0, "channels must be even and >= 2");
  require(m.trident.heads >= 1 && (m.trident.channels / 2) % m.trident.heads == 0, "heads must divide channels / 2");
  require(m.trident.spatial_depth >= 1 && m.trident.expansion >= 1, "spatial_depth and expansion must be >= 1");
  require(m.encoder.width >= 1 && m.encoder.downsamples >= 1 && m.encoder.grid >= 1 && m.encoder.latent_channels >= 1 &&
              m.encoder.token_hidden >= 1 && m.encoder.channel_hidden_mult >= 1,
          "encoder sizes must be >= 1");
  require(m.encoder.grid * m.encoder.grid % 4 == 0, "encoder grid must give a token count divisible by 4");
  require(m.diffusion_steps >= 1 && m.eps_hidden >= 1, "diffusion_steps and eps_hidden must be >= 1");
}

}  // namespace

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  Fields top(j, "config");
  top.get("phase", c.phase);
  c.epochs = c.phase == 2 ? 100 : 200;
  top.get("epochs", c.epochs);
  top.get("batch_size", c.batch_size);
  top.get("lr_max", c.lr_max);
  top.get("lr_min", c.lr_min);
  top.get("clip_norm", c.clip_norm);
  top.get("seed", c.seed);
  top.get("flips", c.flips);
  top.get("diffusion_loss", c.diffusion_loss);
  top.get("max_cpu_seconds", c.max_cpu_seconds);
  if (const auto* a = top.child("adam")) {
    Fields f(*a, "config.adam");
    f.get("beta1", c.adam.beta1);
    f.get("beta2", c.adam.beta2);
    f.get("eps", c.adam.eps);
    f.finish();
  }
  c.data.seed = c.seed;
  if (const auto* d = top.child("data")) {
    Fields f(*d, "config.data");
    f.get("train_scenes", c.data.train_scenes);
    f.get("test_scenes", c.data.test_scenes);
    f.get("width", c.data.width);
    f.get("height", c.data.height);
    f.get("bands", c.data.bands);
    f.get("step", c.data.step);
    f.get("noise_sigma", c.data.noise_sigma);
    f.get("seed", c.data.seed);
    f.finish();
  }
  if (const auto* m = top.child("model")) {
    Fields f(*m, "config.model");
    auto& mc = c.model;
    f.get("stages", mc.stages);
    f.get("identity_denoiser", mc.identity_denoiser);
    f.get("channels", mc.trident.channels);
    f.get("heads", mc.trident.heads);
    f.get("spatial_depth", mc.trident.spatial_depth);
    f.get("expansion", mc.trident.expansion);
    f.get("cpf_query_from_compressed", mc.trident.cpf_query_from_compressed);
    f.get("latent_channels", mc.encoder.latent_channels);
    f.get("encoder_width", mc.encoder.width);
    f.get("encoder_downsamples", mc.encoder.downsamples);
    f.get("encoder_grid", mc.encoder.grid);
    f.get("token_hidden", mc.encoder.token_hidden);
    f.get("channel_hidden_mult", mc.encoder.channel_hidden_mult);
    f.get("diffusion_steps", mc.diffusion_steps);
    f.get("eps_hidden", mc.eps_hidden);
    f.finish();
  }
  top.finish();
  c.model.trident.prior_channels = c.model.encoder.latent_channels;
  validate(c);
  return c;
}

json config_to_json(const TrainConfig& c) {
  const auto& m = c.model;
  return json{
      {"phase", c.phase},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"lr_max", c.lr_max},
      {"lr_min", c.lr_min},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"clip_norm", c.clip_norm},
      {"seed", c.seed},
      {"flips", c.flips},
      {"diffusion_loss", c.diffusion_loss},
      {"max_cpu_seconds", c.max_cpu_seconds},
      {"data",
       {{"train_scenes", c.data.train_scenes},
        {"test_scenes", c.data.test_scenes},
        {"width", c.data.width},
        {"height", c.data.height},
        {"bands", c.data.bands},
        {"step", c.data.step},
        {"noise_sigma", c.data.noise_sigma},
        {"seed", c.data.seed}}},
      {"model",
       {{"stages", m.stages},
        {"identity_denoiser", m.identity_denoiser},
        {"channels", m.trident.channels},
        {"heads", m.trident.heads},
        {"spatial_depth", m.trident.spatial_depth},
        {"expansion", m.trident.expansion},
        {"cpf_query_from_compressed", m.trident.cpf_query_from_compressed},
        {"latent_channels", m.encoder.latent_channels},
        {"encoder_width", m.encoder.width},
        {"encoder_downsamples", m.encoder.downsamples},
        {"encoder_grid", m.encoder.grid},
        {"token_hidden", m.encoder.token_hidden},
        {"channel_hidden_mult", m.encoder.channel_hidden_mult},
        {"diffusion_steps", m.diffusion_steps},
        {"eps_hidden", m.eps_hidden}}},
  };
}

TrainConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config: " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// The CPU budget only decides where a run stops, so a resumed run may change it.
std::string config_hash(const TrainConfig& cfg) {
  auto j = config_to_json(cfg);
  j.erase("max_cpu_seconds");
  return fnv1a_hex(j.dump());
}

// ---- data ----

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint32_t> parts) {
  std::vector<std::uint32_t> v{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  v.insert(v.end(), parts);
  std::seed_seq seq(v.begin(), v.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

enum Stream : std::uint32_t { kShuffle = 1, kChain = 2, kEval = 3, kNoise = 4, kFlip = 5, kStep = 6 };

}  // namespace

Dataset make_dataset(const DatasetSpec& spec) {
  constexpr SceneKind kinds[] = {SceneKind::gaussian_blobs, SceneKind::spectral_ramps, SceneKind::checker};
  auto mask = CodedAperture<float>::random_binary(derive_seed(spec.seed, {0}), spec.width, spec.height);
  Dataset d{{}, {}, mask, SensingOperator<float>(mask, spec.bands, ShiftSpec{spec.step})};
  for (int i = 0; i < spec.train_scenes + spec.test_scenes; ++i) {
    auto cube = make_synthetic_scene<float>(derive_seed(spec.seed, {1, static_cast<std::uint32_t>(i)}), spec.width,
                                            spec.height, spec.bands, kinds[i % 3]);
    (i < spec.train_scenes ? d.train : d.test).push_back(std::move(cube));
  }
  return d;
}

Tensor<float> stack_cubes(const std::vector<const HsiCube<float>*>& cubes) {
  if (cubes.empty()) throw UsageError("cannot stack an empty batch");
  const auto& f = *cubes.front();
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(f.size()) * cubes.size());
  for (const auto* c : cubes) {
    if (c->width != f.width || c->height != f.height || c->bands != f.bands)
      throw DimensionError("batch cubes differ in extents");
    v.insert(v.end(), c->values.data(), c->values.data() + c->values.size());
  }
  return Tensor<float>::from({static_cast<i64>(cubes.size()), f.bands, f.height, f.width}, std::move(v));
}

namespace {

Tensor<float> measure(const SensingOperator<float>& op, const Tensor<float>& x, double sigma, std::uint64_t seed) {
  NoGradGuard guard;
  auto y = sense(op, x);
  if (sigma > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    for (auto& v : y.mutable_data()) v = static_cast<float>(v + n(rng));
  }
  return y;
}

HsiCube<float> flip_columns(const HsiCube<float>& c) {
  auto out = c;
  for (i64 l = 0; l < c.bands; ++l)
    for (i64 r = 0; r < c.height; ++r)
      for (i64 k = 0; k < c.width; ++k) out.at(l, r, k) = c.at(l, r, c.width - 1 - k);
  return out;
}

}  // namespace

// ---- model ----

Model::Model(const ModelConfig& cfg, i64 bands, std::uint64_t seed) : config(cfg) {
  config.trident.prior_channels = config.encoder.latent_channels;
  Initializer init(seed);
  for (int k = 0; k < config.stages; ++k)
    corrections.emplace_back(dun, "gc" + std::to_string(k), init, bands);
  if (!config.identity_denoiser)
    for (int k = 0; k < config.stages; ++k) denoisers.emplace_back(dun, "den" + std::to_string(k), init, bands, config.trident);
  pyramid = PriorPyramidBuilder<float>(dun, "pyramid", init, config.encoder.latent_channels);
  encoder = LatentEncoder<float>(le, "le", init, 2 * bands, config.encoder);
  cond_encoder = LatentEncoder<float>(le_cond, "le_cond", init, bands, config.encoder);
  eps_net = EpsilonMlp<float>(eps, "eps", init, config.encoder.latent_channels, config.eps_hidden);
  schedule = DiffusionSchedule::linear(config.diffusion_steps);
}

ParamSet<float>& Model::group(const std::string& name) {
  return const_cast<ParamSet<float>&>(std::as_const(*this).group(name));
}

const ParamSet<float>& Model::group(const std::string& name) const {
  if (name == "dun") return dun;
  if (name == "le") return le;
  if (name == "le_cond") return le_cond;
  if (name == "eps") return eps;
  throw UsageError("unknown parameter group '" + name + "'");
}

Tensor<float> Model::normalized(const SensingOperator<float>& op, const Tensor<float>& y) const {
  return sense_adjoint(op, divide_phi(op, y));
}

Tensor<float> Model::reconstruct(const SensingOperator<float>& op, const Tensor<float>& y, const Tensor<float>& z) const {
  if (config.identity_denoiser)
    return run_unfolding<float>(op, y, corrections, [](const Tensor<float>& v, int) { return v; });
  const auto levels = pyramid(z);
  return run_unfolding<float>(op, y, corrections,
                              [&](const Tensor<float>& v, int k) { return denoisers[static_cast<std::size_t>(k)](v, levels); });
}

Tensor<float> Model::encode_truth(const Tensor<float>& y_norm, const Tensor<float>& x) const {
  return encoder(concat<float>({y_norm, x}, 1));
}

Tensor<float> Model::generate(const Tensor<float>& y_norm, std::mt19937_64& rng, bool stochastic) const {
  return generate_prior(cond_encoder(y_norm), schedule, eps_net, rng, stochastic);
}

Tensor<float> Model::infer(const SensingOperator<float>& op, const Tensor<float>& y, std::mt19937_64& rng) const {
  return reconstruct(op, y, generate(normalized(op, y), rng));
}

void Model::save(Checkpoint& ckpt) const {
  for (const char* g : kParamGroups)
    for (const auto& e : group(g).entries())
      ckpt.put(std::string(g) + "/" + e.name, std::vector<float>(e.tensor.data().begin(), e.tensor.data().end()));
}

void Model::load(const Checkpoint& ckpt, const std::vector<std::string>& groups) {
  for (const auto& g : groups)
    for (auto& e : group(g).entries()) {
      const std::string name = g + "/" + e.name;
      const auto* s = ckpt.find(name);
      if (s == nullptr) throw FormatError("checkpoint lacks section " + name);
      if (static_cast<i64>(s->values.size()) != e.tensor.numel())
        throw FormatError("checkpoint section " + name + " has " + std::to_string(s->values.size()) + " values, model needs " +
                          std::to_string(e.tensor.numel()));
      std::ranges::copy(s->values, e.tensor.mutable_data().begin());
    }
}

// ---- evaluation ----

HeldOutScore evaluate_held_out(const Model& model, const Dataset& data, int phase, std::uint64_t seed,
                               double noise_sigma) {
  NoGradGuard guard;
  HeldOutScore score;
  const std::size_t n = data.test.size();
  constexpr std::size_t kBatch = 4;
  double l_diff_total = 0;
  for (std::size_t start = 0; start < n; start += kBatch) {
    std::vector<const HsiCube<float>*> cubes;
    for (std::size_t i = start; i < std::min(n, start + kBatch); ++i) cubes.push_back(&data.test[i]);
    auto x = stack_cubes(cubes);
    auto y = measure(data.op, x, noise_sigma, derive_seed(seed, {kNoise, static_cast<std::uint32_t>(start)}));
    auto yn = model.normalized(data.op, y);
    const auto z_gt = model.encode_truth(yn, x);
    Tensor<float> x_hat;
    if (phase == 1) {
      x_hat = model.reconstruct(data.op, y, z_gt);
    } else {
      std::mt19937_64 rng(derive_seed(seed, {kEval, static_cast<std::uint32_t>(start)}));
      const auto z_hat = model.generate(yn, rng);
      l_diff_total += static_cast<double>(mean(abs(sub(z_hat, z_gt))).item()) * static_cast<double>(cubes.size());
      x_hat = model.reconstruct(data.op, y, z_hat);
    }
    for (std::size_t b = 0; b < cubes.size(); ++b) {
      const auto rec = clamp_unit(cube_from_tensor(x_hat, static_cast<i64>(b)));
      score.psnr += psnr(rec, *cubes[b]);
      score.psnr_whole += psnr_whole(rec, *cubes[b]);
    }
  }
  score.psnr /= static_cast<double>(n);
  score.psnr_whole /= static_cast<double>(n);
  score.l_diff = l_diff_total / static_cast<double>(n);
  return score;
}

std::string history_csv(const std::vector<EpochRecord>& history, int phase) {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,lr,L_rec,L_diff,val_psnr\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.lr << ',' << r.l_rec << ',';
    if (phase == 2) out << r.l_diff;
    out << ',' << r.val_psnr << '\n';
  }
  return out.str();
}

// ---- training ----

namespace {

json history_json(const std::vector<EpochRecord>& h) {
  json a = json::array();
  for (const auto& r : h)
    a.push_back({{"epoch", r.epoch}, {"lr", r.lr}, {"L_rec", r.l_rec}, {"L_diff", r.l_diff}, {"val_psnr", r.val_psnr}});
  return a;
}

std::vector<EpochRecord> history_from_json(const json& a) {
  std::vector<EpochRecord> h;
  for (const auto& r : a)
    h.push_back({r.at("epoch").get<int>(), r.at("lr").get<double>(), r.at("L_rec").get<double>(),
                 r.at("L_diff").get<double>(), r.at("val_psnr").get<double>()});
  return h;
}

struct Trainer {
  const TrainConfig& cfg;
  Model& model;
  const Dataset& data;
  std::vector<std::string> trainable;
  std::vector<AdamState> adam;
  std::vector<EpochRecord> history;
  int start_epoch = 0;

  std::vector<ParamSet<float>*> trainable_sets() {
    std::vector<ParamSet<float>*> out;
    for (const auto& g : trainable) out.push_back(&model.group(g));
    return out;
  }

  void save(Checkpoint& ckpt, int epochs_done) const {
    model.save(ckpt);
    json steps = json::object();
    for (std::size_t k = 0; k < trainable.size(); ++k) {
      const auto& entries = model.group(trainable[k]).entries();
      const auto& st = adam[k];
      steps[trainable[k]] = st.steps;
      for (std::size_t i = 0; i < st.m.size(); ++i) {
        ckpt.put("adam_m/" + trainable[k] + "/" + entries[i].name, st.m[i]);
        ckpt.put("adam_v/" + trainable[k] + "/" + entries[i].name, st.v[i]);
      }
    }
    ckpt.meta = {{"format", "sci-checkpoint"},
                 {"phase", cfg.phase},
                 {"epoch", epochs_done},
                 {"seed", cfg.seed},
                 {"config", config_to_json(cfg)},
                 {"config_hash", config_hash(cfg)},
                 {"trainable", trainable},
                 {"adam_steps", steps},
                 {"history", history_json(history)}};
  }

  void resume_from(const Checkpoint& ckpt) {
    const auto& meta = ckpt.meta;
    if (meta.value("phase", 0) != cfg.phase) throw UsageError("resume checkpoint is from a different phase");
    if (meta.value("config_hash", std::string()) != config_hash(cfg))
      throw UsageError("resume checkpoint was written with a different config");
    model.load(ckpt, {kParamGroups.begin(), kParamGroups.end()});
    for (std::size_t k = 0; k < trainable.size(); ++k) {
      const auto& entries = model.group(trainable[k]).entries();
      auto& st = adam[k];
      st.steps = meta.at("adam_steps").value(trainable[k], std::int64_t{0});
      st.m.clear();
      st.v.clear();
      if (st.steps == 0) continue;
      for (const auto& e : entries) {
        const auto* m = ckpt.find("adam_m/" + trainable[k] + "/" + e.name);
        const auto* v = ckpt.find("adam_v/" + trainable[k] + "/" + e.name);
        if (!m || !v) throw FormatError("resume checkpoint lacks optimizer moments for " + e.name);
        st.m.push_back(m->values);
        st.v.push_back(v->values);
      }
    }
    history = history_from_json(meta.at("history"));
    start_epoch = meta.at("epoch").get<int>();
  }

  // One optimisation step; returns (L_rec, L_diff) of the batch.
  std::pair<double, double> step(const std::vector<const HsiCube<float>*>& cubes, int epoch, int batch, double lr) {
    for (const char* g : kParamGroups) model.group(g).zero_grad();
    const auto tag = [&](Stream s) {
      return derive_seed(cfg.seed, {s, static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(batch)});
    };
    std::vector<HsiCube<float>> flipped;
    std::vector<const HsiCube<float>*> used = cubes;
    if (cfg.flips) {
      std::mt19937_64 rng(tag(kFlip));
      flipped.reserve(cubes.size());
      for (auto& c : used)
        if (std::bernoulli_distribution(0.5)(rng)) c = &flipped.emplace_back(flip_columns(*c));
    }
    auto x = stack_cubes(used);
    auto y = measure(data.op, x, cfg.data.noise_sigma, tag(kNoise));
    double l_rec = 0, l_diff = 0;
    Tape tape;
    auto yn = model.normalized(data.op, y);
    Tensor<float> loss;
    if (cfg.phase == 1) {
      loss = loss_rec(model.reconstruct(data.op, y, model.encode_truth(yn, x)), x);
      l_rec = loss.item();
    } else {
      Tensor<float> z_gt;
      {
        NoGradGuard guard;
        z_gt = model.encode_truth(yn, x);
      }
      std::mt19937_64 rng(tag(kChain));
      const auto c = model.cond_encoder(yn);
      const auto z_hat = generate_prior(c, model.schedule, model.eps_net, rng, true);
      const auto rec = loss_rec(model.reconstruct(data.op, y, z_hat), x);
      const auto dist = mean(abs(sub(z_hat, z_gt)));
      l_rec = rec.item();
      l_diff = dist.item();
      if (cfg.diffusion_loss == "l1") {
        loss = add(rec, dist);
      } else {
        std::mt19937_64 srng(tag(kStep));
        const int t = std::uniform_int_distribution<int>(1, model.schedule.steps)(srng);
        const auto noise = standard_normal<float>(z_gt.shape(), srng);
        const auto pred = predict_noise(model.eps_net, diffuse_forward(z_gt, t, noise, model.schedule), c, t, model.schedule);
        const auto err = sub(pred, noise);
        loss = add(rec, mean(mul(err, err)));
      }
    }
    if (!std::isfinite(loss.item()))
      throw NumericError("loss diverged at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch + 1));
    tape.backward(loss);
    tape.clear();
    clip_grad_norm(trainable_sets(), cfg.clip_norm);
    for (std::size_t k = 0; k < trainable.size(); ++k)
      adam_step(model.group(trainable[k]), adam[k], lr, cfg.adam, trainable[k]);
    return {l_rec, l_diff};
  }

  TrainResult run(const EpochCallback& on_epoch) {
    for (const char* g : kParamGroups)
      model.group(g).set_trainable(std::ranges::find(trainable, std::string(g)) != trainable.end());
    TrainResult result;
    const std::clock_t c0 = std::clock();
    const std::size_t n = data.train.size();
    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
      const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(derive_seed(cfg.seed, {kShuffle, static_cast<std::uint32_t>(epoch)}));
      std::shuffle(order.begin(), order.end(), rng);
      double l_rec = 0, l_diff = 0;
      int batch = 0;
      for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size), ++batch) {
        std::vector<const HsiCube<float>*> cubes;
        for (std::size_t i = start; i < std::min(n, start + static_cast<std::size_t>(cfg.batch_size)); ++i)
          cubes.push_back(&data.train[order[i]]);
        const auto [r, d] = step(cubes, epoch, batch, lr);
        l_rec += r * static_cast<double>(cubes.size());
        l_diff += d * static_cast<double>(cubes.size());
      }
      EpochRecord rec{epoch + 1, lr, l_rec / static_cast<double>(n), l_diff / static_cast<double>(n), 0.0};
      rec.val_psnr = evaluate_held_out(model, data, cfg.phase, derive_seed(cfg.seed, {kEval}), cfg.data.noise_sigma).psnr;
      history.push_back(rec);
      if (on_epoch) on_epoch(rec);
      result.cpu_seconds = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
      if (cfg.max_cpu_seconds > 0 && result.cpu_seconds >= cfg.max_cpu_seconds && epoch + 1 < cfg.epochs) {
        result.stopped_by_budget = true;
        break;
      }
    }
    for (const char* g : kParamGroups) model.group(g).set_trainable(false);
    save(result.checkpoint, history.empty() ? 0 : history.back().epoch);
    result.history = history;
    return result;
  }
};

}  // namespace

TrainResult train_phase1(const TrainConfig& cfg, const EpochCallback& on_epoch, const Checkpoint* resume) {
  if (cfg.phase != 1) throw UsageError("train_phase1 needs a phase 1 config");
  validate(cfg);
  const auto data = make_dataset(cfg.data);
  Model model(cfg.model, cfg.data.bands, cfg.seed);
  Trainer t{cfg, model, data, {"dun", "le"}, std::vector<AdamState>(2), {}, 0};
  if (resume) t.resume_from(*resume);
  return t.run(on_epoch);
}

TrainResult train_phase2(const TrainConfig& cfg, const Checkpoint& phase1, const EpochCallback& on_epoch,
                         const Checkpoint* resume) {
  if (cfg.phase != 2) throw UsageError("train_phase2 needs a phase 2 config");
  validate(cfg);
  const auto data = make_dataset(cfg.data);
  Model model(cfg.model, cfg.data.bands, cfg.seed);
  Trainer t{cfg, model, data, {"dun", "le_cond", "eps"}, std::vector<AdamState>(3), {}, 0};
  if (resume) {
    t.resume_from(*resume);
  } else {
    if (phase1.meta.value("phase", 0) != 1) throw UsageError("phase 2 must start from a phase 1 checkpoint");
    model.load(phase1, {"dun", "le"});
  }
  return t.run(on_epoch);
}

TrainConfig config_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("config")) throw FormatError("checkpoint meta has no config");
  return config_from_json(ckpt.meta.at("config"));
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = config_from_checkpoint(ckpt);
  auto model = std::make_unique<Model>(cfg.model, cfg.data.bands, cfg.seed);
  model->load(ckpt, {kParamGroups.begin(), kParamGroups.end()});
  return model;
}

}  // namespace sci
