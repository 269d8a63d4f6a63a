#ifndef SCI_TRAINING_HPP
#define SCI_TRAINING_HPP

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sci/diffusion.hpp"
#include "sci/io.hpp"
#include "sci/trident.hpp"
#include "sci/unfolding.hpp"

namespace sci {

// ---- losses, optimizer, schedule ----

/// mean |x_hat - x|.
template <class S>
Tensor<S> loss_rec(const Tensor<S>& x_hat, const Tensor<S>& x);
/// loss_rec(x_hat, x) + mean |z_hat - z_gt|.
template <class S>
Tensor<S> loss_all(const Tensor<S>& x_hat, const Tensor<S>& x, const Tensor<S>& z_hat, const Tensor<S>& z_gt);

struct AdamOptions {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// First and second moments per parameter entry, in ParamSet order.
struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::int64_t steps = 0;
};

/// One bias-corrected Adam update of every trainable entry of `params`.
/// Entries without a gradient count as zero gradient. A non-finite gradient
/// throws NumericError naming `group` and the entry, before anything moves.
void adam_step(ParamSet<float>& params, AdamState& state, double lr, const AdamOptions& opt,
               const std::string& group);

/// lr_min + (lr_max - lr_min)(1 + cos(pi epoch / total)) / 2.
double cosine_lr(int epoch, int total, double lr_max, double lr_min);

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(const std::vector<ParamSet<float>*>& groups, double max_norm);

// ---- configuration ----

struct DatasetSpec {
  int train_scenes = 64, test_scenes = 8;
  std::int64_t width = 32, height = 32, bands = 8;
  int step = 1;
  double noise_sigma = 0;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  int stages = 3;
  /// Replace the per-stage denoisers by the identity (only GC blocks learn).
  bool identity_denoiser = false;
  TridentConfig trident;
  EncoderConfig encoder;
  int diffusion_steps = 16;
  std::int64_t eps_hidden = 64;
};

struct TrainConfig {
  int phase = 1;
  int epochs = 200;
  int batch_size = 4;
  double lr_max = 4e-4, lr_min = 1e-6;
  AdamOptions adam;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  bool flips = false;
  /// "l1": the direct prior distance; "eps_mse": noise-prediction loss at a random step.
  std::string diffusion_loss = "l1";
  /// Stop after the epoch during which this much process CPU time was used (0: no cap).
  double max_cpu_seconds = 0;
  DatasetSpec data;
  ModelConfig model;
};

/// Parses a config document; unknown keys and wrong types throw UsageError.
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig load_config(const std::string& path);
/// Hash of the canonical JSON form, ignoring max_cpu_seconds.
std::string config_hash(const TrainConfig& cfg);

// ---- data ----

struct Dataset {
  std::vector<HsiCube<float>> train, test;
  CodedAperture<float> mask;
  SensingOperator<float> op;
};

/// Synthetic scenes (kinds cycling blobs / ramps / checker) and one Bernoulli mask, all from spec.seed.
Dataset make_dataset(const DatasetSpec& spec);

/// Stacks cubes into [B,L,H,W].
Tensor<float> stack_cubes(const std::vector<const HsiCube<float>*>& cubes);

// ---- model ----

/// Parameter groups in checkpoint order.
inline constexpr std::array<const char*, 4> kParamGroups = {"dun", "le", "le_cond", "eps"};

struct Model {
  ModelConfig config;
  ParamSet<float> dun, le, le_cond, eps;
  std::vector<GradientCorrection<float>> corrections;
  std::vector<Denoiser<float>> denoisers;
  PriorPyramidBuilder<float> pyramid;
  LatentEncoder<float> encoder;       // input concat(y_norm, x)
  LatentEncoder<float> cond_encoder;  // input y_norm
  EpsilonMlp<float> eps_net;
  DiffusionSchedule schedule;

  Model(const ModelConfig& cfg, std::int64_t bands, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ParamSet<float>& group(const std::string& name);
  const ParamSet<float>& group(const std::string& name) const;

  /// y_norm = A^T (AA^T)^{-1} y for [B,1,H~,W] measurements.
  Tensor<float> normalized(const SensingOperator<float>& op, const Tensor<float>& y) const;
  /// Unfolded reconstruction with every denoiser consuming the pyramid of z.
  Tensor<float> reconstruct(const SensingOperator<float>& op, const Tensor<float>& y, const Tensor<float>& z) const;
  /// z_GT = LE(concat(y_norm, x)).
  Tensor<float> encode_truth(const Tensor<float>& y_norm, const Tensor<float>& x) const;
  /// z_hat from the reverse chain conditioned on LE'(y_norm).
  Tensor<float> generate(const Tensor<float>& y_norm, std::mt19937_64& rng, bool stochastic = true) const;
  /// Measurement-only inference: generate the prior, then reconstruct.
  Tensor<float> infer(const SensingOperator<float>& op, const Tensor<float>& y, std::mt19937_64& rng) const;

  void save(Checkpoint& ckpt) const;
  /// Loads the named groups; throws FormatError on missing or mis-sized sections.
  void load(const Checkpoint& ckpt, const std::vector<std::string>& groups);
};

// ---- training ----

struct EpochRecord {
  int epoch = 0;
  double lr = 0, l_rec = 0, l_diff = 0, val_psnr = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> history;
  double cpu_seconds = 0;
  bool stopped_by_budget = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Joint DUN + LE training on the reconstruction loss.
TrainResult train_phase1(const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                         const Checkpoint* resume = nullptr);
/// LE frozen; DUN + LE' + eps trained on loss_all through the full reverse chain.
TrainResult train_phase2(const TrainConfig& cfg, const Checkpoint& phase1, const EpochCallback& on_epoch = {},
                         const Checkpoint* resume = nullptr);

/// Rebuilds the model stored in a checkpoint.
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt);
TrainConfig config_from_checkpoint(const Checkpoint& ckpt);

struct HeldOutScore {
  double psnr = 0;      // band-averaged, mean over scenes
  double psnr_whole = 0;
  double l_diff = 0;    // mean |z_hat - z_gt| (phase 2 models only)
};

/// Phase 1 scores use the truth-encoded prior; phase 2 scores use only the measurement.
HeldOutScore evaluate_held_out(const Model& model, const Dataset& data, int phase, std::uint64_t seed,
                               double noise_sigma = 0);

std::string history_csv(const std::vector<EpochRecord>& history, int phase);

}  // namespace sci

#endif
