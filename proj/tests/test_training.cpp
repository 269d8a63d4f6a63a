#include <doctest.h>

#include <cmath>

#include "loop_oracle.hpp"
#include "sci/gradcheck.hpp"
#include "sci/training.hpp"

using namespace sci;
using nlohmann::json;
using oracle::random_tensor;

namespace {

json tiny_json() {
  return json::parse(R"({
    "phase": 1, "epochs": 3, "batch_size": 4, "lr_max": 0.002, "seed": 3,
    "data": {"train_scenes": 8, "test_scenes": 2, "width": 16, "height": 16, "bands": 4},
    "model": {"stages": 2, "channels": 4, "heads": 1, "spatial_depth": 1, "expansion": 2,
              "latent_channels": 8, "encoder_width": 4, "encoder_downsamples": 2, "encoder_grid": 4,
              "token_hidden": 8, "channel_hidden_mult": 1, "diffusion_steps": 3, "eps_hidden": 8}
  })");
}

TrainConfig tiny(int phase = 1, int epochs = 3) {
  auto j = tiny_json();
  j["phase"] = phase;
  j["epochs"] = epochs;
  return config_from_json(j);
}

// Number of entries in `group` whose stored values differ from a fresh model built from cfg.
int changed_entries(const Checkpoint& ck, const TrainConfig& cfg, const std::string& group) {
  Model fresh(cfg.model, cfg.data.bands, cfg.seed);
  int n = 0;
  for (const auto& e : fresh.group(group).entries()) {
    const auto* s = ck.find(group + "/" + e.name);
    REQUIRE(s != nullptr);
    if (!std::equal(s->values.begin(), s->values.end(), e.tensor.data().begin())) ++n;
  }
  return n;
}

bool same_sections(const Checkpoint& a, const Checkpoint& b, const std::string& prefix) {
  int seen = 0;
  for (const auto& s : a.sections) {
    if (!s.name.starts_with(prefix)) continue;
    const auto* t = b.find(s.name);
    if (t == nullptr || t->values != s.values) return false;
    ++seen;
  }
  return seen > 0;
}

ParamSet<float> one_param(std::vector<float> w) {
  ParamSet<float> ps;
  const auto n = static_cast<std::int64_t>(w.size());
  ps.add("w", Tensor<float>::from({n}, std::move(w)));
  ps.set_trainable(true);
  return ps;
}

void set_grad(ParamSet<float>& ps, std::vector<float> g) { ps.entries()[0].tensor.node()->grad = std::move(g); }

}  // namespace

TEST_CASE("losses") {
  auto a = random_tensor({2, 3, 4, 4}, 1), b = random_tensor({2, 3, 4, 4}, 2);
  auto za = random_tensor({2, 16, 8}, 3), zb = random_tensor({2, 16, 8}, 4);
  a.set_requires_grad(true);
  za.set_requires_grad(true);
  double la = 0, lz = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) la += std::abs(a[i] - b[i]);
  for (std::int64_t i = 0; i < za.numel(); ++i) lz += std::abs(za[i] - zb[i]);
  la /= static_cast<double>(a.numel());
  lz /= static_cast<double>(za.numel());
  CHECK(loss_rec(a, b).item() == doctest::Approx(la).epsilon(1e-14));
  CHECK(loss_all(a, b, za, zb).item() == doctest::Approx(la + lz).epsilon(1e-14));
  CHECK(loss_rec(a, a).item() == 0.0);

  auto report = grad_check([&] { return loss_all(a, b, za, zb); }, {{"x_hat", a}, {"z_hat", za}});
  CHECK(report.max_rel_error <= 1e-6);

  CHECK_THROWS_AS(loss_rec(a, random_tensor({2, 3, 4, 5}, 5)), DimensionError);
  CHECK_THROWS_AS(loss_all(a, b, za, random_tensor({2, 16, 7}, 6)), DimensionError);
}

TEST_CASE("adam") {
  const double lr = 0.01;
  const AdamOptions opt;
  auto ps = one_param({1.0f, -2.0f});
  AdamState st;
  const std::vector<std::vector<double>> grads = {{0.5, -1.0}, {0.25, 2.0}, {-0.75, 0.0}};
  std::vector<double> w = {1.0, -2.0}, m = {0, 0}, v = {0, 0};
  for (std::size_t k = 0; k < grads.size(); ++k) {
    set_grad(ps, {static_cast<float>(grads[k][0]), static_cast<float>(grads[k][1])});
    adam_step(ps, st, lr, opt, "g");
    const double t = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[k][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[k][i] * grads[k][i];
      w[i] -= lr * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(ps.entries()[0].tensor[static_cast<std::int64_t>(i)] == doctest::Approx(w[i]).epsilon(1e-6));
    }
  }
  // the first step moves every coordinate by lr against the gradient sign
  auto first = one_param({0.0f});
  AdamState fs;
  set_grad(first, {3.0f});
  adam_step(first, fs, lr, opt, "g");
  CHECK(first.entries()[0].tensor[0] == doctest::Approx(-lr).epsilon(1e-6));

  auto still = one_param({0.5f, 0.25f});
  AdamState ss;
  for (int i = 0; i < 5; ++i) {
    set_grad(still, {0.0f, 0.0f});
    adam_step(still, ss, lr, opt, "g");
  }
  CHECK(still.entries()[0].tensor[0] == 0.5f);
  CHECK(still.entries()[0].tensor[1] == 0.25f);

  auto drift = one_param({0.0f});
  AdamState ds;
  float prev = 0.0f;
  for (int i = 0; i < 50; ++i) {
    set_grad(drift, {1.0f});
    adam_step(drift, ds, lr, opt, "g");
    const float now = drift.entries()[0].tensor[0];
    CHECK(now < prev);
    CHECK(prev - now == doctest::Approx(lr).epsilon(1e-4));
    prev = now;
  }

  auto bad = one_param({1.0f, 2.0f});
  AdamState bs;
  set_grad(bad, {0.1f, std::nanf("")});
  try {
    adam_step(bad, bs, lr, opt, "le_cond");
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("le_cond") != std::string::npos);
  }
  CHECK(bad.entries()[0].tensor[0] == 1.0f);
  CHECK(bs.steps == 0);

  auto frozen = one_param({1.0f});
  frozen.set_trainable(false);
  AdamState fz;
  set_grad(frozen, {1.0f});
  adam_step(frozen, fz, lr, opt, "g");
  CHECK(frozen.entries()[0].tensor[0] == 1.0f);
}

TEST_CASE("cosine schedule and clipping") {
  CHECK(cosine_lr(0, 10, 4e-4, 1e-6) == doctest::Approx(4e-4));
  CHECK(cosine_lr(5, 10, 4e-4, 1e-6) == doctest::Approx((4e-4 + 1e-6) / 2));
  for (int e = 1; e < 10; ++e) CHECK(cosine_lr(e, 10, 4e-4, 1e-6) < cosine_lr(e - 1, 10, 4e-4, 1e-6));
  CHECK(cosine_lr(9, 10, 4e-4, 1e-6) > 1e-6);
  CHECK_THROWS_AS(cosine_lr(10, 10, 4e-4, 1e-6), UsageError);
  CHECK_THROWS_AS(cosine_lr(-1, 10, 4e-4, 1e-6), UsageError);

  auto a = one_param({0.0f}), b = one_param({0.0f});
  set_grad(a, {3.0f});
  set_grad(b, {4.0f});
  CHECK(clip_grad_norm({&a, &b}, 1.0) == doctest::Approx(5.0));
  CHECK(a.entries()[0].tensor.grad()[0] == doctest::Approx(0.6f));
  CHECK(b.entries()[0].tensor.grad()[0] == doctest::Approx(0.8f));
  CHECK(clip_grad_norm({&a, &b}, 2.0) == doctest::Approx(1.0));
  CHECK(b.entries()[0].tensor.grad()[0] == doctest::Approx(0.8f));
}

TEST_CASE("config parsing") {
  const auto cfg = tiny();
  CHECK(cfg.data.width == 16);
  CHECK(cfg.model.trident.prior_channels == 8);
  CHECK(config_to_json(config_from_json(config_to_json(cfg))) == config_to_json(cfg));
  CHECK(config_from_json(json{{"phase", 2}}).epochs == 100);
  CHECK(config_from_json(json::object()).epochs == 200);

  auto j = tiny_json();
  j["learning_rate"] = 1.0;
  CHECK_THROWS_AS(config_from_json(j), UsageError);
  j = tiny_json();
  j["model"]["chanels"] = 4;
  CHECK_THROWS_AS(config_from_json(j), UsageError);
  j = tiny_json();
  j["epochs"] = "3";
  CHECK_THROWS_AS(config_from_json(j), UsageError);
  j = tiny_json();
  j["data"]["width"] = 24;
  CHECK_THROWS_AS(config_from_json(j), UsageError);
  j = tiny_json();
  j["model"]["heads"] = 3;
  CHECK_THROWS_AS(config_from_json(j), UsageError);
  j = tiny_json();
  j["diffusion_loss"] = "l2";
  CHECK_THROWS_AS(config_from_json(j), UsageError);
  j = tiny_json();
  j["seed"] = -1;
  CHECK_THROWS_AS(config_from_json(j), UsageError);
  j["seed"] = int{7};
  CHECK(config_from_json(j).seed == 7);

  auto budget = cfg;
  budget.max_cpu_seconds = 5;
  CHECK(config_hash(budget) == config_hash(cfg));
  budget.lr_max = 1e-3;
  CHECK(config_hash(budget) != config_hash(cfg));
}

TEST_CASE("dataset") {
  const auto spec = tiny().data;
  const auto a = make_dataset(spec), b = make_dataset(spec);
  CHECK(a.train.size() == 8);
  CHECK(a.test.size() == 2);
  CHECK(a.train[5].values == b.train[5].values);
  CHECK(a.mask.values == b.mask.values);
  CHECK(a.train[0].values != a.test[0].values);
  for (float m : a.mask.values) CHECK((m == 0.0f || m == 1.0f));
  auto other = spec;
  other.seed = 4;
  CHECK(make_dataset(other).train[0].values != a.train[0].values);

  const auto x = stack_cubes({&a.train[0], &a.train[1]});
  CHECK(x.shape() == Shape{2, 4, 16, 16});
  CHECK(x[16 * 16 * 4 + 3] == a.train[1].values[3]);
}

TEST_CASE("phase 1 gradient coverage and trend") {
  const auto cfg = tiny(1, 3);
  const auto res = train_phase1(cfg);
  REQUIRE(res.history.size() == 3);
  CHECK(res.history.back().l_rec < res.history.front().l_rec);
  CHECK(changed_entries(res.checkpoint, cfg, "dun") > 0);
  CHECK(changed_entries(res.checkpoint, cfg, "le") > 0);
  CHECK(changed_entries(res.checkpoint, cfg, "le_cond") == 0);
  CHECK(changed_entries(res.checkpoint, cfg, "eps") == 0);
  CHECK(res.checkpoint.meta["phase"] == 1);
  CHECK(res.checkpoint.meta["epoch"] == 3);

  auto id = tiny(1, 1);
  id.model.identity_denoiser = true;
  const auto ri = train_phase1(id);
  CHECK(changed_entries(ri.checkpoint, id, "le") == 0);
  CHECK(changed_entries(ri.checkpoint, id, "dun") > 0);
  CHECK(changed_entries(ri.checkpoint, id, "dun") < changed_entries(res.checkpoint, cfg, "dun"));

  const auto csv = history_csv(res.history, 1);
  CHECK(csv.starts_with("epoch,lr,L_rec,L_diff,val_psnr\n"));
  CHECK(csv.find("\n1,") != std::string::npos);
}

TEST_CASE("training is deterministic and resumable") {
  auto cfg = tiny(1, 3);
  cfg.flips = true;
  const auto a = train_phase1(cfg), b = train_phase1(cfg);
  CHECK(encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint));
  CHECK(history_csv(a.history, 1) == history_csv(b.history, 1));

  auto stop = cfg;
  stop.max_cpu_seconds = 1e-9;
  const auto part = train_phase1(stop);
  CHECK(part.stopped_by_budget);
  REQUIRE(part.history.size() == 1);
  const auto rest = train_phase1(cfg, {}, &part.checkpoint);
  CHECK(history_csv(rest.history, 1) == history_csv(a.history, 1));
  CHECK(same_sections(rest.checkpoint, a.checkpoint, ""));
  CHECK(same_sections(rest.checkpoint, a.checkpoint, "adam_m/"));

  auto other = cfg;
  other.lr_max = 1e-3;
  CHECK_THROWS_AS(train_phase1(other, {}, &part.checkpoint), UsageError);
}

TEST_CASE("phase 2") {
  const auto p1 = train_phase1(tiny(1, 2));
  auto cfg = tiny(2, 12);
  cfg.lr_max = 0.01;
  const auto p2 = train_phase2(cfg, p1.checkpoint);
  REQUIRE(p2.history.size() == 12);
  CHECK(same_sections(p2.checkpoint, p1.checkpoint, "le/"));
  CHECK(changed_entries(p2.checkpoint, cfg, "le_cond") > 0);
  CHECK(changed_entries(p2.checkpoint, cfg, "eps") > 0);
  CHECK(p2.checkpoint.find("adam_m/le/" + std::string("x")) == nullptr);
  for (const auto& s : p2.checkpoint.sections) CHECK_FALSE(s.name.starts_with("adam_m/le/"));
  CHECK(history_csv(p2.history, 2).find(",,") == std::string::npos);

  const auto model = model_from_checkpoint(p2.checkpoint);
  const auto data = make_dataset(cfg.data);
  const auto s1 = evaluate_held_out(*model, data, 2, 9), s2 = evaluate_held_out(*model, data, 2, 9);
  CHECK(s1.psnr == s2.psnr);
  CHECK(s1.l_diff > 0);
  const auto untrained = evaluate_held_out(*model_from_checkpoint(p1.checkpoint), data, 2, 9);
  CHECK(s1.l_diff < untrained.l_diff);

  CHECK_THROWS_AS(train_phase2(cfg, p2.checkpoint), UsageError);
  auto eps = cfg;
  eps.diffusion_loss = "eps_mse";
  eps.epochs = 1;
  CHECK(std::isfinite(train_phase2(eps, p1.checkpoint).history[0].l_rec));
}
