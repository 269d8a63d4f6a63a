// Acceptance run: one PASS/FAIL line per criterion.
//
// Training runs are cached in --work as <name>.ckpt plus <name>.json (cpu time,
// epochs); a cached run is reused only when its config hash matches.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "checks.hpp"
#include "sci/metrics.hpp"
#include "sci/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sci;

namespace {

constexpr int kSeeds = 5;
constexpr double kBudget = 1800;  // CPU seconds per training run
const std::vector<double> kTvGrid = {0.02, 0.05, 0.1, 0.2, 0.4};

std::string work;
std::string cli;
std::string report;  // copy of the PASS/FAIL lines, written to <work>/acceptance_report.txt

struct Line {
  int id;
  bool pass;
  std::string what, detail;
};

void print(const Line& l) {
  char head[16];
  std::snprintf(head, sizeof head, "%s %2d  ", l.pass ? "PASS" : "FAIL", l.id);
  const auto text = head + l.what + ": " + l.detail + "\n";
  std::fputs(text.c_str(), stdout);
  std::fflush(stdout);
  report += text;
  write_file((fs::path(work) / "acceptance_report.txt").string(), report);
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(prec);
  s << v;
  return s.str();
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Line oracle_line(int id, const std::string& what, checks::Outcome (*fn)(), double limit) {
  const auto t0 = std::chrono::steady_clock::now();
  checks::Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  const double dt = elapsed(t0);
  return {id, o.pass && dt < limit, what, o.detail + ", " + fmt(dt, 2) + " s (limit " + fmt(limit, 0) + " s)"};
}

// ---- training runs ----

TrainConfig phase1_config(int seed) {
  return config_from_json(json{{"phase", 1},
                               {"epochs", 200},
                               {"batch_size", 4},
                               {"lr_max", 1e-3},
                               {"seed", seed},
                               {"max_cpu_seconds", kBudget},
                               {"data", {{"train_scenes", 64}, {"test_scenes", 8}, {"width", 32}, {"height", 32},
                                         {"bands", 8}, {"seed", seed}}},
                               {"model", {{"stages", 3}}}});
}

TrainConfig phase2_config(int seed, int steps) {
  auto j = config_to_json(phase1_config(seed));
  j["phase"] = 2;
  j["epochs"] = 100;
  j["model"]["diffusion_steps"] = steps;
  return config_from_json(j);
}

struct Run {
  Checkpoint ckpt;
  double cpu_seconds = 0;
  int epochs = 0;
  bool stopped_by_budget = false;
  bool cached = false;
};

Run cached_run(const std::string& name, const TrainConfig& cfg, const Checkpoint* phase1) {
  const auto ckpt_path = (fs::path(work) / (name + ".ckpt")).string();
  const auto info_path = (fs::path(work) / (name + ".json")).string();
  Run run;
  if (fs::exists(ckpt_path) && fs::exists(info_path)) {
    const auto info = json::parse(read_file(info_path));
    auto ckpt = read_checkpoint(ckpt_path);
    if (ckpt.meta.value("config_hash", std::string()) == config_hash(cfg) && info.value("budget", 0.0) == kBudget) {
      run.ckpt = std::move(ckpt);
      run.cpu_seconds = info.at("cpu_seconds");
      run.epochs = info.at("epochs");
      run.stopped_by_budget = info.at("stopped_by_budget");
      run.cached = true;
      return run;
    }
  }
  std::cerr << "[acceptance] training " << name << std::endl;
  auto log = [&](const EpochRecord& r) {
    if (r.epoch % 10 == 0)
      std::cerr << "[acceptance] " << name << " epoch " << r.epoch << " L_rec " << r.l_rec << " L_diff " << r.l_diff
                << " val_psnr " << r.val_psnr << std::endl;
  };
  auto result = cfg.phase == 1 ? train_phase1(cfg, log) : train_phase2(cfg, *phase1, log);
  run.ckpt = std::move(result.checkpoint);
  run.cpu_seconds = result.cpu_seconds;
  run.epochs = static_cast<int>(result.history.size());
  run.stopped_by_budget = result.stopped_by_budget;
  write_checkpoint(ckpt_path, run.ckpt);
  write_file(info_path, json{{"cpu_seconds", run.cpu_seconds},
                             {"epochs", run.epochs},
                             {"stopped_by_budget", run.stopped_by_budget},
                             {"budget", kBudget}}
                            .dump(2));
  return run;
}

std::string run_note(const Run& r) {
  return std::to_string(r.epochs) + " ep/" + fmt(r.cpu_seconds / 60, 1) + " cpu-min" + (r.cached ? " cached" : "");
}

double gap_tv_psnr(const Dataset& data, double weight, bool accelerated) {
  GapTvOptions opt;
  opt.iterations = 50;
  opt.tv_weight = weight;
  opt.accelerated = accelerated;
  double total = 0;
  for (const auto& x : data.test) total += psnr(clamp_unit(gap_tv(forward(x, data.op), data.op, opt)), x);
  return total / static_cast<double>(data.test.size());
}

Line criterion7(std::vector<Run>& phase1) {
  int wins = 0;
  bool within_budget = true;
  std::ostringstream d;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto cfg = phase1_config(seed);
    phase1.push_back(cached_run("phase1_seed" + std::to_string(seed), cfg, nullptr));
    const auto& run = phase1.back();
    const auto data = make_dataset(cfg.data);
    const double learned = evaluate_held_out(*model_from_checkpoint(run.ckpt), data, 1, cfg.seed).psnr;
    double best = -1, best_w = 0, best_acc = -1;
    for (double w : kTvGrid) {
      const double p = gap_tv_psnr(data, w, false);
      if (p > best) best = p, best_w = w;
      best_acc = std::max(best_acc, gap_tv_psnr(data, w, true));
    }
    const bool win = learned >= best + 1.0;
    wins += win;
    within_budget = within_budget && run.cpu_seconds <= kBudget + 60;  // the epoch in progress may finish
    std::cerr << "[acceptance] seed " << seed << " phase1 " << learned << " gap-tv " << best << " (w " << best_w
              << ") accelerated gap-tv " << best_acc << std::endl;
    d << (seed ? "; " : "") << "s" << seed << " " << fmt(learned, 2) << " vs " << fmt(best, 2) << " (w=" << best_w
      << ", accel " << fmt(best_acc, 2) << ", " << run_note(run) << ")";
  }
  return {7, wins >= 4 && within_budget, "desk-scale phase I >= GAP-TV + 1 dB on >= 4/5 seeds",
          std::to_string(wins) + "/5 seeds; " + d.str()};
}

bool same_group(const Checkpoint& a, const Checkpoint& b, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& s : a.sections) {
    if (s.name.rfind(prefix, 0) != 0) continue;
    const auto* o = b.find(s.name);
    if (!o || o->values.size() != s.values.size() ||
        std::memcmp(o->values.data(), s.values.data(), s.values.size() * sizeof(float)) != 0)
      return false;
    ++n;
  }
  return n > 0;
}

struct Phase2Score {
  double psnr = 0, l_diff = 0, untrained_l_diff = 0;
};

Phase2Score score_phase2(const TrainConfig& cfg, const Checkpoint& p1, const Run& p2) {
  const auto data = make_dataset(cfg.data);
  Model untrained(cfg.model, cfg.data.bands, cfg.seed);
  untrained.load(p1, {"dun", "le"});
  Phase2Score s;
  s.untrained_l_diff = evaluate_held_out(untrained, data, 2, cfg.seed).l_diff;
  const auto trained = evaluate_held_out(*model_from_checkpoint(p2.ckpt), data, 2, cfg.seed);
  s.psnr = trained.psnr;
  s.l_diff = trained.l_diff;
  return s;
}

Line criterion8(const std::vector<Run>& phase1, std::vector<Run>& t16) {
  const auto cfg = phase2_config(0, 16);
  t16.push_back(cached_run("phase2_t16_seed0", cfg, &phase1[0].ckpt));
  const auto& run = t16.back();
  const auto s = score_phase2(cfg, phase1[0].ckpt, run);
  const double p1 = evaluate_held_out(*model_from_checkpoint(phase1[0].ckpt), make_dataset(cfg.data), 1, cfg.seed).psnr;
  const bool frozen = same_group(phase1[0].ckpt, run.ckpt, "le/");
  const bool drop = s.l_diff <= 0.5 * s.untrained_l_diff;
  const bool keep = s.psnr >= p1 - 0.1;
  const bool budget = run.cpu_seconds <= kBudget + 60;
  std::ostringstream d;
  d << "LE bit-identical " << (frozen ? "yes" : "NO") << "; L_diff " << fmt(s.untrained_l_diff, 5) << " -> "
    << fmt(s.l_diff, 5) << " (" << fmt(100 * (1 - s.l_diff / s.untrained_l_diff), 1) << "% drop); PSNR "
    << fmt(s.psnr, 2) << " vs phase I " << fmt(p1, 2) << "; " << run_note(run);
  return {8, frozen && drop && keep && budget, "desk-scale phase II", d.str()};
}

Line criterion9(const std::vector<Run>& phase1, std::vector<Run>& t16) {
  int wins = 0;
  std::ostringstream d;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto c16 = phase2_config(seed, 16), c2 = phase2_config(seed, 2);
    if (static_cast<int>(t16.size()) <= seed)
      t16.push_back(cached_run("phase2_t16_seed" + std::to_string(seed), c16, &phase1[seed].ckpt));
    const auto r2 = cached_run("phase2_t2_seed" + std::to_string(seed), c2, &phase1[seed].ckpt);
    const auto data = make_dataset(c16.data);
    const double p16 = evaluate_held_out(*model_from_checkpoint(t16[seed].ckpt), data, 2, c16.seed).psnr;
    const double p2 = evaluate_held_out(*model_from_checkpoint(r2.ckpt), data, 2, c2.seed).psnr;
    wins += p16 >= p2;
    d << (seed ? "; " : "") << "s" << seed << " T16 " << fmt(p16, 2) << " vs T2 " << fmt(p2, 2);
  }
  return {9, wins >= 4, "step ablation PSNR(T=16) >= PSNR(T=2) on >= 4/5 seeds", std::to_string(wins) + "/5; " + d.str()};
}

// ---- criterion 11 through the CLI ----

int sh(const std::string& cmd) {
  const int st = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files) {
  std::set<std::string> na, nb;
  for (const auto& e : fs::recursive_directory_iterator(a)) na.insert(fs::relative(e.path(), a).string());
  for (const auto& e : fs::recursive_directory_iterator(b)) nb.insert(fs::relative(e.path(), b).string());
  if (na != nb) return false;
  files = 0;
  for (const auto& n : na) {
    if (fs::is_directory(a / n)) continue;
    ++files;
    if (read_file((a / n).string()) != read_file((b / n).string())) return false;
  }
  return true;
}

Line criterion11() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  const fs::path dir = fs::path(work) / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg_path = dir / "config.json";
  write_file(cfg_path.string(),
             json{{"phase", 1},
                  {"epochs", 2},
                  {"batch_size", 2},
                  {"seed", 5},
                  {"flips", true},
                  {"data", {{"train_scenes", 4}, {"test_scenes", 2}, {"width", 16}, {"height", 16}, {"bands", 4},
                            {"noise_sigma", 0.01}, {"seed", 5}}},
                  {"model", {{"stages", 1}, {"channels", 4}, {"heads", 1}, {"spatial_depth", 1}, {"expansion", 2},
                             {"latent_channels", 8}, {"encoder_width", 4}, {"encoder_downsamples", 2},
                             {"encoder_grid", 4}, {"token_hidden", 8}, {"channel_hidden_mult", 1},
                             {"diffusion_steps", 3}, {"eps_hidden", 8}}}}
                 .dump(2));
  std::size_t files = 0;
  expect(sh(cli + " simulate --config " + q(cfg_path) + " --out " + q(dir / "sim_a")) == 0, "simulate a");
  expect(sh(cli + " simulate --config " + q(cfg_path) + " --out " + q(dir / "sim_b")) == 0, "simulate b");
  expect(same_tree(dir / "sim_a", dir / "sim_b", files) && files > 0, "simulate outputs differ");

  expect(sh(cli + " train --phase 1 --config " + q(cfg_path) + " --out " + q(dir / "train_a")) == 0, "train a");
  expect(sh(cli + " train --phase 1 --config " + q(cfg_path) + " --out " + q(dir / "train_b")) == 0, "train b");
  std::size_t train_files = 0;
  expect(same_tree(dir / "train_a", dir / "train_b", train_files) && train_files == 2, "checkpoint/CSV differ");

  // Round trips on the produced files.
  const auto truth = (dir / "sim_a" / "test_000_truth.hsc1").string();
  const auto meas = (dir / "sim_a" / "test_000_meas.hsc1").string();
  const auto mask = (dir / "sim_a" / "mask.hsc1").string();
  const auto ckpt = (dir / "train_a" / "phase1.ckpt").string();
  try {
    const auto bytes = read_file(truth);
    expect(encode_hsc1(decode_hsc1(bytes)) == bytes, "HSC1 round trip");
    const auto cbytes = read_file(ckpt);
    expect(encode_checkpoint(decode_checkpoint(cbytes)) == cbytes, "checkpoint round trip");
  } catch (const std::exception& e) {
    failures.push_back(std::string("round trip threw ") + e.what());
  }

  // Malformed inputs exit with 2.
  const auto good = read_file(truth);
  auto bad_magic = good;
  bad_magic[0] = 'X';
  write_file((dir / "bad_magic.hsc1").string(), bad_magic);
  write_file((dir / "truncated.hsc1").string(), good.substr(0, good.size() - 3));
  write_file((dir / "header_only.hsc1").string(), good.substr(0, 20));
  const auto cb = read_file(ckpt);
  write_file((dir / "truncated.ckpt").string(), cb.substr(0, cb.size() / 2));
  for (const char* bad : {"bad_magic.hsc1", "truncated.hsc1", "header_only.hsc1"}) {
    expect(sh(cli + " evaluate --recon " + q(dir / bad) + " --truth " + truth + " --report " + q(dir / "r.json")) == 2,
           std::string("evaluate on ") + bad);
    expect(sh(cli + " reconstruct --ckpt " + ckpt + " --measurement " + q(dir / bad) + " --mask " + mask + " --out " +
              q(dir / "o.hsc1")) == 2,
           std::string("reconstruct on ") + bad);
  }
  expect(sh(cli + " reconstruct --ckpt " + q(dir / "truncated.ckpt") + " --measurement " + meas + " --mask " + mask +
            " --out " + q(dir / "o.hsc1")) == 2,
         "truncated checkpoint");
  expect(sh(cli + " evaluate --recon " + q(dir / "missing.hsc1") + " --truth " + truth + " --report " + q(dir / "r.json")) == 2,
         "missing file");

  // Identical cubes report the caps; the CLI baseline matches the library.
  expect(sh(cli + " evaluate --recon " + truth + " --truth " + truth + " --report " + q(dir / "same.json") + " --ssim-window 7") == 0,
         "evaluate identical");
  if (fs::exists(dir / "same.json")) {
    const auto rep = json::parse(read_file((dir / "same.json").string()));
    expect(rep["mean"]["psnr"] == 100.0 && rep["mean"]["ssim"] == 1.0, "identical-cube report");
  }
  expect(sh(cli + " reconstruct --baseline gap-tv --bands 4 --step 1 --tv-weight 0.05 --measurement " + meas + " --mask " +
            mask + " --out " + q(dir / "gaptv.hsc1")) == 0,
         "reconstruct gap-tv");
  try {
    const auto cube = read_hsc1(truth);
    auto m = mask_from_cube(read_hsc1(mask));
    SensingOperator<float> op(m, 4, ShiftSpec{1});
    GapTvOptions opt;
    opt.tv_weight = 0.05;
    const double lib = psnr(clamp_unit(gap_tv(measurement_from_cube(read_hsc1(meas)), op, opt)), cube);
    const double via_cli = psnr(read_hsc1((dir / "gaptv.hsc1").string()), cube);
    expect(std::abs(lib - via_cli) <= 1e-6, "CLI gap-tv PSNR " + fmt(via_cli, 9) + " vs library " + fmt(lib, 9));
  } catch (const std::exception& e) {
    failures.push_back(std::string("gap-tv fixture threw ") + e.what());
  }
  expect(sh(cli + " train --phase 1 --config " + q(cfg_path) + " --bogus") == 1, "unknown flag exit 1");

  std::string detail = std::to_string(files) + " simulated files and checkpoint+CSV identical across runs; round trips exact; "
                       "malformed inputs exit 2";
  if (!failures.empty()) {
    detail = "failed:";
    for (const auto& f : failures) detail += " [" + f + "]";
  }
  return {11, failures.empty(), "determinism and formats", detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-11"};
  std::vector<int> only;
  app.add_option("--cli", cli, "Path to the cassi executable")->required();
  app.add_option("--work", work, "Directory for training runs and scratch files")->required();
  app.add_option("--only", only, "Run a subset of criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  auto want = [&](int id) { return only.empty() || std::ranges::find(only, id) != only.end(); };

  int failed = 0;
  auto emit = [&](const Line& l) {
    print(l);
    failed += !l.pass;
  };
  try {
    if (want(1)) emit(oracle_line(1, "dense-operator equivalence", checks::dense_operator, 10));
    if (want(2)) emit(oracle_line(2, "projection consistency and idempotence", checks::projection_consistency, 5));
    if (want(3)) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto results = checks::run(checks::gradient_checks());
      const double dt = elapsed(t0);
      double worst = 0;
      std::string bad;
      for (const auto& r : results)
        if (!r.pass) bad += " [" + r.module + "/" + r.name + ": " + r.detail + "]";
      for (const auto& r : results) worst = std::max(worst, r.seconds);
      emit({3, bad.empty() && dt < 300, "gradient suite",
            std::to_string(results.size()) + " checks x 10 seeds" + (bad.empty() ? ", all within 1e-4" : bad) + ", " +
                fmt(dt, 1) + " s (limit 300 s)"});
    }
    if (want(4)) emit(oracle_line(4, "diffusion algebra", checks::diffusion_algebra, 30));
    if (want(5)) emit(oracle_line(5, "attention loop oracles", checks::attention_oracles, 10));
    if (want(6)) emit(oracle_line(6, "identity initialisation", checks::identity_init, 5));

    std::vector<Run> phase1, t16;
    if (want(7) || want(8) || want(9)) {
      auto l7 = criterion7(phase1);
      if (want(7)) emit(l7);
    }
    if (want(8) || want(9)) {
      auto l8 = criterion8(phase1, t16);
      if (want(8)) emit(l8);
    }
    if (want(9)) emit(criterion9(phase1, t16));
    if (want(10)) emit(oracle_line(10, "metrics against loop references", checks::metric_oracles, 10));
    if (want(11)) emit(criterion11());
  } catch (const std::exception& e) {
    std::printf("acceptance run aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failed);
  return 0;
}
