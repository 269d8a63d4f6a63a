#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "checks.hpp"
#include "sci/metrics.hpp"
#include "sci/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sci;

namespace {

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

int fail(ExitCode code, const std::string& kind, const std::string& message) {
  std::cerr << "error code=" << static_cast<int>(code) << " kind=" << kind << " message=" << json(one_line(message)).dump()
            << "\n";
  return static_cast<int>(code);
}

std::string scene_name(const char* split, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d", split, i);
  return buf;
}

// ---- simulate ----

struct SimulateArgs {
  std::string config, out;
};

void simulate(const SimulateArgs& a) {
  const auto cfg = load_config(a.config);
  const auto data = make_dataset(cfg.data);
  fs::create_directories(a.out);
  json files = json::array();
  auto put = [&](const std::string& name, const HsiCube<float>& cube, const std::string& role, const std::string& scene) {
    const auto bytes = encode_hsc1(cube);
    write_file((fs::path(a.out) / name).string(), bytes);
    files.push_back({{"path", name}, {"role", role}, {"scene", scene}, {"fnv1a", fnv1a_hex(bytes)}});
  };
  put("mask.hsc1", mask_to_cube(data.mask), "mask", "");
  std::mt19937_64 noise(cfg.data.seed ^ 0x6e6f697365ULL);
  auto emit = [&](const char* split, const std::vector<HsiCube<float>>& cubes) {
    for (std::size_t i = 0; i < cubes.size(); ++i) {
      const auto name = scene_name(split, static_cast<int>(i));
      put(name + "_truth.hsc1", cubes[i], "truth", name);
      const auto y = forward(cubes[i], data.op, static_cast<float>(cfg.data.noise_sigma), noise);
      put(name + "_meas.hsc1", measurement_to_cube(y), "measurement", name);
    }
  };
  emit("train", data.train);
  emit("test", data.test);
  json manifest = {{"config_hash", config_hash(cfg)},
                   {"data", config_to_json(cfg)["data"]},
                   {"shifted_height", data.op.shifted_height()},
                   {"files", files}};
  write_file((fs::path(a.out) / "manifest.json").string(), manifest.dump(2) + "\n");
  std::cout << "wrote " << files.size() << " files to " << a.out << "\n";
}

// ---- train ----

struct TrainArgs {
  int phase = 1;
  std::string config, resume, init, out = ".";
};

void train(const TrainArgs& a) {
  json j;
  try {
    j = json::parse(read_file(a.config));
  } catch (const json::exception& e) {
    throw UsageError("config: " + a.config + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config: " + a.config + " must hold a JSON object");
  j["phase"] = a.phase;
  const auto cfg = config_from_json(j);
  fs::create_directories(a.out);
  Checkpoint resume;
  if (!a.resume.empty()) resume = read_checkpoint(a.resume);
  const Checkpoint* resume_ptr = a.resume.empty() ? nullptr : &resume;
  auto log = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " lr " << r.lr << " L_rec " << r.l_rec << " L_diff " << r.l_diff << " val_psnr "
              << r.val_psnr << std::endl;
  };
  TrainResult result;
  if (a.phase == 1) {
    if (!a.init.empty()) throw UsageError("--init is only used by phase 2");
    result = train_phase1(cfg, log, resume_ptr);
  } else {
    if (a.init.empty()) throw UsageError("phase 2 needs --init <phase-1 checkpoint>");
    result = train_phase2(cfg, read_checkpoint(a.init), log, resume_ptr);
  }
  const auto stem = (fs::path(a.out) / ("phase" + std::to_string(a.phase))).string();
  write_checkpoint(stem + ".ckpt", result.checkpoint);
  write_file(stem + ".csv", history_csv(result.history, a.phase));
  std::cout << "wrote " << stem << ".ckpt and " << stem << ".csv (" << result.history.size() << " epochs, "
            << result.cpu_seconds << " cpu s" << (result.stopped_by_budget ? ", stopped by budget" : "") << ")\n";
}

// ---- reconstruct ----

struct ReconstructArgs {
  std::string ckpt, measurement, mask, out, baseline;
  std::int64_t bands = 0;
  int step = -1;
  double tv_weight = 0.05;
  int iterations = 50;
  std::uint64_t seed = 0;
};

void reconstruct(const ReconstructArgs& a) {
  if (a.ckpt.empty() == a.baseline.empty()) throw UsageError("give exactly one of --ckpt or --baseline gap-tv");
  const auto mask = mask_from_cube(read_hsc1(a.mask));
  const auto y = measurement_from_cube(read_hsc1(a.measurement));

  std::unique_ptr<Model> model;
  std::int64_t bands = a.bands;
  int step = a.step;
  if (!a.ckpt.empty()) {
    const auto ckpt = read_checkpoint(a.ckpt);
    const auto cfg = config_from_checkpoint(ckpt);
    if (bands == 0) bands = cfg.data.bands;
    if (step < 0) step = cfg.data.step;
    if (bands != cfg.data.bands) throw UsageError("--bands disagrees with the checkpoint");
    model = model_from_checkpoint(ckpt);
  }
  if (bands <= 0) throw UsageError("--bands is required with --baseline");
  if (step < 0) step = 1;
  if (y.width != mask.width || y.height != ShiftSpec{step}.shifted_height(mask.height, bands))
    throw DimensionError("measurement is " + std::to_string(y.width) + "x" + std::to_string(y.height) + ", mask " +
                         std::to_string(mask.width) + "x" + std::to_string(mask.height) + " with " +
                         std::to_string(bands) + " bands and step " + std::to_string(step));
  SensingOperator<float> op(mask, bands, ShiftSpec{step});

  HsiCube<float> rec;
  if (model) {
    NoGradGuard guard;
    std::mt19937_64 rng(a.seed);
    rec = clamp_unit(cube_from_tensor(model->infer(op, to_tensor(y), rng)));
  } else {
    if (a.baseline != "gap-tv") throw UsageError("unknown baseline '" + a.baseline + "'");
    GapTvOptions opt;
    opt.tv_weight = a.tv_weight;
    opt.iterations = a.iterations;
    rec = clamp_unit(gap_tv(y, op, opt));
  }
  write_hsc1(a.out, rec);
  std::cout << "wrote " << a.out << "\n";
}

// ---- evaluate ----

struct EvaluateArgs {
  std::vector<std::string> recon, truth;
  std::string region, report;
  int ssim_window = 11;
  std::vector<std::int64_t> bands;
};

Region parse_region(const std::string& s) {
  Region r;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream in(s);
  if (!(in >> r.x >> c1 >> r.y >> c2 >> r.width >> c3 >> r.height) || c1 != ',' || c2 != ',' || c3 != ',' || !in.eof())
    throw UsageError("--region expects x,y,w,h, got '" + s + "'");
  return r;
}

void evaluate(const EvaluateArgs& a) {
  if (a.recon.size() != a.truth.size()) throw UsageError("--recon and --truth must be given the same number of times");
  const auto t0 = std::chrono::steady_clock::now();
  SsimOptions so;
  so.window = a.ssim_window;
  const bool with_region = !a.region.empty();
  const Region region = with_region ? parse_region(a.region) : Region{};

  json options = {{"ssim_window", so.window}, {"ssim_sigma", so.sigma}, {"region", a.region}};
  const auto stem = fs::path(a.report).replace_extension("").string();
  if (fs::path(a.report).has_parent_path()) fs::create_directories(fs::path(a.report).parent_path());
  json scenes = json::array();
  std::ostringstream csv;
  csv << "scene,recon,truth,psnr,psnr_whole,ssim" << (with_region ? ",corr" : "") << "\n";
  double sum_psnr = 0, sum_whole = 0, sum_ssim = 0, sum_corr = 0;
  for (std::size_t i = 0; i < a.recon.size(); ++i) {
    const auto rec = read_hsc1(a.recon[i]), ref = read_hsc1(a.truth[i]);
    json s = {{"recon", a.recon[i]}, {"truth", a.truth[i]}};
    const double p = psnr(rec, ref), pw = psnr_whole(rec, ref), q = ssim(rec, ref, so);
    s["psnr"] = p;
    s["psnr_whole"] = pw;
    s["ssim"] = q;
    sum_psnr += p;
    sum_whole += pw;
    sum_ssim += q;
    csv << i << "," << a.recon[i] << "," << a.truth[i] << "," << std::setprecision(17) << p << "," << pw << "," << q;
    if (with_region) {
      const double r = spectral_corr(rec, ref, region);
      s["corr"] = r;
      sum_corr += r;
      csv << "," << r;
    }
    csv << "\n";
    json maps = json::array();
    std::vector<std::int64_t> bands = a.bands;
    if (bands.empty())
      for (std::int64_t b = 1; b <= ref.bands; ++b) bands.push_back(b);
    for (auto b : bands) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "_scene%03zu_band%02lld.png", i, static_cast<long long>(b));
      const auto png = stem + buf;
      write_png(png, error_map(rec, ref, b));
      maps.push_back(png);
    }
    s["error_maps"] = maps;
    scenes.push_back(s);
  }
  const double n = static_cast<double>(a.recon.size());
  json mean = {{"psnr", sum_psnr / n}, {"psnr_whole", sum_whole / n}, {"ssim", sum_ssim / n}};
  if (with_region) mean["corr"] = sum_corr / n;
  const double runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json report = {{"scenes", scenes},
                 {"mean", mean},
                 {"runtime_seconds", runtime},
                 {"options", options},
                 {"config_hash", fnv1a_hex(options.dump())}};
  write_file(a.report, report.dump(2) + "\n");
  write_file(stem + ".csv", csv.str());
  std::cout << "psnr " << sum_psnr / n << " ssim " << sum_ssim / n << (with_region ? " corr " + std::to_string(sum_corr / n) : "")
            << "\n";
}

// ---- gradcheck / selftest ----

int report_checks(const std::vector<checks::Result>& results) {
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s  %-10s %-52s %7.2fs  %s\n", r.pass ? "PASS" : "FAIL", r.module.c_str(), r.name.c_str(), r.seconds,
                r.detail.c_str());
    ok = ok && r.pass;
  }
  std::fflush(stdout);
  return ok ? 0 : static_cast<int>(ExitCode::numeric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Snapshot compressive spectral imaging: simulate, train, reconstruct, evaluate"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* sim_cmd = app.add_subcommand("simulate", "Generate scenes, mask and measurements as HSC1 files plus a manifest");
  sim_cmd->add_option("--config", sim.config, "Config JSON")->required();
  sim_cmd->add_option("--out", sim.out, "Output directory")->required();

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Run a training phase; writes phase<N>.ckpt and phase<N>.csv. --phase overrides the config");
  tr_cmd->add_option("--phase", tr.phase, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  tr_cmd->add_option("--config", tr.config, "Config JSON")->required();
  tr_cmd->add_option("--resume", tr.resume, "Checkpoint of an interrupted run of the same config");
  tr_cmd->add_option("--init", tr.init, "Phase-1 checkpoint (phase 2 only)");
  tr_cmd->add_option("--out", tr.out, "Output directory");

  ReconstructArgs rc;
  auto* rc_cmd = app.add_subcommand("reconstruct", "Reconstruct a cube from a measurement and its mask");
  rc_cmd->add_option("--ckpt", rc.ckpt, "Trained checkpoint");
  rc_cmd->add_option("--measurement", rc.measurement, "Measurement HSC1 (L = 1)")->required();
  rc_cmd->add_option("--mask", rc.mask, "Mask HSC1 (L = 1)")->required();
  rc_cmd->add_option("--out", rc.out, "Output HSC1")->required();
  rc_cmd->add_option("--baseline", rc.baseline, "Classical solver instead of a checkpoint")->check(CLI::IsMember({"gap-tv"}));
  rc_cmd->add_option("--bands", rc.bands, "Band count (taken from the checkpoint when given)");
  rc_cmd->add_option("--step", rc.step, "Dispersion step in rows per band");
  rc_cmd->add_option("--tv-weight", rc.tv_weight, "GAP-TV denoising weight");
  rc_cmd->add_option("--iterations", rc.iterations, "GAP-TV iterations");
  rc_cmd->add_option("--seed", rc.seed, "Seed of the prior sampling chain");

  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Score reconstructions against ground truth");
  ev_cmd->add_option("--recon", ev.recon, "Reconstruction HSC1 (repeatable)")->required();
  ev_cmd->add_option("--truth", ev.truth, "Ground-truth HSC1 (repeatable, paired with --recon)")->required();
  ev_cmd->add_option("--region", ev.region, "x,y,w,h region for spectral correlation");
  ev_cmd->add_option("--report", ev.report, "Report JSON; CSV and PNGs are written beside it")->required();
  ev_cmd->add_option("--ssim-window", ev.ssim_window, "SSIM window size (odd), for cubes smaller than 11x11");
  ev_cmd->add_option("--band", ev.bands, "1-based bands to render as error maps (default all)");

  std::string module;
  auto* gc_cmd = app.add_subcommand("gradcheck", "64-bit central-difference gradient suite");
  gc_cmd->add_option("--module", module, "Restrict to one module")->check(CLI::IsMember(checks::gradient_modules()));

  auto* st_cmd = app.add_subcommand("selftest", "Dense-operator, diffusion, attention, init and metric oracles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(ExitCode::usage, "usage", e.what());
  }

  try {
    if (*sim_cmd) simulate(sim);
    if (*tr_cmd) train(tr);
    if (*rc_cmd) reconstruct(rc);
    if (*ev_cmd) evaluate(ev);
    if (*gc_cmd) return report_checks(checks::run(checks::gradient_checks(), module));
    if (*st_cmd) return report_checks(checks::run(checks::oracle_checks()));
  } catch (const Error& e) {
    return fail(e.code(), e.kind(), e.what());
  } catch (const json::exception& e) {
    return fail(ExitCode::usage, "usage", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(ExitCode::data, "io", e.what());
  } catch (const std::exception& e) {
    return fail(ExitCode::numeric, "internal", e.what());
  }
  return 0;
}
