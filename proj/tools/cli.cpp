#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <csignal>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "causnvs/cape.hpp"
#include "causnvs/config.hpp"
#include "causnvs/engine.hpp"
#include "causnvs/errors.hpp"
#include "causnvs/evaluation.hpp"
#include "causnvs/metrics.hpp"
#include "causnvs/service.hpp"
#include "causnvs/training.hpp"
#include "causnvs/worldgen.hpp"

namespace causnvs {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;

  RunConfig load(std::vector<std::string> extra = {}) const {
    std::vector<std::string> all = overrides;
    all.insert(all.end(), extra.begin(), extra.end());
    return load_run_config(config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), all);
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "JSON config file (merged onto the defaults)");
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set train.steps=100")->take_all();
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

std::shared_ptr<const DenoiserParams> load_model(const fs::path& path, bool use_ema) {
  Checkpoint ck = load_checkpoint(path);
  if (use_ema && ck.optimizer) return std::make_shared<const DenoiserParams>(with_ema(ck.params, *ck.optimizer));
  return std::make_shared<const DenoiserParams>(std::move(ck.params));
}

std::vector<std::size_t> parse_indices(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    try {
      out.push_back(static_cast<std::size_t>(std::stoul(tok)));
    } catch (const std::exception&) {
      throw ConfigError("bad frame index '" + tok + "'");
    }
  }
  return out;
}

std::optional<int> parse_window(const std::string& text) {
  if (text == "all") return std::nullopt;
  try {
    const int k = std::stoi(text);
    if (k < 1) throw ConfigError("window size must be >= 1");
    return k;
  } catch (const std::logic_error&) {
    throw ConfigError("bad window size '" + text + "'");
  }
}

std::string window_name(const std::optional<int>& k) { return k ? std::to_string(*k) : "all"; }

// ---------------------------------------------------------------------------

int cmd_render_dataset(const Common& common, const std::string& out, std::optional<int> scenes) {
  std::vector<std::string> extra;
  if (scenes) extra.push_back("dataset.n_scenes=" + std::to_string(*scenes));
  const RunConfig cfg = common.load(extra);
  const DatasetManifest m = make_dataset(cfg.dataset, out);
  json j = m;
  std::cout << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_train(const Common& common, const std::string& dataset, const std::string& run_dir, std::optional<int> steps,
              bool non_causal, bool resume) {
  std::vector<std::string> extra;
  if (steps) extra.push_back("train.steps=" + std::to_string(*steps));
  if (non_causal) extra.push_back("train.causal=false");
  RunConfig cfg = common.load(extra);
  const fs::path run(run_dir);
  const fs::path latest = run / "checkpoints" / "latest.ckpt";

  TrainingState state = init_training(cfg.model, cfg.train);
  if (resume) {
    if (!fs::exists(latest)) throw IoError("nothing to resume: " + latest.string() + " is missing");
    state = load_training_checkpoint(latest);
    json saved = read_json(run / "config.json");
    json now = cfg;
    saved["train"]["steps"] = now["train"]["steps"];
    if (saved != now) throw ConfigError("resume: config differs from the one in " + (run / "config.json").string());
    std::clog << "resuming from step " << state.optimizer.step << '\n';
  }
  write_json(run / "config.json", cfg);
  const auto scenes = load_training_scenes(dataset, cfg.train);
  const NoiseSchedule schedule = make_schedule(cfg.engine.schedule, cfg.model.num_timesteps);
  run_training(state, cfg.train, scenes, schedule, {run / "checkpoints", run / "loss.csv"});
  std::cout << latest.string() << '\n';
  return kExitOk;
}

int cmd_rollout(const Common& common, const std::string& checkpoint, const std::string& dataset,
                const std::string& run_dir, std::optional<int> scene_index, const std::string& inputs_text,
                const std::string& targets_text, std::optional<int> num_targets, const std::string& window_text,
                const std::string& sweep_text, bool parallel) {
  std::vector<std::string> extra;
  RunConfig cfg = common.load(extra);
  if (!window_text.empty()) cfg.engine.window_k = parse_window(window_text);
  const auto params = load_model(checkpoint, cfg.eval.use_ema);
  cfg.engine.validate(params->config);

  const DatasetManifest dm = load_manifest(dataset);
  const int n_scenes = static_cast<int>(dm.scenes.size());
  const int si = scene_index.value_or(std::max(0, n_scenes - cfg.train.holdout_scenes));
  if (si < 0 || si >= n_scenes) throw ConfigError("scene index out of range");
  const SceneData scene = load_scene(dataset, dm.scenes[static_cast<std::size_t>(si)]);
  const std::size_t n_frames = scene.poses.size();

  std::vector<std::size_t> inputs = parse_indices(inputs_text.empty() ? "0" : inputs_text);
  std::vector<std::size_t> targets = parse_indices(targets_text);
  if (targets.empty()) {
    const int m = num_targets.value_or(7);
    for (int k = 1; k <= m; ++k) targets.push_back((inputs.back() + static_cast<std::size_t>(k)) % n_frames);
  }
  for (std::size_t i : inputs) {
    if (i >= n_frames) throw ConfigError("input index out of range");
  }
  for (std::size_t i : targets) {
    if (i >= n_frames) throw ConfigError("target index out of range");
  }

  std::vector<std::optional<int>> windows = {cfg.engine.window_k};
  if (!sweep_text.empty()) {
    windows.clear();
    std::stringstream ss(sweep_text);
    for (std::string tok; std::getline(ss, tok, ',');) windows.push_back(parse_window(tok));
  }

  const fs::path run(run_dir);
  write_json(run / "config.json", cfg);
  std::ostringstream sweep_csv;
  sweep_csv << "window_k,mean_psnr,framewise_flops,mean_wall_ms\n";
  for (const auto& k : windows) {
    EngineConfig engine = cfg.engine;
    engine.window_k = k;
    EvalCase c{0, inputs, targets, cfg.seed};
    const CaseResult r = run_case(params, scene, c, engine,
                                  parallel ? InferenceMode::Parallel : InferenceMode::Autoregressive, cfg.eval.warp);
    const fs::path out = windows.size() > 1 ? run / ("window_" + window_name(k)) : run;
    RolloutResult rr;
    rr.images = r.generated;
    for (std::size_t t : targets) rr.poses.push_back(scene.poses[t]);
    rr.diagnostics = r.diagnostics;
    Session probe(params, engine, cfg.seed);
    json extra_manifest = {{"dataset", fs::absolute(dataset).string()},
                           {"scene", scene.name},
                           {"scene_index", si},
                           {"scene_scale", scene.scene_scale},
                           {"checkpoint", fs::absolute(checkpoint).string()},
                           {"inputs", inputs},
                           {"targets", targets},
                           {"seed", cfg.seed},
                           {"mode", parallel ? "parallel" : "autoregressive"},
                           {"window_k", window_name(k)},
                           {"config_hash", probe.config_hash()}};
    save_rollout(out, rr, extra_manifest);
    std::vector<MetricsRow> rows;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      rows.push_back({scene.name, "checkpoint", parallel ? "parallel" : "ar", static_cast<int>(inputs.size()),
                      static_cast<int>(inputs.size() + targets.size()), static_cast<int>(t), r.psnr[t],
                      r.warp_psnr[t]});
    }
    write_text(out / "metrics.csv", metrics_csv(rows));
    const double mean = std::accumulate(r.psnr.begin(), r.psnr.end(), 0.0) / static_cast<double>(r.psnr.size());
    std::int64_t flops = 0;
    double ms = 0.0;
    for (const auto& d : r.diagnostics) flops += d.framewise_flops, ms += d.wall_ms;
    sweep_csv << window_name(k) << ',' << mean << ',' << flops << ',' << ms / static_cast<double>(targets.size())
              << '\n';
    std::cout << "window_k=" << window_name(k) << " mean_psnr=" << mean << " framewise_flops=" << flops << '\n';
  }
  if (windows.size() > 1) write_text(run / "reports" / "window_sweep.csv", sweep_csv.str());
  return kExitOk;
}

int cmd_eval(const std::string& run_dir, const std::string& dataset_override) {
  const fs::path run(run_dir);
  const json manifest = read_json(run / "manifest.json");
  const std::string dataset = dataset_override.empty() ? manifest.at("dataset").get<std::string>() : dataset_override;
  const SceneData scene = load_scene(dataset, manifest.at("scene").get<std::string>());
  const auto targets = manifest.at("targets").get<std::vector<std::size_t>>();
  const auto inputs = manifest.at("inputs").get<std::vector<std::size_t>>();

  std::vector<double> per_frame;
  std::vector<std::optional<double>> warps;
  std::vector<int> missing;
  std::vector<MetricsRow> rows;
  std::vector<std::optional<Image>> gen(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.png", t);
    const fs::path p = run / "images" / name;
    if (!fs::exists(p)) {
      missing.push_back(static_cast<int>(t));
      continue;
    }
    gen[t] = read_png(p);
  }
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!gen[t]) continue;
    const double v = psnr(*gen[t], scene.images.at(targets[t]));
    std::optional<double> w;
    if (t + 1 < targets.size() && gen[t + 1]) {
      const Pose pi = scene.world_pose(targets[t]);
      const Pose pj = scene.world_pose(targets[t + 1]);
      w = warp_consistency(*gen[t], *gen[t + 1], depth(scene.spec, pi, scene.intrinsics), pi, pj, scene.intrinsics);
    }
    per_frame.push_back(v);
    warps.push_back(w);
    rows.push_back({scene.name, "run", manifest.value("mode", "ar"), static_cast<int>(inputs.size()),
                    static_cast<int>(inputs.size() + targets.size()), static_cast<int>(t), v, w});
  }
  EvalReport report = EvalReport::from_frames(run.filename().string(), per_frame, warps, manifest);
  json j = report;
  j["missing_frames"] = missing;
  write_json(run / "reports" / "eval.json", j);
  write_text(run / "metrics.csv", metrics_csv(rows));
  for (int m : missing) std::clog << "warning: missing generated frame " << m << '\n';
  std::cout << "mean_psnr=" << report.mean_psnr << " frames=" << per_frame.size() << " missing=" << missing.size()
            << '\n';
  return per_frame.empty() ? kExitIo : kExitOk;
}

int cmd_cape_analyze(const Common& common, const std::string& out_dir) {
  const RunConfig cfg = common.load();
  const int d = cfg.model.head_dim;
  Rng rng(cfg.seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Vec q(d), k(d);
  for (int i = 0; i < d; ++i) q[i] = n(rng), k[i] = n(rng);

  const fs::path out(out_dir);
  json summary;
  bool ok = true;
  for (bool enabled : {true, false}) {
    SweepSpec rot;
    rot.mode = SweepMode::Rotation;
    rot.cape_enabled = enabled;
    SweepSpec tr;
    tr.mode = SweepMode::Translation;
    tr.axis = Vec3::UnitX();
    tr.start = -2.0;
    tr.stop = 2.0;
    tr.n_samples = 401;
    tr.cape_enabled = enabled;
    const SweepCurve rc = sweep_analysis(q, k, rot);
    const SweepCurve tc = sweep_analysis(q, k, tr);
    const std::string suffix = enabled ? "" : "_nocape";
    write_text(out / ("rotation" + suffix + ".csv"), rc.to_csv());
    write_text(out / ("translation" + suffix + ".csv"), tc.to_csv());
    const double period = rotation_period_error(rc);
    const double affine = translation_affine_residual(tc);
    json s = {{"rotation_period_error", period},
              {"translation_affine_residual", affine},
              {"rotation_range", curve_range(rc)},
              {"translation_range", curve_range(tc)}};
    if (enabled) {
      s["periodic"] = period <= 1e-6;
      s["affine"] = affine < 1e-9;
      ok = ok && period <= 1e-6 && affine < 1e-9;
    } else {
      const bool constant = curve_range(rc) <= 1e-12 && curve_range(tc) <= 1e-12;
      s["constant"] = constant;
      ok = ok && constant;
    }
    summary[enabled ? "cape" : "no_cape"] = s;
  }
  write_json(out / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return ok ? kExitOk : kExitNumeric;
}

int cmd_ablate(const Common& common, const std::string& causal_ck, const std::string& noncausal_ck,
               const std::string& dataset, const std::string& run_dir) {
  const RunConfig cfg = common.load();
  if (causal_ck.empty() && noncausal_ck.empty()) throw ConfigError("ablate needs --causal and/or --noncausal");
  std::shared_ptr<const DenoiserParams> causal, noncausal;
  if (!causal_ck.empty()) causal = load_model(causal_ck, cfg.eval.use_ema);
  if (!noncausal_ck.empty()) noncausal = load_model(noncausal_ck, cfg.eval.use_ema);
  const auto scenes = load_heldout_scenes(dataset, cfg.train);
  const fs::path run(run_dir);
  write_json(run / "config.json", cfg);
  const AblationResult r = run_ablation(causal, noncausal, scenes, cfg.eval, cfg.engine);
  write_text(run / "metrics.csv", metrics_csv(r.rows));
  write_text(run / "reports" / "ablation.csv", r.table.to_csv());
  write_text(run / "reports" / "ablation.txt", r.table.to_text());
  json reports = json::object();
  for (const auto& [key, rep] : r.reports) {
    reports[key.mode + "_N" + std::to_string(key.n_inputs) + "_F" + std::to_string(key.frames)] = rep;
  }
  write_json(run / "reports" / "ablation_reports.json", reports);
  std::cout << r.table.to_text();
  return kExitOk;
}

Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) std::thread([] { g_service->stop(); }).detach();
}

int cmd_serve(const Common& common, const std::string& checkpoint, std::optional<int> port, const std::string& host,
              const std::string& static_dir) {
  std::vector<std::string> extra;
  if (port) extra.push_back("service.port=" + std::to_string(*port));
  if (!host.empty()) extra.push_back("service.host=\"" + host + "\"");
  if (!static_dir.empty()) extra.push_back("service.static_dir=\"" + static_dir + "\"");
  const RunConfig cfg = common.load(extra);
  std::shared_ptr<const DenoiserParams> params;
  if (!checkpoint.empty()) {
    params = load_model(checkpoint, cfg.eval.use_ema);
  } else {
    std::clog << "warning: no checkpoint given; session endpoints answer 503\n";
  }
  Service service(params, cfg);
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  service.serve_forever();
  g_service = nullptr;
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Causal multi-view diffusion toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string out, dataset, run_dir, checkpoint, inputs, targets, window, sweep, causal_ck, noncausal_ck, host,
      static_dir;
  std::optional<int> scenes, steps, scene_index, num_targets, port;
  bool non_causal = false, resume = false, parallel = false;

  auto* render = app.add_subcommand("render-dataset", "Render a synthetic multi-view dataset");
  add_common(render, common);
  render->add_option("-o,--out", out, "Output directory")->required();
  render->add_option("--scenes", scenes, "Number of scenes");

  auto* train = app.add_subcommand("train", "Train a denoiser");
  add_common(train, common);
  train->add_option("-d,--dataset", dataset, "Dataset directory")->required();
  train->add_option("-r,--run-dir", run_dir, "Run directory")->required();
  train->add_option("--steps", steps, "Total optimizer steps");
  train->add_flag("--non-causal", non_causal, "Train the full-attention baseline");
  train->add_flag("--resume", resume, "Continue from <run-dir>/checkpoints/latest.ckpt");

  auto* roll = app.add_subcommand("rollout", "Generate target views autoregressively");
  add_common(roll, common);
  roll->add_option("-k,--checkpoint", checkpoint, "Checkpoint file")->required();
  roll->add_option("-d,--dataset", dataset, "Dataset directory")->required();
  roll->add_option("-r,--run-dir", run_dir, "Run directory")->required();
  roll->add_option("--scene", scene_index, "Scene index (default: first held-out scene)");
  roll->add_option("--inputs", inputs, "Comma-separated input frame indices (default 0)");
  roll->add_option("--targets", targets, "Comma-separated target frame indices");
  roll->add_option("-m,--num-targets", num_targets, "Consecutive targets after the last input (default 7)");
  roll->add_option("--window-k", window, "Window size or 'all'");
  roll->add_option("--window-sweep", sweep, "Comma-separated window sizes, e.g. 1,4,all");
  roll->add_flag("--parallel", parallel, "Joint non-causal denoising instead of autoregression");

  auto* eval = app.add_subcommand("eval", "Score a rollout run directory against ground truth");
  eval->add_option("-r,--run-dir", run_dir, "Run directory")->required();
  eval->add_option("-d,--dataset", dataset, "Dataset directory (default: the one recorded in the run)");

  auto* cape = app.add_subcommand("cape-analyze", "Score sweeps under key-pose rotation and translation");
  add_common(cape, common);
  cape->add_option("-o,--out", out, "Output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Causal vs non-causal grid over input count and sequence length");
  add_common(ablate, common);
  ablate->add_option("--causal", causal_ck, "Causal checkpoint");
  ablate->add_option("--noncausal", noncausal_ck, "Non-causal checkpoint");
  ablate->add_option("-d,--dataset", dataset, "Dataset directory")->required();
  ablate->add_option("-r,--run-dir", run_dir, "Run directory")->required();

  auto* serve = app.add_subcommand("serve", "Serve the session API over HTTP and WebSocket");
  add_common(serve, common);
  serve->add_option("-k,--checkpoint", checkpoint, "Checkpoint file");
  serve->add_option("--port", port, "TCP port");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--static", static_dir, "Directory served at /");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*render) return cmd_render_dataset(common, out, scenes);
    if (*train) return cmd_train(common, dataset, run_dir, steps, non_causal, resume);
    if (*roll) {
      return cmd_rollout(common, checkpoint, dataset, run_dir, scene_index, inputs, targets, num_targets, window, sweep,
                         parallel);
    }
    if (*eval) return cmd_eval(run_dir, dataset);
    if (*cape) return cmd_cape_analyze(common, out);
    if (*ablate) return cmd_ablate(common, causal_ck, noncausal_ck, dataset, run_dir);
    if (*serve) return cmd_serve(common, checkpoint, port, host, static_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace causnvs
