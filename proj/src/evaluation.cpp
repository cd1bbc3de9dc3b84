#include "causnvs/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "causnvs/errors.hpp"

namespace causnvs {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t scene_count(std::span<const SceneData> scenes, const EvalConfig& c) {
  if (c.max_scenes <= 0) return scenes.size();
  return std::min(scenes.size(), static_cast<std::size_t>(c.max_scenes));
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

void EvalConfig::validate() const {
  if (n_inputs.empty() || frame_counts.empty()) throw ConfigError("eval: n_inputs and frame_counts must be non-empty");
  for (int n : n_inputs) {
    if (n < 1) throw ConfigError("eval: n_inputs entries must be >= 1");
  }
  for (int f : frame_counts) {
    if (f < 2) throw ConfigError("eval: frame_counts entries must be >= 2");
  }
  if (targets < 1) throw ConfigError("eval: targets must be >= 1");
  if (drift_frames < 4) throw ConfigError("eval: drift_frames must be >= 4");
  if (cases_per_scene < 1) throw ConfigError("eval: cases_per_scene must be >= 1");
  if (max_scenes < 0) throw ConfigError("eval: max_scenes must be >= 0");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"n_inputs", c.n_inputs},
       {"frame_counts", c.frame_counts},
       {"targets", c.targets},
       {"drift_frames", c.drift_frames},
       {"max_scenes", c.max_scenes},
       {"cases_per_scene", c.cases_per_scene},
       {"seed", c.seed},
       {"use_ema", c.use_ema},
       {"warp", c.warp}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.n_inputs = j.at("n_inputs").get<std::vector<int>>();
  c.frame_counts = j.at("frame_counts").get<std::vector<int>>();
  c.targets = j.at("targets").get<int>();
  c.drift_frames = j.at("drift_frames").get<int>();
  c.max_scenes = j.at("max_scenes").get<int>();
  c.cases_per_scene = j.at("cases_per_scene").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.use_ema = j.at("use_ema").get<bool>();
  c.warp = j.at("warp").get<bool>();
}

CaseResult run_case(const std::shared_ptr<const DenoiserParams>& params, const SceneData& scene, const EvalCase& c,
                    const EngineConfig& engine, InferenceMode mode, bool warp) {
  std::vector<PosedImage> inputs;
  for (std::size_t i : c.inputs) inputs.push_back({scene.images.at(i), scene.poses.at(i)});
  std::vector<Pose> targets;
  for (std::size_t i : c.targets) targets.push_back(scene.poses.at(i));

  const RolloutResult r = mode == InferenceMode::Autoregressive
                              ? rollout(params, inputs, targets, engine, c.seed)
                              : generate_parallel_baseline(*params, inputs, targets, engine, c.seed);
  CaseResult out;
  out.generated = r.images;
  out.diagnostics = r.diagnostics;
  for (std::size_t k = 0; k < c.targets.size(); ++k) {
    out.psnr.push_back(psnr(r.images[k], scene.images[c.targets[k]]));
    std::optional<double> w;
    if (warp && k + 1 < c.targets.size()) {
      const Pose pi = scene.world_pose(c.targets[k]);
      const Pose pj = scene.world_pose(c.targets[k + 1]);
      w = warp_consistency(r.images[k], r.images[k + 1], depth(scene.spec, pi, scene.intrinsics), pi, pj,
                           scene.intrinsics);
    }
    out.warp_psnr.push_back(w);
  }
  return out;
}

SweepResult run_cases(const std::shared_ptr<const DenoiserParams>& params, std::span<const SceneData> scenes,
                      std::span<const EvalCase> cases, const EngineConfig& engine, InferenceMode mode, bool warp,
                      const std::string& run_id, const std::string& model, const std::string& mode_name, int n,
                      int f) {
  SweepResult s;
  std::vector<double> frame_sum;
  std::vector<int> frame_count;
  std::vector<std::optional<double>> all_warp;
  for (const auto& c : cases) {
    const CaseResult r = run_case(params, scenes[c.scene], c, engine, mode, warp);
    for (std::size_t k = 0; k < r.psnr.size(); ++k) {
      s.rows.push_back({run_id, model, mode_name, n, f, static_cast<int>(k), r.psnr[k], r.warp_psnr[k]});
      if (frame_sum.size() <= k) frame_sum.resize(k + 1, 0.0), frame_count.resize(k + 1, 0);
      frame_sum[k] += r.psnr[k];
      ++frame_count[k];
      all_warp.push_back(r.warp_psnr[k]);
    }
  }
  std::vector<double> per_frame;
  for (std::size_t k = 0; k < frame_sum.size(); ++k) per_frame.push_back(frame_sum[k] / frame_count[k]);
  nlohmann::json cfg = {{"model", model}, {"mode", mode_name}, {"N", n}, {"F", f}, {"cases", cases.size()},
                        {"engine", engine}};
  s.report = EvalReport::from_frames(run_id, per_frame, all_warp, cfg);
  // Mean over all target frames (equal-length cases make this the per-frame mean).
  double sum = 0.0;
  for (const auto& row : s.rows) sum += row.psnr;
  if (!s.rows.empty()) s.report.mean_psnr = sum / static_cast<double>(s.rows.size());
  return s;
}

std::vector<EvalCase> sequence_cases(std::span<const SceneData> scenes, int n, int f, const EvalConfig& config) {
  if (n >= f) throw std::invalid_argument("sequence_cases: need n < f");
  std::vector<EvalCase> out;
  for (std::size_t s = 0; s < scene_count(scenes, config); ++s) {
    for (int c = 0; c < config.cases_per_scene; ++c) {
      Rng rng(mix(config.seed ^ mix(s * 1000 + static_cast<std::uint64_t>(c)) ^ mix(static_cast<std::uint64_t>(f))));
      const TrainingSample sample = sample_training_sequence(scenes[s], f, rng);
      EvalCase e;
      e.scene = s;
      e.inputs.assign(sample.indices.begin(), sample.indices.begin() + n);
      e.targets.assign(sample.indices.begin() + n, sample.indices.end());
      e.seed = mix(rng());
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::map<int, std::vector<EvalCase>> input_sweep_cases(std::span<const SceneData> scenes, const EvalConfig& config) {
  const int max_n = *std::max_element(config.n_inputs.begin(), config.n_inputs.end());
  std::map<int, std::vector<EvalCase>> out;
  for (std::size_t s = 0; s < scene_count(scenes, config); ++s) {
    if (scenes[s].poses.size() < static_cast<std::size_t>(max_n + config.targets)) {
      throw std::invalid_argument("input_sweep_cases: scene has too few frames");
    }
    for (int c = 0; c < config.cases_per_scene; ++c) {
      Rng rng(mix(config.seed ^ mix(s * 1000 + static_cast<std::uint64_t>(c)) ^ 0x1234));
      const auto idx = shuffled_indices(scenes[s].poses.size(), rng);
      const std::vector<std::size_t> targets(idx.begin(), idx.begin() + config.targets);
      const std::uint64_t seed = mix(rng());
      for (int n : config.n_inputs) {
        EvalCase e;
        e.scene = s;
        e.targets = targets;
        e.inputs.assign(idx.begin() + config.targets, idx.begin() + config.targets + n);
        e.seed = seed;
        out[n].push_back(std::move(e));
      }
    }
  }
  return out;
}

std::vector<EvalCase> drift_cases(std::span<const SceneData> scenes, const EvalConfig& config) {
  std::vector<EvalCase> out;
  for (std::size_t s = 0; s < scene_count(scenes, config); ++s) {
    const std::size_t n = scenes[s].poses.size();
    if (n < static_cast<std::size_t>(config.drift_frames)) {
      throw std::invalid_argument("drift_cases: scene has too few frames");
    }
    for (int c = 0; c < config.cases_per_scene; ++c) {
      Rng rng(mix(config.seed ^ mix(s * 1000 + static_cast<std::uint64_t>(c)) ^ 0x5678));
      const std::size_t start = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      EvalCase e;
      e.scene = s;
      e.inputs = {start};
      for (int k = 1; k < config.drift_frames; ++k) e.targets.push_back((start + static_cast<std::size_t>(k)) % n);
      e.seed = mix(rng());
      out.push_back(std::move(e));
    }
  }
  return out;
}

AblationResult run_ablation(const std::shared_ptr<const DenoiserParams>& causal_model,
                            const std::shared_ptr<const DenoiserParams>& noncausal_model,
                            std::span<const SceneData> scenes, const EvalConfig& config, const EngineConfig& engine) {
  config.validate();
  AblationResult out;
  struct Arm {
    std::string mode;
    std::shared_ptr<const DenoiserParams> params;
    InferenceMode inference;
    std::string model;
  };
  std::vector<Arm> arms;
  if (causal_model) arms.push_back({"causal-AR", causal_model, InferenceMode::Autoregressive, "causal"});
  if (noncausal_model) {
    arms.push_back({"noncausal-parallel", noncausal_model, InferenceMode::Parallel, "noncausal"});
    arms.push_back({"noncausal-AR", noncausal_model, InferenceMode::Autoregressive, "noncausal"});
  }
  for (const auto& arm : arms) {
    for (int n : config.n_inputs) {
      for (int f : config.frame_counts) {
        if (n >= f) continue;
        const auto cases = sequence_cases(scenes, n, f, config);
        const std::string run_id = arm.mode + "_N" + std::to_string(n) + "_F" + std::to_string(f);
        auto sweep = run_cases(arm.params, scenes, cases, engine, arm.inference, config.warp, run_id, arm.model, arm.mode,
                               n, f);
        out.rows.insert(out.rows.end(), sweep.rows.begin(), sweep.rows.end());
        out.reports[{arm.mode, n, f}] = std::move(sweep.report);
      }
    }
  }
  out.table = ablation_table(out.reports);
  out.table.modes.clear();
  for (const auto& arm : arms) out.table.modes.push_back(arm.mode);
  return out;
}

}  // namespace causnvs
