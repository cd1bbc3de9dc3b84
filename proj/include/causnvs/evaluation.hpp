#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "causnvs/denoiser.hpp"
#include "causnvs/engine.hpp"
#include "causnvs/metrics.hpp"
#include "causnvs/worldgen.hpp"
#include "json.hpp"

namespace causnvs {

/// Held-out evaluation protocol shared by the CLI and the acceptance suite.
struct EvalConfig {
  std::vector<int> n_inputs = {1, 2, 4};
  std::vector<int> frame_counts = {2, 4, 8, 32};
  int targets = 4;        // M for the input-count sweep
  int drift_frames = 32;  // sequence length of the drift rollout (1 input + F - 1 targets)
  int max_scenes = 8;     // held-out scenes used (0 = all)
  int cases_per_scene = 2;
  std::uint64_t seed = 0;
  bool use_ema = true;
  bool warp = true;  // also score warp consistency between consecutive targets

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

enum class InferenceMode { Autoregressive, Parallel };

/// Frames of one scene used as inputs and targets (indices into the scene's poses).
struct EvalCase {
  std::size_t scene = 0;
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> targets;
  std::uint64_t seed = 0;
};

struct CaseResult {
  std::vector<Image> generated;
  std::vector<double> psnr;                     // per target
  std::vector<std::optional<double>> warp_psnr; // target k warped into k + 1; last is nullopt
  std::vector<FrameDiagnostics> diagnostics;
};

CaseResult run_case(const std::shared_ptr<const DenoiserParams>& params, const SceneData& scene, const EvalCase& c,
                    const EngineConfig& engine, InferenceMode mode, bool warp);

/// Accumulated per-frame rows and summary of a set of cases.
struct SweepResult {
  std::vector<MetricsRow> rows;
  EvalReport report;
};

SweepResult run_cases(const std::shared_ptr<const DenoiserParams>& params, std::span<const SceneData> scenes,
                      std::span<const EvalCase> cases, const EngineConfig& engine, InferenceMode mode, bool warp,
                      const std::string& run_id, const std::string& model, const std::string& mode_name, int n,
                      int f);

/// Random frames: the first n become inputs, the other f - n targets.
std::vector<EvalCase> sequence_cases(std::span<const SceneData> scenes, int n, int f, const EvalConfig& config);

/// Same M targets for every N; inputs nested (the N = 1 input is part of N = 2, ...).
std::map<int, std::vector<EvalCase>> input_sweep_cases(std::span<const SceneData> scenes, const EvalConfig& config);

/// One input followed by drift_frames - 1 consecutive trajectory frames.
std::vector<EvalCase> drift_cases(std::span<const SceneData> scenes, const EvalConfig& config);

/// Table over {causal-AR, noncausal-parallel, noncausal-AR} x N x F. Either model may be null;
/// cells with N >= F are skipped.
struct AblationResult {
  AblationTable table;
  std::vector<MetricsRow> rows;
  std::map<AblationKey, EvalReport> reports;
};

AblationResult run_ablation(const std::shared_ptr<const DenoiserParams>& causal_model,
                            const std::shared_ptr<const DenoiserParams>& noncausal_model,
                            std::span<const SceneData> scenes, const EvalConfig& config, const EngineConfig& engine);

}  // namespace causnvs
