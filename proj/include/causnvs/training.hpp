#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "causnvs/denoiser.hpp"
#include "causnvs/diffusion.hpp"
#include "causnvs/worldgen.hpp"
#include "json.hpp"

namespace causnvs {

/// How a non-causal model's training sequences are noised.
enum class NoncausalRegime {
  /// A random number (1..F-1) of leading frames stay clean and unsupervised;
  /// the rest share one timestep.
  CleanContext,
  /// Every frame shares one timestep.
  Shared,
};

std::string to_string(NoncausalRegime r);
NoncausalRegime noncausal_regime_from_string(const std::string& s);

struct TrainConfig {
  int steps = 5000;
  int frames = 8;  // sequence length F
  bool causal = true;
  NoncausalRegime noncausal_regime = NoncausalRegime::CleanContext;
  int holdout_scenes = 8;  // the last scenes of the dataset are never trained on
  int checkpoint_every = 1000;
  int log_every = 100;  // progress lines on stderr; 0 disables
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Everything a bitwise resume needs.
struct TrainingState {
  DenoiserParams params;
  OptimizerState optimizer;
  Rng rng;
};

TrainingState init_training(const DenoiserConfig& model, const TrainConfig& train);

/// One training sequence: scene chosen uniformly, F frames without replacement,
/// timesteps per the causal / non-causal regime, fresh noise per frame.
std::vector<TrainingFrame> make_training_batch(const TrainConfig& train, std::span<const SceneData> scenes,
                                               const NoiseSchedule& schedule, Rng& rng);

StepResult training_step(TrainingState& state, const TrainConfig& train, std::span<const SceneData> scenes,
                         const NoiseSchedule& schedule);

/// Checkpoint carrying params, optimizer moments, EMA, the RNG state and the train config.
void save_training_checkpoint(const std::filesystem::path& path, const TrainingState& state, const TrainConfig& train);
TrainingState load_training_checkpoint(const std::filesystem::path& path);

struct TrainingRun {
  std::filesystem::path checkpoint_dir;  // receives step_XXXXXXX.ckpt and latest.ckpt
  std::filesystem::path loss_csv;        // step,loss,grad_norm,lr (one row per step)
};

/// Trains from `state` (fresh or resumed) up to train.steps, writing
/// periodic checkpoints and the loss log. On a non-finite loss a diagnostic
/// checkpoint is written next to the others and NumericError propagates.
void run_training(TrainingState& state, const TrainConfig& train, std::span<const SceneData> scenes,
                  const NoiseSchedule& schedule, const TrainingRun& run);

/// Scenes [0, n - holdout) of a loaded dataset.
std::vector<SceneData> load_training_scenes(const std::filesystem::path& dataset_dir, const TrainConfig& train);
/// Scenes [n - holdout, n).
std::vector<SceneData> load_heldout_scenes(const std::filesystem::path& dataset_dir, const TrainConfig& train);

}  // namespace causnvs
