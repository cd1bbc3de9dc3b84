#include "causnvs/training.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "causnvs/errors.hpp"

namespace causnvs {

namespace {

std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng rng_from_string(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (is.fail()) throw IoError("checkpoint: malformed rng state");
  return rng;
}

std::string step_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%07lld.ckpt", static_cast<long long>(step));
  return buf;
}

/// Keeps the header and rows up to `step`; creates the file when missing.
void prepare_loss_csv(const std::filesystem::path& path, std::int64_t step) {
  const std::string header = "step,loss,grad_norm,lr";
  std::vector<std::string> keep;
  std::ifstream is(path);
  std::string line;
  if (is && std::getline(is, line) && line == header) {
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= step) keep.push_back(line);
    }
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << header << '\n';
  for (const auto& l : keep) os << l << '\n';
}

std::vector<SceneData> load_range(const std::filesystem::path& dir, const TrainConfig& train, bool heldout) {
  const DatasetManifest m = load_manifest(dir);
  const int n = static_cast<int>(m.scenes.size());
  if (train.holdout_scenes >= n) throw ConfigError("holdout_scenes must leave at least one training scene");
  const int split = n - train.holdout_scenes;
  std::vector<SceneData> out;
  for (int i = heldout ? split : 0; i < (heldout ? n : split); ++i) out.push_back(load_scene(dir, m.scenes[i]));
  return out;
}

}  // namespace

std::string to_string(NoncausalRegime r) { return r == NoncausalRegime::CleanContext ? "clean-context" : "shared"; }

NoncausalRegime noncausal_regime_from_string(const std::string& s) {
  if (s == "clean-context") return NoncausalRegime::CleanContext;
  if (s == "shared") return NoncausalRegime::Shared;
  throw ConfigError("unknown noncausal_regime '" + s + "'");
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (frames < 1) throw ConfigError("train: frames must be >= 1");
  if (!causal && noncausal_regime == NoncausalRegime::CleanContext && frames < 2) {
    throw ConfigError("train: clean-context training needs frames >= 2");
  }
  if (holdout_scenes < 0) throw ConfigError("train: holdout_scenes must be >= 0");
  if (checkpoint_every < 0 || log_every < 0) throw ConfigError("train: intervals must be >= 0");
  const auto& o = optimizer;
  if (!(o.learning_rate > 0) || o.warmup_steps < 0 || !(o.beta1 >= 0 && o.beta1 < 1) || !(o.beta2 >= 0 && o.beta2 < 1) ||
      !(o.epsilon > 0) || !(o.ema_decay >= 0 && o.ema_decay < 1)) {
    throw ConfigError("train: invalid optimizer settings");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"frames", c.frames},
       {"causal", c.causal},
       {"noncausal_regime", to_string(c.noncausal_regime)},
       {"holdout_scenes", c.holdout_scenes},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"seed", c.seed},
       {"optimizer", c.optimizer}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.steps = j.at("steps").get<int>();
  c.frames = j.at("frames").get<int>();
  c.causal = j.at("causal").get<bool>();
  c.noncausal_regime = noncausal_regime_from_string(j.at("noncausal_regime").get<std::string>());
  c.holdout_scenes = j.at("holdout_scenes").get<int>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.log_every = j.at("log_every").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.optimizer = j.at("optimizer").get<OptimizerConfig>();
}

TrainingState init_training(const DenoiserConfig& model, const TrainConfig& train) {
  model.validate();
  train.validate();
  TrainingState s{DenoiserParams::init(model, train.seed), {}, Rng(train.seed ^ 0x5bd1e995ULL)};
  s.optimizer = OptimizerState::init(s.params);
  return s;
}

std::vector<TrainingFrame> make_training_batch(const TrainConfig& train, std::span<const SceneData> scenes,
                                               const NoiseSchedule& schedule, Rng& rng) {
  if (scenes.empty()) throw std::invalid_argument("training: no scenes");
  std::uniform_int_distribution<std::size_t> pick(0, scenes.size() - 1);
  const SceneData& scene = scenes[pick(rng)];
  const TrainingSample sample = sample_training_sequence(scene, train.frames, rng);
  const int f = train.frames;
  const int T = schedule.num_timesteps;

  std::vector<int> ts;
  std::vector<double> weights(static_cast<std::size_t>(f), 1.0);
  if (train.causal) {
    ts = sample_frame_timesteps(f, T, rng, false);
  } else if (train.noncausal_regime == NoncausalRegime::Shared) {
    ts = sample_frame_timesteps(f, T, rng, true);
  } else {
    const int n_ctx = std::uniform_int_distribution<int>(1, f - 1)(rng);
    ts = sample_frame_timesteps(f, T, rng, true);
    for (int i = 0; i < n_ctx; ++i) {
      ts[static_cast<std::size_t>(i)] = 0;
      weights[static_cast<std::size_t>(i)] = 0.0;
    }
  }

  std::vector<TrainingFrame> batch;
  for (int i = 0; i < f; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const Image& img = sample.images[k];
    batch.push_back({img, sample.poses[k], ts[k], gaussian_image(img.height, img.width, rng), weights[k]});
  }
  return batch;
}

StepResult training_step(TrainingState& state, const TrainConfig& train, std::span<const SceneData> scenes,
                         const NoiseSchedule& schedule) {
  const auto batch = make_training_batch(train, scenes, schedule, state.rng);
  return train_step(state.params, state.optimizer, batch, schedule, train.optimizer, train.causal);
}

void save_training_checkpoint(const std::filesystem::path& path, const TrainingState& state, const TrainConfig& train) {
  nlohmann::json header;
  header["train"] = train;
  header["rng_state"] = rng_to_string(state.rng);
  // Write then rename so an interrupted save never leaves a truncated checkpoint.
  const auto tmp = path.string() + ".tmp";
  save_checkpoint(tmp, header, state.params, &state.optimizer);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint to " + path.string() + ": " + ec.message());
}

TrainingState load_training_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.optimizer) throw IoError(path.string() + ": checkpoint has no optimizer state");
  if (!ck.header.contains("rng_state")) throw IoError(path.string() + ": checkpoint has no rng state");
  return {std::move(ck.params), std::move(*ck.optimizer), rng_from_string(ck.header["rng_state"].get<std::string>())};
}

void run_training(TrainingState& state, const TrainConfig& train, std::span<const SceneData> scenes,
                  const NoiseSchedule& schedule, const TrainingRun& run) {
  train.validate();
  std::filesystem::create_directories(run.checkpoint_dir);
  prepare_loss_csv(run.loss_csv, state.optimizer.step);
  std::ofstream log(run.loss_csv, std::ios::app);
  if (!log) throw IoError("cannot append to " + run.loss_csv.string());
  log.precision(9);

  auto checkpoint = [&] {
    save_training_checkpoint(run.checkpoint_dir / step_name(state.optimizer.step), state, train);
    save_training_checkpoint(run.checkpoint_dir / "latest.ckpt", state, train);
  };
  if (state.optimizer.step == 0) checkpoint();

  while (state.optimizer.step < train.steps) {
    StepResult r;
    try {
      r = training_step(state, train, scenes, schedule);
    } catch (const NumericError&) {
      save_training_checkpoint(run.checkpoint_dir / "failed.ckpt", state, train);
      throw;
    }
    const auto step = state.optimizer.step;
    log << step << ',' << r.loss << ',' << r.grad_norm << ',' << r.learning_rate << '\n';
    if (train.log_every > 0 && step % train.log_every == 0) {
      log.flush();
      std::clog << "step " << step << "/" << train.steps << " loss " << r.loss << " grad_norm " << r.grad_norm << '\n';
    }
    if ((train.checkpoint_every > 0 && step % train.checkpoint_every == 0) || step == train.steps) checkpoint();
  }
}

std::vector<SceneData> load_training_scenes(const std::filesystem::path& dataset_dir, const TrainConfig& train) {
  return load_range(dataset_dir, train, false);
}

std::vector<SceneData> load_heldout_scenes(const std::filesystem::path& dataset_dir, const TrainConfig& train) {
  return load_range(dataset_dir, train, true);
}

}  // namespace causnvs
