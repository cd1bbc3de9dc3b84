#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "causnvs/errors.hpp"
#include "causnvs/training.hpp"

using namespace causnvs;
namespace fs = std::filesystem;

namespace {

DenoiserConfig tiny_model() {
  DenoiserConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.width = 16;
  c.heads = 2;
  c.head_dim = 8;
  c.depth = 2;
  c.framewise_attention_at = {1};
  c.noise_embed_dim = 8;
  c.mlp_ratio = 2;
  c.num_timesteps = 16;
  return c;
}

DatasetConfig tiny_dataset() {
  DatasetConfig d;
  d.n_scenes = 3;
  d.poses_per_scene = 12;
  d.image_size = 8;
  d.render_samples = 1;
  return d;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.steps = 6;
  t.frames = 4;
  t.holdout_scenes = 1;
  t.checkpoint_every = 2;
  t.log_every = 0;
  t.optimizer.learning_rate = 1e-3;
  t.optimizer.warmup_steps = 2;
  return t;
}

std::vector<SceneData> scenes() {
  std::vector<SceneData> s;
  for (int i = 0; i < 2; ++i) s.push_back(make_scene(tiny_dataset(), i));
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("causnvs_train_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Training, CausalBatchHasIndependentTimesteps) {
  const auto sc = scenes();
  const auto schedule = make_schedule(ScheduleKind::Cosine, 16);
  TrainConfig t = tiny_train();
  Rng rng(1);
  int unequal = 0;
  for (int i = 0; i < 50; ++i) {
    const auto batch = make_training_batch(t, sc, schedule, rng);
    ASSERT_EQ(batch.size(), 4u);
    std::set<int> ts;
    for (const auto& f : batch) {
      EXPECT_EQ(f.loss_weight, 1.0);
      EXPECT_GE(f.timestep, 0);
      EXPECT_LT(f.timestep, 16);
      ts.insert(f.timestep);
    }
    unequal += ts.size() > 1;
  }
  EXPECT_GT(unequal, 40);
}

TEST(Training, NoncausalRegimes) {
  const auto sc = scenes();
  const auto schedule = make_schedule(ScheduleKind::Cosine, 16);
  TrainConfig t = tiny_train();
  t.causal = false;
  Rng rng(2);
  std::set<int> contexts;
  for (int i = 0; i < 60; ++i) {
    const auto batch = make_training_batch(t, sc, schedule, rng);
    int n_ctx = 0;
    while (n_ctx < 4 && batch[n_ctx].loss_weight == 0.0) ++n_ctx;
    EXPECT_GE(n_ctx, 1);
    EXPECT_LE(n_ctx, 3);
    contexts.insert(n_ctx);
    for (int f = 0; f < n_ctx; ++f) EXPECT_EQ(batch[f].timestep, 0);
    for (int f = n_ctx; f < 4; ++f) {
      EXPECT_EQ(batch[f].loss_weight, 1.0);
      EXPECT_EQ(batch[f].timestep, batch[n_ctx].timestep);
    }
  }
  EXPECT_EQ(contexts.size(), 3u);

  t.noncausal_regime = NoncausalRegime::Shared;
  for (int i = 0; i < 20; ++i) {
    const auto batch = make_training_batch(t, sc, schedule, rng);
    for (const auto& f : batch) {
      EXPECT_EQ(f.timestep, batch[0].timestep);
      EXPECT_EQ(f.loss_weight, 1.0);
    }
  }
  EXPECT_EQ(noncausal_regime_from_string("shared"), NoncausalRegime::Shared);
  EXPECT_EQ(to_string(NoncausalRegime::CleanContext), "clean-context");
  EXPECT_THROW(noncausal_regime_from_string("other"), std::exception);
}

TEST(Training, ZeroStepsWritesInitialCheckpoint) {
  const auto dir = temp_dir("zero");
  TrainConfig t = tiny_train();
  t.steps = 0;
  auto state = init_training(tiny_model(), t);
  const auto init = state.params.values;
  run_training(state, t, scenes(), make_schedule(ScheduleKind::Cosine, 16), {dir / "ckpt", dir / "loss.csv"});
  EXPECT_TRUE(fs::exists(dir / "ckpt" / "latest.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "ckpt" / "step_0000000.ckpt"));
  EXPECT_EQ(slurp(dir / "loss.csv"), "step,loss,grad_norm,lr\n");
  EXPECT_EQ(load_training_checkpoint(dir / "ckpt" / "latest.ckpt").params.values, init);
  fs::remove_all(dir);
}

TEST(Training, ResumeIsBitwise) {
  const auto sc = scenes();
  const auto schedule = make_schedule(ScheduleKind::Cosine, 16);
  const TrainConfig t = tiny_train();
  const auto a = temp_dir("straight"), b = temp_dir("resumed");

  auto straight = init_training(tiny_model(), t);
  run_training(straight, t, sc, schedule, {a / "ckpt", a / "loss.csv"});

  TrainConfig first = t;
  first.steps = 3;
  auto part = init_training(tiny_model(), first);
  run_training(part, first, sc, schedule, {b / "ckpt", b / "loss.csv"});
  auto resumed = load_training_checkpoint(b / "ckpt" / "latest.ckpt");
  EXPECT_EQ(resumed.optimizer.step, 3);
  run_training(resumed, t, sc, schedule, {b / "ckpt", b / "loss.csv"});

  EXPECT_EQ(resumed.params.values, straight.params.values);
  EXPECT_EQ(resumed.optimizer.ema, straight.optimizer.ema);
  EXPECT_EQ(slurp(a / "loss.csv"), slurp(b / "loss.csv"));
  std::istringstream rows(slurp(a / "loss.csv"));
  std::string line;
  int n = 0;
  while (std::getline(rows, line)) ++n;
  EXPECT_EQ(n, 7);
  for (const char* f : {"step_0000002.ckpt", "step_0000004.ckpt", "step_0000006.ckpt"}) {
    EXPECT_TRUE(fs::exists(a / "ckpt" / f)) << f;
  }
  EXPECT_EQ(load_training_checkpoint(a / "ckpt" / "latest.ckpt").params.values, straight.params.values);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Training, CheckpointKeepsRngAndConfig) {
  const auto dir = temp_dir("rng");
  TrainConfig t = tiny_train();
  t.seed = 77;
  auto state = init_training(tiny_model(), t);
  state.rng.discard(13);
  save_training_checkpoint(dir / "x.ckpt", state, t);
  auto back = load_training_checkpoint(dir / "x.ckpt");
  EXPECT_EQ(back.rng(), state.rng());
  const auto ck = load_checkpoint(dir / "x.ckpt");
  EXPECT_EQ(ck.header.at("train").at("seed"), 77);
  fs::remove_all(dir);
}

TEST(Training, DeterministicFromSeed) {
  const auto sc = scenes();
  const auto schedule = make_schedule(ScheduleKind::Cosine, 16);
  const TrainConfig t = tiny_train();
  auto run = [&] {
    auto s = init_training(tiny_model(), t);
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(training_step(s, t, sc, schedule).loss);
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, ConfigValidationAndJson) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  TrainConfig bad = t;
  bad.frames = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = t;
  bad.frames = 1;
  EXPECT_NO_THROW(bad.validate());
  bad.causal = false;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = t;
  bad.steps = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  const nlohmann::json j = t;
  EXPECT_EQ(j.at("noncausal_regime"), "clean-context");
  const TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Training, HoldoutSplit) {
  const auto dir = temp_dir("split");
  make_dataset(tiny_dataset(), dir / "ds");
  const TrainConfig t = tiny_train();
  const auto train = load_training_scenes(dir / "ds", t);
  const auto held = load_heldout_scenes(dir / "ds", t);
  ASSERT_EQ(train.size(), 2u);
  ASSERT_EQ(held.size(), 1u);
  EXPECT_NE(held[0].name, train[0].name);
  EXPECT_NE(held[0].name, train[1].name);
  TrainConfig all = t;
  all.holdout_scenes = 3;
  EXPECT_THROW(load_training_scenes(dir / "ds", all), std::exception);
  fs::remove_all(dir);
}
