#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "causnvs/config.hpp"
#include "causnvs/errors.hpp"

using namespace causnvs;
namespace fs = std::filesystem;

TEST(Config, DefaultsRoundTrip) {
  const RunConfig c = parse_run_config(nlohmann::json::object());
  EXPECT_EQ(c.model.width, 128);
  EXPECT_EQ(c.model.depth, 6);
  EXPECT_EQ(c.model.num_timesteps, 64);
  EXPECT_EQ(c.engine.sampler.num_steps, 16);
  EXPECT_EQ(c.engine.augmentation.context_noise_level, 2);
  EXPECT_EQ(c.train.frames, 8);
  EXPECT_EQ(c.service.max_sessions, 64);
  const nlohmann::json j = c;
  const RunConfig back = j.get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Config, PartialOverlayAndOverrides) {
  const nlohmann::json overlay = {{"train", {{"steps", 10}}}, {"engine", {{"window_k", 4}}}};
  const RunConfig c = parse_run_config(overlay, {"eval.targets=2", "service.host=0.0.0.0", "train.causal=false"});
  EXPECT_EQ(c.train.steps, 10);
  EXPECT_EQ(c.train.frames, 8);
  ASSERT_TRUE(c.engine.window_k.has_value());
  EXPECT_EQ(*c.engine.window_k, 4);
  EXPECT_EQ(c.eval.targets, 2);
  EXPECT_EQ(c.service.host, "0.0.0.0");
  EXPECT_FALSE(c.train.causal);
}

TEST(Config, UnknownKeysNameThePath) {
  try {
    parse_run_config({{"train", {{"stpes", 10}}}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.stpes"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_run_config(nlohmann::json::object(), {"nope.x=1"}), ConfigError);
  EXPECT_THROW(parse_run_config(nlohmann::json::object(), {"missing_equals"}), ConfigError);
}

TEST(Config, SemanticValidation) {
  EXPECT_THROW(parse_run_config({{"model", {{"image_size", 32}}}}), ConfigError);
  EXPECT_NO_THROW(parse_run_config({{"model", {{"image_size", 32}}}, {"dataset", {{"image_size", 32}}}}));
  EXPECT_THROW(parse_run_config(nlohmann::json::object(), {"engine.window_k=0"}), ConfigError);
  EXPECT_THROW(parse_run_config(nlohmann::json::object(), {"engine.sampler.eta=0.5"}), std::exception);
  EXPECT_THROW(parse_run_config(nlohmann::json::object(), {"service.port=-3"}), ConfigError);
}

TEST(Config, MergeSemantics) {
  const nlohmann::json base = {{"a", {{"b", 1}, {"c", 2}}}, {"d", nullptr}};
  const auto m = merge_config(base, {{"a", {{"c", 5}}}, {"d", {{"anything", true}}}});
  EXPECT_EQ(m.at("a").at("b"), 1);
  EXPECT_EQ(m.at("a").at("c"), 5);
  EXPECT_EQ(m.at("d").at("anything"), true);
  nlohmann::json j = base;
  apply_override(j, "a.b=[1,2]");
  EXPECT_EQ(j.at("a").at("b"), nlohmann::json::array({1, 2}));
  apply_override(j, "a.c=hello");
  EXPECT_EQ(j.at("a").at("c"), "hello");
}

TEST(Config, LoadFromFile) {
  const auto dir = fs::temp_directory_path() / "causnvs_config_test";
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "c.json");
    f << R"({"seed": 9, "eval": {"n_inputs": [1, 2]}})";
  }
  const RunConfig c = load_run_config(dir / "c.json", {"seed=11"});
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.eval.n_inputs, (std::vector<int>{1, 2}));
  {
    std::ofstream f(dir / "bad.json");
    f << "{not json";
  }
  EXPECT_THROW(load_run_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir / "missing.json"), IoError);
  EXPECT_EQ(load_run_config(std::nullopt).seed, 0u);
  fs::remove_all(dir);
}
