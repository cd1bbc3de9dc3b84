#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "causnvs/denoiser.hpp"
#include "causnvs/engine.hpp"
#include "causnvs/evaluation.hpp"
#include "causnvs/training.hpp"
#include "causnvs/worldgen.hpp"
#include "json.hpp"

namespace causnvs {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int max_sessions = 64;
  /// Wait for a running generation instead of answering 409.
  bool queue_when_busy = false;
  /// Directory served under / (the viewer build); empty disables.
  std::string static_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

/// Every module's settings in one serializable document.
struct RunConfig {
  std::uint64_t seed = 0;  // rollout / session seed
  DatasetConfig dataset;
  DenoiserConfig model;
  TrainConfig train;
  EngineConfig engine;
  EvalConfig eval;
  ServiceConfig service;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Strict: every key must be present (use parse_run_config for partial documents).
void from_json(const nlohmann::json& j, RunConfig& c);

/// Recursively overlays `overlay` onto `base`. Objects merge key by key,
/// anything else replaces. Keys absent from base throw ConfigError naming
/// the dotted path.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& overlay, const std::string& path = "");

/// Applies "a.b.c=value"; value is parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Defaults, then the overlay document, then the overrides. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& overlay, const std::vector<std::string>& overrides = {});

/// Reads a JSON config file (nullopt = defaults only) and applies overrides.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides = {});

}  // namespace causnvs
