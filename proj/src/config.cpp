#include "causnvs/config.hpp"

#include <fstream>
#include <sstream>

#include "causnvs/errors.hpp"

namespace causnvs {

using json = nlohmann::json;

void ServiceConfig::validate() const {
  if (port < 0 || port > 65535) throw ConfigError("service: port must be in [0, 65535]");
  if (max_sessions < 1) throw ConfigError("service: max_sessions must be >= 1");
  if (host.empty()) throw ConfigError("service: host must not be empty");
}

void to_json(json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"max_sessions", c.max_sessions},
       {"queue_when_busy", c.queue_when_busy},
       {"static_dir", c.static_dir}};
}

void from_json(const json& j, ServiceConfig& c) {
  c.host = j.at("host").get<std::string>();
  c.port = j.at("port").get<int>();
  c.max_sessions = j.at("max_sessions").get<int>();
  c.queue_when_busy = j.at("queue_when_busy").get<bool>();
  c.static_dir = j.at("static_dir").get<std::string>();
}

void RunConfig::validate() const {
  try {
    dataset.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  model.validate();
  if (model.image_size != dataset.image_size) throw ConfigError("model.image_size must equal dataset.image_size");
  train.validate();
  engine.validate(model);
  eval.validate();
  service.validate();
}

void to_json(json& j, const RunConfig& c) {
  j = {{"seed", c.seed},   {"dataset", c.dataset}, {"model", c.model},    {"train", c.train},
       {"engine", c.engine}, {"eval", c.eval},     {"service", c.service}};
}

void from_json(const json& j, RunConfig& c) {
  c.seed = j.at("seed").get<std::uint64_t>();
  c.dataset = j.at("dataset").get<DatasetConfig>();
  c.model = j.at("model").get<DenoiserConfig>();
  c.train = j.at("train").get<TrainConfig>();
  c.engine = EngineConfig{};
  from_json(j.at("engine"), c.engine);
  c.eval = j.at("eval").get<EvalConfig>();
  c.service = j.at("service").get<ServiceConfig>();
}

json merge_config(const json& base, const json& overlay, const std::string& path) {
  if (!base.is_object() || !overlay.is_object()) return overlay;
  json out = base;
  for (const auto& [key, value] : overlay.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    const json& b = base[key];
    // Null defaults (optional settings) accept any value.
    out[key] = b.is_object() && value.is_object() ? merge_config(b, value, where) : value;
  }
  return out;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    parts.push_back(p);
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  config = merge_config(config, patch);
}

RunConfig parse_run_config(const json& overlay, const std::vector<std::string>& overrides) {
  json doc = RunConfig{};
  if (!overlay.is_null()) {
    if (!overlay.is_object()) throw ConfigError("config must be a JSON object");
    doc = merge_config(doc, overlay);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c;
  try {
    from_json(doc, c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  json overlay;
  if (file) {
    std::ifstream is(*file);
    if (!is) throw IoError("cannot read config " + file->string());
    try {
      overlay = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError(file->string() + ": " + e.what());
    }
  }
  return parse_run_config(overlay, overrides);
}

}  // namespace causnvs
