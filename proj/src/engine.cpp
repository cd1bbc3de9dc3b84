#include "causnvs/engine.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

#include "causnvs/errors.hpp"

namespace causnvs {

namespace {

using json = nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool same_image(const Image& a, const Image& b) { return a.same_shape(b) && a.data == b.data; }

bool same_pose(const Pose& a, const Pose& b) { return a.rotation == b.rotation && a.translation == b.translation; }

void check_image(const Image& img, const DenoiserConfig& model) {
  if (img.height != model.image_size || img.width != model.image_size || img.size() != img.data.size() ||
      img.data.size() != static_cast<std::size_t>(img.height) * img.width * 3) {
    throw std::invalid_argument("image must be " + std::to_string(model.image_size) + "x" +
                                std::to_string(model.image_size) + " RGB");
  }
}

void check_pose(const Pose& p) {
  if (!p.is_valid(1e-5)) throw std::invalid_argument("pose is not a rigid transform");
}

std::vector<Image> ddim_joint(const DenoiserParams& params, std::vector<NoisyFrame> frames, std::size_t first_target,
                              const NoiseSchedule& schedule, const SamplerConfig& sampler, bool causal, Rng& rng) {
  sampler.validate(schedule);
  const int s = params.config.image_size;
  const auto ts = ddim_timesteps(schedule, sampler.num_steps);
  for (std::size_t f = first_target; f < frames.size(); ++f) frames[f].image = gaussian_image(s, s, rng);
  ForwardOptions opts;
  opts.causal = causal;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_next = k + 1 < ts.size() ? ts[k + 1] : -1;
    for (std::size_t f = first_target; f < frames.size(); ++f) frames[f].timestep = t;
    const auto out = denoiser_forward(params, frames, opts);
    for (std::size_t f = first_target; f < frames.size(); ++f) {
      frames[f].image = ddim_step(frames[f].image, out.eps[f], t, t_next, schedule, sampler.clip_denoised);
    }
  }
  std::vector<Image> result;
  for (std::size_t f = first_target; f < frames.size(); ++f) {
    Image x = frames[f].image;
    for (auto& v : x.data) v = std::clamp(v, -1.0, 1.0);
    result.push_back(std::move(x));
  }
  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void EngineConfig::validate(const DenoiserConfig& model) const {
  model.validate();
  if (window_k && *window_k < 1) throw ConfigError("engine: window_k must be >= 1");
  if (cache_capacity && *cache_capacity < 1) throw ConfigError("engine: cache_capacity must be >= 1");
  try {
    const NoiseSchedule sch = make_schedule(schedule, model.num_timesteps);
    sampler.validate(sch);
    augmentation.validate(sch);
    distance.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("engine: ") + e.what());
  }
}

void to_json(json& j, const EngineConfig& c) {
  j = json::object();
  j["window_k"] = c.window_k ? json(*c.window_k) : json();
  j["cache_capacity"] = c.cache_capacity ? json(*c.cache_capacity) : json();
  j["sampler"] = {{"num_steps", c.sampler.num_steps},
                  {"eta", c.sampler.eta},
                  {"seed", c.sampler.seed},
                  {"clip_denoised", c.sampler.clip_denoised}};
  j["augmentation"] = {{"context_noise_level", c.augmentation.context_noise_level},
                       {"enabled", c.augmentation.enabled},
                       {"augment_inputs", c.augmentation.augment_inputs}};
  j["distance"] = {{"rotation_weight", c.distance.rotation_weight},
                   {"translation_scale", c.distance.translation_scale}};
  j["schedule"] = to_string(c.schedule);
}

void from_json(const json& j, EngineConfig& c) {
  check_keys(j, {"window_k", "cache_capacity", "sampler", "augmentation", "distance", "schedule"}, "engine");
  try {
    if (j.contains("window_k")) {
      c.window_k = j["window_k"].is_null() ? std::nullopt : std::optional<int>(j["window_k"].get<int>());
    }
    if (j.contains("cache_capacity")) {
      c.cache_capacity = j["cache_capacity"].is_null() ? std::nullopt
                                                       : std::optional<std::size_t>(j["cache_capacity"].get<std::size_t>());
    }
    if (j.contains("sampler")) {
      const auto& s = j["sampler"];
      check_keys(s, {"num_steps", "eta", "seed", "clip_denoised"}, "engine.sampler");
      read_opt(s, "num_steps", c.sampler.num_steps);
      read_opt(s, "eta", c.sampler.eta);
      read_opt(s, "seed", c.sampler.seed);
      read_opt(s, "clip_denoised", c.sampler.clip_denoised);
    }
    if (j.contains("augmentation")) {
      const auto& a = j["augmentation"];
      check_keys(a, {"context_noise_level", "enabled", "augment_inputs"}, "engine.augmentation");
      read_opt(a, "context_noise_level", c.augmentation.context_noise_level);
      read_opt(a, "enabled", c.augmentation.enabled);
      read_opt(a, "augment_inputs", c.augmentation.augment_inputs);
    }
    if (j.contains("distance")) {
      const auto& d = j["distance"];
      check_keys(d, {"rotation_weight", "translation_scale"}, "engine.distance");
      read_opt(d, "rotation_weight", c.distance.rotation_weight);
      read_opt(d, "translation_scale", c.distance.translation_scale);
    }
    if (j.contains("schedule")) c.schedule = schedule_kind_from_string(j["schedule"].get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("engine: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("engine: ") + e.what());
  }
}

std::string to_string(FrameSource s) { return s == FrameSource::Input ? "input" : "generated"; }

void to_json(json& j, const FrameDiagnostics& d) {
  j = {{"frame_id", d.frame_id},
       {"window", d.window},
       {"wall_ms", d.wall_ms},
       {"steps", d.steps},
       {"framewise_flops", d.framewise_flops}};
}

// ---------------------------------------------------------------------------
// Session

Session::Session(std::shared_ptr<const DenoiserParams> params, EngineConfig config, std::uint64_t seed)
    : params_(std::move(params)), config_(std::move(config)), seed_(seed), rng_(seed) {
  if (!params_) throw ConfigError("session: no parameters");
  config_.validate(params_->config);
  schedule_ = make_schedule(config_.schedule, params_->config.num_timesteps);
  for (int l = 0; l < params_->config.num_framewise_layers(); ++l) caches_.emplace_back(config_.cache_capacity);
}

std::size_t Session::cache_bytes() const {
  std::size_t total = 0;
  for (const auto& c : caches_) total += c.bytes();
  return total;
}

std::string Session::config_hash() const {
  json j;
  j["model"] = params_->config;
  j["engine"] = config_;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

std::vector<int> Session::window_for(const Pose& pose) const {
  std::vector<int> ids;
  if (!caches_.empty()) {
    for (const KVEntry* e : select_window(caches_.front(), pose, config_.window_k, config_.distance)) {
      ids.push_back(e->frame_id);
    }
    return ids;
  }
  std::vector<Pose> poses;
  for (const auto& f : frames_) poses.push_back(f.pose);
  for (std::size_t i : select_window(poses, pose, config_.window_k, config_.distance)) ids.push_back(frames_[i].frame_id);
  return ids;
}

std::vector<std::vector<const KVEntry*>> Session::context_for(const std::vector<int>& ids) const {
  std::vector<std::vector<const KVEntry*>> ctx(caches_.size());
  for (std::size_t l = 0; l < caches_.size(); ++l) {
    for (int id : ids) {
      const KVEntry* e = caches_[l].find(id);
      if (!e) throw std::logic_error("session: cache layers out of sync");
      ctx[l].push_back(e);
    }
  }
  return ctx;
}

void Session::commit(CommittedFrame frame, const std::vector<std::vector<const KVEntry*>>& context) {
  if (!caches_.empty()) {
    const NoisyFrame nf{frame.conditioning, frame.pose, frame.noise_level};
    ForwardOptions opts;
    opts.context = &context;
    opts.capture_kv = true;
    opts.capture_only = true;
    auto out = denoiser_forward(*params_, std::span<const NoisyFrame>(&nf, 1), opts);
    for (std::size_t l = 0; l < caches_.size(); ++l) {
      auto& [keys, values] = out.captured_kv[l][0];
      caches_[l].append(frame.frame_id, std::move(keys), std::move(values), frame.pose, frame.noise_level);
    }
  }
  frames_.push_back(std::move(frame));
}

int Session::push_input_view(const Image& image, const Pose& pose) {
  check_image(image, params_->config);
  check_pose(pose);
  for (const auto& f : frames_) {
    if (f.source == FrameSource::Input && same_pose(f.pose, pose) && same_image(f.image, image)) {
      throw std::invalid_argument("push_input_view: this exact view was already pushed");
    }
  }
  CommittedFrame frame;
  frame.frame_id = next_id_++;
  frame.source = FrameSource::Input;
  frame.pose = pose;
  frame.image = image;
  if (config_.augmentation.augment_inputs) {
    auto aug = apply_conditioning_augmentation(image, config_.augmentation, rng_, schedule_);
    frame.conditioning = std::move(aug.image);
    frame.noise_level = aug.noise_level;
  } else {
    frame.conditioning = image;
    frame.noise_level = 0;
  }
  frame.context = window_for(pose);
  const auto ctx = context_for(frame.context);
  commit(std::move(frame), ctx);
  return frames_.back().frame_id;
}

Image Session::generate_view(const Pose& pose, FrameDiagnostics* diagnostics) {
  check_pose(pose);
  const auto t0 = std::chrono::steady_clock::now();
  if (frames_.empty()) std::clog << "warning: generating without any committed frame (unconditional)\n";

  const std::vector<int> window = window_for(pose);
  const auto ctx = context_for(window);
  std::int64_t flops = 0;
  int steps = 0;
  ForwardOptions opts;
  opts.context = &ctx;
  const NoisePredictor predict = [&](const Image& x_t, int t) {
    const NoisyFrame nf{x_t, pose, t};
    auto out = denoiser_forward(*params_, std::span<const NoisyFrame>(&nf, 1), opts);
    flops += out.framewise_flops;
    ++steps;
    return std::move(out.eps[0]);
  };
  const int s = params_->config.image_size;
  Image clean = ddim_denoise_frame(predict, s, s, schedule_, config_.sampler, rng_);
  auto aug = apply_conditioning_augmentation(clean, config_.augmentation, rng_, schedule_);

  CommittedFrame frame;
  frame.frame_id = next_id_++;
  frame.source = FrameSource::Generated;
  frame.pose = pose;
  frame.image = clean;
  frame.conditioning = std::move(aug.image);
  frame.noise_level = aug.noise_level;
  frame.context = window;
  commit(std::move(frame), ctx);

  if (diagnostics) {
    diagnostics->frame_id = frames_.back().frame_id;
    diagnostics->window = window;
    diagnostics->steps = steps;
    diagnostics->framewise_flops = flops;
    diagnostics->wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return clean;
}

// ---------------------------------------------------------------------------
// Rollouts

RolloutResult rollout(std::shared_ptr<const DenoiserParams> params, const std::vector<PosedImage>& inputs,
                      const std::vector<Pose>& target_poses, const EngineConfig& config, std::uint64_t seed) {
  Session session(std::move(params), config, seed);
  for (const auto& in : inputs) session.push_input_view(in.image, in.pose);
  RolloutResult r;
  for (const auto& p : target_poses) {
    FrameDiagnostics d;
    r.images.push_back(session.generate_view(p, &d));
    r.poses.push_back(p);
    r.diagnostics.push_back(std::move(d));
  }
  return r;
}

RolloutResult generate_parallel_baseline(const DenoiserParams& params, const std::vector<PosedImage>& inputs,
                                         const std::vector<Pose>& target_poses, const EngineConfig& config,
                                         std::uint64_t seed) {
  config.validate(params.config);
  const NoiseSchedule schedule = make_schedule(config.schedule, params.config.num_timesteps);
  RolloutResult r;
  if (target_poses.empty()) return r;
  std::vector<NoisyFrame> frames;
  for (const auto& in : inputs) {
    check_image(in.image, params.config);
    check_pose(in.pose);
    frames.push_back({in.image, in.pose, 0});
  }
  for (const auto& p : target_poses) {
    check_pose(p);
    frames.push_back({Image(), p, 0});
  }
  Rng rng(seed);
  const auto t0 = std::chrono::steady_clock::now();
  r.images = ddim_joint(params, std::move(frames), inputs.size(), schedule, config.sampler, false, rng);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  const int steps = static_cast<int>(ddim_timesteps(schedule, config.sampler.num_steps).size());
  std::vector<int> all;
  for (std::size_t i = 0; i < inputs.size(); ++i) all.push_back(static_cast<int>(i));
  for (std::size_t m = 0; m < target_poses.size(); ++m) {
    FrameDiagnostics d;
    d.frame_id = static_cast<int>(inputs.size() + m);
    d.window = all;
    d.steps = steps;
    d.wall_ms = ms / static_cast<double>(target_poses.size());
    r.diagnostics.push_back(std::move(d));
    r.poses.push_back(target_poses[m]);
  }
  return r;
}

std::vector<Image> rollout_without_cache(const DenoiserParams& params, const std::vector<TraceEvent>& trace,
                                         const EngineConfig& config, std::uint64_t seed) {
  config.validate(params.config);
  if (config.cache_capacity) throw ConfigError("rollout_without_cache: cache eviction is not modelled");
  const NoiseSchedule schedule = make_schedule(config.schedule, params.config.num_timesteps);
  Rng rng(seed);

  struct Committed {
    NoisyFrame frame;
    std::vector<std::size_t> context;
  };
  std::vector<Committed> history;
  std::vector<Image> outputs;

  auto select = [&](const Pose& pose) {
    std::vector<Pose> poses;
    for (const auto& c : history) poses.push_back(c.frame.pose);
    return select_window(poses, pose, config.window_k, config.distance);
  };
  // Joint batch of the whole history plus one live frame.
  auto joint_mask = [&](const std::vector<std::size_t>& live_context) {
    const Eigen::Index n = static_cast<Eigen::Index>(history.size()) + 1;
    FrameMask mask = FrameMask::Constant(n, n, false);
    for (Eigen::Index r = 0; r < n; ++r) {
      mask(r, r) = true;
      const auto& ctx = r + 1 < n ? history[r].context : live_context;
      for (std::size_t c : ctx) mask(r, static_cast<Eigen::Index>(c)) = true;
    }
    return mask;
  };
  auto batch_with = [&](const NoisyFrame& live) {
    std::vector<NoisyFrame> frames;
    for (const auto& c : history) frames.push_back(c.frame);
    frames.push_back(live);
    return frames;
  };

  const int s = params.config.image_size;
  for (const auto& ev : trace) {
    const auto ctx = select(ev.pose);
    if (!ev.generate) {
      NoisyFrame f{ev.image, ev.pose, 0};
      if (config.augmentation.augment_inputs) {
        auto aug = apply_conditioning_augmentation(ev.image, config.augmentation, rng, schedule);
        f.image = std::move(aug.image);
        f.timestep = aug.noise_level;
      }
      history.push_back({std::move(f), ctx});
      continue;
    }
    const FrameMask mask = joint_mask(ctx);
    ForwardOptions opts;
    opts.mask = &mask;
    const NoisePredictor predict = [&](const Image& x_t, int t) {
      const auto frames = batch_with({x_t, ev.pose, t});
      auto out = denoiser_forward(params, frames, opts);
      return std::move(out.eps.back());
    };
    Image clean = ddim_denoise_frame(predict, s, s, schedule, config.sampler, rng);
    auto aug = apply_conditioning_augmentation(clean, config.augmentation, rng, schedule);
    history.push_back({{std::move(aug.image), ev.pose, aug.noise_level}, ctx});
    outputs.push_back(std::move(clean));
  }
  return outputs;
}

void save_rollout(const std::filesystem::path& run_dir, const RolloutResult& result, const json& extra) {
  namespace fs = std::filesystem;
  try {
    fs::create_directories(run_dir / "images");
    json frames = json::array();
    for (std::size_t i = 0; i < result.images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04zu.png", i);
      write_png(run_dir / "images" / name, result.images[i]);
      json f = {{"index", i}, {"file", std::string("images/") + name}};
      if (i < result.poses.size()) f["pose"] = result.poses[i];
      if (i < result.diagnostics.size()) f["diagnostics"] = result.diagnostics[i];
      frames.push_back(std::move(f));
    }
    json manifest = extra.is_object() ? extra : json::object();
    manifest["frames"] = std::move(frames);
    std::ofstream os(run_dir / "manifest.json");
    if (!os) throw IoError("cannot write " + (run_dir / "manifest.json").string());
    os << manifest.dump(2) << '\n';
  } catch (const fs::filesystem_error& e) {
    throw IoError(e.what());
  }
}

}  // namespace causnvs
