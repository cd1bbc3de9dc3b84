#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "causnvs/attention.hpp"
#include "causnvs/denoiser.hpp"
#include "causnvs/diffusion.hpp"
#include "causnvs/geometry.hpp"
#include "causnvs/image.hpp"
#include "json.hpp"

namespace causnvs {

/// Inference-time settings of a rollout session.
struct EngineConfig {
  std::optional<int> window_k;                // nullopt = attend to the whole cache
  std::optional<std::size_t> cache_capacity;  // nullopt = never evict
  SamplerConfig sampler;
  AugmentationConfig augmentation;
  PoseDistanceParams distance;
  ScheduleKind schedule = ScheduleKind::Cosine;

  /// Throws ConfigError.
  void validate(const DenoiserConfig& model) const;
};

void to_json(nlohmann::json& j, const EngineConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, EngineConfig& c);

enum class FrameSource { Input, Generated };
std::string to_string(FrameSource s);

struct CommittedFrame {
  int frame_id = 0;
  FrameSource source = FrameSource::Input;
  Pose pose;
  Image image;         // clean image (input or generated sample)
  Image conditioning;  // what was encoded into the cache
  int noise_level = 0;
  std::vector<int> context;  // frame ids attended while this frame was encoded
};

struct FrameDiagnostics {
  int frame_id = 0;
  std::vector<int> window;  // committed frame ids the frame attended to
  double wall_ms = 0.0;
  int steps = 0;
  std::int64_t framewise_flops = 0;  // frame-wise attention FLOPs over all denoising steps
};

void to_json(nlohmann::json& j, const FrameDiagnostics& d);

/// One streaming generation session: committed history plus per-layer KV caches.
/// Not thread-safe; callers serialize access.
class Session {
 public:
  Session(std::shared_ptr<const DenoiserParams> params, EngineConfig config, std::uint64_t seed);

  /// Encodes the view once at noise level 0 (t_ctx with augment_inputs) and caches it.
  int push_input_view(const Image& image, const Pose& pose);
  /// Denoises a new frame against the pose-nearest window, caches its
  /// augmented encoding and returns the clean sample.
  Image generate_view(const Pose& pose, FrameDiagnostics* diagnostics = nullptr);

  const std::vector<CommittedFrame>& frames() const { return frames_; }
  const std::vector<KVCacheLayer>& caches() const { return caches_; }
  const EngineConfig& config() const { return config_; }
  const DenoiserParams& params() const { return *params_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t cache_bytes() const;
  /// Stable hash of the model and engine configuration.
  std::string config_hash() const;

  /// Context window (frame ids, arrival order) a frame at `pose` would attend to now.
  std::vector<int> window_for(const Pose& pose) const;

 private:
  std::vector<std::vector<const KVEntry*>> context_for(const std::vector<int>& ids) const;
  void commit(CommittedFrame frame, const std::vector<std::vector<const KVEntry*>>& context);

  std::shared_ptr<const DenoiserParams> params_;
  EngineConfig config_;
  NoiseSchedule schedule_;
  std::uint64_t seed_;
  Rng rng_;
  std::vector<KVCacheLayer> caches_;
  std::vector<CommittedFrame> frames_;
  int next_id_ = 0;
};

struct RolloutResult {
  std::vector<Image> images;  // in request order
  std::vector<Pose> poses;
  std::vector<FrameDiagnostics> diagnostics;
};

struct PosedImage {
  Image image;
  Pose pose;
};

/// New session, push every input, then generate the targets in the given order.
RolloutResult rollout(std::shared_ptr<const DenoiserParams> params, const std::vector<PosedImage>& inputs,
                      const std::vector<Pose>& target_poses, const EngineConfig& config, std::uint64_t seed);

/// Joint denoising of all targets from a shared timestep with full attention
/// over clean inputs and targets; no caching.
RolloutResult generate_parallel_baseline(const DenoiserParams& params, const std::vector<PosedImage>& inputs,
                                         const std::vector<Pose>& target_poses, const EngineConfig& config,
                                         std::uint64_t seed);

/// One step of a session trace for the recompute reference.
struct TraceEvent {
  bool generate = false;
  Pose pose;
  Image image;  // input views only
};

/// Replays a trace without any cache: every denoiser call re-encodes the whole
/// committed history jointly, each frame restricted to the window it had in
/// the cached session. Returns the generated images in order.
std::vector<Image> rollout_without_cache(const DenoiserParams& params, const std::vector<TraceEvent>& trace,
                                         const EngineConfig& config, std::uint64_t seed);

/// Writes images/frame_XXXX.png and manifest.json (poses, seed, windows, timings).
void save_rollout(const std::filesystem::path& run_dir, const RolloutResult& result, const nlohmann::json& extra);

}  // namespace causnvs
