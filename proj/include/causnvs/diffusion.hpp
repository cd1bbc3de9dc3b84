#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "causnvs/image.hpp"
#include "json.hpp"

namespace causnvs {

using Rng = std::mt19937_64;

enum class ScheduleKind { Cosine, Linear };

struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  int num_timesteps = 64;
  std::vector<double> alpha_bar;  // strictly decreasing, in (0, 1]

  double signal(int t) const;  // sqrt(alpha_bar[t])
  double noise(int t) const;   // sqrt(1 - alpha_bar[t])
  void check_timestep(int t) const;
};

/// Throws std::invalid_argument for T < 2.
NoiseSchedule make_schedule(ScheduleKind kind, int num_timesteps);

struct SamplerConfig {
  int num_steps = 16;
  double eta = 0.0;
  std::uint64_t seed = 0;
  /// Clamp the predicted clean image to [-1, 1] at every step.
  bool clip_denoised = true;

  void validate(const NoiseSchedule& schedule) const;
};

struct AugmentationConfig {
  int context_noise_level = 2;
  bool enabled = true;
  /// Also re-noise user-provided input views (default: generated frames only).
  bool augment_inputs = false;

  void validate(const NoiseSchedule& schedule) const;
};

/// sqrt(ab_t) x + sqrt(1 - ab_t) eps.
Image add_noise(const Image& x, int t, const Image& eps, const NoiseSchedule& schedule);

Image gaussian_image(int height, int width, Rng& rng);

/// F i.i.d. uniform timesteps in [0, T), or one draw repeated when shared.
std::vector<int> sample_frame_timesteps(int num_frames, int num_timesteps, Rng& rng, bool shared = false);

/// Descending, uniformly strided timestep subsequence starting at T - 1.
std::vector<int> ddim_timesteps(const NoiseSchedule& schedule, int num_steps);

/// Predicts the noise in x_t for the frame being generated.
using NoisePredictor = std::function<Image(const Image& x_t, int t)>;

/// Deterministic DDIM from a unit Gaussian at the largest selected timestep
/// down to a clean image clamped to [-1, 1].
Image ddim_denoise_frame(const NoisePredictor& predict, int height, int width, const NoiseSchedule& schedule,
                         const SamplerConfig& sampler, Rng& rng);

/// One DDIM update from t to t_next (t_next < 0 means the clean image).
Image ddim_step(const Image& x_t, const Image& eps, int t, int t_next, const NoiseSchedule& schedule, bool clip);

struct AugmentedFrame {
  Image image;
  int noise_level = 0;
};

/// Re-noises a frame to the context noise level; identity with level 0 when disabled.
AugmentedFrame apply_conditioning_augmentation(const Image& frame, const AugmentationConfig& cfg, Rng& rng,
                                               const NoiseSchedule& schedule);

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

nlohmann::json schedule_to_json(const NoiseSchedule& s);

}  // namespace causnvs
