#include "causnvs/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace causnvs {

double NoiseSchedule::signal(int t) const {
  check_timestep(t);
  return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]);
}

double NoiseSchedule::noise(int t) const {
  check_timestep(t);
  return std::sqrt(std::max(0.0, 1.0 - alpha_bar[static_cast<std::size_t>(t)]));
}

void NoiseSchedule::check_timestep(int t) const {
  if (t < 0 || t >= num_timesteps) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_timesteps) + ")");
  }
}

NoiseSchedule make_schedule(ScheduleKind kind, int num_timesteps) {
  if (num_timesteps < 2) throw std::invalid_argument("make_schedule: need at least 2 timesteps");
  NoiseSchedule s;
  s.kind = kind;
  s.num_timesteps = num_timesteps;
  s.alpha_bar.resize(static_cast<std::size_t>(num_timesteps));
  const double T = num_timesteps;
  if (kind == ScheduleKind::Cosine) {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos(((t / T + offset) / (1.0 + offset)) * M_PI / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int t = 0; t < num_timesteps; ++t) {
      s.alpha_bar[static_cast<std::size_t>(t)] = std::clamp(f(t) / f0, 1e-5, 1.0);
    }
  } else {
    // Linear betas over [1e-4, 0.02] at the reference 1000 steps, rescaled to T.
    const double scale = 1000.0 / T;
    const double lo = 1e-4 * scale;
    const double hi = std::min(0.02 * scale, 0.999);
    double prod = 1.0;
    for (int t = 0; t < num_timesteps; ++t) {
      const double beta = lo + (hi - lo) * (num_timesteps == 1 ? 0.0 : t / (T - 1.0));
      prod *= 1.0 - beta;
      s.alpha_bar[static_cast<std::size_t>(t)] = std::clamp(prod, 1e-5, 1.0);
    }
  }
  for (int t = 1; t < num_timesteps; ++t) {
    if (!(s.alpha_bar[static_cast<std::size_t>(t)] < s.alpha_bar[static_cast<std::size_t>(t - 1)])) {
      throw std::invalid_argument("make_schedule: schedule is not strictly decreasing at this length");
    }
  }
  return s;
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
  if (num_steps < 1 || num_steps > schedule.num_timesteps) {
    throw std::invalid_argument("sampler: num_steps must be in [1, T]");
  }
  if (eta != 0.0) throw std::invalid_argument("sampler: only eta = 0 is supported");
}

void AugmentationConfig::validate(const NoiseSchedule& schedule) const {
  if (context_noise_level < 0 || context_noise_level >= schedule.num_timesteps) {
    throw std::invalid_argument("augmentation: context_noise_level must be in [0, T)");
  }
}

Image add_noise(const Image& x, int t, const Image& eps, const NoiseSchedule& schedule) {
  if (!x.same_shape(eps)) throw std::invalid_argument("add_noise: shape mismatch");
  const double a = schedule.signal(t);
  const double b = schedule.noise(t);
  Image out(x.height, x.width);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = a * x.data[i] + b * eps.data[i];
  return out;
}

Image gaussian_image(int height, int width, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Image img(height, width);
  for (auto& v : img.data) v = n(rng);
  return img;
}

std::vector<int> sample_frame_timesteps(int num_frames, int num_timesteps, Rng& rng, bool shared) {
  if (num_frames < 1) throw std::invalid_argument("sample_frame_timesteps: need at least one frame");
  std::uniform_int_distribution<int> u(0, num_timesteps - 1);
  std::vector<int> ts(static_cast<std::size_t>(num_frames));
  if (shared) {
    std::fill(ts.begin(), ts.end(), u(rng));
  } else {
    for (auto& t : ts) t = u(rng);
  }
  return ts;
}

std::vector<int> ddim_timesteps(const NoiseSchedule& schedule, int num_steps) {
  const int T = schedule.num_timesteps;
  if (num_steps < 1 || num_steps > T) throw std::invalid_argument("ddim: empty or oversized timestep selection");
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(num_steps));
  const double stride = static_cast<double>(T) / num_steps;
  for (int k = 0; k < num_steps; ++k) {
    ts.push_back(T - 1 - static_cast<int>(std::floor(k * stride)));
  }
  return ts;
}

Image ddim_step(const Image& x_t, const Image& eps, int t, int t_next, const NoiseSchedule& schedule, bool clip) {
  const double a_t = schedule.signal(t);
  const double s_t = schedule.noise(t);
  const double a_n = t_next < 0 ? 1.0 : schedule.signal(t_next);
  const double s_n = t_next < 0 ? 0.0 : schedule.noise(t_next);
  Image out(x_t.height, x_t.width);
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    double x0 = (x_t.data[i] - s_t * eps.data[i]) / a_t;
    double e = eps.data[i];
    if (clip) {
      x0 = std::clamp(x0, -1.0, 1.0);
      // Keep the implied noise consistent with the clipped x0.
      if (s_t > 0.0) e = (x_t.data[i] - a_t * x0) / s_t;
    }
    out.data[i] = a_n * x0 + s_n * e;
  }
  return out;
}

Image ddim_denoise_frame(const NoisePredictor& predict, int height, int width, const NoiseSchedule& schedule,
                         const SamplerConfig& sampler, Rng& rng) {
  sampler.validate(schedule);
  const auto ts = ddim_timesteps(schedule, sampler.num_steps);
  if (ts.empty()) throw std::invalid_argument("ddim: empty timestep selection");
  Image x = gaussian_image(height, width, rng);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_next = k + 1 < ts.size() ? ts[k + 1] : -1;
    const Image eps = predict(x, t);
    if (!eps.same_shape(x)) throw std::invalid_argument("ddim: predictor returned a wrong-sized image");
    x = ddim_step(x, eps, t, t_next, schedule, sampler.clip_denoised);
  }
  for (auto& v : x.data) v = std::clamp(v, -1.0, 1.0);
  return x;
}

AugmentedFrame apply_conditioning_augmentation(const Image& frame, const AugmentationConfig& cfg, Rng& rng,
                                               const NoiseSchedule& schedule) {
  if (!cfg.enabled) return {frame, 0};
  cfg.validate(schedule);
  const Image eps = gaussian_image(frame.height, frame.width, rng);
  return {add_noise(frame, cfg.context_noise_level, eps, schedule), cfg.context_noise_level};
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Cosine ? "cosine" : "linear"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear") return ScheduleKind::Linear;
  throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

nlohmann::json schedule_to_json(const NoiseSchedule& s) {
  return {{"kind", to_string(s.kind)}, {"num_timesteps", s.num_timesteps}, {"alpha_bar", s.alpha_bar}};
}

}  // namespace causnvs
