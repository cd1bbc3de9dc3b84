#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "causnvs/attention.hpp"
#include "causnvs/diffusion.hpp"
#include "causnvs/geometry.hpp"
#include "causnvs/image.hpp"
#include "causnvs/types.hpp"
#include "json.hpp"

namespace causnvs {

/// Patch-token transformer predicting per-frame noise.
///
/// Each block runs per-frame spatial attention and an MLP; blocks listed in
/// framewise_attention_at additionally run CaPE frame-wise attention across
/// frames between the two.
struct DenoiserConfig {
  int image_size = 16;
  int channels = 3;
  int patch_size = 2;
  int width = 128;
  int depth = 6;
  int heads = 4;
  int head_dim = 32;
  std::vector<int> framewise_attention_at = {3, 4, 5};
  int noise_embed_dim = 64;
  bool zero_init_frame_attention = true;
  int mlp_ratio = 4;
  int num_timesteps = 64;
  bool cape = true;

  int grid() const { return image_size / patch_size; }
  int tokens_per_frame() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int num_framewise_layers() const { return static_cast<int>(framewise_attention_at.size()); }
  bool has_framewise(int block) const;
  /// Position of `block` in framewise_attention_at, or -1.
  int framewise_layer(int block) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

struct ParamInfo {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

/// Named, shaped views into one flat parameter vector.
class ParamLayout {
 public:
  int add(std::string name, Eigen::Index rows, Eigen::Index cols);
  const std::vector<ParamInfo>& entries() const { return entries_; }
  std::size_t total() const { return total_; }
  /// Throws std::out_of_range for an unknown name.
  int index(const std::string& name) const;

 private:
  std::vector<ParamInfo> entries_;
  std::map<std::string, int> by_name_;
  std::size_t total_ = 0;
};

/// All learnable weights (stored as float32-representable doubles).
struct DenoiserParams {
  DenoiserConfig config;
  std::shared_ptr<const ParamLayout> layout;
  std::vector<double> values;

  /// Initialized from seed; frame-wise output projections are zero when
  /// zero_init_frame_attention is set.
  static DenoiserParams init(const DenoiserConfig& config, std::uint64_t seed);

  Eigen::Map<const RowMat> view(int id) const;
  Eigen::Map<RowMat> view(int id);
  bool all_finite() const;
};

std::shared_ptr<const ParamLayout> make_layout(const DenoiserConfig& config);

/// Rounds every value to the nearest float32.
void round_to_float(std::span<double> values);

/// Fixed sin/cos features: [sin(t w_i), cos(t w_i)], w_i = 10000^(-i/(dim/2)).
RowVec sinusoidal_embedding(int t, int dim);

/// Sinusoidal base followed by the learned two-layer map. Throws for t outside [0, T).
RowVec embed_noise_level(const DenoiserParams& params, int t);

/// One frame entering the network.
struct NoisyFrame {
  Image image;  // noisy image z^t
  Pose pose;
  int timestep = 0;
};

struct ForwardTape;

struct ForwardOptions {
  /// Live-frame visibility; defaults to arrival-order causal (or all-true when !causal).
  const FrameMask* mask = nullptr;
  bool causal = true;
  /// Cached entries attended by every live frame, one list per frame-wise layer.
  const std::vector<std::vector<const KVEntry*>>* context = nullptr;
  /// Record (encoded keys, values) of every live frame at every frame-wise layer.
  bool capture_kv = false;
  /// Stop after the last frame-wise layer (only useful with capture_kv).
  bool capture_only = false;
  ForwardTape* tape = nullptr;
};

struct ForwardResult {
  std::vector<Image> eps;                                           // per live frame (empty if capture_only)
  std::vector<std::vector<std::pair<RowMat, RowMat>>> captured_kv;  // [layer][frame]
  std::int64_t framewise_flops = 0;
};

/// Noise prediction for a batch of frames (eps_hat(v_i | v_<i)).
ForwardResult denoiser_forward(const DenoiserParams& params, std::span<const NoisyFrame> frames,
                               const ForwardOptions& options = {});

/// Reference network with the frame-wise layers removed.
std::vector<Image> denoiser_forward_spatial_only(const DenoiserParams& params, std::span<const NoisyFrame> frames);

/// Training batch: clean frames with their independently drawn noise.
struct TrainingFrame {
  Image clean;
  Pose pose;
  int timestep = 0;
  Image eps;
  double loss_weight = 1.0;
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> per_frame;  // mean squared error of each frame
  std::vector<double> grad;       // d loss / d params (only when requested)
};

/// Weighted mean over frames of per-frame pixel MSE between predicted and true noise.
LossResult loss_causal(const DenoiserParams& params, std::span<const TrainingFrame> batch, const NoiseSchedule& schedule,
                       bool causal, bool with_grad, const FrameMask* mask = nullptr);

struct OptimizerConfig {
  double learning_rate = 1e-4;
  int warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  double ema_decay = 0.999;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  std::vector<double> ema;

  static OptimizerState init(const DenoiserParams& params);
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

/// One Adam step on loss_causal plus the EMA update. Throws NumericError on a non-finite loss.
StepResult train_step(DenoiserParams& params, OptimizerState& state, std::span<const TrainingFrame> batch,
                      const NoiseSchedule& schedule, const OptimizerConfig& opt, bool causal,
                      const FrameMask* mask = nullptr);

/// Checkpoint: magic, JSON header, then named little-endian float32 arrays.
struct Checkpoint {
  nlohmann::json header;
  DenoiserParams params;
  std::optional<OptimizerState> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, const DenoiserParams& params,
                     const OptimizerState* optimizer);
/// Throws IoError on malformed files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copy of params with the EMA shadow weights swapped in.
DenoiserParams with_ema(const DenoiserParams& params, const OptimizerState& state);

}  // namespace causnvs
