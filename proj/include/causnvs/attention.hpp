#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "causnvs/cape.hpp"
#include "causnvs/geometry.hpp"
#include "causnvs/types.hpp"

namespace causnvs {

struct AttentionConfig {
  int heads = 4;
  int head_dim = 32;
  std::optional<int> window_k;  // nullopt = unbounded
  CapeConfig cape;
  bool causal = true;

  int width() const { return heads * head_dim; }
  void validate() const;
};

/// Query frame x key frame visibility.
using FrameMask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Query frame i sees key frame j iff arrival(j) <= arrival(i); all-true when !causal.
FrameMask build_frame_causal_mask(std::span<const int> query_positions, std::span<const int> key_positions,
                                  bool causal = true);

/// Tokens of one frame entering a frame-wise attention layer.
struct FrameTokens {
  int frame_id = 0;
  RowMat tokens;  // n_spatial x width
  Pose pose;
  int noise_level = 0;
};

/// Keys are stored after CaPE encoding with the entry's own pose.
struct KVEntry {
  int frame_id = 0;
  std::int64_t arrival = 0;
  RowMat keys;    // n_spatial x width, heads laid out contiguously
  RowMat values;  // n_spatial x width
  Pose pose;
  int noise_level = 0;
};

/// Per-layer store of committed frames' keys and values, in arrival order.
///
/// Single writer. An optional hard capacity evicts the oldest entry when full.
class KVCacheLayer {
 public:
  explicit KVCacheLayer(std::optional<std::size_t> capacity = std::nullopt);

  /// Throws std::invalid_argument on a duplicate frame_id. Returns the arrival index.
  std::int64_t append(int frame_id, RowMat keys, RowMat values, const Pose& pose, int noise_level);

  const std::deque<KVEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(int frame_id) const { return find(frame_id) != nullptr; }
  const KVEntry* find(int frame_id) const;
  std::size_t bytes() const;
  std::optional<std::size_t> capacity() const { return capacity_; }

 private:
  std::deque<KVEntry> entries_;
  std::optional<std::size_t> capacity_;
  std::int64_t next_arrival_ = 0;
};

/// Appends a frame's keys and values (cache_append).
std::int64_t cache_append(KVCacheLayer& cache, const FrameTokens& frame, RowMat keys, RowMat values);

/// Indices (ascending, i.e. arrival order) of the min(k, n) candidates closest
/// to query_pose; ties go to the earlier candidate. nullopt k selects all.
std::vector<std::size_t> select_window(std::span<const Pose> candidates, const Pose& query_pose,
                                       std::optional<int> k, const PoseDistanceParams& params);

/// Entry pointers of the selected window, in arrival order.
std::vector<const KVEntry*> select_window(const KVCacheLayer& cache, const Pose& query_pose, std::optional<int> k,
                                          const PoseDistanceParams& params);

/// Inputs for one multi-head attention evaluation over frame-grouped tokens.
///
/// Live tokens are rows of q/k/v in frame-major order (frame f occupies rows
/// [f*P, (f+1)*P)). Context entries precede every live frame and are visible
/// to all of them.
struct AttentionInputs {
  const RowMat* q = nullptr;
  const RowMat* k = nullptr;
  const RowMat* v = nullptr;
  int tokens_per_frame = 0;
  int heads = 1;
  int head_dim = 0;
  bool cape = false;
  std::span<const Pose> poses;  // one per live frame
  const FrameMask* mask = nullptr;
  std::span<const KVEntry* const> context;
};

/// Saved activations for the backward pass plus cache-ready encoded keys.
struct AttentionState {
  RowMat q_encoded;
  RowMat k_encoded;
  std::vector<std::vector<int>> key_frames;  // per live query frame
  std::vector<RowMat> probs;                 // [frame * heads + head]
  bool keep_probs = false;
  std::int64_t flops = 0;
};

/// Scaled dot-product attention (scale 1/sqrt(head_dim) applied after CaPE).
/// Returns (live tokens) x (heads*head_dim).
RowMat attention_forward(const AttentionInputs& in, AttentionState* state = nullptr);

struct AttentionGrads {
  RowMat dq;
  RowMat dk;
  RowMat dv;
};

/// Requires a state recorded with keep_probs and no context entries.
AttentionGrads attention_backward(const AttentionInputs& in, const AttentionState& state, const RowMat& d_out);

/// Projection weights of one attention layer; y = x W^T + b.
struct AttentionWeights {
  RowMat wq, wk, wv, wo;  // width x width
  RowVec bq, bk, bv, bo;

  static AttentionWeights random(int width, std::uint64_t seed, double stddev);
};

/// Multi-head frame-wise attention with frame-level causal masking and CaPE.
/// `context` holds the cached entries attended by every frame (typically a
/// window selected from a KVCacheLayer). Returns one output array per frame.
std::vector<RowMat> framewise_attention(std::span<const FrameTokens> frames, const AttentionConfig& config,
                                        const AttentionWeights& weights,
                                        std::span<const KVEntry* const> context = {},
                                        std::int64_t* flops = nullptr);

/// Keys and values of one frame as framewise_attention would cache them.
std::pair<RowMat, RowMat> framewise_keys_values(const FrameTokens& frame, const AttentionConfig& config,
                                                const AttentionWeights& weights);

}  // namespace causnvs
