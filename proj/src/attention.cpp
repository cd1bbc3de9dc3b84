#include "causnvs/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace causnvs {

void AttentionConfig::validate() const {
  if (heads <= 0 || head_dim <= 0) throw std::invalid_argument("attention: heads and head_dim must be positive");
  if (window_k && *window_k < 1) throw std::invalid_argument("attention: window_k must be >= 1");
  if (cape.enabled) {
    if (head_dim % 4 != 0) throw std::invalid_argument("attention: CaPE needs head_dim divisible by 4");
    if (cape.head_dim != head_dim) throw std::invalid_argument("attention: cape.head_dim must equal head_dim");
  }
}

FrameMask build_frame_causal_mask(std::span<const int> query_positions, std::span<const int> key_positions,
                                  bool causal) {
  FrameMask mask(static_cast<Eigen::Index>(query_positions.size()), static_cast<Eigen::Index>(key_positions.size()));
  for (std::size_t i = 0; i < query_positions.size(); ++i) {
    for (std::size_t j = 0; j < key_positions.size(); ++j) {
      mask(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          !causal || key_positions[j] <= query_positions[i];
    }
  }
  return mask;
}

KVCacheLayer::KVCacheLayer(std::optional<std::size_t> capacity) : capacity_(capacity) {
  if (capacity_ && *capacity_ == 0) throw std::invalid_argument("kv cache: capacity must be positive");
}

std::int64_t KVCacheLayer::append(int frame_id, RowMat keys, RowMat values, const Pose& pose, int noise_level) {
  if (contains(frame_id)) throw std::invalid_argument("kv cache: duplicate frame_id " + std::to_string(frame_id));
  if (keys.rows() != values.rows() || keys.cols() != values.cols()) {
    throw std::invalid_argument("kv cache: keys and values shapes differ");
  }
  if (!entries_.empty() &&
      (keys.rows() != entries_.front().keys.rows() || keys.cols() != entries_.front().keys.cols())) {
    throw std::invalid_argument("kv cache: entry shape differs from existing entries");
  }
  if (capacity_ && entries_.size() == *capacity_) entries_.pop_front();
  KVEntry e;
  e.frame_id = frame_id;
  e.arrival = next_arrival_++;
  e.keys = std::move(keys);
  e.values = std::move(values);
  e.pose = pose;
  e.noise_level = noise_level;
  entries_.push_back(std::move(e));
  return entries_.back().arrival;
}

const KVEntry* KVCacheLayer::find(int frame_id) const {
  for (const auto& e : entries_) {
    if (e.frame_id == frame_id) return &e;
  }
  return nullptr;
}

std::size_t KVCacheLayer::bytes() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += static_cast<std::size_t>(e.keys.size() + e.values.size()) * sizeof(double);
  return total;
}

std::int64_t cache_append(KVCacheLayer& cache, const FrameTokens& frame, RowMat keys, RowMat values) {
  return cache.append(frame.frame_id, std::move(keys), std::move(values), frame.pose, frame.noise_level);
}

std::vector<std::size_t> select_window(std::span<const Pose> candidates, const Pose& query_pose,
                                       std::optional<int> k, const PoseDistanceParams& params) {
  std::vector<std::size_t> idx(candidates.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (!k || static_cast<std::size_t>(*k) >= candidates.size()) return idx;
  if (*k < 1) throw std::invalid_argument("select_window: k must be >= 1");
  std::vector<double> dist(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) dist[i] = pose_distance(candidates[i], query_pose, params);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  idx.resize(static_cast<std::size_t>(*k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<const KVEntry*> select_window(const KVCacheLayer& cache, const Pose& query_pose, std::optional<int> k,
                                          const PoseDistanceParams& params) {
  std::vector<Pose> poses;
  poses.reserve(cache.size());
  for (const auto& e : cache.entries()) poses.push_back(e.pose);
  std::vector<const KVEntry*> out;
  for (std::size_t i : select_window(poses, query_pose, k, params)) out.push_back(&cache.entries()[i]);
  return out;
}

namespace {

void check_inputs(const AttentionInputs& in) {
  if (!in.q || !in.k || !in.v || !in.mask) throw std::invalid_argument("attention: missing inputs");
  const Eigen::Index width = static_cast<Eigen::Index>(in.heads) * in.head_dim;
  if (in.q->cols() != width || in.k->cols() != width || in.v->cols() != width) {
    throw std::invalid_argument("attention: feature width mismatch");
  }
  if (in.q->rows() != in.k->rows() || in.q->rows() != in.v->rows()) {
    throw std::invalid_argument("attention: q/k/v row counts differ");
  }
  if (in.tokens_per_frame <= 0 || in.q->rows() % in.tokens_per_frame != 0) {
    throw std::invalid_argument("attention: rows are not a whole number of frames");
  }
  const Eigen::Index frames = in.q->rows() / in.tokens_per_frame;
  if (in.mask->rows() != frames || in.mask->cols() != frames) throw std::invalid_argument("attention: mask shape");
  if (in.cape) {
    if (in.head_dim % 4 != 0) throw std::invalid_argument("attention: CaPE needs head_dim divisible by 4");
    if (static_cast<Eigen::Index>(in.poses.size()) != frames) throw std::invalid_argument("attention: pose count");
  }
  for (const KVEntry* e : in.context) {
    if (e->keys.rows() != in.tokens_per_frame || e->keys.cols() != width) {
      throw std::invalid_argument("attention: context entry shape mismatch");
    }
  }
}

void softmax_rows(RowMat& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const double m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
  }
}

}  // namespace

RowMat attention_forward(const AttentionInputs& in, AttentionState* state) {
  check_inputs(in);
  const int P = in.tokens_per_frame;
  const int dh = in.head_dim;
  const Eigen::Index F = in.q->rows() / P;
  const Eigen::Index C = static_cast<Eigen::Index>(in.context.size());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMat q_enc = *in.q;
  RowMat k_enc = *in.k;
  if (in.cape) {
    for (Eigen::Index f = 0; f < F; ++f) {
      const Pose& pose = in.poses[static_cast<std::size_t>(f)];
      apply_blocks_rows(query_block(pose), q_enc.middleRows(f * P, P));
      apply_blocks_rows(key_block(pose), k_enc.middleRows(f * P, P));
    }
  }

  RowMat out = RowMat::Zero(in.q->rows(), in.q->cols());
  std::int64_t flops = 0;
  const bool keep = state && state->keep_probs;
  if (state) {
    state->key_frames.assign(static_cast<std::size_t>(F), {});
    state->probs.assign(keep ? static_cast<std::size_t>(F * in.heads) : 0, RowMat());
  }

  RowMat kh, vh, s;
  for (Eigen::Index i = 0; i < F; ++i) {
    std::vector<int> live;
    for (Eigen::Index j = 0; j < F; ++j) {
      if ((*in.mask)(i, j)) live.push_back(static_cast<int>(j));
    }
    const Eigen::Index n_keys = (C + static_cast<Eigen::Index>(live.size())) * P;
    if (n_keys == 0) continue;  // fully masked frame: zero output
    for (int h = 0; h < in.heads; ++h) {
      const Eigen::Index col = static_cast<Eigen::Index>(h) * dh;
      kh.resize(n_keys, dh);
      vh.resize(n_keys, dh);
      Eigen::Index row = 0;
      for (const KVEntry* e : in.context) {
        kh.middleRows(row, P) = e->keys.middleCols(col, dh);
        vh.middleRows(row, P) = e->values.middleCols(col, dh);
        row += P;
      }
      for (int j : live) {
        kh.middleRows(row, P) = k_enc.block(static_cast<Eigen::Index>(j) * P, col, P, dh);
        vh.middleRows(row, P) = in.v->block(static_cast<Eigen::Index>(j) * P, col, P, dh);
        row += P;
      }
      s.noalias() = (q_enc.block(i * P, col, P, dh) * kh.transpose()) * scale;
      softmax_rows(s);
      out.block(i * P, col, P, dh).noalias() = s * vh;
      flops += 4 * static_cast<std::int64_t>(P) * n_keys * dh;
      if (keep) state->probs[static_cast<std::size_t>(i * in.heads + h)] = s;
    }
    if (state) state->key_frames[static_cast<std::size_t>(i)] = std::move(live);
  }
  if (state) {
    state->q_encoded = std::move(q_enc);
    state->k_encoded = std::move(k_enc);
    state->flops = flops;
  }
  return out;
}

AttentionGrads attention_backward(const AttentionInputs& in, const AttentionState& state, const RowMat& d_out) {
  check_inputs(in);
  if (!in.context.empty()) throw std::invalid_argument("attention_backward: context entries are not differentiable");
  if (!state.keep_probs) throw std::invalid_argument("attention_backward: forward state lacks probabilities");
  const int P = in.tokens_per_frame;
  const int dh = in.head_dim;
  const Eigen::Index F = in.q->rows() / P;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Gradients w.r.t. the encoded q and k; mapped back through CaPE below.
  RowMat dq_enc = RowMat::Zero(in.q->rows(), in.q->cols());
  RowMat dk_enc = RowMat::Zero(in.k->rows(), in.k->cols());
  AttentionGrads g;
  g.dv = RowMat::Zero(in.v->rows(), in.v->cols());

  RowMat kh, vh, da, ds, dkh, dvh;
  for (Eigen::Index i = 0; i < F; ++i) {
    const auto& live = state.key_frames[static_cast<std::size_t>(i)];
    const Eigen::Index n_keys = static_cast<Eigen::Index>(live.size()) * P;
    if (n_keys == 0) continue;
    for (int h = 0; h < in.heads; ++h) {
      const Eigen::Index col = static_cast<Eigen::Index>(h) * dh;
      const RowMat& a = state.probs[static_cast<std::size_t>(i * in.heads + h)];
      kh.resize(n_keys, dh);
      vh.resize(n_keys, dh);
      for (std::size_t n = 0; n < live.size(); ++n) {
        const Eigen::Index src = static_cast<Eigen::Index>(live[n]) * P;
        kh.middleRows(static_cast<Eigen::Index>(n) * P, P) = state.k_encoded.block(src, col, P, dh);
        vh.middleRows(static_cast<Eigen::Index>(n) * P, P) = in.v->block(src, col, P, dh);
      }
      const auto d_o = d_out.block(i * P, col, P, dh);
      da.noalias() = d_o * vh.transpose();
      dvh.noalias() = a.transpose() * d_o;
      const Eigen::VectorXd dot = (da.array() * a.array()).rowwise().sum();
      ds = a.array() * (da.array().colwise() - dot.array());
      ds *= scale;
      dq_enc.block(i * P, col, P, dh).noalias() += ds * kh;
      dkh.noalias() = ds.transpose() * state.q_encoded.block(i * P, col, P, dh);
      for (std::size_t n = 0; n < live.size(); ++n) {
        const Eigen::Index dst = static_cast<Eigen::Index>(live[n]) * P;
        dk_enc.block(dst, col, P, dh) += dkh.middleRows(static_cast<Eigen::Index>(n) * P, P);
        g.dv.block(dst, col, P, dh) += dvh.middleRows(static_cast<Eigen::Index>(n) * P, P);
      }
    }
  }
  if (in.cape) {
    for (Eigen::Index f = 0; f < F; ++f) {
      const Pose& pose = in.poses[static_cast<std::size_t>(f)];
      apply_blocks_rows(query_block(pose).transpose(), dq_enc.middleRows(f * P, P));
      apply_blocks_rows(key_block(pose).transpose(), dk_enc.middleRows(f * P, P));
    }
  }
  g.dq = std::move(dq_enc);
  g.dk = std::move(dk_enc);
  return g;
}

AttentionWeights AttentionWeights::random(int width, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  auto mat = [&] {
    RowMat m(width, width);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
  };
  auto vec = [&] {
    RowVec v(width);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = n(rng);
    return v;
  };
  AttentionWeights w;
  w.wq = mat();
  w.wk = mat();
  w.wv = mat();
  w.wo = mat();
  w.bq = vec();
  w.bk = vec();
  w.bv = vec();
  w.bo = vec();
  return w;
}

namespace {

RowMat project(const RowMat& x, const RowMat& w, const RowVec& b) {
  RowMat y = x * w.transpose();
  y.rowwise() += b;
  return y;
}

RowMat stack_tokens(std::span<const FrameTokens> frames, const AttentionConfig& config) {
  if (frames.empty()) return RowMat(0, config.width());
  const Eigen::Index P = frames.front().tokens.rows();
  RowMat x(P * static_cast<Eigen::Index>(frames.size()), config.width());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].tokens.rows() != P || frames[f].tokens.cols() != config.width()) {
      throw std::invalid_argument("framewise_attention: inconsistent token shapes");
    }
    x.middleRows(static_cast<Eigen::Index>(f) * P, P) = frames[f].tokens;
  }
  return x;
}

}  // namespace

std::vector<RowMat> framewise_attention(std::span<const FrameTokens> frames, const AttentionConfig& config,
                                        const AttentionWeights& weights, std::span<const KVEntry* const> context,
                                        std::int64_t* flops) {
  config.validate();
  if (frames.empty()) return {};
  const RowMat x = stack_tokens(frames, config);
  const int P = static_cast<int>(frames.front().tokens.rows());
  const RowMat q = project(x, weights.wq, weights.bq);
  const RowMat k = project(x, weights.wk, weights.bk);
  const RowMat v = project(x, weights.wv, weights.bv);
  std::vector<int> positions(frames.size());
  std::iota(positions.begin(), positions.end(), 0);
  const FrameMask mask = build_frame_causal_mask(positions, positions, config.causal);
  std::vector<Pose> poses;
  for (const auto& f : frames) poses.push_back(f.pose);

  AttentionInputs in;
  in.q = &q;
  in.k = &k;
  in.v = &v;
  in.tokens_per_frame = P;
  in.heads = config.heads;
  in.head_dim = config.head_dim;
  in.cape = config.cape.enabled;
  in.poses = poses;
  in.mask = &mask;
  in.context = context;
  AttentionState state;
  const RowMat attended = attention_forward(in, &state);
  if (flops) *flops = state.flops;
  const RowMat y = project(attended, weights.wo, weights.bo);
  std::vector<RowMat> out;
  for (std::size_t f = 0; f < frames.size(); ++f) out.push_back(y.middleRows(static_cast<Eigen::Index>(f) * P, P));
  return out;
}

std::pair<RowMat, RowMat> framewise_keys_values(const FrameTokens& frame, const AttentionConfig& config,
                                                const AttentionWeights& weights) {
  RowMat k = project(frame.tokens, weights.wk, weights.bk);
  if (config.cape.enabled) apply_blocks_rows(key_block(frame.pose), k);
  return {std::move(k), project(frame.tokens, weights.wv, weights.bv)};
}

}  // namespace causnvs
