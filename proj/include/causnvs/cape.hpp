#pragma once

#include <span>
#include <string>
#include <vector>

#include "causnvs/geometry.hpp"
#include "causnvs/types.hpp"

namespace causnvs {

/// Relative camera pose encoding of attention queries and keys.
///
/// A d-vector is split into d/4 consecutive 4-blocks; each block is
/// multiplied by the 4x4 pose matrix (keys) or its inverse transpose
/// (queries). The dot product of an encoded query and key then depends on
/// the two poses only through p_q^-1 p_k.
struct CapeConfig {
  int head_dim = 32;
  bool enabled = true;

  void validate() const;
};

/// Dense block-diagonal I_{d/4} (x) P. Used for reference checks; the
/// encoders below never materialize it.
Eigen::MatrixXd phi(const Pose& p, int d);

/// The 4x4 block applied to key vectors.
inline Mat4 key_block(const Pose& p) { return p.matrix(); }
/// The 4x4 block applied to query vectors: P^-T.
inline Mat4 query_block(const Pose& p) { return inverse(p).matrix().transpose(); }

/// In-place blockwise v <- (I (x) m) v on a contiguous span of length 4k.
void apply_blocks(const Mat4& m, std::span<double> v);
/// Blockwise encoding of every row of `rows` (row length must be divisible by 4).
void apply_blocks_rows(const Mat4& m, Eigen::Ref<RowMat> rows);

Vec encode_key(const Vec& v, const Pose& p);
Vec encode_query(const Vec& v, const Pose& p);

/// <encode_query(q, p_q), encode_key(k, p_k)>, or <q, k> when disabled.
double score(const Vec& q, const Vec& k, const Pose& p_q, const Pose& p_k, bool enabled = true);

enum class SweepMode { Rotation, Translation };

struct SweepCurve {
  SweepMode mode = SweepMode::Rotation;
  std::vector<double> parameters;  // degrees (rotation) or scene units (translation)
  std::vector<double> scores;      // pre-softmax, unscaled

  /// Two-column CSV ("angle_deg,score" or "translation,score") with a header row.
  std::string to_csv() const;
};

struct SweepSpec {
  SweepMode mode = SweepMode::Rotation;
  Vec3 axis = Vec3::UnitY();
  double start = 0.0;
  double stop = 720.0;
  int n_samples = 721;
  bool cape_enabled = true;
};

/// Scores a fixed (q, k) pair while the key pose rotates about (or
/// translates along) `axis` relative to an identity query pose.
SweepCurve sweep_analysis(const Vec& q, const Vec& k, const SweepSpec& spec);

/// max |s(x) - s(x + 360)| over the samples that have a partner one turn later.
double rotation_period_error(const SweepCurve& curve);
/// Residual norm of the least-squares affine fit divided by the norm of the scores.
double translation_affine_residual(const SweepCurve& curve);
/// max - min of the scores.
double curve_range(const SweepCurve& curve);

}  // namespace causnvs
