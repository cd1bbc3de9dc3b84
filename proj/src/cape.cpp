#include "causnvs/cape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <Eigen/QR>

namespace causnvs {

void CapeConfig::validate() const {
  if (head_dim <= 0) throw std::invalid_argument("cape: head_dim must be positive");
  if (enabled && head_dim % 4 != 0) throw std::invalid_argument("cape: head_dim must be divisible by 4");
}

Eigen::MatrixXd phi(const Pose& p, int d) {
  if (d <= 0 || d % 4 != 0) throw std::invalid_argument("phi: d must be a positive multiple of 4");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
  const Mat4 m = p.matrix();
  for (int b = 0; b < d / 4; ++b) out.block<4, 4>(4 * b, 4 * b) = m;
  return out;
}

void apply_blocks(const Mat4& m, std::span<double> v) {
  if (v.size() % 4 != 0) throw std::invalid_argument("cape: vector length must be divisible by 4");
  for (std::size_t b = 0; b < v.size(); b += 4) {
    Eigen::Map<Eigen::Vector4d> block(v.data() + b);
    const Eigen::Vector4d x = block;
    block.noalias() = m * x;
  }
}

void apply_blocks_rows(const Mat4& m, Eigen::Ref<RowMat> rows) {
  const Eigen::Index d = rows.cols();
  if (d % 4 != 0) throw std::invalid_argument("cape: row length must be divisible by 4");
  // Every 4-block of every row is a row vector x^T; (m x)^T = x^T m^T.
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>, 0, Eigen::OuterStride<>> blocks(
      rows.data(), rows.rows() * (d / 4), 4, Eigen::OuterStride<>(4));
  if (rows.outerStride() == d) {
    const Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor> x = blocks;
    blocks.noalias() = x * m.transpose();
    return;
  }
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    apply_blocks(m, std::span<double>(rows.row(r).data(), static_cast<std::size_t>(d)));
  }
}

Vec encode_key(const Vec& v, const Pose& p) {
  Vec out = v;
  apply_blocks(key_block(p), std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
  return out;
}

Vec encode_query(const Vec& v, const Pose& p) {
  Vec out = v;
  apply_blocks(query_block(p), std::span<double>(out.data(), static_cast<std::size_t>(out.size())));
  return out;
}

double score(const Vec& q, const Vec& k, const Pose& p_q, const Pose& p_k, bool enabled) {
  if (q.size() != k.size()) throw std::invalid_argument("score: query and key dimensions differ");
  if (!enabled) return q.dot(k);
  return encode_query(q, p_q).dot(encode_key(k, p_k));
}

std::string SweepCurve::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << (mode == SweepMode::Rotation ? "angle_deg" : "translation") << ",score\n";
  for (std::size_t i = 0; i < parameters.size(); ++i) os << parameters[i] << ',' << scores[i] << '\n';
  return os.str();
}

SweepCurve sweep_analysis(const Vec& q, const Vec& k, const SweepSpec& spec) {
  if (spec.n_samples < 3) throw std::invalid_argument("sweep_analysis: need at least 3 samples");
  if (!(spec.stop > spec.start)) throw std::invalid_argument("sweep_analysis: range must be increasing");
  if (!(spec.axis.norm() > 0.0)) throw std::invalid_argument("sweep_analysis: zero axis");
  const Vec3 axis = spec.axis.normalized();

  SweepCurve curve;
  curve.mode = spec.mode;
  curve.parameters.reserve(static_cast<std::size_t>(spec.n_samples));
  curve.scores.reserve(static_cast<std::size_t>(spec.n_samples));
  const double step = (spec.stop - spec.start) / (spec.n_samples - 1);
  const Pose query_pose = Pose::identity();
  for (int i = 0; i < spec.n_samples; ++i) {
    const double x = spec.start + step * i;
    Pose key_pose;
    if (spec.mode == SweepMode::Rotation) {
      key_pose.rotation = axis_angle(axis, x * M_PI / 180.0);
    } else {
      key_pose.translation = x * axis;
    }
    curve.parameters.push_back(x);
    curve.scores.push_back(score(q, k, query_pose, key_pose, spec.cape_enabled));
  }
  return curve;
}

double rotation_period_error(const SweepCurve& curve) {
  const auto& x = curve.parameters;
  if (x.size() < 2) return 0.0;
  const double step = x[1] - x[0];
  const double shift = 360.0 / step;
  const auto offset = static_cast<std::size_t>(std::llround(shift));
  if (std::abs(shift - static_cast<double>(offset)) > 1e-9) {
    throw std::invalid_argument("rotation_period_error: sample spacing must divide 360 degrees");
  }
  double err = 0.0;
  for (std::size_t i = 0; i + offset < x.size(); ++i) {
    err = std::max(err, std::abs(curve.scores[i] - curve.scores[i + offset]));
  }
  return err;
}

double translation_affine_residual(const SweepCurve& curve) {
  const auto n = static_cast<Eigen::Index>(curve.parameters.size());
  Eigen::MatrixXd a(n, 2);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    a(i, 0) = curve.parameters[static_cast<std::size_t>(i)];
    a(i, 1) = 1.0;
    b(i) = curve.scores[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd coef = a.colPivHouseholderQr().solve(b);
  const double denom = std::max(b.norm(), 1e-300);
  return (a * coef - b).norm() / denom;
}

double curve_range(const SweepCurve& curve) {
  if (curve.scores.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(curve.scores.begin(), curve.scores.end());
  return *hi - *lo;
}

}  // namespace causnvs
