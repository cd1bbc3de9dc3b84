#include "causnvs/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/SVD>

namespace causnvs {

Pose Pose::from_matrix(const Mat4& m) {
  if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0) {
    throw std::invalid_argument("pose matrix bottom row must be (0,0,0,1)");
  }
  Pose p;
  p.rotation = m.topLeftCorner<3, 3>();
  p.translation = m.topRightCorner<3, 1>();
  return p;
}

Mat4 Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

bool Pose::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

Intrinsics Intrinsics::from_fov(int width, int height, double horizontal_fov_deg) {
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = 0.5 * width / std::tan(0.5 * horizontal_fov_deg * M_PI / 180.0);
  k.fy = k.fx;
  k.cx = 0.5 * width;
  k.cy = 0.5 * height;
  return k;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("intrinsics: image size must be positive");
  if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
    throw std::invalid_argument("intrinsics: principal point outside the image");
  }
}

void PoseDistanceParams::validate() const {
  if (!(rotation_weight >= 0.0)) throw std::invalid_argument("pose distance: rotation_weight must be >= 0");
  if (!(translation_scale > 0.0)) throw std::invalid_argument("pose distance: translation_scale must be > 0");
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

Pose inverse(const Pose& p) {
  Pose out;
  out.rotation = p.rotation.transpose();
  out.translation = -(out.rotation * p.translation);
  return out;
}

Pose relative(const Pose& p_query, const Pose& p_key) { return compose(inverse(p_query), p_key); }

double rotation_geodesic(const Mat3& a, const Mat3& b) {
  const Mat3 m = a.transpose() * b;
  // atan2 of the skew and symmetric parts stays accurate near 0 and pi,
  // where acos((tr - 1) / 2) loses half the mantissa.
  const Vec3 skew(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  const double s = 0.5 * skew.norm();
  const double c = 0.5 * (m.trace() - 1.0);
  return std::clamp(std::atan2(s, c), 0.0, M_PI);
}

double pose_distance(const Pose& a, const Pose& b, const PoseDistanceParams& params) {
  return (a.translation - b.translation).norm() / params.translation_scale +
         params.rotation_weight * rotation_geodesic(a.rotation, b.rotation);
}

ScaledPoses normalize_scene_scale(std::span<const Pose> poses) {
  if (poses.empty()) throw std::invalid_argument("normalize_scene_scale: empty pose list");
  double s = 0.0;
  for (const auto& p : poses) s = std::max(s, p.translation.norm());
  if (s == 0.0) s = 1.0;
  ScaledPoses out;
  out.scale = s;
  out.poses.reserve(poses.size());
  for (const auto& p : poses) {
    Pose q = p;
    q.translation /= s;
    out.poses.push_back(q);
  }
  return out;
}

Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(world_up);
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitX());
  x.normalize();
  const Vec3 y = z.cross(x);
  Pose p;
  p.rotation.col(0) = x;
  p.rotation.col(1) = y;
  p.rotation.col(2) = z;
  p.translation = eye;
  return p;
}

Pose orthonormalized(const Pose& p) {
  Eigen::JacobiSVD<Mat3> svd(p.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return Pose{r, p.translation};
}

void to_json(nlohmann::json& j, const Pose& p) {
  const Mat4 m = p.matrix();
  j = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) j.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
}

void from_json(const nlohmann::json& j, Pose& p) {
  Mat4 m;
  if (j.is_array() && j.size() == 4) {
    for (int r = 0; r < 4; ++r) {
      const auto& row = j.at(r);
      if (!row.is_array() || row.size() != 4) throw std::invalid_argument("pose: each row needs 4 entries");
      for (int c = 0; c < 4; ++c) m(r, c) = row.at(c).get<double>();
    }
  } else if (j.is_array() && j.size() == 16) {
    for (int i = 0; i < 16; ++i) m(i / 4, i % 4) = j.at(i).get<double>();
  } else {
    throw std::invalid_argument("pose: expected a row-major 4x4 array");
  }
  p = Pose::from_matrix(m);
  if (!p.is_valid()) throw std::invalid_argument("pose: rotation is not orthonormal with det +1");
}

void to_json(nlohmann::json& j, const Intrinsics& k) {
  j = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

void from_json(const nlohmann::json& j, Intrinsics& k) {
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.width = j.at("width").get<int>();
  k.height = j.at("height").get<int>();
  k.validate();
}

}  // namespace causnvs
