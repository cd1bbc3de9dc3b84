#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include "json.hpp"

namespace causnvs {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;

/**
 * Rigid camera-to-world transform.
 *
 * A point x_cam in the camera frame (x right, y down, z forward) maps to
 * rotation * x_cam + translation in the world frame.
 */
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  /// Throws std::invalid_argument if the bottom row is not (0,0,0,1).
  static Pose from_matrix(const Mat4& m);

  /// Homogeneous form; the bottom row is exactly (0,0,0,1).
  Mat4 matrix() const;

  /// Orthonormality and det(R) = +1 within tol.
  bool is_valid(double tol = 1e-6) const;

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  /// Square pixels, principal point at the image center.
  static Intrinsics from_fov(int width, int height, double horizontal_fov_deg);
  /// Throws std::invalid_argument when the invariants fail.
  void validate() const;
};

struct PoseDistanceParams {
  double rotation_weight = 1.0;    // scene units per radian
  double translation_scale = 1.0;  // scene units

  void validate() const;
};

Pose compose(const Pose& a, const Pose& b);
Pose inverse(const Pose& p);
/// p_query^-1 * p_key. Left-invariant under world-frame changes.
Pose relative(const Pose& p_query, const Pose& p_key);

/// Angle of a^T b in [0, pi].
double rotation_geodesic(const Mat3& a, const Mat3& b);

/// ||t_a - t_b|| / s + lambda * geodesic(R_a, R_b).
double pose_distance(const Pose& a, const Pose& b, const PoseDistanceParams& params);

struct ScaledPoses {
  std::vector<Pose> poses;
  double scale = 1.0;
};

/// Divides translations by the largest translation norm (1 if all are zero).
/// Throws std::invalid_argument on an empty list.
ScaledPoses normalize_scene_scale(std::span<const Pose> poses);

Mat3 axis_angle(const Vec3& axis, double angle);
inline Mat3 rot_x(double a) { return axis_angle(Vec3::UnitX(), a); }
inline Mat3 rot_y(double a) { return axis_angle(Vec3::UnitY(), a); }
inline Mat3 rot_z(double a) { return axis_angle(Vec3::UnitZ(), a); }

/// Camera at eye looking at target; the camera y axis points away from world_up.
Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up = Vec3::UnitY());

/// Projects rotation*x+translation back onto SE(3) after accumulated round-off.
Pose orthonormalized(const Pose& p);

void to_json(nlohmann::json& j, const Pose& p);
void from_json(const nlohmann::json& j, Pose& p);
void to_json(nlohmann::json& j, const Intrinsics& k);
void from_json(const nlohmann::json& j, Intrinsics& k);

}  // namespace causnvs
