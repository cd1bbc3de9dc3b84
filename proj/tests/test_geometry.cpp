#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "causnvs/geometry.hpp"

using namespace causnvs;

namespace {

Pose random_pose(std::mt19937_64& rng, double t_scale = 2.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  Pose p;
  p.rotation = q.toRotationMatrix();
  p.translation = t_scale * Vec3(n(rng), n(rng), n(rng));
  return p;
}

// Plain 4x4 arithmetic, independent of the Pose helpers.
Mat4 hom(const Mat3& r, const Vec3& t) {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = t;
  return m;
}

Mat3 rz_manual(double a) {
  Mat3 r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

}  // namespace

TEST(Geometry, ComposeIdentityAndInverse) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const Pose p = random_pose(rng);
    EXPECT_TRUE(compose(Pose::identity(), p).matrix().isApprox(p.matrix(), 1e-15));
    EXPECT_LT((compose(p, inverse(p)).matrix() - Mat4::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((inverse(inverse(p)).matrix() - p.matrix()).cwiseAbs().maxCoeff(), 1e-9);
  }
  EXPECT_EQ(inverse(Pose::identity()).matrix(), Mat4::Identity());
}

TEST(Geometry, ComposeMatchesMatrixProduct) {
  Pose a{rz_manual(M_PI / 2), Vec3(1, 0, 0)};
  Pose b{rz_manual(M_PI / 2), Vec3::Zero()};
  const Pose c = compose(a, b);
  EXPECT_LT((c.rotation - rz_manual(M_PI)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((c.translation - Vec3(1, 0, 0)).norm(), 1e-12);

  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const Pose x = random_pose(rng), y = random_pose(rng), z = random_pose(rng);
    const Mat4 oracle = hom(x.rotation, x.translation) * hom(y.rotation, y.translation);
    EXPECT_LT((compose(x, y).matrix() - oracle).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((compose(compose(x, y), z).matrix() - compose(x, compose(y, z)).matrix()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Geometry, InverseOracle) {
  const Pose p{rz_manual(M_PI / 2), Vec3(1, 0, 0)};
  const Pose inv = inverse(p);
  EXPECT_LT((inv.rotation - rz_manual(-M_PI / 2)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((inv.translation - Vec3(0, 1, 0)).norm(), 1e-12);
  EXPECT_LT((inv.matrix() - hom(p.rotation, p.translation).inverse()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Geometry, RelativeIsLeftInvariant) {
  std::mt19937_64 rng(3);
  const Pose p = random_pose(rng);
  EXPECT_LT((relative(p, p).matrix() - Mat4::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((relative(Pose::identity(), p).matrix() - p.matrix()).cwiseAbs().maxCoeff(), 1e-15);
  for (int i = 0; i < 100; ++i) {
    const Pose g = random_pose(rng, 5.0), a = random_pose(rng), b = random_pose(rng);
    const Mat4 oracle = hom(a.rotation, a.translation).inverse() * hom(b.rotation, b.translation);
    EXPECT_LT((relative(a, b).matrix() - oracle).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((relative(compose(g, a), compose(g, b)).matrix() - relative(a, b).matrix()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Geometry, RotationGeodesic) {
  const Mat3 r = rz_manual(0.4);
  EXPECT_NEAR(rotation_geodesic(r, r), 0.0, 1e-12);
  EXPECT_NEAR(rotation_geodesic(Mat3::Identity(), rz_manual(M_PI)), M_PI, 1e-12);
  EXPECT_NEAR(rotation_geodesic(rz_manual(0.3), rz_manual(1.0)), 0.7, 1e-12);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    const double g = rotation_geodesic(a.rotation, b.rotation);
    EXPECT_GE(g, 0.0);
    EXPECT_LE(g, M_PI);
    EXPECT_NEAR(g, rotation_geodesic(b.rotation, a.rotation), 1e-12);
    // Axis-angle oracle: angle of the relative rotation.
    const Eigen::AngleAxisd aa(a.rotation.transpose() * b.rotation);
    EXPECT_NEAR(g, aa.angle(), 1e-9);
  }
  // Tiny angles keep full precision.
  EXPECT_NEAR(rotation_geodesic(Mat3::Identity(), rz_manual(1e-7)), 1e-7, 1e-15);
}

TEST(Geometry, PoseDistance) {
  std::mt19937_64 rng(5);
  const Pose p = random_pose(rng);
  PoseDistanceParams params;
  EXPECT_NEAR(pose_distance(p, p, params), 0.0, 1e-12);
  PoseDistanceParams trans_only{0.0, 1.0};
  for (int i = 0; i < 5; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    EXPECT_NEAR(pose_distance(a, b, trans_only), (a.translation - b.translation).norm(), 1e-12);
    PoseDistanceParams w{0.7, 2.5};
    // Step-by-step recomputation.
    const Mat3 rel = a.rotation.transpose() * b.rotation;
    const double angle = std::acos(std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0));
    const double expect = (a.translation - b.translation).norm() / 2.5 + 0.7 * angle;
    EXPECT_NEAR(pose_distance(a, b, w), expect, 1e-9);
    EXPECT_NEAR(pose_distance(a, b, w), pose_distance(b, a, w), 1e-12);
    EXPECT_GT(pose_distance(a, b, w), 0.0);
  }
  EXPECT_THROW((PoseDistanceParams{-1.0, 1.0}.validate()), std::invalid_argument);
  EXPECT_THROW((PoseDistanceParams{1.0, 0.0}.validate()), std::invalid_argument);
}

TEST(Geometry, NormalizeSceneScale) {
  std::vector<Pose> zeros(3);
  const auto z = normalize_scene_scale(zeros);
  EXPECT_EQ(z.scale, 1.0);
  for (const auto& p : z.poses) EXPECT_EQ(p.translation, Vec3::Zero());

  Pose one;
  one.translation = Vec3(0, 4, 0);
  const auto s1 = normalize_scene_scale(std::vector<Pose>{one});
  EXPECT_DOUBLE_EQ(s1.scale, 4.0);
  EXPECT_DOUBLE_EQ(s1.poses[0].translation.norm(), 1.0);

  std::mt19937_64 rng(6);
  std::vector<Pose> ps;
  for (int i = 0; i < 10; ++i) ps.push_back(random_pose(rng, 3.0));
  const auto s = normalize_scene_scale(ps);
  double max_norm = 0.0;
  for (const auto& p : ps) max_norm = std::max(max_norm, p.translation.norm());
  EXPECT_DOUBLE_EQ(s.scale, max_norm);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(s.poses[i].rotation, ps[i].rotation);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(s.poses[i].translation[c] * s.scale, ps[i].translation[c], 1e-12);
  }
  EXPECT_THROW(normalize_scene_scale(std::vector<Pose>{}), std::invalid_argument);
}

TEST(Geometry, PoseValidityAndMatrixForm) {
  std::mt19937_64 rng(7);
  const Pose p = random_pose(rng);
  EXPECT_TRUE(p.is_valid());
  const Mat4 m = p.matrix();
  EXPECT_EQ(m(3, 0), 0.0);
  EXPECT_EQ(m(3, 1), 0.0);
  EXPECT_EQ(m(3, 2), 0.0);
  EXPECT_EQ(m(3, 3), 1.0);
  Pose bad = p;
  bad.rotation(0, 0) += 1e-3;
  EXPECT_FALSE(bad.is_valid());
  Pose mirror;
  mirror.rotation = Mat3::Identity();
  mirror.rotation(2, 2) = -1.0;
  EXPECT_FALSE(mirror.is_valid());
  Mat4 m2 = m;
  m2(3, 1) = 0.5;
  EXPECT_THROW(Pose::from_matrix(m2), std::invalid_argument);
}

TEST(Geometry, LookAtConvention) {
  const Pose p = look_at(Vec3(0, 0, -2), Vec3::Zero());
  EXPECT_TRUE(p.is_valid(1e-12));
  // z forward points at the target, y down is opposite world up.
  EXPECT_LT((p.rotation.col(2) - Vec3(0, 0, 1)).norm(), 1e-12);
  EXPECT_LT(p.rotation.col(1).dot(Vec3::UnitY()), 0.0);
  EXPECT_LT((p.apply(Vec3(0, 0, 2)) - Vec3::Zero()).norm(), 1e-12);
}

TEST(Geometry, JsonRoundTrip) {
  std::mt19937_64 rng(8);
  const Pose p = random_pose(rng);
  const nlohmann::json j = p;
  ASSERT_EQ(j.size(), 4u);
  const Pose q = j.get<Pose>();
  EXPECT_LT((q.matrix() - p.matrix()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW((nlohmann::json{1, 2, 3}.get<Pose>()), std::invalid_argument);
  const Intrinsics k = Intrinsics::from_fov(16, 16, 60.0);
  const nlohmann::json jk = k;
  const Intrinsics k2 = jk.get<Intrinsics>();
  EXPECT_EQ(k2.fx, k.fx);
  EXPECT_EQ(k2.cx, 8.0);
  EXPECT_NEAR(k.fx, 8.0 / std::tan(M_PI / 6), 1e-12);
  Intrinsics bad = k;
  bad.cx = 16.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
