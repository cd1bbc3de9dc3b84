#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "causnvs/metrics.hpp"
#include "causnvs/worldgen.hpp"

using namespace causnvs;
namespace fs = std::filesystem;

namespace {

SceneSpec empty_room() {
  SceneSpec s;
  for (int f = 0; f < 6; ++f) s.face_colors[f] = Vec3(0.1 + 0.1 * f, 0.5, 0.9 - 0.1 * f);
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("causnvs_test_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Worldgen, WallFacingCameraSeesFlatShadedWall) {
  const SceneSpec scene = empty_room();
  const Intrinsics k = Intrinsics::from_fov(16, 16, 40.0);
  const Pose pose = look_at(Vec3::Zero(), Vec3(0, 0, -1));
  const auto r = render_with_depth(scene, pose, k, 4);
  const Vec3 n(0, 0, 1);  // inward normal of the -z face
  const Vec3 expect = scene.face_colors[4] * (scene.ambient + (1 - scene.ambient) * std::max(0.0, n.dot(scene.light_dir)));
  const double wall = -scene.room_min.z();
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(r.image.at(y, x, c), 2 * expect[c] - 1, 1e-12);
      const Vec3 ray = pixel_ray(k, x + 0.5, y + 0.5);
      EXPECT_NEAR(r.depth(y, x), wall / ray.z(), 1e-9);
      EXPECT_GT(r.depth(y, x), 0.0);
    }
  }
}

TEST(Worldgen, RenderIsDeterministic) {
  const SceneSpec scene = SceneSpec::random(3);
  const Intrinsics k = Intrinsics::from_fov(16, 16, 60.0);
  const Pose pose = look_at(Vec3(1.5, 0.3, 1.0), Vec3::Zero());
  EXPECT_EQ(render(scene, pose, k, 2).data, render(scene, pose, k, 2).data);
  EXPECT_EQ(SceneSpec::random(3).spheres.size(), scene.spheres.size());
}

TEST(Worldgen, SphereCenterProjection) {
  SceneSpec scene = empty_room();
  scene.spheres.push_back({Vec3(0.4, -0.3, 0.2), 0.3, Vec3(0.9, 0.2, 0.2)});
  const Intrinsics k = Intrinsics::from_fov(32, 32, 60.0);
  const Pose pose = look_at(Vec3(-0.2, 0.1, 2.0), Vec3(0, 0, 0));
  const RowMat d = depth(scene, pose, k);
  // The sphere point closest to the camera lies on the ray through the center.
  Eigen::Index ry = 0, rx = 0;
  d.minCoeff(&ry, &rx);
  const Vec3 pc = inverse(pose).apply(scene.spheres[0].center);
  const double u = k.fx * pc.x() / pc.z() + k.cx;
  const double v = k.fy * pc.y() / pc.z() + k.cy;
  EXPECT_LE(std::abs(rx + 0.5 - u), 0.5);
  EXPECT_LE(std::abs(ry + 0.5 - v), 0.5);
  // Silhouette edge: depth jumps between sphere and wall.
  double max_jump = 0.0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 1; x < 32; ++x) max_jump = std::max(max_jump, std::abs(d(y, x) - d(y, x - 1)));
  }
  EXPECT_GT(max_jump, 0.5);
  EXPECT_GT(d.minCoeff(), 0.0);
}

TEST(Worldgen, TrajectoriesStayInFreeSpace) {
  const SceneSpec scene = SceneSpec::random(5);
  for (auto kind : {TrajectoryKind::Orbit, TrajectoryKind::RandomWalk, TrajectoryKind::ReturnBack,
                    TrajectoryKind::ForwardPush}) {
    TrajectorySpec spec;
    spec.kind = kind;
    spec.count = 24;
    spec.seed = 7;
    const auto poses = make_trajectory(scene, spec);
    ASSERT_EQ(poses.size(), 24u) << to_string(kind);
    for (const auto& p : poses) {
      EXPECT_TRUE(p.is_valid(1e-9));
      EXPECT_TRUE(scene.free_space(p.translation));
      // Looking towards the target.
      EXPECT_GT(p.rotation.col(2).dot((spec.target - p.translation).normalized()), 0.9);
    }
    EXPECT_EQ(trajectory_kind_from_string(to_string(kind)), kind);
  }
  EXPECT_THROW(trajectory_kind_from_string("spiral"), std::invalid_argument);
}

TEST(Worldgen, SceneSpecInvariants) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SceneSpec s = SceneSpec::random(seed);
    EXPECT_NO_THROW(s.validate());
    EXPECT_GE(s.spheres.size(), 3u);
    EXPECT_LE(s.spheres.size(), 8u);
    for (const auto& sp : s.spheres) {
      EXPECT_GT(sp.radius, 0.0);
      EXPECT_TRUE(s.inside_room(sp.center, sp.radius));
      EXPECT_GE(sp.color.minCoeff(), 0.0);
      EXPECT_LE(sp.color.maxCoeff(), 1.0);
    }
  }
  SceneSpec bad = SceneSpec::random(1);
  bad.spheres[0].radius = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  const nlohmann::json j = SceneSpec::random(2);
  const SceneSpec back = j.get<SceneSpec>();
  EXPECT_EQ(back.spheres.size(), SceneSpec::random(2).spheres.size());
  EXPECT_EQ(back.spheres[0].center, SceneSpec::random(2).spheres[0].center);
}

TEST(Worldgen, IdentityWarp) {
  const SceneSpec scene = SceneSpec::random(4);
  const Intrinsics k = Intrinsics::from_fov(16, 16, 60.0);
  const Pose pose = look_at(Vec3(1.2, 0.2, 1.2), Vec3::Zero());
  const auto r = render_with_depth(scene, pose, k);
  const auto w = warp(r.image, r.depth, pose, pose, k);
  EXPECT_TRUE(w.mask.all());
  EXPECT_EQ(w.image.data, r.image.data);
}

TEST(Worldgen, PureRotationWarpIsHomography) {
  const Intrinsics k = Intrinsics::from_fov(32, 32, 60.0);
  // Source colors encode the pixel coordinates.
  Image coords(32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      coords.at(y, x, 0) = x;
      coords.at(y, x, 1) = y;
    }
  }
  const RowMat far = RowMat::Constant(32, 32, 1e6);
  const Pose pi = look_at(Vec3(0, 0, 0), Vec3(0, 0, -1));
  const Pose pj{pi.rotation * axis_angle(Vec3::UnitY(), 0.15), pi.translation};
  const auto w = warp(coords, far, pi, pj, k);
  Eigen::Matrix3d K;
  K << k.fx, 0, k.cx, 0, k.fy, k.cy, 0, 0, 1;
  const Eigen::Matrix3d H = K * pj.rotation.transpose() * pi.rotation * K.inverse();
  int covered = 0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      if (!w.mask(y, x)) continue;
      ++covered;
      const Vec3 src(w.image.at(y, x, 0) + 0.5, w.image.at(y, x, 1) + 0.5, 1.0);
      const Vec3 dst = H * src;
      EXPECT_LE(std::abs(dst.x() / dst.z() - (x + 0.5)), 0.5 + 1e-9);
      EXPECT_LE(std::abs(dst.y() / dst.z() - (y + 0.5)), 0.5 + 1e-9);
    }
  }
  EXPECT_GT(covered, 32 * 32 / 2);
}

TEST(Worldgen, GroundTruthWarpAgreesOnNearbyViews) {
  DatasetConfig cfg;
  cfg.image_size = 32;
  const SceneData scene = make_scene(cfg, 0);
  std::vector<double> scores;
  for (std::size_t i = 0; i + 1 < 8; ++i) {
    const RowMat d = depth(scene.spec, scene.world_pose(i), scene.intrinsics);
    const auto s = warp_consistency(scene.images[i], scene.images[i + 1], d, scene.world_pose(i),
                                    scene.world_pose(i + 1), scene.intrinsics);
    ASSERT_TRUE(s.has_value());
    scores.push_back(*s);
  }
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size();
  // Much better than an unrelated pair of frames.
  const double unrelated = psnr(scene.images[0], scene.images[32]);
  EXPECT_GT(mean, unrelated + 5.0);
}

TEST(Worldgen, SampleTrainingSequence) {
  DatasetConfig cfg;
  cfg.n_scenes = 1;
  cfg.poses_per_scene = 20;
  cfg.render_samples = 1;
  const SceneData scene = make_scene(cfg, 0);
  std::mt19937_64 rng(9), replay(9);
  const auto s = sample_training_sequence(scene, 8, rng);
  ASSERT_EQ(s.indices.size(), 8u);
  EXPECT_EQ(std::set<std::size_t>(s.indices.begin(), s.indices.end()).size(), 8u);
  std::vector<std::size_t> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < 8; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(replay)]);
  }
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(s.indices[i], idx[i]);
    EXPECT_EQ(s.images[i].data, scene.images[idx[i]].data);
    EXPECT_EQ(s.poses[i].matrix(), scene.poses[idx[i]].matrix());
  }
  EXPECT_THROW(sample_training_sequence(scene, 21, rng), std::invalid_argument);
}

TEST(Worldgen, SceneNormalization) {
  DatasetConfig cfg;
  cfg.render_samples = 1;
  cfg.poses_per_scene = 16;
  const SceneData scene = make_scene(cfg, 2);
  double max_norm = 0.0;
  for (std::size_t i = 0; i < scene.poses.size(); ++i) {
    EXPECT_TRUE(scene.poses[i].is_valid(1e-9));
    EXPECT_TRUE(scene.spec.free_space(scene.world_pose(i).translation));
    max_norm = std::max(max_norm, scene.poses[i].translation.norm());
    EXPECT_NEAR((scene.world_pose(i).translation - scene.poses[i].translation * scene.scene_scale).norm(), 0.0, 1e-12);
  }
  EXPECT_NEAR(max_norm, 1.0, 1e-12);
}

TEST(Worldgen, DatasetOnDiskIsReproducible) {
  DatasetConfig cfg;
  cfg.n_scenes = 1;
  cfg.poses_per_scene = 6;
  cfg.image_size = 8;
  cfg.render_samples = 1;
  cfg.seed = 42;
  const auto a = temp_dir("ds_a"), b = temp_dir("ds_b");
  const auto ma = make_dataset(cfg, a);
  make_dataset(cfg, b);
  ASSERT_EQ(ma.scenes.size(), 1u);
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(a)) dirs += e.is_directory();
  EXPECT_EQ(dirs, 1u);
  for (int i = 0; i < 6; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.png", i);
    const auto pa = a / ma.scenes[0] / name;
    ASSERT_TRUE(fs::exists(pa));
    EXPECT_EQ(slurp(pa), slurp(b / ma.scenes[0] / name));
  }
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));

  const auto m = load_manifest(a);
  EXPECT_EQ(m.seed, 42u);
  EXPECT_EQ(m.image_size, 8);
  EXPECT_EQ(m.version, 1);
  const auto scene_json = nlohmann::json::parse(slurp(a / ma.scenes[0] / "manifest.json"));
  for (const char* key : {"version", "name", "scene", "trajectory", "intrinsics", "scene_scale", "frames"}) {
    EXPECT_TRUE(scene_json.contains(key)) << key;
  }
  EXPECT_EQ(scene_json.at("frames").size(), 6u);
  const SceneData loaded = load_scene(a, ma.scenes[0]);
  const SceneData fresh = make_scene(cfg, 0);
  ASSERT_EQ(loaded.images.size(), 6u);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(loaded.images[i].data, quantize8(fresh.images[i]).data);
    EXPECT_LT((loaded.poses[i].matrix() - fresh.poses[i].matrix()).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(load_manifest(temp_dir("missing")), std::exception);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Worldgen, DatasetConfigValidation) {
  DatasetConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.n_scenes = 0;
  EXPECT_THROW(cfg.validate(), std::exception);
  DatasetConfig c2;
  const nlohmann::json j = c2;
  EXPECT_EQ(j.get<DatasetConfig>().poses_per_scene, c2.poses_per_scene);
}
