#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "causnvs/geometry.hpp"
#include "causnvs/image.hpp"
#include "causnvs/types.hpp"
#include "json.hpp"

namespace causnvs {

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.5;
  Vec3 color = Vec3::Constant(0.5);  // linear RGB in [0, 1]
};

/// Axis-aligned box room with flat-colored faces and a few spheres,
/// lit by ambient plus one directional light.
struct SceneSpec {
  std::uint64_t seed = 0;
  Vec3 room_min = Vec3(-2.5, -1.5, -2.5);
  Vec3 room_max = Vec3(2.5, 1.5, 2.5);
  std::array<Vec3, 6> face_colors{};  // -x, +x, -y, +y, -z, +z
  std::vector<Sphere> spheres;
  Vec3 light_dir = Vec3(0.3, 1.0, 0.2).normalized();  // towards the light
  double ambient = 0.2;

  /// 3-8 spheres placed inside the central region of the room.
  static SceneSpec random(std::uint64_t seed);
  bool inside_room(const Vec3& p, double margin = 0.0) const;
  /// Inside the room and outside every sphere.
  bool free_space(const Vec3& p, double margin = 0.0) const;
  /// Throws std::invalid_argument when the invariants fail.
  void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

enum class TrajectoryKind { Orbit, RandomWalk, ReturnBack, ForwardPush };

std::string to_string(TrajectoryKind kind);
TrajectoryKind trajectory_kind_from_string(const std::string& s);

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::Orbit;
  int count = 64;
  double radius = 1.8;     // orbit radius / start distance from the target
  double height = 0.0;     // camera height offset
  double arc_deg = 360.0;  // orbit and return-back angular extent
  double step = 0.08;      // random-walk / forward-push step length
  Vec3 target = Vec3::Zero();
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrajectorySpec& t);
void from_json(const nlohmann::json& j, TrajectorySpec& t);

/// Camera-to-world poses, all in free space and looking at the target.
std::vector<Pose> make_trajectory(const SceneSpec& scene, const TrajectorySpec& spec);

struct RenderResult {
  Image image;
  RowMat depth;  // ray hit distance per pixel, height x width
};

/// Color averages samples x samples rays per pixel; depth is always the
/// distance along the pixel-center ray.
RenderResult render_with_depth(const SceneSpec& scene, const Pose& pose, const Intrinsics& intrinsics,
                               int samples = 1);
Image render(const SceneSpec& scene, const Pose& pose, const Intrinsics& intrinsics, int samples = 1);
RowMat depth(const SceneSpec& scene, const Pose& pose, const Intrinsics& intrinsics);

/// Unit ray direction through pixel (x, y) in camera coordinates.
Vec3 pixel_ray(const Intrinsics& k, double x, double y);

struct WarpResult {
  Image image;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask;
};

/// Forward-splats view i into view j through its depth map. A target pixel
/// keeps the nearest-depth splat (ties within 1% of depth go to the splat
/// landing closest to the pixel center); pixels receiving nothing are masked out.
WarpResult warp(const Image& image_i, const RowMat& depth_i, const Pose& pose_i, const Pose& pose_j,
                const Intrinsics& intrinsics);

struct DatasetConfig {
  int n_scenes = 64;
  int poses_per_scene = 64;
  int image_size = 16;
  double fov_deg = 60.0;
  std::uint64_t seed = 0;
  TrajectorySpec trajectory;
  /// Random per-scene jitter of the orbit radius and height.
  double radius_jitter = 0.2;
  double height_jitter = 0.3;
  /// Supersampling per pixel axis for color (depth always uses the center ray).
  int render_samples = 4;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

/// One scene's frames; poses are scene-normalized (translation / scene_scale).
struct SceneData {
  std::string name;
  SceneSpec spec;
  TrajectorySpec trajectory;
  Intrinsics intrinsics;
  double scene_scale = 1.0;
  std::vector<Pose> poses;
  std::vector<Image> images;

  /// Pose in the renderer's world units.
  Pose world_pose(std::size_t i) const;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  int image_size = 0;
  Intrinsics intrinsics;
  std::vector<std::string> scenes;  // directory names relative to the dataset root
  DatasetConfig config;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Scene `index` of a dataset, rendered in memory.
SceneData make_scene(const DatasetConfig& config, int index);

/// Writes out_dir/manifest.json and out_dir/scene_XXXX/{manifest.json, frame_YYYY.png}.
DatasetManifest make_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir);
/// Images are read back from the PNG files.
SceneData load_scene(const std::filesystem::path& dataset_dir, const std::string& scene);

struct TrainingSample {
  std::vector<std::size_t> indices;  // into the scene's pose list, in sequence order
  std::vector<Image> images;
  std::vector<Pose> poses;
};

/// F distinct frames drawn without replacement, in shuffled order.
TrainingSample sample_training_sequence(const SceneData& scene, int num_frames, std::mt19937_64& rng);

}  // namespace causnvs
