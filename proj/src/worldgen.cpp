#include "causnvs/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "causnvs/errors.hpp"

namespace causnvs {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Vec3 json_vec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

// ---------------------------------------------------------------------------
// Scenes

SceneSpec SceneSpec::random(std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& c : s.face_colors) c = Vec3(0.25 + 0.6 * u(rng), 0.25 + 0.6 * u(rng), 0.25 + 0.6 * u(rng));
  const int n = 3 + static_cast<int>(u(rng) * 6.0);
  for (int i = 0; i < std::min(n, 8); ++i) {
    Sphere sp;
    sp.radius = 0.2 + 0.25 * u(rng);
    const double reach = 1.1 - sp.radius;
    const double r = reach * std::sqrt(u(rng));
    const double a = 2.0 * M_PI * u(rng);
    sp.center = Vec3(r * std::cos(a), -0.8 + 1.6 * u(rng), r * std::sin(a));
    // Saturated colors: one dominant channel, one weak.
    Vec3 c(u(rng), u(rng), u(rng));
    c(static_cast<int>(u(rng) * 3.0) % 3) = 0.85 + 0.15 * u(rng);
    c(static_cast<int>(u(rng) * 3.0) % 3) *= 0.3;
    sp.color = c.cwiseMax(0.05).cwiseMin(1.0);
    s.spheres.push_back(sp);
  }
  s.light_dir = Vec3(u(rng) - 0.5, 0.6 + 0.4 * u(rng), u(rng) - 0.5).normalized();
  return s;
}

bool SceneSpec::inside_room(const Vec3& p, double margin) const {
  return (p.array() > room_min.array() + margin).all() && (p.array() < room_max.array() - margin).all();
}

bool SceneSpec::free_space(const Vec3& p, double margin) const {
  if (!inside_room(p, margin)) return false;
  return std::none_of(spheres.begin(), spheres.end(),
                      [&](const Sphere& s) { return (p - s.center).norm() < s.radius + margin; });
}

void SceneSpec::validate() const {
  if (!(room_min.array() < room_max.array()).all()) throw std::invalid_argument("scene: empty room");
  auto in_unit = [](const Vec3& c) { return (c.array() >= 0.0).all() && (c.array() <= 1.0).all(); };
  for (const auto& c : face_colors) {
    if (!in_unit(c)) throw std::invalid_argument("scene: face color outside [0,1]");
  }
  for (const auto& s : spheres) {
    if (!(s.radius > 0.0)) throw std::invalid_argument("scene: sphere radius must be positive");
    if (!in_unit(s.color)) throw std::invalid_argument("scene: sphere color outside [0,1]");
    if (!inside_room(s.center, s.radius)) throw std::invalid_argument("scene: sphere outside the room");
  }
  if (std::abs(light_dir.norm() - 1.0) > 1e-9) throw std::invalid_argument("scene: light direction must be unit");
  if (ambient < 0.0 || ambient > 1.0) throw std::invalid_argument("scene: ambient outside [0,1]");
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json::object();
  j["seed"] = s.seed;
  j["room_min"] = vec_json(s.room_min);
  j["room_max"] = vec_json(s.room_max);
  j["face_colors"] = nlohmann::json::array();
  for (const auto& c : s.face_colors) j["face_colors"].push_back(vec_json(c));
  j["spheres"] = nlohmann::json::array();
  for (const auto& sp : s.spheres) {
    j["spheres"].push_back({{"center", vec_json(sp.center)}, {"radius", sp.radius}, {"color", vec_json(sp.color)}});
  }
  j["light_dir"] = vec_json(s.light_dir);
  j["ambient"] = s.ambient;
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  s.seed = j.at("seed").get<std::uint64_t>();
  s.room_min = json_vec(j.at("room_min"));
  s.room_max = json_vec(j.at("room_max"));
  const auto& fc = j.at("face_colors");
  if (!fc.is_array() || fc.size() != 6) throw std::invalid_argument("scene: need 6 face colors");
  for (std::size_t i = 0; i < 6; ++i) s.face_colors[i] = json_vec(fc[i]);
  s.spheres.clear();
  for (const auto& sj : j.at("spheres")) {
    s.spheres.push_back({json_vec(sj.at("center")), sj.at("radius").get<double>(), json_vec(sj.at("color"))});
  }
  s.light_dir = json_vec(j.at("light_dir"));
  s.ambient = j.at("ambient").get<double>();
}

// ---------------------------------------------------------------------------
// Trajectories

std::string to_string(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::Orbit: return "orbit";
    case TrajectoryKind::RandomWalk: return "random-walk";
    case TrajectoryKind::ReturnBack: return "return-back";
    case TrajectoryKind::ForwardPush: return "forward-push";
  }
  return "orbit";
}

TrajectoryKind trajectory_kind_from_string(const std::string& s) {
  if (s == "orbit") return TrajectoryKind::Orbit;
  if (s == "random-walk") return TrajectoryKind::RandomWalk;
  if (s == "return-back") return TrajectoryKind::ReturnBack;
  if (s == "forward-push") return TrajectoryKind::ForwardPush;
  throw std::invalid_argument("unknown trajectory kind '" + s + "'");
}

void to_json(nlohmann::json& j, const TrajectorySpec& t) {
  j = {{"kind", to_string(t.kind)}, {"count", t.count}, {"radius", t.radius},        {"height", t.height},
       {"arc_deg", t.arc_deg},      {"step", t.step},   {"target", vec_json(t.target)}, {"seed", t.seed}};
}

void from_json(const nlohmann::json& j, TrajectorySpec& t) {
  t.kind = trajectory_kind_from_string(j.at("kind").get<std::string>());
  t.count = j.at("count").get<int>();
  t.radius = j.at("radius").get<double>();
  t.height = j.at("height").get<double>();
  t.arc_deg = j.at("arc_deg").get<double>();
  t.step = j.at("step").get<double>();
  t.target = json_vec(j.at("target"));
  t.seed = j.at("seed").get<std::uint64_t>();
}

namespace {

Vec3 orbit_eye(const TrajectorySpec& spec, double angle_rad, double radius) {
  return spec.target + Vec3(radius * std::sin(angle_rad), spec.height, -radius * std::cos(angle_rad));
}

}  // namespace

std::vector<Pose> make_trajectory(const SceneSpec& scene, const TrajectorySpec& spec) {
  if (spec.count < 1) throw std::invalid_argument("trajectory: count must be positive");
  if (!(spec.radius > 0.0)) throw std::invalid_argument("trajectory: radius must be positive");
  std::vector<Pose> poses;
  poses.reserve(static_cast<std::size_t>(spec.count));
  const double arc = spec.arc_deg * M_PI / 180.0;
  switch (spec.kind) {
    case TrajectoryKind::Orbit: {
      const bool closed = std::abs(spec.arc_deg - 360.0) < 1e-9;
      const double denom = closed ? spec.count : std::max(1, spec.count - 1);
      for (int k = 0; k < spec.count; ++k) {
        poses.push_back(look_at(orbit_eye(spec, arc * k / denom, spec.radius), spec.target));
      }
      break;
    }
    case TrajectoryKind::ReturnBack: {
      // Out along the arc for the first half, then back over the same path.
      const int half = (spec.count + 1) / 2;
      for (int k = 0; k < spec.count; ++k) {
        const int s = k < half ? k : spec.count - 1 - k;
        const double a = half > 1 ? arc * s / (half - 1) : 0.0;
        poses.push_back(look_at(orbit_eye(spec, a, spec.radius), spec.target));
      }
      break;
    }
    case TrajectoryKind::RandomWalk: {
      std::mt19937_64 rng(splitmix64(spec.seed ^ 0x5A5A5A5Aull));
      std::normal_distribution<double> n(0.0, 1.0);
      Vec3 eye = orbit_eye(spec, 0.0, spec.radius);
      const double min_r = 1.2;
      for (int k = 0; k < spec.count; ++k) {
        poses.push_back(look_at(eye, spec.target));
        for (int attempt = 0; attempt < 50; ++attempt) {
          Vec3 d(n(rng), 0.3 * n(rng), n(rng));
          const Vec3 next = eye + spec.step * d.normalized();
          Vec3 flat = next - spec.target;
          flat.y() = 0.0;
          if (scene.free_space(next, 0.3) && flat.norm() > min_r) {
            eye = next;
            break;
          }
        }
      }
      break;
    }
    case TrajectoryKind::ForwardPush: {
      const Vec3 start = orbit_eye(spec, 0.0, spec.radius);
      const Vec3 dir = (spec.target - start).normalized();
      Vec3 eye = start;
      for (int k = 0; k < spec.count; ++k) {
        poses.push_back(look_at(eye, spec.target));
        const Vec3 next = eye + spec.step * dir;
        if (scene.free_space(next, 0.3) && (spec.target - next).norm() > 0.3) eye = next;
      }
      break;
    }
  }
  for (const auto& p : poses) {
    if (!scene.free_space(p.translation)) throw std::invalid_argument("trajectory leaves free space");
  }
  return poses;
}

// ---------------------------------------------------------------------------
// Rendering

Vec3 pixel_ray(const Intrinsics& k, double x, double y) {
  return Vec3((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0).normalized();
}

namespace {

struct Hit {
  double distance = kInf;
  Vec3 normal = Vec3::Zero();
  Vec3 color = Vec3::Zero();
};

Hit trace(const SceneSpec& scene, const Vec3& origin, const Vec3& dir) {
  Hit hit;
  for (const auto& s : scene.spheres) {
    const Vec3 oc = origin - s.center;
    const double b = oc.dot(dir);
    const double c = oc.squaredNorm() - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= 1e-9) t = -b + sq;
    if (t > 1e-9 && t < hit.distance) {
      hit.distance = t;
      hit.normal = (origin + t * dir - s.center) / s.radius;
      hit.color = s.color;
    }
  }
  if (std::isfinite(hit.distance)) return hit;
  // Exit point of the closed room.
  double best = kInf;
  int face = -1;
  for (int a = 0; a < 3; ++a) {
    if (dir(a) > 0.0) {
      const double t = (scene.room_max(a) - origin(a)) / dir(a);
      if (t < best) best = t, face = 2 * a + 1;
    } else if (dir(a) < 0.0) {
      const double t = (scene.room_min(a) - origin(a)) / dir(a);
      if (t < best) best = t, face = 2 * a;
    }
  }
  hit.distance = best;
  hit.normal = Vec3::Zero();
  hit.normal(face / 2) = (face % 2 == 1) ? -1.0 : 1.0;
  hit.color = scene.face_colors[static_cast<std::size_t>(face)];
  return hit;
}

Vec3 shade(const SceneSpec& scene, const Hit& hit) {
  return hit.color * (scene.ambient + (1.0 - scene.ambient) * std::max(0.0, hit.normal.dot(scene.light_dir)));
}

}  // namespace

RenderResult render_with_depth(const SceneSpec& scene, const Pose& pose, const Intrinsics& k, int samples) {
  k.validate();
  if (samples < 1) throw std::invalid_argument("render: samples must be positive");
  RenderResult out{Image(k.height, k.width), RowMat(k.height, k.width)};
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Hit center = trace(scene, pose.translation, pose.rotation * pixel_ray(k, x + 0.5, y + 0.5));
      out.depth(y, x) = center.distance;
      Vec3 color = Vec3::Zero();
      if (samples == 1) {
        color = shade(scene, center);
      } else {
        for (int sy = 0; sy < samples; ++sy) {
          for (int sx = 0; sx < samples; ++sx) {
            const Vec3 dir = pose.rotation * pixel_ray(k, x + (sx + 0.5) / samples, y + (sy + 0.5) / samples);
            color += shade(scene, trace(scene, pose.translation, dir));
          }
        }
        color /= samples * samples;
      }
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = 2.0 * color(c) - 1.0;
    }
  }
  return out;
}

Image render(const SceneSpec& scene, const Pose& pose, const Intrinsics& k, int samples) {
  return render_with_depth(scene, pose, k, samples).image;
}

RowMat depth(const SceneSpec& scene, const Pose& pose, const Intrinsics& k) {
  return render_with_depth(scene, pose, k).depth;
}

// ---------------------------------------------------------------------------
// Warp

WarpResult warp(const Image& image_i, const RowMat& depth_i, const Pose& pose_i, const Pose& pose_j,
                const Intrinsics& k) {
  if (depth_i.rows() != image_i.height || depth_i.cols() != image_i.width || image_i.height != k.height ||
      image_i.width != k.width) {
    throw std::invalid_argument("warp: image, depth and intrinsics sizes differ");
  }
  const int H = k.height;
  const int W = k.width;
  const Pose to_j = relative(pose_j, pose_i);  // camera i -> camera j coordinates

  struct Splat {
    int src = -1;
    double depth = kInf;
    double center_dist = kInf;
  };
  std::vector<Splat> splats;
  std::vector<int> target(static_cast<std::size_t>(H) * W, -1);
  std::vector<double> zmin(static_cast<std::size_t>(H) * W, kInf);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double d = depth_i(y, x);
      if (!(d > 0.0) || !std::isfinite(d)) continue;
      const Vec3 pc = to_j.apply(d * pixel_ray(k, x + 0.5, y + 0.5));
      if (pc.z() <= 1e-9) continue;
      const double px = k.fx * pc.x() / pc.z() + k.cx;
      const double py = k.fy * pc.y() / pc.z() + k.cy;
      const int tx = static_cast<int>(std::floor(px));
      const int ty = static_cast<int>(std::floor(py));
      if (tx < 0 || ty < 0 || tx >= W || ty >= H) continue;
      const int ti = ty * W + tx;
      const double dist = std::hypot(px - (tx + 0.5), py - (ty + 0.5));
      splats.push_back({y * W + x, pc.norm(), dist});
      target[static_cast<std::size_t>(y) * W + x] = ti;
      zmin[static_cast<std::size_t>(ti)] = std::min(zmin[static_cast<std::size_t>(ti)], pc.norm());
    }
  }
  std::vector<int> chosen(static_cast<std::size_t>(H) * W, -1);
  std::vector<double> chosen_dist(static_cast<std::size_t>(H) * W, kInf);
  for (const auto& s : splats) {
    const int ti = target[static_cast<std::size_t>(s.src)];
    if (s.depth > zmin[static_cast<std::size_t>(ti)] * 1.01) continue;
    if (s.center_dist < chosen_dist[static_cast<std::size_t>(ti)]) {
      chosen_dist[static_cast<std::size_t>(ti)] = s.center_dist;
      chosen[static_cast<std::size_t>(ti)] = s.src;
    }
  }
  WarpResult out{Image(H, W), Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(H, W, false)};
  for (int ti = 0; ti < H * W; ++ti) {
    const int src = chosen[static_cast<std::size_t>(ti)];
    if (src < 0) continue;
    out.mask(ti / W, ti % W) = true;
    for (int c = 0; c < 3; ++c) out.image.at(ti / W, ti % W, c) = image_i.at(src / W, src % W, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

void DatasetConfig::validate() const {
  if (n_scenes < 1) throw ConfigError("dataset: n_scenes must be positive");
  if (poses_per_scene < 2) throw ConfigError("dataset: poses_per_scene must be >= 2");
  if (image_size < 4) throw ConfigError("dataset: image_size must be >= 4");
  if (!(fov_deg > 1.0 && fov_deg < 170.0)) throw ConfigError("dataset: fov_deg outside (1, 170)");
  if (radius_jitter < 0.0 || height_jitter < 0.0) throw ConfigError("dataset: jitter must be nonnegative");
  if (render_samples < 1 || render_samples > 16) throw ConfigError("dataset: render_samples must be in [1, 16]");
  if (trajectory.radius - radius_jitter < 1.3 || trajectory.radius + radius_jitter > 2.2) {
    throw ConfigError("dataset: orbit radius range must lie within [1.3, 2.2]");
  }
  if (std::abs(trajectory.height) + height_jitter > 1.2) throw ConfigError("dataset: camera height out of range");
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"n_scenes", c.n_scenes},          {"poses_per_scene", c.poses_per_scene}, {"image_size", c.image_size},
       {"fov_deg", c.fov_deg},            {"seed", c.seed},                       {"trajectory", c.trajectory},
       {"radius_jitter", c.radius_jitter}, {"height_jitter", c.height_jitter},
       {"render_samples", c.render_samples}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c.n_scenes = j.at("n_scenes").get<int>();
  c.poses_per_scene = j.at("poses_per_scene").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.fov_deg = j.at("fov_deg").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.trajectory = j.at("trajectory").get<TrajectorySpec>();
  c.radius_jitter = j.at("radius_jitter").get<double>();
  c.height_jitter = j.at("height_jitter").get<double>();
  c.render_samples = j.at("render_samples").get<int>();
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"version", m.version},       {"seed", m.seed},     {"image_size", m.image_size},
       {"intrinsics", m.intrinsics}, {"scenes", m.scenes}, {"config", m.config}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.version = j.at("version").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.image_size = j.at("image_size").get<int>();
  m.intrinsics = j.at("intrinsics").get<Intrinsics>();
  m.scenes = j.at("scenes").get<std::vector<std::string>>();
  m.config = j.at("config").get<DatasetConfig>();
}

Pose SceneData::world_pose(std::size_t i) const {
  Pose p = poses.at(i);
  p.translation *= scene_scale;
  return p;
}

namespace {

std::string scene_name(int index) {
  std::ostringstream os;
  os << "scene_" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

std::string frame_name(std::size_t index) {
  std::ostringstream os;
  os << "frame_" << std::setw(4) << std::setfill('0') << index << ".png";
  return os.str();
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace

SceneData make_scene(const DatasetConfig& config, int index) {
  config.validate();
  const std::uint64_t seed = splitmix64(config.seed * 0x100000001B3ull + static_cast<std::uint64_t>(index));
  SceneData sd;
  sd.name = scene_name(index);
  sd.spec = SceneSpec::random(seed);
  sd.intrinsics = Intrinsics::from_fov(config.image_size, config.image_size, config.fov_deg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  sd.trajectory = config.trajectory;
  sd.trajectory.count = config.poses_per_scene;
  sd.trajectory.radius += config.radius_jitter * u(rng);
  sd.trajectory.height += config.height_jitter * u(rng);
  sd.trajectory.seed = seed;
  const auto world = make_trajectory(sd.spec, sd.trajectory);
  const auto scaled = normalize_scene_scale(world);
  sd.scene_scale = scaled.scale;
  sd.poses = scaled.poses;
  for (const auto& p : world) sd.images.push_back(render(sd.spec, p, sd.intrinsics, config.render_samples));
  return sd;
}

DatasetManifest make_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.seed = config.seed;
  m.image_size = config.image_size;
  m.intrinsics = Intrinsics::from_fov(config.image_size, config.image_size, config.fov_deg);
  m.config = config;
  for (int s = 0; s < config.n_scenes; ++s) {
    const SceneData sd = make_scene(config, s);
    const auto dir = out_dir / sd.name;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json frames = nlohmann::json::array();
    for (std::size_t i = 0; i < sd.images.size(); ++i) {
      write_png(dir / frame_name(i), sd.images[i]);
      frames.push_back({{"index", i}, {"file", frame_name(i)}, {"pose", sd.poses[i]}});
    }
    write_json(dir / "manifest.json", {{"version", 1},
                                       {"name", sd.name},
                                       {"scene", sd.spec},
                                       {"trajectory", sd.trajectory},
                                       {"intrinsics", sd.intrinsics},
                                       {"scene_scale", sd.scene_scale},
                                       {"frames", frames}});
    m.scenes.push_back(sd.name);
  }
  write_json(out_dir / "manifest.json", m);
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir) {
  const auto j = read_json(dataset_dir / "manifest.json");
  try {
    auto m = j.get<DatasetManifest>();
    if (m.version != 1) throw IoError("dataset manifest: unsupported version");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("dataset manifest: ") + e.what());
  }
}

SceneData load_scene(const std::filesystem::path& dataset_dir, const std::string& scene) {
  const auto dir = dataset_dir / scene;
  const auto j = read_json(dir / "manifest.json");
  SceneData sd;
  try {
    sd.name = j.at("name").get<std::string>();
    sd.spec = j.at("scene").get<SceneSpec>();
    sd.trajectory = j.at("trajectory").get<TrajectorySpec>();
    sd.intrinsics = j.at("intrinsics").get<Intrinsics>();
    sd.scene_scale = j.at("scene_scale").get<double>();
    for (const auto& f : j.at("frames")) {
      sd.poses.push_back(f.at("pose").get<Pose>());
      sd.images.push_back(read_png(dir / f.at("file").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("scene manifest " + dir.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError("scene manifest " + dir.string() + ": " + e.what());
  }
  return sd;
}

TrainingSample sample_training_sequence(const SceneData& scene, int num_frames, std::mt19937_64& rng) {
  if (num_frames < 1) throw std::invalid_argument("sample_training_sequence: need at least one frame");
  if (static_cast<std::size_t>(num_frames) > scene.poses.size()) {
    throw std::invalid_argument("sample_training_sequence: pose pool smaller than F");
  }
  std::vector<std::size_t> idx(scene.poses.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first F entries are a uniformly random ordered draw.
  for (int i = 0; i < num_frames; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[pick(rng)]);
  }
  TrainingSample s;
  for (int i = 0; i < num_frames; ++i) {
    const std::size_t k = idx[static_cast<std::size_t>(i)];
    s.indices.push_back(k);
    s.images.push_back(scene.images[k]);
    s.poses.push_back(scene.poses[k]);
  }
  return s;
}

}  // namespace causnvs
