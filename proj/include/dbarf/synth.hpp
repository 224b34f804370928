// Deterministic synthetic scenes with analytic ground truth: textured planes,
// exact ray-plane depth, forward-facing arc / orbit trajectories and seeded
// pose perturbation. Everything is keyed by seed and involves no network, so
// these outputs serve as oracles for the geometric and end-to-end tests.
#pragma once

#include "dbarf/geometry.hpp"
#include "dbarf/image.hpp"

namespace dbarf {

// Multi-octave value noise over 2-d coordinates; smoothstep-interpolated
// lattice values hashed from the seed. C1-continuous and view independent.
class NoiseTexture {
 public:
  NoiseTexture() = default;
  NoiseTexture(uint64_t seed, int octaves, double base_freq)
      : seed_(seed), octaves_(octaves), base_freq_(base_freq) {}

  // channel c in {0,1,2}; returns [0,1]
  double sample(double x, double y, int c) const {
    double acc = 0.0, norm = 0.0, amp = 1.0, freq = base_freq_;
    for (int o = 0; o < octaves_; ++o) {
      acc += amp * lattice(x * freq, y * freq, hash_key(o, c));
      norm += amp;
      amp *= 0.5;
      freq *= 2.0;
    }
    return acc / norm;
  }

  int octaves() const { return octaves_; }
  double base_freq() const { return base_freq_; }

 private:
  uint64_t hash_key(int octave, int channel) const {
    uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(octave * 3 + channel + 1));
    return splitmix64(s);
  }

  static double corner(uint64_t key, int64_t ix, int64_t iy) {
    uint64_t s = key ^ (static_cast<uint64_t>(ix) * 0x8ebc6af09c88c6e3ULL) ^
                 (static_cast<uint64_t>(iy) * 0x589965cc75374cc3ULL);
    return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
  }

  static double lattice(double x, double y, uint64_t key) {
    const double fx = std::floor(x), fy = std::floor(y);
    const int64_t ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
    const double tx = x - fx, ty = y - fy;
    const double sx = tx * tx * (3.0 - 2.0 * tx);
    const double sy = ty * ty * (3.0 - 2.0 * ty);
    const double v00 = corner(key, ix, iy), v01 = corner(key, ix + 1, iy);
    const double v10 = corner(key, ix, iy + 1), v11 = corner(key, ix + 1, iy + 1);
    return (v00 * (1 - sx) + v01 * sx) * (1 - sy) + (v10 * (1 - sx) + v11 * sx) * sy;
  }

  uint64_t seed_ = 0;
  int octaves_ = 4;
  double base_freq_ = 0.3;
};

struct Plane {
  Vec3 point = Vec3(0, 0, 5);   // a point on the plane
  Vec3 normal = Vec3(0, 0, -1); // unit, facing the cameras
  Vec3 axis_u = Vec3(1, 0, 0);  // in-plane texture axes
  Vec3 axis_v = Vec3(0, 1, 0);
  double half_u = 8.0, half_v = 8.0;
  NoiseTexture texture;
};

struct SceneConfig {
  int plane_count = 0;       // 0: draw 1..4 from the seed
  double depth_min = 3.0;
  double depth_max = 7.0;
  int texture_octaves = 4;
  double texture_base_freq = 0.3;  // cycles per scene unit
  double tilt_max_deg = 20.0;
};

struct SyntheticScene {
  std::vector<Plane> planes;
  Vec3 bounds_min, bounds_max;
  uint64_t seed = 0;
  SceneConfig config;

  double diameter() const { return (bounds_max - bounds_min).norm(); }
  // conservative ray-depth bracket for any trajectory near the origin
  double near() const { return 0.5 * config.depth_min; }
  double far() const { return 1.8 * config.depth_max; }
};

inline SyntheticScene make_scene(uint64_t seed, const SceneConfig& cfg = {}) {
  if (!(cfg.depth_min < cfg.depth_max) || cfg.depth_min <= 0)
    throw DomainError("make_scene: need 0 < depth_min < depth_max");
  SyntheticScene scene;
  scene.seed = seed;
  scene.config = cfg;
  Rng rng(seed ^ 0xdba2f0000ULL);
  // the count draw is always consumed so a pinned count replays the same scene
  const int drawn = 1 + static_cast<int>(rng.uniform_int(4));
  const int count = cfg.plane_count > 0 ? cfg.plane_count : drawn;
  uint64_t tex_seed = splitmix64(seed);
  for (int i = 0; i < count; ++i) {
    Plane p;
    const double depth = cfg.depth_min + (cfg.depth_max - cfg.depth_min) *
                                             (count == 1 ? rng.uniform() : double(i) / (count - 1));
    p.point = Vec3(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), depth);
    const double tilt = rng.uniform(0.0, cfg.tilt_max_deg) * M_PI / 180.0;
    const double az = rng.uniform(0.0, 2.0 * M_PI);
    p.normal = Vec3(std::sin(tilt) * std::cos(az), std::sin(tilt) * std::sin(az), -std::cos(tilt));
    p.axis_u = p.normal.cross(Vec3(0, 1, 0)).normalized();
    p.axis_v = p.normal.cross(p.axis_u).normalized();
    // later (deeper) planes get wider extents so every view keeps coverage
    p.half_u = p.half_v = 4.0 + 1.5 * depth;
    p.texture = NoiseTexture(splitmix64(tex_seed) + static_cast<uint64_t>(i),
                             cfg.texture_octaves, cfg.texture_base_freq);
    scene.planes.push_back(p);
  }
  std::sort(scene.planes.begin(), scene.planes.end(),
            [](const Plane& a, const Plane& b) { return a.point.z() < b.point.z(); });
  scene.bounds_min = Vec3(-6, -6, 0);
  scene.bounds_max = Vec3(6, 6, cfg.depth_max + 1.0);
  return scene;
}

struct GtRender {
  Image image;
  DepthMap depth;  // exact inverse depth where a plane is hit
};

// Exact per-pixel ray-plane intersection. Depth is the camera-frame z of the
// nearest hit (the convention back_project inverts).
inline GtRender gt_render(const SyntheticScene& scene, const SE3Pose& pose, const Intrinsics& K,
                          int height, int width) {
  GtRender out;
  out.image = Image(height, width);
  out.depth = DepthMap(height, width);
  const Mat3 r_t = pose.rotation.transpose();
  const Vec3 center = pose.center();
  for (const auto& plane : scene.planes)
    if ((center - plane.point).dot(plane.normal) == 0.0)
      throw DomainError("gt_render: camera center lies on a primitive plane");
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Vec3 dir_cam((x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0);
      const Vec3 dir_world = r_t * dir_cam;
      double best_t = std::numeric_limits<double>::infinity();
      const Plane* hit = nullptr;
      double hu = 0, hv = 0;
      for (const auto& plane : scene.planes) {
        const double denom = plane.normal.dot(dir_world);
        if (std::abs(denom) < 1e-12) continue;
        const double t = plane.normal.dot(plane.point - center) / denom;
        if (t <= 1e-6 || t >= best_t) continue;
        const Vec3 p = center + t * dir_world;
        const double u = (p - plane.point).dot(plane.axis_u);
        const double v = (p - plane.point).dot(plane.axis_v);
        if (std::abs(u) > plane.half_u || std::abs(v) > plane.half_v) continue;
        best_t = t;
        hit = &plane;
        hu = u;
        hv = v;
      }
      const int64_t idx = static_cast<int64_t>(y) * width + x;
      if (hit) {
        for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = hit->texture.sample(hu, hv, c);
        out.depth.inv_depth[idx] = 1.0 / best_t;  // dir_cam.z == 1, so t is the z-depth
        out.depth.valid[static_cast<size_t>(idx)] = 1;
      } else {
        for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = 0.0;  // background, flagged invalid
      }
    }
  }
  return out;
}

enum class TrajectoryStyle { kArc, kOrbit };

inline SE3Pose look_at(const Vec3& position, const Vec3& target) {
  const Vec3 f = (target - position).normalized();
  Vec3 right = Vec3(0, 1, 0).cross(f).normalized();
  if (!right.allFinite() || right.norm() < 1e-9) right = Vec3(1, 0, 0);
  const Vec3 down = f.cross(right);
  SE3Pose pose;
  pose.rotation.row(0) = right;
  pose.rotation.row(1) = down;
  pose.rotation.row(2) = f;
  pose.translation = -(pose.rotation * position);
  return pose;
}

// Forward-facing arc (default) or full orbit around the scene's look-at
// point. Consecutive arc views overlap heavily by construction.
inline std::vector<SE3Pose> sample_trajectory(const SyntheticScene& scene, int n,
                                              TrajectoryStyle style = TrajectoryStyle::kArc) {
  if (n < 2) throw DomainError("sample_trajectory: need at least 2 views");
  std::vector<SE3Pose> poses;
  const Vec3 target(0, 0, 0.5 * (scene.config.depth_min + scene.config.depth_max));
  const double radius = target.z();
  const double span = style == TrajectoryStyle::kArc ? 40.0 * M_PI / 180.0 : 2.0 * M_PI;
  Rng rng(scene.seed ^ 0x7a11ULL);
  const double bob = rng.uniform(0.2, 0.5);
  for (int i = 0; i < n; ++i) {
    const double a = span * (static_cast<double>(i) / (style == TrajectoryStyle::kArc ? n - 1 : n) -
                             (style == TrajectoryStyle::kArc ? 0.5 : 0.0));
    const Vec3 pos = target + Vec3(radius * std::sin(a), bob * std::sin(2.0 * a),
                                   -radius * std::cos(a));
    poses.push_back(look_at(pos, target));
  }
  return poses;
}

// Per-pose random perturbation: rotation by a uniform angle in [0, rot_deg]
// about a random axis, camera-center displacement uniform in
// [0, trans_frac * scene diameter].
inline std::vector<SE3Pose> perturb_poses(const std::vector<SE3Pose>& poses, double rot_deg,
                                          double trans_frac, double scene_diameter,
                                          uint64_t seed) {
  Rng rng(seed ^ 0x9e37ULL);
  std::vector<SE3Pose> out;
  out.reserve(poses.size());
  for (const auto& p : poses) {
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    if (axis.norm() < 1e-12) axis = Vec3(0, 0, 1);
    axis.normalize();
    const double angle = rng.uniform(0.0, rot_deg * M_PI / 180.0);
    Twist rot = Twist::Zero();
    rot.head<3>() = axis * angle;
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    if (dir.norm() < 1e-12) dir = Vec3(1, 0, 0);
    dir.normalize();
    const double mag = rng.uniform(0.0, trans_frac * scene_diameter);
    SE3Pose q;
    q.rotation = se3_exp(rot).rotation * p.rotation;
    const Vec3 center = p.center() + dir * mag;
    q.translation = -(q.rotation * center);
    out.push_back(q);
  }
  return out;
}

// Fraction of view-i pixels with ground-truth depth that land inside view j
// (on a sparse grid). Analytic covisibility used to validate the scene graph.
inline double covisibility(const SyntheticScene& scene, const SE3Pose& p_i, const SE3Pose& p_j,
                           const Intrinsics& K, int step = 4) {
  const GtRender gt = gt_render(scene, p_i, K, K.height, K.width);
  const SE3Pose rel = relative_pose(p_i, p_j);
  int total = 0, inside = 0;
  for (int y = 0; y < K.height; y += step)
    for (int x = 0; x < K.width; x += step) {
      const int64_t idx = static_cast<int64_t>(y) * K.width + x;
      if (!gt.depth.valid[static_cast<size_t>(idx)]) continue;
      ++total;
      const Vec3 xi = back_project(K, x, y, 1.0 / gt.depth.inv_depth[idx]);
      const Projected pj = project(K, rel, xi);
      if (pj.valid && pj.u >= 0 && pj.u <= K.width - 1 && pj.v >= 0 && pj.v <= K.height - 1)
        ++inside;
    }
  return total == 0 ? 0.0 : static_cast<double>(inside) / total;
}

// ---------------------------------------------------------------------------
// scene spec file: text key-value

inline void save_scene_spec(const std::string& path, const SyntheticScene& scene) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write scene spec to " + path);
  f.precision(17);
  f << "seed " << scene.seed << "\n";
  f << "plane_count " << scene.planes.size() << "\n";  // pinned count replays identically
  f << "depth_min " << scene.config.depth_min << "\n";
  f << "depth_max " << scene.config.depth_max << "\n";
  f << "texture_octaves " << scene.config.texture_octaves << "\n";
  f << "texture_base_freq " << scene.config.texture_base_freq << "\n";
  f << "tilt_max_deg " << scene.config.tilt_max_deg << "\n";
}

inline SyntheticScene load_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read scene spec from " + path);
  uint64_t seed = 0;
  SceneConfig cfg;
  std::string key;
  while (f >> key) {
    if (key == "seed") f >> seed;
    else if (key == "plane_count") { size_t n; f >> n; cfg.plane_count = static_cast<int>(n); }
    else if (key == "depth_min") f >> cfg.depth_min;
    else if (key == "depth_max") f >> cfg.depth_max;
    else if (key == "texture_octaves") f >> cfg.texture_octaves;
    else if (key == "texture_base_freq") f >> cfg.texture_base_freq;
    else if (key == "tilt_max_deg") f >> cfg.tilt_max_deg;
    else throw IoError("scene spec: unknown key '" + key + "' in " + path);
  }
  return make_scene(seed, cfg);
}

}  // namespace dbarf
