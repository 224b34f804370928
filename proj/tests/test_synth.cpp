#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <complex>

#include "dbarf/synth.hpp"
#include "oracles.hpp"

using namespace dbarf;

namespace {

Intrinsics test_intrinsics(int w = 80, int h = 80) {
  return Intrinsics(0.9 * w, 0.9 * w, (w - 1) / 2.0, (h - 1) / 2.0, w, h);
}

SceneConfig single_plane_config() {
  SceneConfig cfg;
  cfg.plane_count = 1;
  cfg.tilt_max_deg = 0.0;
  cfg.depth_min = 4.9999;
  cfg.depth_max = 5.0001;
  return cfg;
}

}  // namespace

TEST_CASE("make_scene is deterministic in the seed") {
  SyntheticScene a = make_scene(123), b = make_scene(123), c = make_scene(124);
  REQUIRE(a.planes.size() == b.planes.size());
  for (size_t i = 0; i < a.planes.size(); ++i) {
    CHECK((a.planes[i].point - b.planes[i].point).norm() == 0.0);
    CHECK(a.planes[i].texture.sample(0.37, -1.2, 1) == b.planes[i].texture.sample(0.37, -1.2, 1));
  }
  bool differs = a.planes.size() != c.planes.size();
  if (!differs) differs = (a.planes[0].point - c.planes[0].point).norm() > 0;
  CHECK(differs);
}

TEST_CASE("fronto-parallel plane gives a constant exact depth map") {
  SyntheticScene scene = make_scene(7, single_plane_config());
  const Intrinsics K = test_intrinsics();
  SE3Pose cam;  // identity: at origin looking down +z
  GtRender gt = gt_render(scene, cam, K, K.height, K.width);
  const double z = scene.planes[0].point.z();
  int valid = 0;
  for (int64_t i = 0; i < K.width * K.height; ++i) {
    if (!gt.depth.valid[static_cast<size_t>(i)]) continue;
    ++valid;
    CHECK(gt.depth.inv_depth[i] == doctest::Approx(1.0 / z).epsilon(1e-12));
  }
  CHECK(valid == K.width * K.height);  // the plane fills the whole view
}

TEST_CASE("texture spectrum has energy above 1/8 cycles per pixel") {
  SyntheticScene scene = make_scene(11, single_plane_config());
  const Intrinsics K = test_intrinsics();
  GtRender gt = gt_render(scene, SE3Pose::identity(), K, K.height, K.width);
  // row-wise DFT of the green channel, mean removed
  const int N = K.width;
  double total = 0.0, high = 0.0;
  for (int y = 0; y < K.height; y += 4) {
    std::vector<double> row(N);
    double mean = 0;
    for (int x = 0; x < N; ++x) mean += (row[x] = gt.image.at(y, x, 1));
    mean /= N;
    for (int k = 1; k < N / 2; ++k) {
      std::complex<double> f(0, 0);
      for (int x = 0; x < N; ++x)
        f += (row[x] - mean) * std::polar(1.0, -2.0 * M_PI * k * x / N);
      const double e = std::norm(f);
      total += e;
      if (static_cast<double>(k) / N > 0.125) high += e;
    }
  }
  CHECK(total > 0.0);
  CHECK(high / total > 0.01);  // matchable high-frequency content
}

TEST_CASE("two views of one plane are related by the induced homography") {
  SceneConfig cfg = single_plane_config();
  cfg.tilt_max_deg = 10.0;
  SyntheticScene scene = make_scene(21, cfg);
  const Intrinsics K = test_intrinsics();
  auto poses = sample_trajectory(scene, 8);
  const SE3Pose& pi = poses[3];
  const SE3Pose& pj = poses[4];
  GtRender gi = gt_render(scene, pi, K, K.height, K.width);
  GtRender gj = gt_render(scene, pj, K, K.height, K.width);

  // plane in camera-i coordinates: n_i . x = d_i
  const Plane& plane = scene.planes[0];
  const Vec3 n_i = pi.rotation * plane.normal;
  const double d_i = n_i.dot(pi.apply(plane.point));
  const SE3Pose rel = relative_pose(pi, pj);
  Mat3 Km;
  Km << K.fx, 0, K.cx, 0, K.fy, K.cy, 0, 0, 1;
  const Mat3 H = Km * (rel.rotation + rel.translation * n_i.transpose() / d_i) * Km.inverse();

  double err_exact = 0.0, err_bilinear = 0.0;
  int n_exact = 0, n_bilinear = 0;
  for (int y = 2; y < K.height - 2; ++y)
    for (int x = 2; x < K.width - 2; ++x) {
      const Vec3 q = H * Vec3(x, y, 1.0);
      const double u = q.x() / q.z(), v = q.y() / q.z();
      if (u < 1 || v < 1 || u > K.width - 2 || v > K.height - 2) continue;
      // exact: re-render view j at the continuous pixel via ray casting
      const Vec3 xi = back_project(K, x, y, 1.0 / gi.depth.inv_depth[y * K.width + x]);
      const Vec3 world = pi.inverse().apply(xi);
      const double tu = (world - plane.point).dot(plane.axis_u);
      const double tv = (world - plane.point).dot(plane.axis_v);
      for (int c = 0; c < 3; ++c) {
        err_exact += std::abs(plane.texture.sample(tu, tv, c) - gi.image.at(y, x, c));
        ++n_exact;
      }
      // bilinear: warp the discretized image
      const int x0 = static_cast<int>(u), y0 = static_cast<int>(v);
      const double fx = u - x0, fy = v - y0;
      for (int c = 0; c < 3; ++c) {
        const double s = (1 - fx) * (1 - fy) * gj.image.at(y0, x0, c) +
                         fx * (1 - fy) * gj.image.at(y0, x0 + 1, c) +
                         (1 - fx) * fy * gj.image.at(y0 + 1, x0, c) +
                         fx * fy * gj.image.at(y0 + 1, x0 + 1, c);
        err_bilinear += std::abs(s - gi.image.at(y, x, c));
        ++n_bilinear;
      }
    }
  CHECK(n_bilinear > 1000);
  CHECK(err_exact / n_exact < 1e-12);     // same surface point, same texture
  CHECK(err_bilinear / n_bilinear < 1e-3);  // interpolation error only
}

TEST_CASE("gt depth is consistent with warp_patch round trip") {
  SyntheticScene scene = make_scene(33, single_plane_config());
  const Intrinsics K = test_intrinsics();
  auto poses = sample_trajectory(scene, 6);
  GtRender gi = gt_render(scene, poses[2], K, K.height, K.width);
  GtRender gj = gt_render(scene, poses[3], K, K.height, K.width);

  Tape tape;
  std::vector<std::pair<double, double>> pix;
  Array inv_d(Shape{16});
  int n = 0;
  for (int k = 0; k < 16; ++k) {
    const int x = 20 + (k % 4) * 10, y = 20 + (k / 4) * 10;
    pix.push_back({double(x), double(y)});
    inv_d[n++] = gi.depth.inv_depth[y * K.width + x];
  }
  PoseT<double> rel = pose_constant(tape, relative_pose(poses[2], poses[3]));
  Tensor dummy_map = tape.constant(Array(Shape{K.height, K.width, 1}));
  auto warped = warp_patch(tape, pix, tape.leaf(inv_d), K, K, rel, dummy_map, 1.0);

  // back again with view j's exact depth at the warped pixel
  Tape tape2;
  std::vector<std::pair<double, double>> pix_j;
  Array inv_dj(Shape{16});
  for (int k = 0; k < 16; ++k) {
    const double u = warped.pix.value()[k * 2], v = warped.pix.value()[k * 2 + 1];
    REQUIRE(warped.valid[static_cast<size_t>(k)] == 1);
    pix_j.push_back({u, v});
    const int xi = static_cast<int>(std::lround(u)), yi = static_cast<int>(std::lround(v));
    // interpolate exact inverse depth at the continuous pixel from the plane
    const Vec3 dir((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0);
    const SE3Pose pj = poses[3];
    const Vec3 dw = pj.rotation.transpose() * dir;
    const Plane& plane = scene.planes[0];
    const double t = plane.normal.dot(plane.point - pj.center()) / plane.normal.dot(dw);
    inv_dj[k] = 1.0 / t;
    (void)xi;
    (void)yi;
  }
  PoseT<double> rel_back = pose_constant(tape2, relative_pose(poses[3], poses[2]));
  Tensor dummy2 = tape2.constant(Array(Shape{K.height, K.width, 1}));
  auto back = warp_patch(tape2, pix_j, tape2.leaf(inv_dj), K, K, rel_back, dummy2, 1.0);
  for (int k = 0; k < 16; ++k) {
    CHECK(back.pix.value()[k * 2] == doctest::Approx(pix[k].first).epsilon(0.02));
    CHECK(std::abs(back.pix.value()[k * 2] - pix[k].first) < 0.5);      // sub-pixel
    CHECK(std::abs(back.pix.value()[k * 2 + 1] - pix[k].second) < 0.5);
  }
}

TEST_CASE("zero perturbation returns identical poses") {
  SyntheticScene scene = make_scene(5);
  auto poses = sample_trajectory(scene, 6);
  auto same = perturb_poses(poses, 0.0, 0.0, scene.diameter(), 99);
  for (size_t i = 0; i < poses.size(); ++i) {
    CHECK((poses[i].rotation - same[i].rotation).norm() < 1e-15);
    CHECK((poses[i].translation - same[i].translation).norm() < 1e-12);
  }
}

TEST_CASE("rotation perturbation stays within and approaches the bound") {
  SyntheticScene scene = make_scene(5);
  auto poses = sample_trajectory(scene, 4);
  double max_seen = 0.0;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    auto p = perturb_poses(poses, 5.0, 0.02, scene.diameter(), seed);
    for (size_t i = 0; i < poses.size(); ++i) {
      const double deg = rotation_angle_deg(p[i].rotation, poses[i].rotation);
      CHECK(deg <= 5.0 + 1e-9);
      max_seen = std::max(max_seen, deg);
    }
  }
  CHECK(max_seen > 4.9);
}

TEST_CASE("arc trajectory: consecutive views overlap by at least 60 percent") {
  SyntheticScene scene = make_scene(17, single_plane_config());
  const Intrinsics K = test_intrinsics();
  auto poses = sample_trajectory(scene, 12, TrajectoryStyle::kArc);
  for (size_t i = 0; i + 1 < poses.size(); ++i) {
    const double ov = covisibility(scene, poses[i], poses[i + 1], K);
    INFO("pair " << i);
    CHECK(ov >= 0.6);
  }
}

TEST_CASE("every trajectory view sees at least half of a primitive") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
    SyntheticScene scene = make_scene(seed);
    const Intrinsics K = test_intrinsics();
    for (const auto& pose : sample_trajectory(scene, 8)) {
      GtRender gt = gt_render(scene, pose, K, K.height, K.width);
      int valid = 0;
      for (auto v : gt.depth.valid) valid += v;
      CHECK(static_cast<double>(valid) / (K.width * K.height) >= 0.5);
    }
  }
}

TEST_CASE("scene spec file round trips") {
  SyntheticScene scene = make_scene(77);
  const std::string path = "/tmp/dbarf_scene_spec.txt";
  save_scene_spec(path, scene);
  SyntheticScene loaded = load_scene_spec(path);
  REQUIRE(loaded.planes.size() == scene.planes.size());
  for (size_t i = 0; i < scene.planes.size(); ++i) {
    CHECK((scene.planes[i].point - loaded.planes[i].point).norm() == 0.0);
    CHECK(scene.planes[i].texture.sample(1.1, 2.2, 0) ==
          loaded.planes[i].texture.sample(1.1, 2.2, 0));
  }
}
