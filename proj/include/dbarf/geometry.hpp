// SE(3) pose algebra, pinhole projection and patch warping. Two layers: a
// plain scalar layer on Eigen types for oracles and bookkeeping, and a graph
// layer built from tape primitives so poses and depths stay differentiable
// end to end.
//
// Conventions (asserted in tests): right-handed frames, z forward, pixel
// origin at the top-left, poses are world-to-camera (X_cam = R X_world + t).
// Twists order the rotational block first: (wx, wy, wz, vx, vy, vz).
#pragma once

#include <Eigen/Dense>
#include <fstream>

#include "dbarf/tensor.hpp"

namespace dbarf {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Twist = Vec6;

struct SE3Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static SE3Pose identity() { return {}; }

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }

  SE3Pose inverse() const {
    SE3Pose out;
    out.rotation = rotation.transpose();
    out.translation = -(rotation.transpose() * translation);
    return out;
  }

  // this ∘ other: apply `other` first.
  SE3Pose compose(const SE3Pose& other) const {
    SE3Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  Vec3 center() const { return -(rotation.transpose() * translation); }

  bool orthonormal(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).norm() < tol &&
           std::abs(rotation.determinant() - 1.0) < tol;
  }
};

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  Intrinsics() = default;
  Intrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    if (fx <= 0 || fy <= 0) throw DomainError("intrinsics: focal lengths must be positive");
    if (cx < 0 || cx >= w || cy < 0 || cy >= h)
      throw DomainError("intrinsics: principal point outside the image");
  }
};

// Per-pixel inverse depth with a validity mask.
struct DepthMap {
  Array inv_depth;              // [H,W], 1/scene-units
  std::vector<uint8_t> valid;   // length H*W

  DepthMap() = default;
  DepthMap(int h, int w) : inv_depth(Shape{h, w}), valid(static_cast<size_t>(h) * w, 0) {}
  int height() const { return static_cast<int>(inv_depth.dim(0)); }
  int width() const { return static_cast<int>(inv_depth.dim(1)); }
};

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

namespace detail {
// Rodrigues coefficients A = sin t / t, B = (1-cos t)/t^2, C = (1-A)/t^2 as
// functions of t^2, with series fallbacks near zero.
inline void rodrigues_coeffs(double t2, double& A, double& B, double& C) {
  if (t2 < 1e-10) {
    A = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    B = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    const double t = std::sqrt(t2);
    A = std::sin(t) / t;
    B = (1.0 - std::cos(t)) / t2;
    C = (1.0 - A) / t2;
  }
}
}  // namespace detail

inline SE3Pose se3_exp(const Twist& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  double A, B, C;
  detail::rodrigues_coeffs(w.squaredNorm(), A, B, C);
  const Mat3 K = hat(w);
  SE3Pose out;
  out.rotation = Mat3::Identity() + A * K + B * (K * K);
  const Mat3 V = Mat3::Identity() + B * K + C * (K * K);
  out.translation = V * v;
  return out;
}

inline Twist se3_log(const SE3Pose& p) {
  const double cos_theta = std::clamp((p.rotation.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  if (theta > M_PI - 1e-6)
    throw DomainError("se3_log: rotation angle at pi is ill-conditioned");
  Vec3 w;
  if (theta < 1e-8) {
    w = 0.5 * Vec3(p.rotation(2, 1) - p.rotation(1, 2), p.rotation(0, 2) - p.rotation(2, 0),
                   p.rotation(1, 0) - p.rotation(0, 1));
  } else {
    const double s = theta / (2.0 * std::sin(theta));
    w = s * Vec3(p.rotation(2, 1) - p.rotation(1, 2), p.rotation(0, 2) - p.rotation(2, 0),
                 p.rotation(1, 0) - p.rotation(0, 1));
  }
  double A, B, C;
  detail::rodrigues_coeffs(w.squaredNorm(), A, B, C);
  const Mat3 K = hat(w);
  const Mat3 V = Mat3::Identity() + B * K + C * (K * K);
  Twist xi;
  xi.head<3>() = w;
  xi.tail<3>() = V.inverse() * p.translation;
  return xi;
}

// P_ij maps camera-i coordinates to camera-j coordinates: P_j P_i^{-1}.
inline SE3Pose relative_pose(const SE3Pose& p_i, const SE3Pose& p_j) {
  return p_j.compose(p_i.inverse());
}

inline double rotation_angle_deg(const Mat3& a, const Mat3& b) {
  const Mat3 d = a * b.transpose();
  const double c = std::clamp((d.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

struct Projected {
  double u = 0, v = 0;
  bool valid = false;  // false when the point lies behind the camera
};

inline Projected project(const Intrinsics& K, const SE3Pose& p_ij, const Vec3& x_i) {
  const Vec3 y = p_ij.apply(x_i);
  Projected out;
  if (y.z() <= 1e-6) return out;
  out.u = K.fx * y.x() / y.z() + K.cx;
  out.v = K.fy * y.y() / y.z() + K.cy;
  out.valid = true;
  return out;
}

inline Vec3 back_project(const Intrinsics& K, double u, double v, double depth) {
  return Vec3(depth * (u - K.cx) / K.fx, depth * (v - K.cy) / K.fy, depth);
}

// ---------------------------------------------------------------------------
// pose text format: one camera per line, 12 numbers, row-major [R|t]

inline void save_poses(const std::string& path, const std::vector<SE3Pose>& poses) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write poses to " + path);
  f.precision(17);
  for (const auto& p : poses) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) f << p.rotation(r, c) << " ";
      f << p.translation[r] << (r == 2 ? "" : " ");
    }
    f << "\n";
  }
}

inline std::vector<SE3Pose> load_poses(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read poses from " + path);
  std::vector<SE3Pose> poses;
  double m[12];
  while (f >> m[0]) {
    for (int i = 1; i < 12; ++i)
      if (!(f >> m[i])) throw IoError("truncated pose line in " + path);
    SE3Pose p;
    p.rotation << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
    p.translation << m[3], m[7], m[11];
    poses.push_back(p);
  }
  return poses;
}

// ---------------------------------------------------------------------------
// graph layer: the same operations expressed in tape primitives

template <typename S>
struct PoseT {
  TensorT<S> r;  // [3,3]
  TensorT<S> t;  // [1,3]
};

template <typename S>
PoseT<S> pose_constant(TapeT<S>& tape, const SE3Pose& p) {
  ArrayT<S> r(Shape{3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i * 3 + j] = static_cast<S>(p.rotation(i, j));
  ArrayT<S> t(Shape{1, 3});
  for (int i = 0; i < 3; ++i) t[i] = static_cast<S>(p.translation[i]);
  return {tape.constant(std::move(r)), tape.constant(std::move(t))};
}

template <typename S>
SE3Pose pose_value(const PoseT<S>& p) {
  SE3Pose out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.rotation(i, j) = static_cast<double>(p.r.value()[i * 3 + j]);
    out.translation[i] = static_cast<double>(p.t.value()[i]);
  }
  return out;
}

// Differentiable exponential map from a 6-vector twist tensor. Chooses the
// series or the trigonometric branch by value; both are smooth in theta^2.
template <typename S>
PoseT<S> se3_exp_graph(const TensorT<S>& xi) {
  if (xi.numel() != 6) throw ShapeError("se3_exp: twist must have 6 elements");
  TapeT<S>& tape = *xi.tape();
  TensorT<S> x6 = reshape(xi, Shape{6});
  TensorT<S> w = slice(x6, {0}, {3});
  TensorT<S> v = reshape(slice(x6, {3}, {3}), Shape{3, 1});
  TensorT<S> t2 = sum(mul(w, w));

  TensorT<S> A, B, C;
  const double t2v = static_cast<double>(t2.item());
  auto c = [&](double d) { return tape.scalar(static_cast<S>(d)); };
  if (t2v < 1e-10) {
    // A = 1 - t2/6 + t2^2/120, B = 1/2 - t2/24 + t2^2/720, C = 1/6 - t2/120 + t2^2/5040
    TensorT<S> t4 = mul(t2, t2);
    A = add(sub(c(1.0), mul(t2, c(1.0 / 6))), mul(t4, c(1.0 / 120)));
    B = add(sub(c(0.5), mul(t2, c(1.0 / 24))), mul(t4, c(1.0 / 720)));
    C = add(sub(c(1.0 / 6), mul(t2, c(1.0 / 120))), mul(t4, c(1.0 / 5040)));
  } else {
    TensorT<S> theta = power(t2, 0.5);
    A = div(sin_op(theta), theta);
    B = div(sub(c(1.0), cos_op(theta)), t2);
    C = div(sub(c(1.0), A), t2);
  }

  ArrayT<S> ex(Shape{3, 3}), ey(Shape{3, 3}), ez(Shape{3, 3}), id(Shape{3, 3});
  ex[5] = S(-1); ex[7] = S(1);   // hat(e_x)
  ey[2] = S(1);  ey[6] = S(-1);  // hat(e_y)
  ez[1] = S(-1); ez[3] = S(1);   // hat(e_z)
  id[0] = id[4] = id[8] = S(1);
  TensorT<S> wx = slice(x6, {0}, {1});
  TensorT<S> wy = slice(x6, {1}, {1});
  TensorT<S> wz = slice(x6, {2}, {1});
  TensorT<S> K = add(add(mul(wx, tape.constant(ex)), mul(wy, tape.constant(ey))),
                     mul(wz, tape.constant(ez)));
  TensorT<S> K2 = matmul(K, K);
  TensorT<S> I = tape.constant(id);
  PoseT<S> out;
  out.r = add(add(I, mul(A, K)), mul(B, K2));
  TensorT<S> V = add(add(I, mul(B, K)), mul(C, K2));
  out.t = transpose2d(matmul(V, v));
  return out;
}

// a ∘ b (apply b first)
template <typename S>
PoseT<S> compose_graph(const PoseT<S>& a, const PoseT<S>& b) {
  PoseT<S> out;
  out.r = matmul(a.r, b.r);
  out.t = add(matmul(b.t, transpose2d(a.r)), a.t);
  return out;
}

// Transform points [N,3] by a pose: X R^T + t.
template <typename S>
TensorT<S> transform_points(const PoseT<S>& p, const TensorT<S>& pts) {
  return add(matmul(pts, transpose2d(p.r)), p.t);
}

template <typename S>
struct ProjectedT {
  TensorT<S> pix;               // [N,2], finite even for invalid rows
  std::vector<uint8_t> in_front;  // z > eps
};

// Pinhole projection of camera-frame points [N,3]; rows behind the camera are
// flagged rather than thrown, and their (clamped-z) coordinates carry no
// usable gradient.
template <typename S>
ProjectedT<S> project_graph(TapeT<S>& tape, const Intrinsics& K, const TensorT<S>& pts) {
  const int64_t n = pts.dim(0);
  TensorT<S> x = slice(pts, {0, 0}, {n, 1});
  TensorT<S> y = slice(pts, {0, 1}, {n, 1});
  TensorT<S> z = slice(pts, {0, 2}, {n, 1});
  ProjectedT<S> out;
  out.in_front.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    out.in_front[static_cast<size_t>(i)] = z.value()[i] > S(1e-6) ? 1 : 0;
  TensorT<S> zs = clamp(z, 1e-6, 1e30);
  auto c = [&](double d) { return tape.scalar(static_cast<S>(d)); };
  TensorT<S> u = add(mul(div(x, zs), c(K.fx)), c(K.cx));
  TensorT<S> v = add(mul(div(y, zs), c(K.fy)), c(K.cy));
  out.pix = concat(std::vector<TensorT<S>>{u, v}, 1);
  return out;
}

// Back-project full-resolution pixels (constants) with differentiable inverse
// depth d [N] into camera-frame points [N,3].
template <typename S>
TensorT<S> back_project_graph(TapeT<S>& tape, const Intrinsics& K,
                              const std::vector<std::pair<double, double>>& pixels,
                              const TensorT<S>& inv_depth) {
  const int64_t n = static_cast<int64_t>(pixels.size());
  if (inv_depth.numel() != n) throw ShapeError("back_project: depth count mismatch");
  ArrayT<S> ux(Shape{n, 1}), uy(Shape{n, 1});
  for (int64_t i = 0; i < n; ++i) {
    ux[i] = static_cast<S>((pixels[static_cast<size_t>(i)].first - K.cx) / K.fx);
    uy[i] = static_cast<S>((pixels[static_cast<size_t>(i)].second - K.cy) / K.fy);
  }
  TensorT<S> z = div(tape.scalar(S(1)), reshape(inv_depth, Shape{n, 1}));
  TensorT<S> x = mul(z, tape.constant(std::move(ux)));
  TensorT<S> y = mul(z, tape.constant(std::move(uy)));
  return concat(std::vector<TensorT<S>>{x, y, z}, 1);
}

// Full-resolution pixel -> feature-grid coordinate for a map with the given
// stride: g = (p + 0.5) / stride - 0.5.
template <typename S>
TensorT<S> to_feature_coords(TapeT<S>& tape, const TensorT<S>& pix, double stride) {
  auto c = [&](double d) { return tape.scalar(static_cast<S>(d)); };
  return sub(div(add(pix, c(0.5)), c(stride)), c(0.5));
}

template <typename S>
struct WarpedT {
  TensorT<S> features;          // [N,C]
  TensorT<S> pix;               // [N,2] target-j full-res pixels
  std::vector<uint8_t> valid;   // in front of camera j and inside the map
  bool all_masked = false;      // empty-warp signal for the caller
};

// Back-project pixels of view i with inverse depth, transform by P_ij,
// project into view j and bilinearly sample the given feature map.
template <typename S>
WarpedT<S> warp_patch(TapeT<S>& tape, const std::vector<std::pair<double, double>>& pixels_i,
                      const TensorT<S>& inv_depth, const Intrinsics& K_i, const Intrinsics& K_j,
                      const PoseT<S>& p_ij, const TensorT<S>& feature_map, double stride) {
  TensorT<S> x_i = back_project_graph(tape, K_i, pixels_i, inv_depth);
  TensorT<S> x_j = transform_points(p_ij, x_i);
  ProjectedT<S> proj = project_graph(tape, K_j, x_j);
  TensorT<S> gcoords = to_feature_coords(tape, proj.pix, stride);
  SampledT<S> s = bilinear_sample(feature_map, gcoords);
  WarpedT<S> out;
  out.features = s.values;
  out.pix = proj.pix;
  out.valid.resize(pixels_i.size());
  size_t n_valid = 0;
  for (size_t i = 0; i < pixels_i.size(); ++i) {
    out.valid[i] = (proj.in_front[i] && s.valid[i]) ? 1 : 0;
    n_valid += out.valid[i];
  }
  if (n_valid == 0) out.all_masked = true;
  return out;
}

}  // namespace dbarf
