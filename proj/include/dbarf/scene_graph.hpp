// Covisibility graph built without camera poses: Harris-style keypoints with
// normalized intensity-patch descriptors, mutual nearest-neighbour matching
// with a ratio test, and seeded RANSAC fundamental-matrix filtering. Nearby
// views are then selected by sorting neighbours on inlier count.
#pragma once

#include <map>

#include "dbarf/geometry.hpp"
#include "dbarf/image.hpp"

namespace dbarf {

struct Keypoint {
  double x = 0, y = 0;
  double response = 0;
  std::vector<double> descriptor;  // L2-normalized intensity patch
};

struct SceneGraphConfig {
  int max_keypoints = 512;
  int nms_radius = 4;
  int descriptor_radius = 5;  // 11x11 patch
  double ratio = 0.8;
  int ransac_iters = 1000;
  double sampson_px = 2.0;
  int min_matches = 30;
  uint64_t ransac_seed = 0x5eedULL;
};

struct Detection {
  std::vector<Keypoint> keypoints;
  bool low_texture = false;  // fewer than 8 keypoints; image still usable
};

inline Detection detect_and_describe(const Image& img, const SceneGraphConfig& cfg = {}) {
  const int h = img.height(), w = img.width();
  const Array gray = img.gray();
  Array gx(Shape{h, w}), gy(Shape{h, w});
  for (int y = 1; y < h - 1; ++y)
    for (int x = 1; x < w - 1; ++x) {
      auto g = [&](int yy, int xx) { return gray[static_cast<int64_t>(yy) * w + xx]; };
      gx[static_cast<int64_t>(y) * w + x] =
          (g(y - 1, x + 1) + 2 * g(y, x + 1) + g(y + 1, x + 1)) -
          (g(y - 1, x - 1) + 2 * g(y, x - 1) + g(y + 1, x - 1));
      gy[static_cast<int64_t>(y) * w + x] =
          (g(y + 1, x - 1) + 2 * g(y + 1, x) + g(y + 1, x + 1)) -
          (g(y - 1, x - 1) + 2 * g(y - 1, x) + g(y - 1, x + 1));
    }
  // structure tensor smoothed with a 3x3 box, Harris response
  Array resp(Shape{h, w});
  for (int y = 2; y < h - 2; ++y)
    for (int x = 2; x < w - 2; ++x) {
      double xx = 0, yy = 0, xy = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double a = gx[static_cast<int64_t>(y + dy) * w + (x + dx)];
          const double b = gy[static_cast<int64_t>(y + dy) * w + (x + dx)];
          xx += a * a;
          yy += b * b;
          xy += a * b;
        }
      const double tr = xx + yy;
      resp[static_cast<int64_t>(y) * w + x] = xx * yy - xy * xy - 0.04 * tr * tr;
    }

  // order candidates by response, then greedy non-maximum suppression
  std::vector<std::pair<double, int64_t>> cand;
  const int margin = cfg.descriptor_radius + 1;
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      const double r = resp[static_cast<int64_t>(y) * w + x];
      if (r > 1e-12) cand.push_back({r, static_cast<int64_t>(y) * w + x});
    }
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  Detection det;
  std::vector<std::pair<int, int>> taken;
  const int r2 = cfg.nms_radius * cfg.nms_radius;
  for (const auto& [r, idx] : cand) {
    if (static_cast<int>(det.keypoints.size()) >= cfg.max_keypoints) break;
    const int x = static_cast<int>(idx % w), y = static_cast<int>(idx / w);
    bool suppressed = false;
    for (const auto& [tx, ty] : taken)
      if ((tx - x) * (tx - x) + (ty - y) * (ty - y) <= r2) {
        suppressed = true;
        break;
      }
    if (suppressed) continue;
    Keypoint kp;
    kp.x = x;
    kp.y = y;
    kp.response = r;
    kp.descriptor.reserve((2 * cfg.descriptor_radius + 1) * (2 * cfg.descriptor_radius + 1));
    double mean = 0;
    for (int dy = -cfg.descriptor_radius; dy <= cfg.descriptor_radius; ++dy)
      for (int dx = -cfg.descriptor_radius; dx <= cfg.descriptor_radius; ++dx) {
        const double v = gray[static_cast<int64_t>(y + dy) * w + (x + dx)];
        kp.descriptor.push_back(v);
        mean += v;
      }
    mean /= kp.descriptor.size();
    double norm = 0;
    for (double& v : kp.descriptor) {
      v -= mean;
      norm += v * v;
    }
    if (norm < 1e-12) continue;  // flat patch, not distinctive
    norm = std::sqrt(norm);
    for (double& v : kp.descriptor) v /= norm;
    det.keypoints.push_back(std::move(kp));
    taken.push_back({x, y});
  }
  det.low_texture = det.keypoints.size() < 8;
  return det;
}

struct Match {
  int a = 0, b = 0;
};

struct MatchResult {
  std::vector<Match> matches;  // inliers when filtered, raw otherwise
  bool filtered = false;
  Mat3 fundamental = Mat3::Zero();
};

inline double sampson_distance(const Mat3& f, double ux, double uy, double vx, double vy) {
  const Vec3 x1(ux, uy, 1.0), x2(vx, vy, 1.0);
  const Vec3 fx1 = f * x1;
  const Vec3 ftx2 = f.transpose() * x2;
  const double num = x2.dot(fx1);
  const double den = fx1.x() * fx1.x() + fx1.y() * fx1.y() + ftx2.x() * ftx2.x() +
                     ftx2.y() * ftx2.y();
  if (den < 1e-300) return std::numeric_limits<double>::infinity();
  return std::sqrt(num * num / den);
}

namespace detail {

// Normalized 8-point algorithm (least squares over >= 8 correspondences).
inline Mat3 eight_point(const std::vector<Keypoint>& ka, const std::vector<Keypoint>& kb,
                        const std::vector<Match>& ms) {
  auto normalizer = [](const std::vector<Keypoint>& kps, const std::vector<Match>& ms,
                       bool second) {
    double mx = 0, my = 0;
    for (const auto& m : ms) {
      const Keypoint& k = kps[static_cast<size_t>(second ? m.b : m.a)];
      mx += k.x;
      my += k.y;
    }
    mx /= ms.size();
    my /= ms.size();
    double scale = 0;
    for (const auto& m : ms) {
      const Keypoint& k = kps[static_cast<size_t>(second ? m.b : m.a)];
      scale += std::hypot(k.x - mx, k.y - my);
    }
    scale = ms.size() * std::sqrt(2.0) / std::max(scale, 1e-12);
    Mat3 t;
    t << scale, 0, -scale * mx, 0, scale, -scale * my, 0, 0, 1;
    return t;
  };
  const Mat3 ta = normalizer(ka, ms, false);
  const Mat3 tb = normalizer(kb, ms, true);
  Eigen::MatrixXd a(ms.size(), 9);
  for (size_t i = 0; i < ms.size(); ++i) {
    const Keypoint& p = ka[static_cast<size_t>(ms[i].a)];
    const Keypoint& q = kb[static_cast<size_t>(ms[i].b)];
    const Vec3 x1 = ta * Vec3(p.x, p.y, 1.0);
    const Vec3 x2 = tb * Vec3(q.x, q.y, 1.0);
    a.row(static_cast<Eigen::Index>(i)) << x2.x() * x1.x(), x2.x() * x1.y(), x2.x(),
        x2.y() * x1.x(), x2.y() * x1.y(), x2.y(), x1.x(), x1.y(), 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd fvec = svd.matrixV().col(8);
  Mat3 f;
  f << fvec(0), fvec(1), fvec(2), fvec(3), fvec(4), fvec(5), fvec(6), fvec(7), fvec(8);
  // enforce rank 2
  Eigen::JacobiSVD<Mat3> fs(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = fs.singularValues();
  s.z() = 0.0;
  f = fs.matrixU() * s.asDiagonal() * fs.matrixV().transpose();
  return tb.transpose() * f * ta;
}

}  // namespace detail

// Mutual nearest-neighbour matches with a ratio test, then seeded RANSAC on
// the fundamental matrix with Sampson gating. Falls back to raw matches
// (flagged unfiltered) when fewer than 8 survive the ratio test.
inline MatchResult match_and_filter(const std::vector<Keypoint>& ka,
                                    const std::vector<Keypoint>& kb, const Intrinsics& K,
                                    const SceneGraphConfig& cfg = {}) {
  (void)K;
  MatchResult out;
  if (ka.empty() || kb.empty()) return out;
  const size_t na = ka.size(), nb = kb.size();
  const size_t d = ka[0].descriptor.size();
  // nearest and second-nearest in b for each a (squared L2)
  std::vector<int> best_b(na, -1);
  std::vector<double> d1(na, 1e30), d2(na, 1e30);
  for (size_t i = 0; i < na; ++i) {
    const double* da = ka[i].descriptor.data();
    for (size_t j = 0; j < nb; ++j) {
      const double* db = kb[j].descriptor.data();
      double acc = 0;
      for (size_t k = 0; k < d; ++k) {
        const double diff = da[k] - db[k];
        acc += diff * diff;
      }
      if (acc < d1[i]) {
        d2[i] = d1[i];
        d1[i] = acc;
        best_b[i] = static_cast<int>(j);
      } else if (acc < d2[i]) {
        d2[i] = acc;
      }
    }
  }
  std::vector<int> best_a(nb, -1);
  std::vector<double> e1(nb, 1e30);
  for (size_t j = 0; j < nb; ++j) {
    const double* db = kb[j].descriptor.data();
    for (size_t i = 0; i < na; ++i) {
      const double* da = ka[i].descriptor.data();
      double acc = 0;
      for (size_t k = 0; k < d; ++k) {
        const double diff = da[k] - db[k];
        acc += diff * diff;
      }
      if (acc < e1[j]) {
        e1[j] = acc;
        best_a[j] = static_cast<int>(i);
      }
    }
  }
  std::vector<Match> raw;
  for (size_t i = 0; i < na; ++i) {
    const int j = best_b[i];
    if (j < 0 || best_a[static_cast<size_t>(j)] != static_cast<int>(i)) continue;
    // Lowe ratio on distances (not squared)
    if (std::sqrt(d1[i]) >= cfg.ratio * std::sqrt(d2[i])) continue;
    raw.push_back({static_cast<int>(i), j});
  }
  if (raw.size() < 8) {
    out.matches = raw;
    out.filtered = false;
    return out;
  }

  Rng rng(cfg.ransac_seed);
  size_t best_count = 0;
  Mat3 best_f = Mat3::Zero();
  std::vector<Match> sample(8);
  for (int it = 0; it < cfg.ransac_iters; ++it) {
    // 8 distinct correspondences
    std::vector<int> idx;
    while (idx.size() < 8) {
      const int c = static_cast<int>(rng.uniform_int(static_cast<int64_t>(raw.size())));
      if (std::find(idx.begin(), idx.end(), c) == idx.end()) idx.push_back(c);
    }
    for (int k = 0; k < 8; ++k) sample[static_cast<size_t>(k)] = raw[static_cast<size_t>(idx[k])];
    Mat3 f;
    try {
      f = detail::eight_point(ka, kb, sample);
    } catch (...) {
      continue;
    }
    size_t count = 0;
    for (const auto& m : raw) {
      const Keypoint& p = ka[static_cast<size_t>(m.a)];
      const Keypoint& q = kb[static_cast<size_t>(m.b)];
      if (sampson_distance(f, p.x, p.y, q.x, q.y) < cfg.sampson_px) ++count;
    }
    if (count > best_count) {
      best_count = count;
      best_f = f;
    }
  }
  if (best_count >= 8) {
    // refit on the consensus set once
    std::vector<Match> inl;
    for (const auto& m : raw) {
      const Keypoint& p = ka[static_cast<size_t>(m.a)];
      const Keypoint& q = kb[static_cast<size_t>(m.b)];
      if (sampson_distance(best_f, p.x, p.y, q.x, q.y) < cfg.sampson_px) inl.push_back(m);
    }
    const Mat3 refit = detail::eight_point(ka, kb, inl);
    std::vector<Match> final_inl;
    for (const auto& m : raw) {
      const Keypoint& p = ka[static_cast<size_t>(m.a)];
      const Keypoint& q = kb[static_cast<size_t>(m.b)];
      if (sampson_distance(refit, p.x, p.y, q.x, q.y) < cfg.sampson_px) final_inl.push_back(m);
    }
    if (final_inl.size() >= best_count) {
      out.matches = final_inl;
      out.fundamental = refit;
    } else {
      std::vector<Match> inl2;
      for (const auto& m : raw) {
        const Keypoint& p = ka[static_cast<size_t>(m.a)];
        const Keypoint& q = kb[static_cast<size_t>(m.b)];
        if (sampson_distance(best_f, p.x, p.y, q.x, q.y) < cfg.sampson_px) inl2.push_back(m);
      }
      out.matches = inl2;
      out.fundamental = best_f;
    }
    out.filtered = true;
  } else {
    out.matches = raw;
    out.filtered = false;
  }
  return out;
}

struct SceneGraph {
  // per image: (neighbour id, inlier count), sorted by count desc, ties by
  // smaller id
  std::vector<std::vector<std::pair<int, int>>> neighbors;

  int size() const { return static_cast<int>(neighbors.size()); }

  void add_edge(int i, int j, int count) {
    neighbors[static_cast<size_t>(i)].push_back({j, count});
    neighbors[static_cast<size_t>(j)].push_back({i, count});
  }

  void sort_lists() {
    for (auto& list : neighbors)
      std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
      });
  }
};

struct NeighborSelection {
  std::vector<int> ids;
  bool isolated = false;
};

inline NeighborSelection select_neighbors(const SceneGraph& graph, int i, int k) {
  if (i < 0 || i >= graph.size()) throw DomainError("select_neighbors: image id out of range");
  NeighborSelection out;
  const auto& list = graph.neighbors[static_cast<size_t>(i)];
  out.isolated = list.empty();
  for (const auto& [j, count] : list) {
    if (static_cast<int>(out.ids.size()) >= k) break;
    out.ids.push_back(j);
  }
  return out;
}

// Pairwise match all views and keep edges with at least min_matches inliers.
inline SceneGraph build_scene_graph(const std::vector<Detection>& detections, const Intrinsics& K,
                                    const SceneGraphConfig& cfg = {},
                                    std::vector<std::vector<MatchResult>>* pair_results = nullptr) {
  const int n = static_cast<int>(detections.size());
  SceneGraph graph;
  graph.neighbors.resize(static_cast<size_t>(n));
  if (pair_results) pair_results->assign(static_cast<size_t>(n), {});
  for (int i = 0; i < n; ++i) {
    if (pair_results) (*pair_results)[static_cast<size_t>(i)].resize(static_cast<size_t>(n));
    for (int j = i + 1; j < n; ++j) {
      MatchResult r = match_and_filter(detections[static_cast<size_t>(i)].keypoints,
                                       detections[static_cast<size_t>(j)].keypoints, K, cfg);
      if (pair_results) (*pair_results)[static_cast<size_t>(i)][static_cast<size_t>(j)] = r;
      if (r.filtered && static_cast<int>(r.matches.size()) >= cfg.min_matches)
        graph.add_edge(i, j, static_cast<int>(r.matches.size()));
    }
  }
  graph.sort_lists();
  return graph;
}

// ---------------------------------------------------------------------------
// match and scene-graph text files

inline void save_matches(const std::string& path,
                         const std::vector<std::tuple<int, int, std::vector<std::array<double, 4>>>>&
                             pair_blocks) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write matches to " + path);
  f.precision(17);
  for (const auto& [i, j, rows] : pair_blocks) {
    f << "pair " << i << " " << j << "\n";
    for (const auto& r : rows) f << r[0] << " " << r[1] << " " << r[2] << " " << r[3] << "\n";
  }
}

inline std::vector<std::tuple<int, int, std::vector<std::array<double, 4>>>> load_matches(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read matches from " + path);
  std::vector<std::tuple<int, int, std::vector<std::array<double, 4>>>> blocks;
  std::string tok;
  while (f >> tok) {
    if (tok == "pair") {
      int i = 0, j = 0;
      if (!(f >> i >> j)) throw IoError("match file: malformed pair header in " + path);
      blocks.emplace_back(i, j, std::vector<std::array<double, 4>>{});
    } else {
      if (blocks.empty()) throw IoError("match file: data before first pair header");
      std::array<double, 4> row{};
      row[0] = std::stod(tok);
      if (!(f >> row[1] >> row[2] >> row[3])) throw IoError("match file: truncated row");
      std::get<2>(blocks.back()).push_back(row);
    }
  }
  return blocks;
}

inline void save_scene_graph(const std::string& path, const SceneGraph& graph) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write scene graph to " + path);
  for (int i = 0; i < graph.size(); ++i)
    for (const auto& [j, count] : graph.neighbors[static_cast<size_t>(i)])
      if (i < j) f << i << " " << j << " " << count << "\n";
}

inline SceneGraph load_scene_graph(const std::string& path, int n_images) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read scene graph from " + path);
  SceneGraph graph;
  graph.neighbors.resize(static_cast<size_t>(n_images));
  int i = 0, j = 0, count = 0;
  while (f >> i >> j >> count) graph.add_edge(i, j, count);
  graph.sort_lists();
  return graph;
}

// Build a graph from an imported match file (precomputed matches path). Rows
// are counted per pair; the epipolar filter is assumed already applied.
inline SceneGraph scene_graph_from_matches(
    const std::vector<std::tuple<int, int, std::vector<std::array<double, 4>>>>& blocks,
    int n_images, int min_matches) {
  SceneGraph graph;
  graph.neighbors.resize(static_cast<size_t>(n_images));
  for (const auto& [i, j, rows] : blocks)
    if (static_cast<int>(rows.size()) >= min_matches)
      graph.add_edge(i, j, static_cast<int>(rows.size()));
  graph.sort_lists();
  return graph;
}

}  // namespace dbarf
