// The generalizable renderer: a small FPN feature extractor, per-sample
// feature aggregation across nearby views (mean/variance pooling + a learned
// map), a density/color MLP and quadrature volume rendering.
#pragma once

#include "dbarf/geometry.hpp"
#include "dbarf/image.hpp"
#include "dbarf/params.hpp"

namespace dbarf {

inline constexpr int kFpnLevels = 3;
inline constexpr int kFpnChannels[kFpnLevels] = {16, 32, 64};
inline constexpr int kFpnStrides[kFpnLevels] = {2, 4, 8};

struct RenderConfig {
  int depth_samples = 64;
  int mlp_hidden = 32;
  int color_hidden = 16;
  int feature_level = 0;  // pyramid level the renderer samples
};

// ---------------------------------------------------------------------------
// feature pyramid

template <typename S>
struct FpnWeights {
  TensorT<S> stem_w, stem_b;      // 3 -> 16, stride 2
  TensorT<S> down1_w, down1_b;    // 16 -> 32, stride 2
  TensorT<S> down2_w, down2_b;    // 32 -> 64, stride 2
  TensorT<S> lat2_w, lat2_b;      // 1x1 64 -> 64
  TensorT<S> up21_w, up21_b;      // 1x1 64 -> 32
  TensorT<S> lat1_w, lat1_b;      // 1x1 32 -> 32
  TensorT<S> smooth1_w, smooth1_b;  // 3x3 32 -> 32
  TensorT<S> up10_w, up10_b;      // 1x1 32 -> 16
  TensorT<S> lat0_w, lat0_b;      // 1x1 16 -> 16
  TensorT<S> smooth0_w, smooth0_b;  // 3x3 16 -> 16
};

template <typename S>
void register_fpn_params(ParamStoreT<S>& store, Rng& rng) {
  auto conv = [&](const std::string& name, int co, int ci, int k) {
    init_kaiming(store.add(name + ".w", Shape{co, ci, k, k}), rng, int64_t(ci) * k * k);
    store.add(name + ".b", Shape{co});
  };
  conv("fpn.stem", 16, 3, 3);
  conv("fpn.down1", 32, 16, 3);
  conv("fpn.down2", 64, 32, 3);
  conv("fpn.lat2", 64, 64, 1);
  conv("fpn.up21", 32, 64, 1);
  conv("fpn.lat1", 32, 32, 1);
  conv("fpn.smooth1", 32, 32, 3);
  conv("fpn.up10", 16, 32, 1);
  conv("fpn.lat0", 16, 16, 1);
  conv("fpn.smooth0", 16, 16, 3);
}

template <typename S>
FpnWeights<S> bind_fpn(const BoundParamsT<S>& b) {
  return {b["fpn.stem.w"],    b["fpn.stem.b"],    b["fpn.down1.w"],   b["fpn.down1.b"],
          b["fpn.down2.w"],   b["fpn.down2.b"],   b["fpn.lat2.w"],    b["fpn.lat2.b"],
          b["fpn.up21.w"],    b["fpn.up21.b"],    b["fpn.lat1.w"],    b["fpn.lat1.b"],
          b["fpn.smooth1.w"], b["fpn.smooth1.b"], b["fpn.up10.w"],    b["fpn.up10.b"],
          b["fpn.lat0.w"],    b["fpn.lat0.b"],    b["fpn.smooth0.w"], b["fpn.smooth0.b"]};
}

template <typename S>
struct FeaturePyramidT {
  std::vector<TensorT<S>> levels;  // [H,W,C] per level, C = kFpnChannels
  int source_id = -1;
  int orig_h = 0, orig_w = 0;
  bool padded = false;
};

// Bilinear resize in CHW via a constant sampling grid (coordinates clamped to
// the source rectangle, so borders replicate rather than fade to zero).
template <typename S>
TensorT<S> upsample_bilinear_chw(TapeT<S>& tape, const TensorT<S>& x, int64_t ho, int64_t wo) {
  const int64_t hi = x.dim(1), wi = x.dim(2);
  ArrayT<S> grid(Shape{ho * wo, 2});
  for (int64_t y = 0; y < ho; ++y)
    for (int64_t x2 = 0; x2 < wo; ++x2) {
      const double sx = std::clamp((x2 + 0.5) * static_cast<double>(wi) / wo - 0.5, 0.0,
                                   static_cast<double>(wi - 1));
      const double sy = std::clamp((y + 0.5) * static_cast<double>(hi) / ho - 0.5, 0.0,
                                   static_cast<double>(hi - 1));
      grid[(y * wo + x2) * 2] = static_cast<S>(sx);
      grid[(y * wo + x2) * 2 + 1] = static_cast<S>(sy);
    }
  auto sampled = bilinear_sample(hwc_from_chw(x), tape.constant(std::move(grid)));
  return chw_from_hwc(reshape(sampled.values, Shape{ho, wo, x.dim(0)}));
}

template <typename S>
TensorT<S> image_tensor(TapeT<S>& tape, const Image& img) {
  ArrayT<S> chw(Shape{3, img.height(), img.width()});
  const int64_t hw = static_cast<int64_t>(img.height()) * img.width();
  for (int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) chw[c * hw + i] = static_cast<S>(img.rgb[i * 3 + c]);
  return tape.constant(std::move(chw));
}

// Three-level pyramid with lateral/top-down merges. Inputs not divisible by 8
// are zero-padded at the bottom/right (flagged on the result).
template <typename S>
FeaturePyramidT<S> extract_pyramid(TapeT<S>& tape, const FpnWeights<S>& w,
                                   const TensorT<S>& image_chw, int source_id = -1) {
  FeaturePyramidT<S> out;
  out.source_id = source_id;
  out.orig_h = static_cast<int>(image_chw.dim(1));
  out.orig_w = static_cast<int>(image_chw.dim(2));
  TensorT<S> x = image_chw;
  const int64_t ph = (out.orig_h + 7) / 8 * 8, pw = (out.orig_w + 7) / 8 * 8;
  if (ph != out.orig_h || pw != out.orig_w) {
    out.padded = true;
    ArrayT<S> padded(Shape{3, ph, pw});
    const ArrayT<S>& src = image_chw.value();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < out.orig_h; ++y)
        for (int64_t xx = 0; xx < out.orig_w; ++xx)
          padded[(c * ph + y) * pw + xx] = src[(c * out.orig_h + y) * out.orig_w + xx];
    // pad is applied to the raw buffer; gradients to the source image are not
    // needed on this path (inputs are data, parameters carry the training)
    x = tape.constant(std::move(padded));
  }
  auto conv = [&](const TensorT<S>& in, const TensorT<S>& cw, const TensorT<S>& cb, int stride,
                  int pad) { return conv2d(in, cw, std::optional<TensorT<S>>(cb), stride, pad); };
  TensorT<S> c1 = relu(conv(x, w.stem_w, w.stem_b, 2, 1));
  TensorT<S> c2 = relu(conv(c1, w.down1_w, w.down1_b, 2, 1));
  TensorT<S> c3 = relu(conv(c2, w.down2_w, w.down2_b, 2, 1));
  TensorT<S> p2 = conv(c3, w.lat2_w, w.lat2_b, 1, 0);
  TensorT<S> up1 = upsample_bilinear_chw(tape, conv(p2, w.up21_w, w.up21_b, 1, 0), c2.dim(1),
                                         c2.dim(2));
  TensorT<S> p1 = conv(add(up1, conv(c2, w.lat1_w, w.lat1_b, 1, 0)), w.smooth1_w, w.smooth1_b, 1,
                       1);
  TensorT<S> up0 = upsample_bilinear_chw(tape, conv(p1, w.up10_w, w.up10_b, 1, 0), c1.dim(1),
                                         c1.dim(2));
  TensorT<S> p0 = conv(add(up0, conv(c1, w.lat0_w, w.lat0_b, 1, 0)), w.smooth0_w, w.smooth0_b, 1,
                       1);
  out.levels = {hwc_from_chw(p0), hwc_from_chw(p1), hwc_from_chw(p2)};
  return out;
}

template <typename S>
FeaturePyramidT<S> extract_pyramid(TapeT<S>& tape, const FpnWeights<S>& w, const Image& img,
                                   int source_id = -1) {
  return extract_pyramid(tape, w, image_tensor<S>(tape, img), source_id);
}

// ---------------------------------------------------------------------------
// depth sampling: uniform in inverse depth between 1/near and 1/far

inline std::vector<double> sample_depths(double near, double far, int k) {
  if (near <= 0) throw DomainError("sample_depths: near must be positive");
  if (!(near < far)) throw DomainError("sample_depths: need near < far");
  if (k < 2) throw DomainError("sample_depths: need at least 2 samples");
  std::vector<double> z(static_cast<size_t>(k));
  const double inv_near = 1.0 / near, inv_far = 1.0 / far;
  for (int i = 0; i < k; ++i) {
    const double t = static_cast<double>(i) / (k - 1);
    z[static_cast<size_t>(i)] = 1.0 / (inv_near + (inv_far - inv_near) * t);
  }
  return z;
}

// ---------------------------------------------------------------------------
// aggregation across views

template <typename S>
struct ViewSample {
  int view_id = -1;
  TensorT<S> features;          // [N,C]
  std::vector<uint8_t> valid;   // length N
};

template <typename S>
struct Aggregated {
  TensorT<S> pooled;            // [N,2C]: per-channel mean then variance
  TensorT<S> g;                 // [N,2C] after the learned map
  std::vector<uint8_t> any_valid;
};

// Permutation-invariant pooling: views are sorted by id internally, so the
// result is bitwise independent of caller order. Masked views are excluded;
// all-masked samples produce zero features and a cleared flag.
template <typename S>
Aggregated<S> aggregate(TapeT<S>& tape, std::vector<ViewSample<S>> views,
                        const TensorT<S>& agg_w, const TensorT<S>& agg_b) {
  if (views.empty()) throw ShapeError("aggregate: need at least one view");
  std::sort(views.begin(), views.end(),
            [](const ViewSample<S>& a, const ViewSample<S>& b) { return a.view_id < b.view_id; });
  const int64_t n = views[0].features.dim(0);
  const int64_t c = views[0].features.dim(1);

  ArrayT<S> count(Shape{n, 1});
  for (const auto& v : views)
    for (int64_t i = 0; i < n; ++i) count[i] += static_cast<S>(v.valid[static_cast<size_t>(i)]);
  Aggregated<S> out;
  out.any_valid.resize(static_cast<size_t>(n));
  ArrayT<S> inv_count(Shape{n, 1});
  for (int64_t i = 0; i < n; ++i) {
    out.any_valid[static_cast<size_t>(i)] = count[i] > S(0) ? 1 : 0;
    inv_count[i] = count[i] > S(0) ? S(1) / count[i] : S(0);
  }
  TensorT<S> inv_cnt = tape.constant(std::move(inv_count));

  auto mask_of = [&](const ViewSample<S>& v) {
    ArrayT<S> m(Shape{n, 1});
    for (int64_t i = 0; i < n; ++i) m[i] = static_cast<S>(v.valid[static_cast<size_t>(i)]);
    return tape.constant(std::move(m));
  };
  std::vector<TensorT<S>> masks;
  masks.reserve(views.size());
  for (const auto& v : views) masks.push_back(mask_of(v));

  TensorT<S> sum_f = mul(views[0].features, masks[0]);
  for (size_t m = 1; m < views.size(); ++m)
    sum_f = add(sum_f, mul(views[m].features, masks[m]));
  TensorT<S> mu = mul(sum_f, inv_cnt);

  TensorT<S> sum_sq;
  for (size_t m = 0; m < views.size(); ++m) {
    TensorT<S> d = sub(views[m].features, mu);
    TensorT<S> term = mul(mul(d, d), masks[m]);
    sum_sq = m == 0 ? term : add(sum_sq, term);
  }
  TensorT<S> var = mul(sum_sq, inv_cnt);

  out.pooled = concat(std::vector<TensorT<S>>{mu, var}, 1);
  out.g = relu(add(matmul(out.pooled, agg_w), agg_b));
  (void)c;
  return out;
}

// ---------------------------------------------------------------------------
// density/color prediction

template <typename S>
struct RendererWeights {
  TensorT<S> agg_w, agg_b;
  TensorT<S> mlp1_w, mlp1_b, mlp2_w, mlp2_b;
  TensorT<S> sigma_w, sigma_b;
  TensorT<S> col1_w, col1_b, col2_w, col2_b;
};

template <typename S>
void register_renderer_params(ParamStoreT<S>& store, Rng& rng, const RenderConfig& cfg = {}) {
  const int c2 = 2 * kFpnChannels[cfg.feature_level];
  const int h = cfg.mlp_hidden, hc = cfg.color_hidden;
  auto lin = [&](const std::string& name, int in, int outw) {
    init_kaiming(store.add(name + ".w", Shape{in, outw}), rng, in);
    store.add(name + ".b", Shape{1, outw});
  };
  lin("gen.agg", c2, c2);
  lin("gen.mlp1", c2, h);
  lin("gen.mlp2", h, h);
  lin("gen.sigma", h, 1);
  lin("gen.col1", h + 3, hc);
  lin("gen.col2", hc, 3);
}

template <typename S>
RendererWeights<S> bind_renderer(const BoundParamsT<S>& b) {
  return {b["gen.agg.w"],   b["gen.agg.b"],   b["gen.mlp1.w"], b["gen.mlp1.b"],
          b["gen.mlp2.w"],  b["gen.mlp2.b"],  b["gen.sigma.w"], b["gen.sigma.b"],
          b["gen.col1.w"],  b["gen.col1.b"],  b["gen.col2.w"], b["gen.col2.b"]};
}

template <typename S>
struct DensityColor {
  TensorT<S> sigma;  // [N,1], softplus >= 0
  TensorT<S> color;  // [N,3], sigmoid in [0,1]
};

template <typename S>
DensityColor<S> predict_density_color(const TensorT<S>& g, const TensorT<S>& dirs,
                                      const RendererWeights<S>& w) {
  TensorT<S> h1 = relu(add(matmul(g, w.mlp1_w), w.mlp1_b));
  TensorT<S> h2 = relu(add(matmul(h1, w.mlp2_w), w.mlp2_b));
  DensityColor<S> out;
  out.sigma = softplus(add(matmul(h2, w.sigma_w), w.sigma_b));
  TensorT<S> hd = concat(std::vector<TensorT<S>>{h2, dirs}, 1);
  TensorT<S> hc = relu(add(matmul(hd, w.col1_w), w.col1_b));
  out.color = sigmoid(add(matmul(hc, w.col2_w), w.col2_b));
  return out;
}

// ---------------------------------------------------------------------------
// volume rendering (quadrature). sigma: [R,K], color: [R,K,3], z: K depths.
// The last interval reuses the previous one.

template <typename S>
struct VolumeRender {
  TensorT<S> color;    // [R,3]
  TensorT<S> depth;    // [R,1]
  TensorT<S> weights;  // [R,K]
};

template <typename S>
VolumeRender<S> volume_render(TapeT<S>& tape, const TensorT<S>& sigma, const TensorT<S>& color,
                              const std::vector<double>& z) {
  const int64_t r = sigma.dim(0), k = sigma.dim(1);
  if (static_cast<int64_t>(z.size()) != k) throw ShapeError("volume_render: depth count mismatch");
  for (size_t i = 0; i + 1 < z.size(); ++i)
    if (!(z[i] < z[i + 1])) throw DomainError("volume_render: depths must be strictly increasing");
  for (int64_t i = 0; i < sigma.numel(); ++i)
    if (sigma.value()[i] < S(0)) throw DomainError("volume_render: negative density");

  ArrayT<S> delta(Shape{k});
  for (int64_t i = 0; i + 1 < k; ++i) delta[i] = static_cast<S>(z[i + 1] - z[i]);
  delta[k - 1] = k >= 2 ? delta[k - 2] : S(1);
  TensorT<S> tau = mul(sigma, tape.constant(std::move(delta)));

  // exclusive prefix sum along k via a constant strictly-lower-triangular mask
  ArrayT<S> tri(Shape{k, k});
  for (int64_t l = 0; l < k; ++l)
    for (int64_t m = l + 1; m < k; ++m) tri[l * k + m] = S(1);
  TensorT<S> cum = matmul(tau, tape.constant(std::move(tri)));
  TensorT<S> transmittance = exp_op(neg(cum));
  TensorT<S> one = tape.scalar(S(1));
  TensorT<S> alpha = sub(one, exp_op(neg(tau)));
  VolumeRender<S> out;
  out.weights = mul(transmittance, alpha);

  TensorT<S> w3 = reshape(out.weights, Shape{r, k, 1});
  out.color = sum(mul(w3, color), 1);
  ArrayT<S> zc(Shape{k, 1});
  for (int64_t i = 0; i < k; ++i) zc[i] = static_cast<S>(z[static_cast<size_t>(i)]);
  out.depth = matmul(out.weights, tape.constant(std::move(zc)));
  return out;
}

// ---------------------------------------------------------------------------
// full ray rendering against nearby views

template <typename S>
struct NeighborView {
  int view_id = -1;
  Intrinsics intrinsics;
  PoseT<S> pose;        // relative pose target -> neighbor (differentiable)
  TensorT<S> features;  // [H,W,C] feature map at `stride`
  double stride = 2.0;
};

template <typename S>
struct RaysRender {
  TensorT<S> color;   // [R,3]
  TensorT<S> depth;   // [R,1]
  TensorT<S> weights; // [R,K]
  std::vector<uint8_t> ray_valid;  // rays with no valid sample are flagged
};

// Per-ray pipeline: sample depths along the target ray, warp each sample into
// every neighbor, aggregate, predict and composite. Samples that no view sees
// get their density gated to zero; rays with no visible sample are flagged
// for exclusion from losses.
template <typename S>
RaysRender<S> render_rays(TapeT<S>& tape, const Intrinsics& k_target,
                          const std::vector<std::pair<double, double>>& ray_pixels,
                          const std::vector<double>& z_samples,
                          const std::vector<NeighborView<S>>& neighbors,
                          const RendererWeights<S>& w) {
  const int64_t r = static_cast<int64_t>(ray_pixels.size());
  const int64_t k = static_cast<int64_t>(z_samples.size());
  const int64_t n = r * k;
  if (neighbors.empty()) throw ShapeError("render_rays: no neighbor views");

  ArrayT<S> pts(Shape{n, 3});
  ArrayT<S> dirs(Shape{n, 3});
  for (int64_t ri = 0; ri < r; ++ri) {
    const double ux = (ray_pixels[static_cast<size_t>(ri)].first - k_target.cx) / k_target.fx;
    const double uy = (ray_pixels[static_cast<size_t>(ri)].second - k_target.cy) / k_target.fy;
    const double inv_norm = 1.0 / std::sqrt(ux * ux + uy * uy + 1.0);
    for (int64_t ki = 0; ki < k; ++ki) {
      const int64_t i = ri * k + ki;
      const double z = z_samples[static_cast<size_t>(ki)];
      pts[i * 3 + 0] = static_cast<S>(ux * z);
      pts[i * 3 + 1] = static_cast<S>(uy * z);
      pts[i * 3 + 2] = static_cast<S>(z);
      dirs[i * 3 + 0] = static_cast<S>(ux * inv_norm);
      dirs[i * 3 + 1] = static_cast<S>(uy * inv_norm);
      dirs[i * 3 + 2] = static_cast<S>(inv_norm);
    }
  }
  TensorT<S> x = tape.constant(std::move(pts));
  TensorT<S> dir_t = tape.constant(std::move(dirs));

  std::vector<ViewSample<S>> samples;
  samples.reserve(neighbors.size());
  for (const auto& nb : neighbors) {
    TensorT<S> y = transform_points(nb.pose, x);
    ProjectedT<S> proj = project_graph(tape, nb.intrinsics, y);
    TensorT<S> gc = to_feature_coords(tape, proj.pix, nb.stride);
    SampledT<S> s = bilinear_sample(nb.features, gc);
    ViewSample<S> vs;
    vs.view_id = nb.view_id;
    vs.features = s.values;
    vs.valid.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
      vs.valid[static_cast<size_t>(i)] = proj.in_front[static_cast<size_t>(i)] &&
                                         s.valid[static_cast<size_t>(i)];
    samples.push_back(std::move(vs));
  }

  Aggregated<S> agg = aggregate(tape, std::move(samples), w.agg_w, w.agg_b);
  DensityColor<S> dc = predict_density_color(agg.g, dir_t, w);

  ArrayT<S> gate(Shape{n, 1});
  for (int64_t i = 0; i < n; ++i) gate[i] = static_cast<S>(agg.any_valid[static_cast<size_t>(i)]);
  TensorT<S> sigma = reshape(mul(dc.sigma, tape.constant(std::move(gate))), Shape{r, k});
  TensorT<S> color = reshape(dc.color, Shape{r, k, 3});

  VolumeRender<S> vr = volume_render(tape, sigma, color, z_samples);
  RaysRender<S> out;
  out.color = vr.color;
  out.depth = vr.depth;
  out.weights = vr.weights;
  out.ray_valid.assign(static_cast<size_t>(r), 0);
  for (int64_t ri = 0; ri < r; ++ri)
    for (int64_t ki = 0; ki < k; ++ki)
      if (agg.any_valid[static_cast<size_t>(ri * k + ki)]) {
        out.ray_valid[static_cast<size_t>(ri)] = 1;
        break;
      }
  return out;
}

}  // namespace dbarf
