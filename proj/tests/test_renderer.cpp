#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dbarf/renderer.hpp"
#include "dbarf/synth.hpp"
#include "oracles.hpp"

using namespace dbarf;
using dbarf::testing::fd_check;
using dbarf::testing::quadrature_oracle;
using dbarf::testing::random_array;

namespace {

struct FpnFixture {
  ParamStoreT<double> store;
  FpnFixture(uint64_t seed = 1, bool zero_weights = false) {
    Rng rng(seed);
    register_fpn_params(store, rng);
    if (zero_weights)
      for (auto& p : store.params()) p.value.fill(0.0);
  }
};

}  // namespace

TEST_CASE("pyramid shapes: 64x64 input gives 32/16/8 with channels 16/32/64") {
  FpnFixture fx;
  Tape tape;
  BoundParamsT<double> bound(tape, fx.store, false);
  Tensor img = tape.constant(Array(Shape{3, 64, 64}));
  auto pyr = extract_pyramid(tape, bind_fpn(bound), img);
  REQUIRE(pyr.levels.size() == 3);
  CHECK(pyr.levels[0].shape() == Shape{32, 32, 16});
  CHECK(pyr.levels[1].shape() == Shape{16, 16, 32});
  CHECK(pyr.levels[2].shape() == Shape{8, 8, 64});
  CHECK_FALSE(pyr.padded);
}

TEST_CASE("zero image with zero biases yields zero features at every level") {
  FpnFixture fx(3);
  for (auto& p : fx.store.params())
    if (p.name.ends_with(".b")) p.value.fill(0.0);
  Tape tape;
  BoundParamsT<double> bound(tape, fx.store, false);
  Tensor img = tape.constant(Array(Shape{3, 32, 32}));
  auto pyr = extract_pyramid(tape, bind_fpn(bound), img);
  for (const auto& level : pyr.levels)
    for (int64_t i = 0; i < level.numel(); ++i) CHECK(level.value()[i] == 0.0);
}

TEST_CASE("undersized input is padded and flagged") {
  FpnFixture fx;
  Tape tape;
  BoundParamsT<double> bound(tape, fx.store, false);
  Tensor img = tape.constant(Array(Shape{3, 60, 52}));
  auto pyr = extract_pyramid(tape, bind_fpn(bound), img);
  CHECK(pyr.padded);
  CHECK(pyr.levels[0].shape() == Shape{32, 28, 16});
  CHECK(pyr.orig_h == 60);
}

TEST_CASE("stride-2 stem is exactly equivariant to 2px shifts of a periodic texture") {
  FpnFixture fx(9);
  Tape tape;
  BoundParamsT<double> bound(tape, fx.store, false);
  auto weights = bind_fpn(bound);
  const int n = 64;
  auto texture = [&](int y, int x) {
    return 0.5 + 0.25 * std::sin(2.0 * M_PI * x / 16.0) + 0.25 * std::cos(2.0 * M_PI * y / 8.0);
  };
  Array a(Shape{3, n, n}), b(Shape{3, n, n});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        a[(c * n + y) * n + x] = texture(y, x) * (1.0 + 0.1 * c);
        b[(c * n + y) * n + x] = texture(y, (x + 2) % n) * (1.0 + 0.1 * c);  // shift left 2px
      }
  Tensor fa = relu(conv2d(tape.constant(a), weights.stem_w,
                          std::optional<Tensor>(weights.stem_b), 2, 1));
  Tensor fb = relu(conv2d(tape.constant(b), weights.stem_w,
                          std::optional<Tensor>(weights.stem_b), 2, 1));
  // shifted image features at (y,x) equal original at (y,x+1), interior only
  const int64_t ho = fa.dim(1), wo = fa.dim(2);
  double worst = 0;
  for (int64_t c = 0; c < 16; ++c)
    for (int64_t y = 2; y < ho - 2; ++y)
      for (int64_t x = 2; x < wo - 3; ++x)
        worst = std::max(worst, std::abs(fb.value()[(c * ho + y) * wo + x] -
                                         fa.value()[(c * ho + y) * wo + x + 1]));
  CHECK(worst < 1e-12);

  // the merged level-0 output shifts by 1px too, up to top-down interpolation
  auto pa = extract_pyramid(tape, weights, tape.constant(a));
  auto pb = extract_pyramid(tape, weights, tape.constant(b));
  double num = 0, den = 0;
  for (int64_t y = 2; y < 30; ++y)
    for (int64_t x = 2; x < 29; ++x)
      for (int64_t c = 0; c < 16; ++c) {
        const double va = pa.levels[0].value()[(y * 32 + x + 1) * 16 + c];
        const double vb = pb.levels[0].value()[(y * 32 + x) * 16 + c];
        num += (va - vb) * (va - vb);
        den += va * va;
      }
  CHECK(std::sqrt(num / den) < 0.1);
}

TEST_CASE("pyramid extraction is deterministic") {
  FpnFixture fx(5);
  Rng rng(2);
  Array img = random_array(rng, {3, 40, 40}, 0, 1);
  auto run = [&]() {
    Tape tape;
    BoundParamsT<double> bound(tape, fx.store, false);
    auto pyr = extract_pyramid(tape, bind_fpn(bound), tape.constant(img));
    return pyr.levels[0].value();
  };
  Array f1 = run(), f2 = run();
  for (int64_t i = 0; i < f1.numel(); ++i) CHECK(f1[i] == f2[i]);
}

TEST_CASE("sample_depths: uniform inverse-depth spacing") {
  auto z = sample_depths(1.0, 2.0, 3);
  REQUIRE(z.size() == 3);
  CHECK(z[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(z[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
  CHECK(z[2] == doctest::Approx(2.0).epsilon(1e-15));

  auto ends = sample_depths(0.75, 5.0, 2);
  CHECK(ends[0] == 0.75);
  CHECK(ends[1] == 5.0);

  CHECK_THROWS_AS(sample_depths(0.0, 2.0, 8), DomainError);
  CHECK_THROWS_AS(sample_depths(2.0, 1.0, 8), DomainError);

  RenderConfig cfg;
  CHECK(cfg.depth_samples == 64);  // default sample count
}

TEST_CASE("aggregate: degenerate pooling and hand-computed mean/variance") {
  Tape tape;
  Rng rng(4);
  const int64_t n = 5, c = 4;
  Array ident = random_array(rng, {n, c});
  Tensor w = tape.constant(Array(Shape{2 * c, 2 * c}));
  Tensor b = tape.constant(Array(Shape{1, 2 * c}));
  std::vector<uint8_t> all(static_cast<size_t>(n), 1);

  SUBCASE("identical vectors: variance zero, mean equals the vector") {
    std::vector<ViewSample<double>> views;
    for (int m = 0; m < 3; ++m) views.push_back({m, tape.constant(ident), all});
    auto agg = aggregate(tape, views, w, b);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) {
        CHECK(agg.pooled.value()[i * 2 * c + j] == doctest::Approx(ident[i * c + j]).epsilon(1e-15));
        CHECK(agg.pooled.value()[i * 2 * c + c + j] == 0.0);
      }
  }

  SUBCASE("two-view case matches hand arithmetic") {
    Array f1 = random_array(rng, {n, c}), f2 = random_array(rng, {n, c});
    std::vector<ViewSample<double>> views{{0, tape.constant(f1), all},
                                          {1, tape.constant(f2), all}};
    auto agg = aggregate(tape, views, w, b);
    for (int64_t i = 0; i < n * c; ++i) {
      const double mu = 0.5 * (f1[i] + f2[i]);
      const double var = 0.5 * ((f1[i] - mu) * (f1[i] - mu) + (f2[i] - mu) * (f2[i] - mu));
      const int64_t row = i / c, col = i % c;
      CHECK(std::abs(agg.pooled.value()[row * 2 * c + col] - mu) < 1e-12);
      CHECK(std::abs(agg.pooled.value()[row * 2 * c + c + col] - var) < 1e-12);
    }
  }

  SUBCASE("permutation of views is bitwise invariant") {
    Array f1 = random_array(rng, {n, c}), f2 = random_array(rng, {n, c}),
          f3 = random_array(rng, {n, c});
    std::vector<uint8_t> partial(static_cast<size_t>(n), 1);
    partial[2] = 0;
    std::vector<ViewSample<double>> fwd{{7, tape.constant(f1), all},
                                        {3, tape.constant(f2), partial},
                                        {5, tape.constant(f3), all}};
    std::vector<ViewSample<double>> rev{fwd[2], fwd[0], fwd[1]};
    auto a1 = aggregate(tape, fwd, w, b);
    auto a2 = aggregate(tape, rev, w, b);
    for (int64_t i = 0; i < a1.pooled.numel(); ++i)
      CHECK(a1.pooled.value()[i] == a2.pooled.value()[i]);
  }

  SUBCASE("all views masked yields zero features and a cleared flag") {
    std::vector<uint8_t> none(static_cast<size_t>(n), 0);
    std::vector<ViewSample<double>> views{{0, tape.constant(ident), none},
                                          {1, tape.constant(ident), none}};
    auto agg = aggregate(tape, views, w, b);
    for (int64_t i = 0; i < agg.pooled.numel(); ++i) CHECK(agg.pooled.value()[i] == 0.0);
    for (auto v : agg.any_valid) CHECK(v == 0);
  }
}

TEST_CASE("predict_density_color: closed form, ranges, gradients") {
  ParamStoreT<double> store;
  Rng rng(6);
  register_renderer_params(store, rng);
  for (auto& p : store.params())
    if (p.name.ends_with(".b")) p.value.fill(0.0);

  SUBCASE("all-masked feature with zero biases gives sigma = ln 2") {
    Tape tape;
    BoundParamsT<double> bound(tape, store, false);
    auto w = bind_renderer(bound);
    Tensor g = tape.constant(Array(Shape{2, 32}));
    Tensor dirs = tape.constant(Array(Shape{2, 3}));
    auto dc = predict_density_color(g, dirs, w);
    CHECK(dc.sigma.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(dc.sigma.value()[1] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("output ranges hold for random inputs") {
    Tape tape;
    BoundParamsT<double> bound(tape, store, false);
    auto w = bind_renderer(bound);
    Rng r2(8);
    Tensor g = tape.constant(random_array(r2, {10000, 32}, -3, 3));
    Tensor dirs = tape.constant(random_array(r2, {10000, 3}, -1, 1));
    auto dc = predict_density_color(g, dirs, w);
    for (int64_t i = 0; i < dc.sigma.numel(); ++i) CHECK(dc.sigma.value()[i] >= 0.0);
    for (int64_t i = 0; i < dc.color.numel(); ++i) {
      CHECK(dc.color.value()[i] >= 0.0);
      CHECK(dc.color.value()[i] <= 1.0);
    }
  }

  SUBCASE("gradient wrt the aggregated feature matches finite differences") {
    Rng r3(12);
    double worst = 0;
    for (int s = 0; s < 100; ++s) {
      Array g = random_array(r3, {2, 32});
      auto graph = [&](Tape& t, std::vector<Tensor>& in) {
        BoundParamsT<double> bound(t, store, false);
        auto w = bind_renderer(bound);
        Tensor dirs = t.constant(Array(Shape{2, 3}, {0, 0, 1, 0, 0, 1}));
        auto dc = predict_density_color(in[0], dirs, w);
        return add(sum(mul(dc.sigma, dc.sigma)), sum(mul(dc.color, dc.color)));
      };
      worst = std::max(worst, fd_check(graph, {g}).max_rel_err);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("volume render: vacuum, single-sample closed form, oracle equality") {
  Tape tape;

  SUBCASE("zero density everywhere") {
    Tensor sigma = tape.constant(Array(Shape{2, 4}));
    Tensor color = tape.constant(Array(Shape{2, 4, 3}, std::vector<double>(24, 0.7)));
    auto vr = volume_render(tape, sigma, color, {1.0, 1.5, 2.0, 2.5});
    for (int64_t i = 0; i < vr.color.numel(); ++i) CHECK(vr.color.value()[i] == 0.0);
    for (int64_t i = 0; i < vr.depth.numel(); ++i) CHECK(vr.depth.value()[i] == 0.0);
    for (int64_t i = 0; i < vr.weights.numel(); ++i) CHECK(vr.weights.value()[i] == 0.0);
  }

  SUBCASE("single sample with sigma*delta = ln 2") {
    Tensor sigma = tape.constant(Array(Shape{1, 1}, {std::log(2.0)}));  // delta defaults to 1
    Tensor color = tape.constant(Array(Shape{1, 1, 3}, {1.0, 0.0, 0.0}));
    auto vr = volume_render(tape, sigma, color, {2.0});
    CHECK(vr.color.value()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(vr.color.value()[1] == 0.0);
    CHECK(vr.depth.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("two-sample case equals the direct-summation oracle to 1e-12") {
    Rng rng(14);
    for (int s = 0; s < 200; ++s) {
      std::vector<std::vector<double>> sig{{rng.uniform(0, 3), rng.uniform(0, 3)}};
      std::vector<std::vector<std::array<double, 3>>> col{
          {{rng.uniform(), rng.uniform(), rng.uniform()},
           {rng.uniform(), rng.uniform(), rng.uniform()}}};
      std::vector<double> z{rng.uniform(0.5, 2.0), rng.uniform(2.5, 5.0)};
      Array sa(Shape{1, 2}, {sig[0][0], sig[0][1]});
      Array ca(Shape{1, 2, 3}, {col[0][0][0], col[0][0][1], col[0][0][2], col[0][1][0],
                                col[0][1][1], col[0][1][2]});
      auto vr = volume_render(tape, tape.constant(sa), tape.constant(ca), z);
      auto oracle = quadrature_oracle(sig, col, z);
      for (int c = 0; c < 3; ++c)
        CHECK(std::abs(vr.color.value()[c] - oracle.color[0][static_cast<size_t>(c)]) < 1e-12);
      CHECK(std::abs(vr.depth.value()[0] - oracle.depth[0]) < 1e-12);
    }
  }

  SUBCASE("non-monotone depths are rejected") {
    Tensor sigma = tape.constant(Array(Shape{1, 2}, {1.0, 1.0}));
    Tensor color = tape.constant(Array(Shape{1, 2, 3}));
    CHECK_THROWS_AS(volume_render(tape, sigma, color, {2.0, 1.0}), DomainError);
  }
}

TEST_CASE("volume render invariants on random instances") {
  Rng rng(15);
  Tape tape;
  for (int s = 0; s < 100; ++s) {
    const int64_t k = 8;
    Array sig(Shape{1, k});
    for (int64_t i = 0; i < k; ++i) sig[i] = rng.uniform(0, 2);
    Array col = random_array(rng, {1, k, 3}, 0, 1);
    std::vector<double> z;
    double zc = rng.uniform(0.5, 1.0);
    for (int64_t i = 0; i < k; ++i) {
      z.push_back(zc);
      zc += rng.uniform(0.1, 0.5);
    }
    auto vr = volume_render(tape, tape.constant(sig), tape.constant(col), z);
    double wsum = 0, prev_t = 1.0;
    // recompute transmittance from weights: T_k = w_k / alpha_k where defined
    std::vector<double> delta(static_cast<size_t>(k));
    for (int64_t i = 0; i + 1 < k; ++i) delta[static_cast<size_t>(i)] = z[static_cast<size_t>(i + 1)] - z[static_cast<size_t>(i)];
    delta[static_cast<size_t>(k - 1)] = delta[static_cast<size_t>(k - 2)];
    for (int64_t i = 0; i < k; ++i) {
      const double w = vr.weights.value()[i];
      CHECK(w >= 0.0);
      CHECK(w <= 1.0);
      wsum += w;
      const double alpha = 1.0 - std::exp(-sig[i] * delta[static_cast<size_t>(i)]);
      if (alpha > 1e-12) {
        const double t = w / alpha;
        CHECK(t <= prev_t + 1e-12);  // transmittance non-increasing
        prev_t = t;
      }
    }
    CHECK(wsum <= 1.0 + 1e-12);
    CHECK(vr.depth.value()[0] >= z.front() * wsum - 1e-9);
    CHECK(vr.depth.value()[0] <= z.back() * wsum + 1e-9);

    // doubling density never decreases the accumulated weight
    Array sig2 = sig;
    for (int64_t i = 0; i < k; ++i) sig2[i] *= 2.0;
    auto vr2 = volume_render(tape, tape.constant(sig2), tape.constant(col), z);
    double wsum2 = 0;
    for (int64_t i = 0; i < k; ++i) wsum2 += vr2.weights.value()[i];
    CHECK(wsum2 >= wsum - 1e-12);
  }
}

TEST_CASE("render_rays degenerate rig: finite outputs and bounded weights") {
  ParamStoreT<double> store;
  Rng rng(20);
  register_fpn_params(store, rng);
  register_renderer_params(store, rng);
  SyntheticScene scene = make_scene(55, [] {
    SceneConfig c;
    c.plane_count = 1;
    return c;
  }());
  const Intrinsics K(0.9 * 64, 0.9 * 64, 31.5, 31.5, 64, 64);
  GtRender gt = gt_render(scene, SE3Pose::identity(), K, 64, 64);

  Tape tape;
  BoundParamsT<double> bound(tape, store, false);
  auto pyr = extract_pyramid(tape, bind_fpn(bound), gt.image, 0);
  NeighborView<double> nb;
  nb.view_id = 0;
  nb.intrinsics = K;
  nb.pose = pose_constant(tape, SE3Pose::identity());
  nb.features = pyr.levels[0];
  nb.stride = 2.0;

  std::vector<std::pair<double, double>> rays;
  Rng rr(1);
  for (int i = 0; i < 32; ++i) rays.push_back({rr.uniform(2, 61), rr.uniform(2, 61)});
  auto z = sample_depths(scene.near(), scene.far(), 16);
  auto out = render_rays(tape, K, rays, z, {nb}, bind_renderer(bound));
  for (int64_t i = 0; i < out.color.numel(); ++i) {
    CHECK(std::isfinite(out.color.value()[i]));
    CHECK(out.color.value()[i] >= 0.0);
    CHECK(out.color.value()[i] <= 1.0);
  }
  for (size_t i = 0; i < rays.size(); ++i) CHECK(out.ray_valid[i] == 1);
  for (int64_t r = 0; r < 32; ++r) {
    double wsum = 0;
    for (int64_t kk = 0; kk < 16; ++kk) wsum += out.weights.value()[r * 16 + kk];
    CHECK(wsum <= 1.0 + 1e-12);
  }
}

TEST_CASE("end-to-end gradient of rendered color wrt a neighbor twist") {
  // micro-instance: 2 rays, 3 samples, 2 views
  ParamStoreT<double> store;
  Rng rng(30);
  register_renderer_params(store, rng);
  const Intrinsics K(30.0, 30.0, 15.5, 15.5, 32, 32);
  Rng rr(7);
  Array fmap_a = random_array(rr, {16, 16, 16}, 0, 1);
  Array fmap_b = random_array(rr, {16, 16, 16}, 0, 1);
  std::vector<std::pair<double, double>> rays = {{14.3, 15.2}, {17.8, 16.1}};
  auto z = sample_depths(2.0, 5.0, 3);

  double worst = 0;
  for (int s = 0; s < 30; ++s) {
    Array xi(Shape{6});
    for (int i = 0; i < 6; ++i) xi[i] = rr.uniform(-0.05, 0.05);
    auto graph = [&](Tape& t, std::vector<Tensor>& in) {
      BoundParamsT<double> bound(t, store, false);
      NeighborView<double> a, b;
      a.view_id = 0;
      a.intrinsics = K;
      a.pose = se3_exp_graph(in[0]);
      a.features = t.constant(fmap_a);
      a.stride = 2.0;
      b.view_id = 1;
      b.intrinsics = K;
      b.pose = pose_constant(t, se3_exp([] {
                               Twist w = Twist::Zero();
                               w[4] = 0.1;
                               return w;
                             }()));
      b.features = t.constant(fmap_b);
      b.stride = 2.0;
      auto out = render_rays(t, K, rays, z, {a, b}, bind_renderer(bound));
      return sum(mul(out.color, out.color));
    };
    worst = std::max(worst, fd_check(graph, {xi}).max_rel_err);
  }
  CHECK(worst < 1e-3);
}
