#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "convreg/metric.hpp"
#include "test_util.hpp"

using namespace convreg;
using convreg::testing::random_volume;

namespace {

// Smooth texture tapered to zero at the faces, like an object on a dark background.
Volume smooth_volume(Dims3 d, std::uint64_t seed, double sigma = 2.0) {
  Volume v = normalize_intensity(gaussian_smooth(random_volume(d, seed), sigma));
  auto taper = [](int i, int n) {
    const double s = std::sin(std::numbers::pi * i / (n - 1));
    return s * s;
  };
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i)
        v(i, j, k) = static_cast<float>(v(i, j, k) * taper(i, d.x) * taper(j, d.y) * taper(k, d.z));
  return normalize_intensity(v);
}

TransformStack offset_similarity(const Geometry& g) {
  TransformStack s;
  SimilarityParams p;
  p.center = g.center();
  p.translation = Vec3(0.7, -0.4, 0.3);
  p.rotation = Vec3(0.05, -0.03, 0.04);
  p.log_scale = 0.02;
  s.similarity = p;
  return s;
}

template <class Value>
Eigen::VectorXd central_differences(Value&& value, TransformStack stack, Stage st, double h,
                                    const std::vector<int>& which) {
  const Eigen::VectorXd theta = stack.parameters(st);
  Eigen::VectorXd fd = Eigen::VectorXd::Zero(theta.size());
  for (int i : which) {
    Eigen::VectorXd t = theta;
    t[i] += h;
    stack.set_parameters(st, t);
    const double up = value(stack);
    t[i] -= 2 * h;
    stack.set_parameters(st, t);
    const double down = value(stack);
    fd[i] = (up - down) / (2 * h);
  }
  return fd;
}

// Patch entropy from the same partial-volume binning the MI code uses.
double pv_entropy(const Volume& v, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  for (float x : v.data()) {
    const double t = std::clamp<double>(x, 0.0, 1.0) * (bins - 1);
    const int lo = std::min(static_cast<int>(t), bins - 2);
    h[static_cast<std::size_t>(lo)] += 1.0 - (t - lo);
    h[static_cast<std::size_t>(lo) + 1] += t - lo;
  }
  double e = 0.0;
  for (double c : h)
    if (c > 0) {
      const double p = c / static_cast<double>(v.size());
      e -= p * std::log(p);
    }
  return e;
}

}  // namespace

TEST_CASE("cnn_metric_value") {
  const Network net = init_network<float>(Architecture::reference(), 101);
  SUBCASE("zero-weight network gives 0") {
    Network zero = net;
    for (auto& l : zero.layers) std::fill(l.weights.begin(), l.weights.end(), 0.0f);
    const auto ctx = MetricContext::make(random_volume(cube(20), 102), random_volume(cube(20), 103));
    CHECK(cnn_metric_value(zero, ctx, offset_similarity(ctx.fixed.geometry())) == 0.0);
    const auto g = cnn_metric_gradient(zero, ctx, offset_similarity(ctx.fixed.geometry()), Stage::Similarity);
    CHECK(g.value == 0.0);
    CHECK(g.gradient.isZero());
  }
  SUBCASE("a p^3 fixed volume equals forward_patch on the pair") {
    const Volume f = random_volume(cube(17), 104), m = random_volume(cube(17), 105);
    const auto ctx = MetricContext::make(f, m);
    std::vector<float> pair(f.data());
    pair.insert(pair.end(), m.data().begin(), m.data().end());
    CHECK(cnn_metric_value(net, ctx, TransformStack{}) == doctest::Approx(forward_patch<float>(net, pair)).epsilon(1e-5));
  }
  SUBCASE("equals the sum over the dense stride-4 patch grid") {
    const auto ctx = MetricContext::make(random_volume({29, 26, 21}, 106), random_volume({29, 26, 21}, 107));
    const auto stack = offset_similarity(ctx.fixed.geometry());
    const Volume w = resample(ctx.moving, stack, ctx.fixed.geometry());
    double sum = 0.0;
    for (int k = 0; k + 17 <= 21; k += 4)
      for (int j = 0; j + 17 <= 26; j += 4)
        for (int i = 0; i + 17 <= 29; i += 4) {
          std::vector<float> patch;
          for (const Volume* v : {&ctx.fixed, &w})
            for (int z = 0; z < 17; ++z)
              for (int y = 0; y < 17; ++y)
                for (int x = 0; x < 17; ++x) patch.push_back((*v)(i + x, j + y, k + z));
          sum += forward_patch<float>(net, patch);
        }
    CHECK(cnn_metric_value(net, ctx, stack) == doctest::Approx(sum).epsilon(1e-3).scale(1e-3));
  }
  SUBCASE("too small") {
    const auto ctx = MetricContext::make(random_volume(cube(16), 108), random_volume(cube(16), 109));
    CHECK_THROWS_AS(cnn_metric_value(net, ctx, TransformStack{}), std::invalid_argument);
  }
}

// Affine intensity on a domain larger than the fixed one: central differences
// and trilinear interpolation are both exact, and no sample leaves the image.
Volume affine_moving() {
  Volume m(Geometry{cube(40), Vec3::Ones(), Vec3::Constant(-8.0)});
  for (int k = 0; k < 40; ++k)
    for (int j = 0; j < 40; ++j)
      for (int i = 0; i < 40; ++i) {
        const Vec3 x = m.geometry().to_physical(i, j, k) - Vec3::Constant(11.5);
        m(i, j, k) = static_cast<float>(0.5 + 0.011 * x.x() - 0.008 * x.y() + 0.006 * x.z());
      }
  return m;
}

TEST_CASE("cnn_metric_gradient") {
  const auto net = init_network<double>(Architecture::reference(), 110);
  const auto ctx = MetricContext::make(smooth_volume(cube(24), 111), affine_moving());
  const auto stack = offset_similarity(ctx.fixed.geometry());
  auto value = [&](const TransformStack& s) { return cnn_metric_value(net, ctx, s); };

  SUBCASE("similarity gradient matches finite differences") {
    const auto g = cnn_metric_gradient(net, ctx, stack, Stage::Similarity);
    // The warped image is stored in 32 bits, so the step cannot be tiny.
    const auto fd = central_differences(value, stack, Stage::Similarity, 1e-3, {0, 1, 2, 3, 4, 5, 6});
    for (int i = 0; i < 7; ++i) CHECK(g.gradient[i] == doctest::Approx(fd[i]).epsilon(1e-3));
    CHECK(g.value == doctest::Approx(value(stack)).epsilon(1e-12));
  }
  SUBCASE("B-spline gradient matches finite differences") {
    TransformStack s = stack;
    s.bspline = BSplineGrid::covering(ctx.fixed.geometry(), cube(5));
    std::mt19937_64 rng(113);
    std::uniform_real_distribution<double> u(-0.8, 0.8);
    Eigen::VectorXd p(s.parameter_count(Stage::BSpline));
    for (auto& x : p) x = u(rng);
    s.set_parameters(Stage::BSpline, p);
    const auto g = cnn_metric_gradient(net, ctx, s, Stage::BSpline);
    std::vector<int> which;
    for (int i = 0; i < s.parameter_count(Stage::BSpline); i += 17) which.push_back(i);
    const auto fd = central_differences(value, s, Stage::BSpline, 1e-2, which);
    std::vector<double> a, b;
    for (int i : which) {
      a.push_back(g.gradient[i]);
      b.push_back(fd[i]);
    }
    CHECK(testing::relative_error(a, b) < 3e-3);
  }
  SUBCASE("precomputed image gradient agrees on an affine moving image") {
    MetricContext pre = ctx;
    pre.image_gradient = ImageGradient::Precomputed;
    const auto a = cnn_metric_gradient(net, ctx, stack, Stage::Similarity);
    const auto b = cnn_metric_gradient(net, pre, stack, Stage::Similarity);
    CHECK(testing::relative_error(b.gradient, a.gradient) < 1e-5);
  }
  SUBCASE("32-bit network agrees with the 64-bit one") {
    const auto g64 = cnn_metric_gradient(net, ctx, stack, Stage::Similarity);
    const auto g32 = cnn_metric_gradient(net.cast<float>(), ctx, stack, Stage::Similarity);
    CHECK((g32.gradient - g64.gradient).cwiseAbs().maxCoeff() < 1e-4 * g64.gradient.cwiseAbs().maxCoeff());
  }
  SUBCASE("constant moving image gives zero gradient") {
    // Larger than the mapped domain, so the zero padding never enters.
    const auto flat = MetricContext::make(ctx.fixed, Volume(affine_moving().geometry(), 0.5f));
    CHECK(cnn_metric_gradient(net, flat, stack, Stage::Similarity).gradient.isZero());
  }
  SUBCASE("sample order does not matter; subsets are rescaled") {
    MetricContext shuffled = ctx;
    std::mt19937_64 rng(114);
    std::shuffle(shuffled.sample_points.begin(), shuffled.sample_points.end(), rng);
    const auto a = cnn_metric_gradient(net, ctx, stack, Stage::Similarity);
    const auto b = cnn_metric_gradient(net, shuffled, stack, Stage::Similarity);
    CHECK((a.gradient - b.gradient).norm() <= 1e-6 * a.gradient.norm());
    MetricContext half = ctx;
    half.sample_points = draw_sample_points(ctx.fixed.geometry(), ctx.fixed.size() / 2, rng);
    const auto c = cnn_metric_gradient(net, half, stack, Stage::Similarity);
    CHECK(c.value == a.value);
    CHECK(c.gradient.dot(a.gradient) > 0.0);
  }
  SUBCASE("missing stage") {
    CHECK_THROWS_AS(cnn_metric_gradient(net, ctx, stack, Stage::BSpline), std::invalid_argument);
  }
}

TEST_CASE("draw_sample_points") {
  const Geometry g{{10, 8, 6}};
  std::mt19937_64 a(5), b(5);
  const auto p = draw_sample_points(g, 100, a), q = draw_sample_points(g, 100, b);
  CHECK(p == q);
  CHECK(p.size() == 100);
  CHECK(std::adjacent_find(p.begin(), p.end()) == p.end());
  CHECK(draw_sample_points(g, 10000, a).size() == g.count());
  MaskVolume m(g);
  m[7] = m[300] = 1;
  CHECK(draw_sample_points(g, 5, a, &m) == std::vector<std::size_t>{7, 300});
}

TEST_CASE("mi_value") {
  SUBCASE("image against itself gives -H(A), lower than against a shifted copy") {
    // Intensities on bin centres (up to 32-bit rounding) so partial-volume
    // binning puts almost no mass off the diagonal.
    const Volume a = smooth_volume(cube(24), 120, 1.5);
    Volume q = a;
    for (float& x : q.data()) x = static_cast<float>(std::round(x * 31.0) / 31.0);
    CHECK(mi_value(q, q, 32) == doctest::Approx(-pv_entropy(q, 32)).epsilon(1e-5));
    const double self = mi_value(a, a, 32);
    TransformStack shift;
    shift.similarity = SimilarityParams{};
    shift.similarity->translation = Vec3(2.0, 0.0, 0.0);
    CHECK(self < mi_value(a, resample(a, shift, a.geometry()), 32));
  }
  SUBCASE("independent uniform noise is near zero") {
    const Volume a = random_volume(cube(32), 121), b = random_volume(cube(32), 122);
    CHECK(std::abs(mi_value(a, b, 16)) < 0.05);
  }
  SUBCASE("constant fixed image gives zero") {
    CHECK(mi_value(Volume(Geometry{cube(8)}, 0.3f), random_volume(cube(8), 123), 16) == doctest::Approx(0.0).scale(1e-12));
  }
  SUBCASE("errors") {
    const Volume a = random_volume(cube(4), 124);
    CHECK_THROWS_AS(mi_value(a, a, 1), std::invalid_argument);
    const MaskVolume empty(a.geometry());
    CHECK_THROWS_AS(mi_value(a, a, 8, &empty), std::invalid_argument);
  }
}

TEST_CASE("mi_gradient") {
  const Volume fixed = smooth_volume(cube(24), 130, 1.5);
  const Volume moving = affine_moving();
  const auto ctx = MetricContext::make(fixed, moving);
  const int bins = 24;
  // Voxels whose mapped point stays inside the moving image.
  auto inside_mask = [&](const TransformStack& s, const MaskVolume* base) {
    MaskVolume m(fixed.geometry());
    for (std::size_t i = 0; i < m.size(); ++i) {
      const Vec3 u = moving.geometry().to_continuous_index(apply_stack(s, fixed.geometry().to_physical(i)));
      m[i] = (u.minCoeff() >= 0.0 && u.maxCoeff() <= 39.0 && (!base || (*base)[i])) ? 1 : 0;
    }
    return m;
  };
  SUBCASE("value over all voxels equals mi_value of the warped image") {
    const auto stack = offset_similarity(fixed.geometry());
    const auto in = inside_mask(stack, nullptr);
    CHECK(mi_gradient(ctx, stack, Stage::Similarity, bins).value ==
          doctest::Approx(mi_value(fixed, resample(moving, stack, fixed.geometry()), bins, &in)).epsilon(1e-6));
    TransformStack id;
    id.similarity = SimilarityParams{};
    CHECK(mi_gradient(ctx, id, Stage::Similarity, bins).value ==
          doctest::Approx(mi_value(fixed, resample(moving, id, fixed.geometry()), bins)).epsilon(1e-9));
  }
  SUBCASE("matches finite differences at an offset") {
    const auto stack = offset_similarity(fixed.geometry());
    const auto g = mi_gradient(ctx, stack, Stage::Similarity, bins);
    auto value = [&](const TransformStack& s) { return mi_gradient(ctx, s, Stage::Similarity, bins).value; };
    const auto fd = central_differences(value, stack, Stage::Similarity, 1e-3, {0, 1, 2, 3, 4, 5, 6});
    for (int i = 0; i < 7; ++i) CHECK(g.gradient[i] == doctest::Approx(fd[i]).epsilon(2e-2));
  }
  SUBCASE("gradient is smaller at alignment than at a 2 mm offset") {
    const auto self = MetricContext::make(fixed, fixed);
    TransformStack aligned;
    aligned.similarity = SimilarityParams{};
    aligned.similarity->center = fixed.geometry().center();
    TransformStack off = aligned;
    off.similarity->translation = Vec3(2.0, 0.0, 0.0);
    CHECK(mi_gradient(self, aligned, Stage::Similarity, bins).gradient.head<3>().norm() <
          mi_gradient(self, off, Stage::Similarity, bins).gradient.head<3>().norm());
  }
  SUBCASE("constant moving image gives zero gradient") {
    const auto flat = MetricContext::make(fixed, Volume(fixed.geometry(), 0.5f));
    CHECK(mi_gradient(flat, offset_similarity(fixed.geometry()), Stage::Similarity, bins).gradient.isZero());
  }
  SUBCASE("mask restricts the voxels") {
    MaskVolume mask = head_mask(fixed, 0.5);
    auto masked = MetricContext::make(fixed, moving, mask);
    const auto stack = offset_similarity(fixed.geometry());
    const auto in = inside_mask(stack, &mask);
    CHECK(mi_gradient(masked, stack, Stage::Similarity, bins).value ==
          doctest::Approx(mi_value(fixed, resample(moving, stack, fixed.geometry()), bins, &in)).epsilon(1e-6));
  }
}

TEST_CASE("head_mask") {
  const auto none = head_mask(Volume(Geometry{cube(3)}, 0.0f));
  CHECK(std::count(none.data().begin(), none.data().end(), 1) == 0);
  Volume two(Geometry{{2, 1, 1}});
  two.data() = {0.005f, 0.02f};
  CHECK(head_mask(two).data() == std::vector<std::uint8_t>{0, 1});
  const Volume r = random_volume(cube(9), 140);
  const auto m = head_mask(r, 0.3);
  std::size_t expect = 0;
  for (int k = 0; k < 9; ++k)
    for (int j = 0; j < 9; ++j)
      for (int i = 0; i < 9; ++i) expect += r(i, j, k) > 0.3f ? 1 : 0;
  CHECK(static_cast<std::size_t>(std::count(m.data().begin(), m.data().end(), 1)) == expect);
}

TEST_CASE("unary_potentials") {
  const Network net = init_network<float>(Architecture::reference(), 150);
  const Volume f = random_volume(cube(24), 151), m = random_volume(cube(24), 152);
  const TransformStack id;
  const Vec3 center(12.0, 11.0, 12.0);
  SUBCASE("zero displacement equals forward_patch on the co-located patches") {
    std::vector<float> patch;
    for (const Volume* v : {&f, &m})
      for (int z = 4; z < 21; ++z)
        for (int y = 3; y < 20; ++y)
          for (int x = 4; x < 21; ++x) patch.push_back((*v)(x, y, z));
    const auto u = unary_potentials(net, f, m, id, center, {Vec3::Zero()});
    REQUIRE(u.size() == 1);
    CHECK(u[0] == doctest::Approx(forward_patch<float>(net, patch)).epsilon(1e-6));
  }
  SUBCASE("duplicates agree, zero net gives zeros") {
    const auto u = unary_potentials(net, f, m, id, center, {Vec3(1, 0, 0), Vec3(0.5, -1, 2), Vec3(1, 0, 0)});
    CHECK(u[0] == u[2]);
    CHECK(u[0] != u[1]);
    Network zero = net;
    for (auto& l : zero.layers) std::fill(l.weights.begin(), l.weights.end(), 0.0f);
    for (double v : unary_potentials(zero, f, m, id, center, {Vec3::Zero(), Vec3(1, 1, 1)})) CHECK(v == 0.0);
  }
  SUBCASE("patch must fit") {
    CHECK_THROWS_AS(unary_potentials(net, f, m, id, Vec3(3.0, 12.0, 12.0), {Vec3::Zero()}), std::invalid_argument);
  }
}
