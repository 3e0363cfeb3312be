#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "convreg/volume.hpp"
#include "convreg/volume_io.hpp"
#include "test_util.hpp"

using namespace convreg;
using convreg::testing::random_volume;

TEST_CASE("volume construction enforces invariants") {
  Geometry g{{2, 3, 4}};
  CHECK_THROWS_AS(Volume(g, std::vector<float>(23)), std::invalid_argument);
  g.spacing = Vec3(1.0, 0.0, 1.0);
  CHECK_THROWS_AS(Volume{g}, std::invalid_argument);
  CHECK_THROWS_AS(Volume(Geometry{{0, 1, 1}}), std::invalid_argument);
}

TEST_CASE("trilinear_sample reproduces nodes, interpolates, zero-pads") {
  const Volume v = random_volume({4, 5, 6}, 1, Vec3(0.3, 1.1, 2.0), Vec3(0.1, -4.0, 7.5));
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 5; ++j)
      for (int i = 0; i < 4; ++i)
        CHECK(trilinear_sample(v, v.geometry().to_physical(i, j, k)) == static_cast<double>(v(i, j, k)));

  Volume line(Geometry{{2, 1, 1}, Vec3(2.0, 1.0, 1.0)});
  line(0, 0, 0) = 0.2f;
  line(1, 0, 0) = 0.6f;
  CHECK(trilinear_sample(line, Vec3(1.0, 0.0, 0.0)) == doctest::Approx(0.4).epsilon(1e-7));

  CHECK(trilinear_sample(v, Vec3(-10.0, 0.0, 7.5)) == 0.0);
  CHECK(trilinear_sample(v, v.geometry().last_point() + Vec3(10.0, 0.0, 0.0)) == 0.0);
}

TEST_CASE("trilinear_sample is linear in intensities") {
  const Volume a = random_volume({7, 6, 5}, 2), b = random_volume({7, 6, 5}, 3);
  Volume mix(a.geometry());
  const double ca = 0.7, cb = -1.3;
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = static_cast<float>(ca * a[i] + cb * b[i]);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 7.0);
  for (int n = 0; n < 100; ++n) {
    const Vec3 p(u(rng), u(rng), u(rng));
    CHECK(trilinear_sample(mix, p) ==
          doctest::Approx(ca * trilinear_sample(a, p) + cb * trilinear_sample(b, p)).epsilon(1e-6));
  }
}

TEST_CASE("trilinear_gradient is the derivative of trilinear_sample") {
  const Volume v = testing::random_volume({7, 6, 5}, 21, Vec3(1.0, 0.5, 2.0), Vec3(-1.0, 3.0, 0.5));
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-1.5, 8.0);
  const double h = 1e-6;
  for (int n = 0; n < 200; ++n) {
    // Includes points in the zero-padded shell around the grid.
    const Vec3 c(u(rng), u(rng) * 0.8, u(rng) * 0.7);
    const Vec3 p = v.geometry().origin + c.cwiseProduct(v.geometry().spacing);
    const Vec3 g = trilinear_gradient(v, p);
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = h;
      const double fd = (trilinear_sample(v, p + e) - trilinear_sample(v, p - e)) / (2 * h);
      CHECK(g[a] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
    }
  }
  CHECK(trilinear_gradient(v, Vec3(100.0, 0.0, 0.0)).isZero());

  // Affine intensities: the gradient is the slope everywhere inside.
  Volume lin(Geometry{cube(6), Vec3(2.0, 1.0, 0.5)});
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 6; ++j)
      for (int i = 0; i < 6; ++i) lin(i, j, k) = static_cast<float>(0.5 * i - 0.25 * j + 0.125 * k);
  const Vec3 g = trilinear_gradient(lin, Vec3(4.3, 2.2, 1.1));
  CHECK(g.x() == doctest::Approx(0.25));
  CHECK(g.y() == doctest::Approx(-0.25));
  CHECK(g.z() == doctest::Approx(0.25));
}

TEST_CASE("spatial_gradient") {
  SUBCASE("constant volume has zero gradient") {
    const Volume c(Geometry{{4, 4, 4}}, 0.37f);
    const auto grad = spatial_gradient(c);
    for (const auto& g : grad.data())
      for (float x : g) CHECK(x == 0.0f);
  }
  SUBCASE("affine field gives exact constant interior gradient") {
    Geometry geo{{6, 5, 4}, Vec3(0.5, 2.0, 1.5), Vec3(3.0, 1.0, -2.0)};
    Volume ramp(geo), affine(geo);
    for (int k = 0; k < 4; ++k)
      for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 6; ++i) {
          const Vec3 p = geo.to_physical(i, j, k) - geo.origin;
          ramp(i, j, k) = static_cast<float>(p.x());
          affine(i, j, k) = static_cast<float>(0.25 * p.x() - 0.5 * p.y() + 0.125 * p.z());
        }
    const auto gr = spatial_gradient(ramp), ga = spatial_gradient(affine);
    for (int k = 1; k < 3; ++k)
      for (int j = 1; j < 4; ++j)
        for (int i = 1; i < 5; ++i) {
          CHECK(gr(i, j, k)[0] == doctest::Approx(1.0).epsilon(1e-6));
          CHECK(gr(i, j, k)[1] == 0.0f);
          CHECK(gr(i, j, k)[2] == 0.0f);
          CHECK(ga(i, j, k)[0] == ga(1, 1, 1)[0]);
          CHECK(ga(i, j, k)[1] == ga(1, 1, 1)[1]);
          CHECK(ga(i, j, k)[2] == ga(1, 1, 1)[2]);
        }
  }
  SUBCASE("random volume matches nested-loop finite differences") {
    const Volume v = random_volume({5, 5, 5}, 9, Vec3(1.0, 0.5, 2.0));
    const auto g = spatial_gradient(v);
    const double sp[3] = {1.0, 0.5, 2.0};
    for (int k = 0; k < 5; ++k)
      for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 5; ++i)
          for (int a = 0; a < 3; ++a) {
            int idx[3] = {i, j, k};
            int lo[3] = {i, j, k}, hi[3] = {i, j, k};
            lo[a] = std::max(0, idx[a] - 1);
            hi[a] = std::min(4, idx[a] + 1);
            const double expect = (v(hi[0], hi[1], hi[2]) - static_cast<double>(v(lo[0], lo[1], lo[2]))) /
                                  ((hi[a] - lo[a]) * sp[a]);
            CHECK(g(i, j, k)[a] == doctest::Approx(expect).epsilon(1e-6));
          }
  }
  SUBCASE("needs two voxels per axis") {
    CHECK_THROWS_AS(spatial_gradient(Volume(Geometry{{1, 4, 4}})), std::invalid_argument);
  }
}

TEST_CASE("downsample") {
  SUBCASE("factor 1 only smooths with sigma 0.5") {
    const Volume v = random_volume({6, 6, 6}, 5);
    const Volume d = downsample(v, 1), s = gaussian_smooth(v, 0.5);
    CHECK(d.dims() == v.dims());
    CHECK(d.data() == s.data());
  }
  SUBCASE("constant volume stays constant with half dims rounded up") {
    const Volume c(Geometry{{9, 8, 7}, Vec3(1.0, 2.0, 3.0)}, 0.6f);
    const Volume d = downsample(c, 2);
    CHECK(d.dims() == Dims3{5, 4, 4});
    CHECK(d.geometry().spacing.isApprox(Vec3(2.0, 4.0, 6.0)));
    for (float x : d.data()) CHECK(x == doctest::Approx(0.6).epsilon(1e-6));
  }
  SUBCASE("impulse matches direct Gaussian convolution oracle") {
    Volume imp(Geometry{{16, 16, 16}});
    imp(8, 8, 8) = 1.0f;
    const Volume d = downsample(imp, 2);
    const double sigma = 1.0;
    const int r = 3;
    double norm = 0.0;
    for (int t = -r; t <= r; ++t) norm += std::exp(-0.5 * t * t / (sigma * sigma));
    auto w = [&](int t) { return std::abs(t) > r ? 0.0 : std::exp(-0.5 * t * t / (sigma * sigma)) / norm; };
    for (int k = 0; k < 8; ++k)
      for (int j = 0; j < 8; ++j)
        for (int i = 0; i < 8; ++i)
          CHECK(d(i, j, k) == doctest::Approx(w(2 * i - 8) * w(2 * j - 8) * w(2 * k - 8)).epsilon(1e-5).scale(1e-6));
    const Volume s = gaussian_smooth(imp, sigma);
    CHECK(std::accumulate(s.data().begin(), s.data().end(), 0.0) == doctest::Approx(1.0).epsilon(1e-3));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(downsample(Volume(Geometry{{4, 4, 4}}), 0), std::invalid_argument);
    CHECK_THROWS_AS(downsample(Volume(Geometry{{4, 4, 4}}), 5), std::invalid_argument);
  }
}

TEST_CASE("normalize_intensity") {
  Volume v(Geometry{{3, 1, 1}});
  v.data() = {2.0f, 4.0f, 6.0f};
  const Volume n = normalize_intensity(v);
  CHECK(n[0] == 0.0f);
  CHECK(n[1] == doctest::Approx(0.5));
  CHECK(n[2] == 1.0f);

  Volume unit = random_volume({5, 5, 5}, 11);
  unit[0] = 0.0f;
  unit[1] = 1.0f;
  const Volume u2 = normalize_intensity(unit);
  for (std::size_t i = 0; i < unit.size(); ++i) CHECK(u2[i] == doctest::Approx(unit[i]).epsilon(1e-7).scale(1));

  Volume r = random_volume({6, 5, 4}, 12);
  for (auto& x : r.data()) x = x * 40.0f - 7.0f;
  const Volume rn = normalize_intensity(r);
  CHECK(*std::min_element(rn.data().begin(), rn.data().end()) == 0.0f);
  CHECK(*std::max_element(rn.data().begin(), rn.data().end()) == 1.0f);
  std::vector<std::size_t> order(r.size()), order_n(r.size());
  std::iota(order.begin(), order.end(), 0);
  order_n = order;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return r[a] < r[b]; });
  std::stable_sort(order_n.begin(), order_n.end(), [&](auto a, auto b) { return rn[a] < rn[b]; });
  CHECK(order == order_n);

  CHECK_THROWS_AS(normalize_intensity(Volume(Geometry{{3, 3, 3}}, 1.0f)), std::invalid_argument);
}

TEST_CASE(".vol files round-trip and reject malformed headers") {
  const auto dir = std::filesystem::temp_directory_path() / "convreg_test_volume_io";
  std::filesystem::create_directories(dir);
  const Volume v = random_volume({4, 3, 2}, 13, Vec3(0.5, 1.0, 2.0), Vec3(1.0, 2.0, 3.0));
  write_volume(dir / "a.vol", v);
  const Volume back = read_volume(dir / "a.vol");
  CHECK(back.geometry() == v.geometry());
  CHECK(back.data() == v.data());
  CHECK(std::filesystem::file_size(dir / "a.raw") == 4u * 24u);

  LabelVolume labels(v.geometry());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint16_t>(i % 5);
  write_volume(dir / "a.labels.vol", labels);
  CHECK(read_label_volume(dir / "a.labels.vol").data() == labels.data());
  CHECK_THROWS_AS(read_volume(dir / "a.labels.vol"), DataError);

  std::ofstream(dir / "bad.vol") << "{\"dims\": [1,2]}";
  CHECK_THROWS_AS(read_volume(dir / "bad.vol"), DataError);
  CHECK_THROWS_AS(read_volume(dir / "missing.vol"), DataError);
  std::filesystem::remove_all(dir);
}
