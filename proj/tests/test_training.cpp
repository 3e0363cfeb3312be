#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "convreg/evaldata.hpp"
#include "convreg/training.hpp"
#include "test_util.hpp"

using namespace convreg;

namespace {

std::vector<AlignedPair> phantom_dataset(int k, int n = 32) {
  std::vector<AlignedPair> out;
  for (int i = 0; i < k; ++i) {
    PhantomConfig c;
    c.dims = cube(n);
    c.seed = 100 + static_cast<std::uint64_t>(i);
    Phantom ph = generate_phantom(c);
    out.push_back({std::move(ph.modality_a), std::move(ph.modality_b)});
  }
  return out;
}

double hinge_of(const Network& net, const TrainingSample& s) {
  const double n = forward_patch<float>(net, s.patch_pair);
  return std::max(0.0, 1.0 - s.label * n);
}

Network scalar_net(float w0, float w1, float b) {
  ConvLayer<float> l(2, 1, 1, 1, false);
  l.weights = {w0, w1};
  l.bias = {b};
  return Network({l});
}

}  // namespace

TEST_CASE("hinge_loss examples") {
  auto one = [](double n, int y) {
    const std::vector<double> s{n};
    const std::vector<int> l{y};
    return hinge_loss(s, l);
  };
  {
    const auto r = one(2.0, 1);
    CHECK(r.loss == 0.0);
    CHECK(r.gradient[0] == 0.0);
  }
  {
    const auto r = one(0.0, 1);
    CHECK(r.loss == 1.0);
    CHECK(r.gradient[0] == -1.0);
  }
  {
    const auto r = one(-2.0, -1);
    CHECK(r.loss == 0.0);
    CHECK(r.gradient[0] == 0.0);
  }
  {
    const auto r = one(0.5, -1);
    CHECK(r.loss == 1.5);
    CHECK(r.gradient[0] == 1.0);
  }
  const std::vector<double> scores{2.0, 0.0, -2.0, 0.5};
  const std::vector<int> labels{1, 1, -1, -1};
  const auto r = hinge_loss(scores, labels);
  CHECK(r.loss == 2.5);
  CHECK(r.gradient == std::vector<double>{0.0, -1.0, 0.0, 1.0});

  const std::vector<int> bad{1, 0, 1, 1};
  CHECK_THROWS_AS(hinge_loss(scores, bad), std::invalid_argument);
  const std::vector<int> short_labels{1};
  CHECK_THROWS_AS(hinge_loss(scores, short_labels), std::invalid_argument);
}

TEST_CASE("sample_pair") {
  const auto data = phantom_dataset(2);
  const AugmentConfig aug;

  SUBCASE("label frequency within 3 sigma of one half") {
    std::mt19937_64 rng(5);
    const int n = 10000;
    int positives = 0;
    long sum = 0;
    for (int i = 0; i < n; ++i) {
      const TrainingSample s = sample_pair(data, aug, 9, rng);
      positives += s.label < 0;
      sum += s.label;
    }
    CHECK(std::abs(positives - n / 2) <= 3.0 * std::sqrt(n * 0.25));
    CHECK(std::abs(static_cast<double>(sum) / n) < 0.05);
  }
  SUBCASE("fixed seed gives the same stream") {
    std::mt19937_64 r1(9), r2(9);
    for (int i = 0; i < 20; ++i) {
      const auto a = sample_pair(data, aug, 17, r1), b = sample_pair(data, aug, 17, r2);
      CHECK(a.label == b.label);
      CHECK(a.patch_pair == b.patch_pair);
    }
  }
  SUBCASE("too small volume is a data error") {
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(sample_pair(data, aug, 33, rng), DataError);
    CHECK_THROWS_AS(sample_pair({}, aug, 9, rng), std::invalid_argument);
  }
}

TEST_CASE("sample_pair: identity augmentation extracts co-located voxel patches") {
  // Channel b is a known intensity bijection of channel a, so an aligned patch
  // pair must satisfy it voxel by voxel.
  PhantomConfig c;
  c.dims = cube(24);
  c.noise_sigma = 0.0;
  c.bias_amplitude = 0.0;
  const Phantom ph = generate_phantom(c);
  Volume b = ph.modality_a;
  for (auto& v : b.data()) v = 1.0f - v;
  const std::vector<AlignedPair> data{{ph.modality_a, b}};
  std::mt19937_64 rng(3);
  int positives = 0;
  const int p = 9;
  const std::size_t n = p * p * p;
  for (int i = 0; i < 200; ++i) {
    const auto s = sample_pair(data, AugmentConfig::none(), p, rng);
    if (s.label > 0) continue;
    ++positives;
    double worst = 0.0;
    for (std::size_t q = 0; q < n; ++q)
      worst = std::max(worst, std::abs(static_cast<double>(s.patch_pair[n + q]) - (1.0 - s.patch_pair[q])));
    CHECK(worst < 1e-6);
  }
  CHECK(positives > 50);
}

TEST_CASE("train: zero iterations leaves the net unchanged") {
  const auto data = phantom_dataset(1);
  Architecture arch = Architecture::reference();
  const Network net = init_network<float>(arch, 4);
  TrainConfig cfg;
  cfg.iterations = 0;
  const TrainResult r = train(net, data, cfg, AugmentConfig{});
  REQUIRE(r.net.layers.size() == net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    CHECK(r.net.layers[l].weights == net.layers[l].weights);
    CHECK(r.net.layers[l].bias == net.layers[l].bias);
  }
  CHECK(r.curve.empty());
}

TEST_CASE("train: linearly separable scalar task reaches zero loss within 200 iterations") {
  // Scalar pairs (a, b) with b - a < -0.2 when aligned and > 0.2 when misaligned.
  BatchSource source = [](int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TrainingSample> out(static_cast<std::size_t>(n));
    for (auto& s : out) {
      s.label = u(rng) < 0.5 ? -1 : 1;
      const double a = u(rng);
      const double b = s.label < 0 ? a - 0.2 - 0.3 * u(rng) : a + 0.2 + 0.3 * u(rng);
      s.patch_pair = {static_cast<float>(a), static_cast<float>(b)};
    }
    return out;
  };
  TrainConfig cfg;
  cfg.iterations = 200;
  cfg.batch_size = 64;
  cfg.learning_rate = 0.5;
  cfg.momentum = 0.9;
  const TrainResult r = train(scalar_net(0.0f, 0.0f, 0.0f), cfg, source);
  REQUIRE(r.curve.size() == 200);
  CHECK(r.curve.front().loss > 0.5);
  CHECK(r.curve.back().loss == 0.0);
  CHECK(r.curve.back().accuracy == 1.0);
}

TEST_CASE("train: one step on a single sample decreases its loss") {
  const auto data = phantom_dataset(1, 24);
  int decreased = 0, active = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Network net = testing::small_network<float>(seed);
    std::mt19937_64 rng(seed);
    TrainingSample s = sample_pair(data, AugmentConfig{}, net.patch_size(), rng);
    // Pick the label the net currently gets wrong so the margin is violated.
    const double n = forward_patch<float>(net, s.patch_pair);
    s.label = n >= 0.0 ? -1 : 1;
    const double before = hinge_of(net, s);
    REQUIRE(before > 0.0);
    ++active;
    TrainConfig cfg;
    cfg.iterations = 1;
    cfg.batch_size = 1;
    cfg.learning_rate = 1e-4;
    cfg.momentum = 0.0;
    const TrainResult r = train(net, cfg, [&](int, std::mt19937_64&) { return std::vector<TrainingSample>{s}; });
    decreased += hinge_of(r.net, s) < before;
  }
  CHECK(active == 20);
  CHECK(decreased == 20);
}

TEST_CASE("train: bit-reproducible given the seed") {
  const auto data = phantom_dataset(1, 24);
  Architecture arch;
  arch.layers = {{4, 3, 2, true}, {6, 2, 1, true}, {3, 2, 1, true}, {1, 1, 1, false}};
  TrainConfig cfg;
  cfg.iterations = 5;
  cfg.batch_size = 16;
  cfg.seed = 77;
  const Network net = init_network<float>(arch, 2);
  const TrainResult a = train(net, data, cfg, AugmentConfig{});
  const TrainResult b = train(net, data, cfg, AugmentConfig{});
  for (std::size_t l = 0; l < a.net.layers.size(); ++l) {
    CHECK(a.net.layers[l].weights == b.net.layers[l].weights);
    CHECK(a.net.layers[l].bias == b.net.layers[l].bias);
  }
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
  cfg.seed = 78;
  const TrainResult c = train(net, data, cfg, AugmentConfig{});
  CHECK(c.net.layers[0].weights != a.net.layers[0].weights);
}

TEST_CASE("evaluate_classifier") {
  std::vector<TrainingSample> samples(10000);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].label = i % 2 == 0 ? -1 : 1;
    // Channel 0 carries the sign the perfect scorer reads; channel 1 is a coin flip.
    samples[i].patch_pair = {samples[i].label > 0 ? 1.0f : -1.0f, u(rng) < 0.5 ? 1.0f : -1.0f};
  }
  CHECK(evaluate_classifier(scalar_net(0.0f, 0.0f, 0.0f), samples) == 0.0);
  CHECK(evaluate_classifier(scalar_net(1.0f, 0.0f, 0.0f), samples) == 1.0);
  const double acc = evaluate_classifier(scalar_net(0.0f, 1.0f, 0.0f), samples);
  CHECK(std::abs(acc - 0.5) <= 3.0 * std::sqrt(0.25 / 10000.0));
  CHECK_THROWS_AS(evaluate_classifier(scalar_net(1.0f, 0.0f, 0.0f), {}), std::invalid_argument);
}

TEST_CASE("training config json") {
  TrainConfig c;
  c.iterations = 17;
  c.seed = 4;
  const TrainConfig r = train_config_from_json(to_json(c));
  CHECK(r.iterations == 17);
  CHECK(r.seed == 4);
  CHECK(r.learning_rate == 0.01);
  CHECK(r.momentum == 0.9);
  CHECK(r.batch_size == 128);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"batch_size", 0}}), DataError);
  const AugmentConfig a = augment_config_from_json(to_json(AugmentConfig::none()));
  CHECK(a.max_rotation == 0.0);
  CHECK_THROWS_AS(augment_config_from_json(nlohmann::json{{"min_scale", -1.0}}), DataError);
}
