#include "convreg/training.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "convreg/transform.hpp"

namespace convreg {

void AugmentConfig::validate() const {
  if (!(max_rotation >= 0.0)) throw std::invalid_argument("rotation range must be non-negative");
  if (!(min_scale > 0.0 && min_scale <= max_scale)) throw std::invalid_argument("scale range must satisfy 0 < min <= max");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (iterations < 0) throw std::invalid_argument("iteration count must be non-negative");
  if (log_every < 1) throw std::invalid_argument("log interval must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"batch_size", c.batch_size},
          {"iterations", c.iterations},       {"seed", c.seed},         {"log_every", c.log_every}};
}

nlohmann::json to_json(const AugmentConfig& c) {
  return {{"max_rotation", c.max_rotation},
          {"min_scale", c.min_scale},
          {"max_scale", c.max_scale},
          {"mirror", {c.mirror[0], c.mirror[1], c.mirror[2]}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad training config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("bad training config: ") + e.what());
  }
  return c;
}

AugmentConfig augment_config_from_json(const nlohmann::json& j, AugmentConfig c) {
  try {
    c.max_rotation = j.value("max_rotation", c.max_rotation);
    c.min_scale = j.value("min_scale", c.min_scale);
    c.max_scale = j.value("max_scale", c.max_scale);
    if (j.contains("mirror")) {
      const auto m = j.at("mirror").get<std::vector<bool>>();
      if (m.size() != 3) throw DataError("mirror needs 3 entries");
      c.mirror = {m[0], m[1], m[2]};
    }
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad augmentation config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("bad augmentation config: ") + e.what());
  }
  return c;
}

namespace {

constexpr int kPlacementAttempts = 64;

/// Linear part A (rotation * scale * mirror) and centre of one patch placement.
struct Placement {
  Mat3 linear = Mat3::Identity();
  Vec3 center = Vec3::Zero();
};

Placement draw_placement(const Geometry& g, const AugmentConfig& aug, int p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Vec3 half = 0.5 * (p - 1) * g.spacing;
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    SimilarityParams sp;
    sp.rotation = aug.max_rotation * Vec3(2 * unit(rng) - 1, 2 * unit(rng) - 1, 2 * unit(rng) - 1);
    const double scale = aug.min_scale + (aug.max_scale - aug.min_scale) * unit(rng);
    Vec3 mirror = Vec3::Ones();
    for (int a = 0; a < 3; ++a)
      if (aug.mirror[a] && unit(rng) < 0.5) mirror[a] = -1.0;
    Placement pl;
    pl.linear = sp.rotation_matrix() * scale * mirror.asDiagonal();
    // Half extent of the transformed patch's bounding box.
    const Vec3 reach = pl.linear.cwiseAbs() * half;
    const Vec3 lo = g.origin + reach, hi = g.last_point() - reach;
    if ((hi - lo).minCoeff() < 0.0) continue;
    for (int a = 0; a < 3; ++a) pl.center[a] = lo[a] + (hi[a] - lo[a]) * unit(rng);
    return pl;
  }
  throw DataError("volume too small for the patch plus its rotation margin");
}

void extract(const Volume& v, const Placement& pl, int p, float* out) {
  const Vec3 c0 = 0.5 * (p - 1) * Vec3::Ones();
  std::size_t n = 0;
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x, ++n) {
        const Vec3 offset = (Vec3(x, y, z) - c0).cwiseProduct(v.geometry().spacing);
        out[n] = static_cast<float>(trilinear_sample(v, pl.center + pl.linear * offset));
      }
}

}  // namespace

TrainingSample sample_pair(const std::vector<AlignedPair>& dataset, const AugmentConfig& aug, int p,
                           std::mt19937_64& rng) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  aug.validate();
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  const AlignedPair& pair = dataset[pick(rng)];
  if (!(pair.a.geometry() == pair.b.geometry())) throw DataError("training pair volumes differ in geometry");
  const Geometry& g = pair.a.geometry();
  for (int a = 0; a < 3; ++a)
    if (aug.max_scale * (p - 1) > g.dims[a] - 1) throw DataError("volume too small for the patch at the largest scale");

  TrainingSample s;
  s.label = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? -1 : 1;
  const Placement pa = draw_placement(g, aug, p, rng);
  const Placement pb = s.label < 0 ? pa : draw_placement(g, aug, p, rng);
  const std::size_t n = static_cast<std::size_t>(p) * p * p;
  s.patch_pair.resize(2 * n);
  extract(pair.a, pa, p, s.patch_pair.data());
  extract(pair.b, pb, p, s.patch_pair.data() + n);
  return s;
}

HingeResult hinge_loss(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  HingeResult r;
  r.gradient.resize(scores.size(), 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int y = labels[i];
    if (y != 1 && y != -1) throw std::invalid_argument("labels must be -1 or +1");
    const double margin = 1.0 - y * scores[i];
    if (margin > 0.0) {
      r.loss += margin;
      r.gradient[i] = -y;
    }
  }
  return r;
}

namespace {

Tensor<float> stack_batch(const std::vector<TrainingSample>& samples, std::size_t begin, std::size_t end, int p) {
  const std::size_t n = 2 * static_cast<std::size_t>(p) * p * p;
  Tensor<float> t(static_cast<int>(end - begin), 2, cube(p));
  for (std::size_t i = begin; i < end; ++i) {
    if (samples[i].patch_pair.size() != n) throw std::invalid_argument("sample patch size does not match the network");
    std::copy(samples[i].patch_pair.begin(), samples[i].patch_pair.end(), t.sample(static_cast<int>(i - begin)));
  }
  return t;
}

}  // namespace

TrainResult train(Network net, const TrainConfig& config, const BatchSource& batches,
                  const std::function<void(const TrainPoint&)>& on_log) {
  config.validate();
  net.validate();
  std::mt19937_64 rng(derive_seed(config.seed, "training-samples"));
  SgdState<float> state;
  TrainResult out;
  const int p = net.patch_size();
  for (int step = 1; step <= config.iterations; ++step) {
    const auto samples = batches(config.batch_size, rng);
    const auto pass = forward(net, stack_batch(samples, 0, samples.size(), p));
    std::vector<double> scores(samples.size());
    std::vector<int> labels(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      scores[i] = pass.output().data[i];
      labels[i] = samples[i].label;
    }
    const HingeResult h = hinge_loss(scores, labels);
    // Averaged over the batch so the learning rate does not depend on its size.
    Tensor<float> grad_out(static_cast<int>(samples.size()), 1, pass.output().dims);
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) grad_out.data[i] = static_cast<float>(h.gradient[i] * inv);
    const auto grads = backward(net, pass, grad_out, kParameterGradient);
    sgd_step(net, grads, config.learning_rate, config.momentum, state);

    TrainPoint pt;
    pt.step = step;
    pt.loss = h.loss * inv;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) correct += classified_correctly(scores[i], labels[i]) ? 1 : 0;
    pt.accuracy = static_cast<double>(correct) * inv;
    out.curve.push_back(pt);
    if (on_log && (step % config.log_every == 0 || step == config.iterations)) on_log(pt);
  }
  out.net = std::move(net);
  return out;
}

TrainResult train(Network net, const std::vector<AlignedPair>& dataset, const TrainConfig& config,
                  const AugmentConfig& augment, const std::function<void(const TrainPoint&)>& on_log) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  augment.validate();
  const int p = net.patch_size();
  BatchSource source = [&](int n, std::mt19937_64& rng) {
    std::vector<TrainingSample> batch;
    batch.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) batch.push_back(sample_pair(dataset, augment, p, rng));
    return batch;
  };
  return train(std::move(net), config, source, on_log);
}

std::vector<double> score_samples(const Network& net, const std::vector<TrainingSample>& samples) {
  constexpr std::size_t kChunk = 256;
  std::vector<double> scores;
  scores.reserve(samples.size());
  for (std::size_t b = 0; b < samples.size(); b += kChunk) {
    const std::size_t e = std::min(samples.size(), b + kChunk);
    const auto pass = forward(net, stack_batch(samples, b, e, net.patch_size()));
    for (float v : pass.output().data) scores.push_back(v);
  }
  return scores;
}

double evaluate_classifier(const Network& net, const std::vector<TrainingSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("cannot evaluate on an empty sample list");
  const auto scores = score_samples(net, samples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) correct += classified_correctly(scores[i], samples[i].label) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace convreg
