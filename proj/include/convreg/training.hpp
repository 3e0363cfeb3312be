#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "convreg/network.hpp"
#include "convreg/volume.hpp"

namespace convreg {

/// Two geometrically aligned volumes of different modalities (channel 0 = a).
struct AlignedPair {
  Volume a;
  Volume b;
};

/// Random patch geometry: rotation about each axis uniform in +-max_rotation,
/// isotropic scale uniform in [min_scale, max_scale], each allowed axis mirrored
/// with probability 1/2, centre uniform over placements that keep the patch inside.
struct AugmentConfig {
  double max_rotation = 0.3;
  double min_scale = 0.9;
  double max_scale = 1.1;
  std::array<bool, 3> mirror{true, true, true};

  void validate() const;
  static AugmentConfig none() { return {0.0, 1.0, 1.0, {false, false, false}}; }
};

struct TrainingSample {
  std::vector<float> patch_pair;  // 2 * p^3, channel-major, x fastest
  int label = 1;                  // -1 aligned, +1 misaligned
};

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 128;
  int iterations = 2000;
  std::uint64_t seed = 1;
  int log_every = 100;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const AugmentConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
AugmentConfig augment_config_from_json(const nlohmann::json& j, AugmentConfig base = {});

/// Draws one sample: pair j uniform, label -1 with probability 1/2, a random
/// patch transform for channel a, and for channel b the same transform
/// (aligned) or an independent one (misaligned). Patches are trilinearly resampled.
/// Throws DataError when a volume cannot host a p^3 patch at the largest scale.
TrainingSample sample_pair(const std::vector<AlignedPair>& dataset, const AugmentConfig& augment, int patch_size,
                           std::mt19937_64& rng);

struct HingeResult {
  double loss = 0.0;             // sum over the batch
  std::vector<double> gradient;  // d loss / d score, per element
};

/// L = sum max(0, 1 - y n); dL/dn = -y where the margin is violated, else 0.
HingeResult hinge_loss(std::span<const double> scores, std::span<const int> labels);

struct TrainPoint {
  int step = 0;
  double loss = 0.0;      // mean hinge loss per sample of this batch
  double accuracy = 0.0;  // fraction classified correctly by the sign of the score
};

struct TrainResult {
  Network net;
  std::vector<TrainPoint> curve;  // one point per iteration
};

using BatchSource = std::function<std::vector<TrainingSample>(int batch_size, std::mt19937_64& rng)>;

/// Momentum SGD on the hinge loss averaged over each batch. Fully
/// deterministic given config.seed.
TrainResult train(Network net, const TrainConfig& config, const BatchSource& batches,
                  const std::function<void(const TrainPoint&)>& on_log = {});

/// Online training on freshly drawn samples from `dataset`.
TrainResult train(Network net, const std::vector<AlignedPair>& dataset, const TrainConfig& config,
                  const AugmentConfig& augment, const std::function<void(const TrainPoint&)>& on_log = {});

/// Network scores of a list of samples, evaluated in batches.
std::vector<double> score_samples(const Network& net, const std::vector<TrainingSample>& samples);

/// Fraction with score < 0 for aligned and > 0 for misaligned samples; a score
/// of exactly 0 counts as an error. Throws std::invalid_argument on an empty list.
double evaluate_classifier(const Network& net, const std::vector<TrainingSample>& samples);

/// Classification rule shared by training curves and evaluation.
inline bool classified_correctly(double score, int label) { return label < 0 ? score < 0.0 : score > 0.0; }

}  // namespace convreg
