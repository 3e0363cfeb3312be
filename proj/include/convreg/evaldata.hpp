#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "convreg/metric.hpp"
#include "convreg/transform.hpp"
#include "convreg/volume.hpp"

namespace convreg {

/// Synthetic two-modality head phantom. Label 0 is background, label 1 the
/// head ellipsoid, labels 2..classes-1 random ellipsoidal blobs inside it.
struct PhantomConfig {
  Dims3 dims = cube(48);
  Vec3 spacing = Vec3::Ones();
  int classes = 5;
  int blobs_per_class = 3;
  double noise_sigma = 0.02;
  double bias_amplitude = 0.1;
  /// Gaussian blur in voxels applied to both modalities before bias and noise (0 = sharp).
  double blur_sigma = 0.0;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

nlohmann::json to_json(const PhantomConfig& c);
/// Missing keys keep their defaults; malformed values raise DataError.
PhantomConfig phantom_config_from_json(const nlohmann::json& j, PhantomConfig base = {});

struct Phantom {
  Volume modality_a;
  Volume modality_b;
  LabelVolume labels;
};

/// Intensity of class c (>= 1) in modality A: increasing from 0.25 to 1.
double modality_a_level(int c, int classes);
/// Modality B reuses the A levels under a cyclic shift by half the class count,
/// which is non-monotonic for classes >= 4.
double modality_b_level(int c, int classes);

Phantom generate_phantom(const PhantomConfig& config);

enum class WarpKind { Similarity, BSpline };

/// Similarity: translations within +-magnitude mm, rotations within
/// +-min(0.2, magnitude / R) rad and log-scale within +-min(ln 1.05, magnitude / R),
/// R being half the domain diagonal. B-spline: 8^3 control grid covering the
/// domain, displacements uniform in +-magnitude mm. Throws std::invalid_argument
/// when fewer than 90% of the foreground voxels stay inside the domain.
TransformStack random_ground_truth_warp(const LabelVolume& labels, WarpKind kind, double magnitude,
                                        std::uint64_t seed);

struct LabelOverlap {
  std::uint16_t label = 0;
  double dice = 0.0;
  double jaccard = 0.0;
};

struct OverlapScores {
  std::vector<LabelOverlap> per_label;  // ascending label, background excluded
  double mean_dice = 0.0;
  double mean_jaccard = 0.0;
};

/// Per-label Dice and Jaccard; labels absent from both volumes are skipped.
OverlapScores dice_jaccard(const LabelVolume& a, const LabelVolume& b);
nlohmann::json to_json(const OverlapScores& s);

/// Nearest-neighbour resampling: out(x) = labels(round(T(x))), 0 outside.
LabelVolume warp_labels(const LabelVolume& labels, const TransformStack& stack, const Geometry& fixed_geometry);

/// Mean |T(x) - x| over all voxels of `g`.
double mean_displacement(const TransformStack& stack, const Geometry& g);

struct SweepRow {
  double offset = 0.0;
  double value = 0.0;
  double derivative = 0.0;
};

/// Resets every stage of `stack` to identity, sets parameter `index` of
/// `stage` to each offset in turn and records the metric value and the
/// analytic derivative along that parameter.
std::vector<SweepRow> perturbation_sweep(MetricKind kind, const Network* net, const MetricContext& ctx,
                                         const TransformStack& stack, Stage stage, int index,
                                         const std::vector<double>& offsets, int bins = kDefaultMiBins);

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

}  // namespace convreg
