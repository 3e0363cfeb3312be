#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "convreg/metric.hpp"
#include "convreg/network.hpp"
#include "convreg/transform.hpp"

namespace convreg {

struct DescentConfig {
  int iterations = 500;
  double initial_step = 1.0;
  double min_step = 0.01;
  double relaxation = 0.5;

  void validate() const;
};

struct DescentResult {
  Eigen::VectorXd theta;  // best seen
  double value = 0.0;     // objective at theta (NaN when never evaluated)
  std::vector<double> trace;
  int evaluations = 0;
  std::string stop_reason;
};

using Objective = std::function<MetricValueAndGradient(const Eigen::VectorXd&)>;

/// theta <- theta - step * g / |g|; step *= relaxation whenever successive
/// gradients point against each other. Stops at the iteration cap, when the
/// step falls below min_step, or on a zero gradient. Returns the best point seen.
DescentResult regular_step_descent(const Objective& f, const Eigen::VectorXd& theta0, const DescentConfig& config);

struct PipelineConfig {
  MetricKind metric = MetricKind::Cnn;
  int scales = 2;
  int iterations = 500;             // per scale
  Dims3 control_points = cube(10);  // fine B-spline grid
  std::size_t samples = 20000;      // per iteration
  double initial_step = 1.0;        // mm, at the finest scale; doubled per coarser scale
  double min_step = 0.01;
  double relaxation = 0.5;
  int mi_bins = kDefaultMiBins;
  double mask_threshold = 0.01;
  int warped_channel = 1;
  bool similarity_stage = true;
  bool bspline_stage = true;

  static PipelineConfig desk();
  /// 1000 control points (10^3) and 200k samples.
  static PipelineConfig paper();
  static PipelineConfig by_scale(const std::string& name);

  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});

struct ScaleTrace {
  Stage stage = Stage::Similarity;
  int level = 0;  // 0 = finest
  std::vector<double> energy;
  int evaluations = 0;
  std::string stop_reason;
};

struct RegistrationReport {
  MetricKind metric = MetricKind::Cnn;
  std::vector<ScaleTrace> traces;
  TransformStack transform;
  int metric_evaluations = 0;
  int network_backward_passes = 0;
  /// Fine-scale energies of each stage's initial and final transform, on a shared sample set.
  std::vector<std::pair<double, double>> stage_guard;
  /// Wall-clock seconds per stage, kept apart from the deterministic fields.
  std::vector<std::pair<std::string, double>> stage_seconds;
};

/// Deterministic fields only (no timings).
nlohmann::json to_json(const RegistrationReport& r);
nlohmann::json timings_json(const RegistrationReport& r);

/// Similarity stage over the pyramid, then the B-spline stage (coarse grid
/// refined onto the fine grid) with the similarity held fixed.
RegistrationReport register_images(const Volume& fixed, const Volume& moving, const Network* net,
                                   const PipelineConfig& config, std::uint64_t seed);

/// B-spline control grid used at pyramid level `level` (0 = fine grid).
BSplineGrid bspline_level_grid(const Geometry& domain, Dims3 fine_dims, int level);

}  // namespace convreg
