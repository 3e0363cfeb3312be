#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "convreg/network.hpp"
#include "convreg/transform.hpp"
#include "convreg/volume.hpp"

namespace convreg {

/// How the moving-image gradient at T(x) is obtained.
enum class ImageGradient {
  /// Exact derivative of the trilinearly interpolated moving image, so the
  /// analytic metric gradient is the derivative of the sampled metric value.
  Interpolant,
  /// Central differences precomputed once on the voxel grid, sampled trilinearly.
  Precomputed,
};

/// Everything a metric evaluation needs besides the transform. Sample points
/// are flat fixed-grid indices.
struct MetricContext {
  Volume fixed;
  Volume moving;
  VectorVolume moving_gradient;  // filled by make(); used by ImageGradient::Precomputed
  ImageGradient image_gradient = ImageGradient::Interpolant;
  std::vector<std::size_t> sample_points;
  std::optional<MaskVolume> mask;
  /// Network input channel that receives the warped moving image (the fixed
  /// image takes the other one). 1 matches networks trained on (A, B) pairs
  /// with the fixed image in modality A.
  int warped_channel = 1;

  /// Context with every fixed voxel as a sample point.
  static MetricContext make(Volume fixed, Volume moving, std::optional<MaskVolume> mask = std::nullopt);

  /// Throws std::invalid_argument on out-of-domain samples or mismatched geometry.
  void validate() const;

  [[nodiscard]] Vec3 moving_gradient_at(const Vec3& y) const {
    return image_gradient == ImageGradient::Interpolant ? trilinear_gradient(moving, y)
                                                        : trilinear_sample(moving_gradient, y);
  }
};

std::vector<std::size_t> all_sample_points(const Geometry& g);

/// `count` distinct voxel indices drawn uniformly from the fixed grid (or from
/// the mask's true voxels), sorted. Returns every candidate when count exceeds them.
std::vector<std::size_t> draw_sample_points(const Geometry& g, std::size_t count, std::mt19937_64& rng,
                                            const MaskVolume* mask = nullptr);

struct MetricValueAndGradient {
  double value = 0.0;
  Eigen::VectorXd gradient;
};

/// Sum of the dissimilarity map of (fixed, moving resampled by `stack`).
template <typename T>
double cnn_metric_value(const BasicNetwork<T>& net, const MetricContext& ctx, const TransformStack& stack);

/// Value plus d/dtheta of the active stage: one forward and one backward pass
/// over the whole fixed domain, then sum over the sample points of
/// dN/dI'_m(x) * grad I_m(T(x)) * J_T(x). With a subset of sample points the
/// sum is rescaled by (fixed voxels / samples).
template <typename T>
MetricValueAndGradient cnn_metric_gradient(const BasicNetwork<T>& net, const MetricContext& ctx,
                                           const TransformStack& stack, Stage active);

inline constexpr int kDefaultMiBins = 75;

/// Negative mutual information (natural log) of the partial-volume joint
/// histogram over the masked voxels. Intensities are clamped to [0, 1].
double mi_value(const Volume& fixed, const Volume& warped, int bins = kDefaultMiBins, const MaskVolume* mask = nullptr);

/// Negative MI over ctx.sample_points (restricted to ctx.mask when set) and its
/// analytic gradient through the linear Parzen kernel. Samples whose mapped
/// point leaves the moving image are skipped.
MetricValueAndGradient mi_gradient(const MetricContext& ctx, const TransformStack& stack, Stage active,
                                   int bins = kDefaultMiBins);

/// True where intensity > threshold.
MaskVolume head_mask(const Volume& vol, double threshold = 0.01);

/// Network scores of the fixed patch centred on `node_center` against the
/// moving patch sampled at T(x) + u for every displacement u. Forward only.
enum class MetricKind { Cnn, Mi, MiMasked };

std::string to_string(MetricKind k);
/// Accepts "cnn", "mi" and "mi+m"; throws DataError otherwise.
MetricKind metric_kind_from_string(const std::string& s);

/// Dispatches to cnn_metric_gradient or mi_gradient. `net` is required for
/// MetricKind::Cnn; MiMasked expects ctx.mask to be set.
MetricValueAndGradient metric_value_and_gradient(MetricKind kind, const Network* net, const MetricContext& ctx,
                                                 const TransformStack& stack, Stage active,
                                                 int bins = kDefaultMiBins);

template <typename T>
std::vector<double> unary_potentials(const BasicNetwork<T>& net, const Volume& fixed, const Volume& moving,
                                     const TransformStack& stack, const Vec3& node_center,
                                     const std::vector<Vec3>& displacements);

}  // namespace convreg
