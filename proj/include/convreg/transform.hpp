#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "convreg/volume.hpp"

namespace convreg {

using Mat3 = Eigen::Matrix3d;
using SimilarityJacobian = Eigen::Matrix<double, 3, 7>;

/// 7-DOF similarity: x -> center + exp(log_scale) * R * (x - center) + translation,
/// with R = Rz * Ry * Rx (rotate about X first). Parameter order:
/// (tx, ty, tz, rx, ry, rz, log_scale); the center is fixed.
struct SimilarityParams {
  static constexpr int kParameterCount = 7;

  Vec3 translation = Vec3::Zero();
  Vec3 rotation = Vec3::Zero();
  double log_scale = 0.0;
  Vec3 center = Vec3::Zero();

  [[nodiscard]] double scale() const { return std::exp(log_scale); }
  [[nodiscard]] Mat3 rotation_matrix() const;
  [[nodiscard]] Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);
};

Vec3 apply_similarity(const SimilarityParams& p, const Vec3& x);
SimilarityJacobian similarity_jacobian(const SimilarityParams& p, const Vec3& x);

/// Tensor-product cubic B-spline weights of the (up to) 4x4x4 control points
/// supporting one point. Empty when the point lies outside the supported region.
struct BSplineSupport {
  std::array<int, 64> point{};
  std::array<double, 64> weight{};
  int count = 0;
};

/// Uniform cubic B-spline displacement field on a control grid. Control point
/// (a,b,c) sits at control_origin + (a,b,c) * control_spacing; a point is
/// supported while its grid coordinate lies in [1, dims-2] on every axis.
class BSplineGrid {
 public:
  BSplineGrid() = default;
  BSplineGrid(Dims3 control_dims, Vec3 control_spacing, Vec3 control_origin);

  /// Grid whose supported region is exactly the physical extent of `domain`.
  static BSplineGrid covering(const Geometry& domain, Dims3 control_dims);
  /// Grid of twice the control spacing that refines onto covering(domain, fine_dims).
  static BSplineGrid coarse_for(const Geometry& domain, Dims3 fine_dims);

  [[nodiscard]] const Dims3& control_dims() const { return dims_; }
  [[nodiscard]] const Vec3& control_spacing() const { return spacing_; }
  [[nodiscard]] const Vec3& control_origin() const { return origin_; }
  [[nodiscard]] int point_count() const { return static_cast<int>(dims_.count()); }
  [[nodiscard]] int parameter_count() const { return 3 * point_count(); }
  [[nodiscard]] Vec3 control_point(int a, int b, int c) const {
    return origin_ + Vec3(a, b, c).cwiseProduct(spacing_);
  }
  [[nodiscard]] int point_index(int a, int b, int c) const {
    return a + dims_.x * (b + dims_.y * c);
  }

  /// Flat displacement parameters, ordered [point][axis].
  [[nodiscard]] const Eigen::VectorXd& parameters() const { return params_; }
  void set_parameters(const Eigen::VectorXd& p);
  [[nodiscard]] Vec3 control_displacement(int point) const { return params_.segment<3>(3 * point); }
  void set_control_displacement(int point, const Vec3& d) { params_.segment<3>(3 * point) = d; }

  [[nodiscard]] BSplineSupport support(const Vec3& x) const;
  [[nodiscard]] Vec3 displacement(const Vec3& x) const;
  /// Spatial derivative d(displacement)/dx, zero outside the support.
  [[nodiscard]] Mat3 displacement_jacobian(const Vec3& x) const;

  /// Dyadic subdivision onto a grid with half the spacing and `fine_dims`
  /// control points; the displacement field is unchanged on the supported region.
  [[nodiscard]] BSplineGrid refined(Dims3 fine_dims) const;

 private:
  bool locate(const Vec3& x, std::array<int, 3>& base, Vec3& t) const;

  Dims3 dims_;
  Vec3 spacing_ = Vec3::Ones();
  Vec3 origin_ = Vec3::Zero();
  Eigen::VectorXd params_;
};

/// 1-D uniform cubic B-spline weights for the four points {base-1..base+2}, t in [0,1].
std::array<double, 4> cubic_bspline_weights(double t);
std::array<double, 4> cubic_bspline_derivatives(double t);

Vec3 apply_bspline(const BSplineGrid& g, const Vec3& x);
BSplineSupport bspline_jacobian(const BSplineGrid& g, const Vec3& x);

enum class Stage { Similarity, BSpline };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

/// Similarity map followed by an additive B-spline displacement evaluated at
/// the similarity-mapped point. Either stage may be absent.
struct TransformStack {
  std::optional<SimilarityParams> similarity;
  std::optional<BSplineGrid> bspline;

  [[nodiscard]] bool has(Stage s) const { return s == Stage::Similarity ? similarity.has_value() : bspline.has_value(); }
  [[nodiscard]] int parameter_count(Stage s) const;
  [[nodiscard]] Eigen::VectorXd parameters(Stage s) const;
  void set_parameters(Stage s, const Eigen::VectorXd& p);
};

Vec3 apply_stack(const TransformStack& s, const Vec3& x);

/// dT/dtheta of the active stage at x, the other stage held fixed.
struct StageJacobian {
  Stage stage = Stage::Similarity;
  SimilarityJacobian dense = SimilarityJacobian::Zero();
  BSplineSupport sparse;

  /// grad += scale * row^T J (row is a 1x3 image gradient).
  void accumulate(const Vec3& row, double scale, std::span<double> grad) const;
  [[nodiscard]] Eigen::MatrixXd to_dense(int parameter_count) const;
};

StageJacobian jacobian_stack(const TransformStack& s, const Vec3& x, Stage active);

Volume resample(const Volume& moving, const TransformStack& s, const Geometry& fixed_geometry);

nlohmann::json to_json(const TransformStack& s);
TransformStack transform_stack_from_json(const nlohmann::json& j);

}  // namespace convreg
