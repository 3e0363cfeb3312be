#pragma once

#include <array>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "convreg/common.hpp"

namespace convreg {

using Vec3 = Eigen::Vector3d;
using Vec3f = std::array<float, 3>;

/// Axis-aligned voxel grid: x_phys = origin + index * spacing (per axis).
struct Geometry {
  Dims3 dims;
  Vec3 spacing = Vec3::Ones();
  Vec3 origin = Vec3::Zero();

  [[nodiscard]] std::size_t count() const { return dims.count(); }
  [[nodiscard]] std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims.x) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims.y) * static_cast<std::size_t>(k));
  }
  [[nodiscard]] std::array<int, 3> unravel(std::size_t idx) const {
    const auto nx = static_cast<std::size_t>(dims.x), ny = static_cast<std::size_t>(dims.y);
    return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny))};
  }
  [[nodiscard]] Vec3 to_physical(int i, int j, int k) const {
    return {origin.x() + i * spacing.x(), origin.y() + j * spacing.y(), origin.z() + k * spacing.z()};
  }
  [[nodiscard]] Vec3 to_physical(std::size_t idx) const {
    const auto ijk = unravel(idx);
    return to_physical(ijk[0], ijk[1], ijk[2]);
  }
  /// Continuous voxel coordinate of a physical point.
  [[nodiscard]] Vec3 to_continuous_index(const Vec3& p) const { return (p - origin).cwiseQuotient(spacing); }
  /// Physical position of the last voxel along each axis.
  [[nodiscard]] Vec3 last_point() const { return to_physical(dims.x - 1, dims.y - 1, dims.z - 1); }
  [[nodiscard]] Vec3 center() const { return 0.5 * (origin + last_point()); }
  [[nodiscard]] bool contains_index(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims.x && j < dims.y && k < dims.z;
  }

  /// Throws std::invalid_argument unless dims and spacing are positive.
  void validate() const;

  friend bool operator==(const Geometry& a, const Geometry& b) {
    return a.dims == b.dims && a.spacing == b.spacing && a.origin == b.origin;
  }
};

/// Dense voxel grid of T values in x-fastest order.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(Geometry geometry, T fill = T{}) : geom_(std::move(geometry)) {
    geom_.validate();
    data_.assign(geom_.count(), fill);
  }
  Grid(Geometry geometry, std::vector<T> data) : geom_(std::move(geometry)), data_(std::move(data)) {
    geom_.validate();
    if (data_.size() != geom_.count()) throw std::invalid_argument("voxel data length does not match dims");
  }

  [[nodiscard]] const Geometry& geometry() const { return geom_; }
  [[nodiscard]] const Dims3& dims() const { return geom_.dims; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] T& operator()(int i, int j, int k) { return data_[geom_.index(i, j, k)]; }
  [[nodiscard]] const T& operator()(int i, int j, int k) const { return data_[geom_.index(i, j, k)]; }
  [[nodiscard]] T& operator[](std::size_t idx) { return data_[idx]; }
  [[nodiscard]] const T& operator[](std::size_t idx) const { return data_[idx]; }

  [[nodiscard]] std::vector<T>& data() { return data_; }
  [[nodiscard]] const std::vector<T>& data() const { return data_; }

 private:
  Geometry geom_;
  std::vector<T> data_;
};

using Volume = Grid<float>;
using VectorVolume = Grid<Vec3f>;
using LabelVolume = Grid<std::uint16_t>;
using MaskVolume = Grid<std::uint8_t>;

/// Trilinear interpolation with zero padding outside the grid. Voxel centres
/// return their stored value exactly.
double trilinear_sample(const Volume& vol, const Vec3& point);
Vec3 trilinear_sample(const VectorVolume& vol, const Vec3& point);

/// Exact gradient (per mm) of the zero-padded trilinear interpolant; on a cell
/// face the cell above is used.
Vec3 trilinear_gradient(const Volume& vol, const Vec3& point);

/// Central differences inside, one-sided on the faces, in intensity per mm.
VectorVolume spatial_gradient(const Volume& vol);

/// Separable Gaussian with edge replication, kernel truncated at 3 sigma.
Volume gaussian_smooth(const Volume& vol, double sigma_voxels);

/// Smooth with sigma = factor/2 voxels, then keep every factor-th voxel.
Volume downsample(const Volume& vol, int factor);

/// Affine rescale of intensities onto [0, 1].
Volume normalize_intensity(const Volume& vol);

/// Resamples `moving` onto `fixed_geometry`: out(x) = moving(map(x)).
template <class PointMap>
  requires std::invocable<PointMap&, Vec3>
Volume resample(const Volume& moving, PointMap&& map, const Geometry& fixed_geometry) {
  Volume out(fixed_geometry);
  const Dims3 d = fixed_geometry.dims;
#pragma omp parallel for schedule(static)
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i)
        out(i, j, k) = static_cast<float>(trilinear_sample(moving, map(fixed_geometry.to_physical(i, j, k))));
  return out;
}

/// Two-channel (fixed, warped) stack in channel-major, x-fastest layout.
std::vector<float> stack_channels(const Volume& first, const Volume& second);

}  // namespace convreg
