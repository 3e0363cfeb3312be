#include "convreg/volume.hpp"

#include <algorithm>
#include <limits>

namespace convreg {

void Geometry::validate() const {
  if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0) throw std::invalid_argument("volume dims must be positive");
  if (!(spacing.array() > 0.0).all()) throw std::invalid_argument("volume spacing must be positive");
}

namespace {

// Continuous indices within 1e-9 of an integer are snapped so that physical
// round trips (origin + i*spacing -> index) land exactly on voxel centres.
inline double snap(double u) {
  const double r = std::nearbyint(u);
  return std::abs(u - r) < 1e-9 ? r : u;
}

struct Corner {
  int i0, j0, k0;
  double fx, fy, fz;
};

inline bool locate(const Geometry& g, const Vec3& point, Corner& c) {
  const Vec3 u = g.to_continuous_index(point);
  const double ux = snap(u.x()), uy = snap(u.y()), uz = snap(u.z());
  if (!(ux > -1.0 && uy > -1.0 && uz > -1.0 && ux < g.dims.x && uy < g.dims.y && uz < g.dims.z)) return false;
  c.i0 = static_cast<int>(std::floor(ux));
  c.j0 = static_cast<int>(std::floor(uy));
  c.k0 = static_cast<int>(std::floor(uz));
  c.fx = ux - c.i0;
  c.fy = uy - c.j0;
  c.fz = uz - c.k0;
  return true;
}

template <class Accumulate>
inline void for_each_corner(const Geometry& g, const Corner& c, Accumulate&& acc) {
  const double wx[2] = {1.0 - c.fx, c.fx};
  const double wy[2] = {1.0 - c.fy, c.fy};
  const double wz[2] = {1.0 - c.fz, c.fz};
  for (int dz = 0; dz < 2; ++dz) {
    const int k = c.k0 + dz;
    if (wz[dz] == 0.0 || k < 0 || k >= g.dims.z) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const int j = c.j0 + dy;
      if (wy[dy] == 0.0 || j < 0 || j >= g.dims.y) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const int i = c.i0 + dx;
        if (wx[dx] == 0.0 || i < 0 || i >= g.dims.x) continue;
        acc(g.index(i, j, k), wx[dx] * wy[dy] * wz[dz]);
      }
    }
  }
}

}  // namespace

double trilinear_sample(const Volume& vol, const Vec3& point) {
  Corner c{};
  if (!locate(vol.geometry(), point, c)) return 0.0;
  double v = 0.0;
  for_each_corner(vol.geometry(), c, [&](std::size_t idx, double w) { v += w * vol[idx]; });
  return v;
}

Vec3 trilinear_sample(const VectorVolume& vol, const Vec3& point) {
  Corner c{};
  Vec3 v = Vec3::Zero();
  if (!locate(vol.geometry(), point, c)) return v;
  for_each_corner(vol.geometry(), c, [&](std::size_t idx, double w) {
    const Vec3f& g = vol[idx];
    v.x() += w * g[0];
    v.y() += w * g[1];
    v.z() += w * g[2];
  });
  return v;
}

Vec3 trilinear_gradient(const Volume& vol, const Vec3& point) {
  Corner c{};
  Vec3 d = Vec3::Zero();
  const Geometry& g = vol.geometry();
  if (!locate(g, point, c)) return d;
  const double wx[2] = {1.0 - c.fx, c.fx}, wy[2] = {1.0 - c.fy, c.fy}, wz[2] = {1.0 - c.fz, c.fz};
  const double sign[2] = {-1.0, 1.0};
  for (int dz = 0; dz < 2; ++dz) {
    const int k = c.k0 + dz;
    if (k < 0 || k >= g.dims.z) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const int j = c.j0 + dy;
      if (j < 0 || j >= g.dims.y) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const int i = c.i0 + dx;
        if (i < 0 || i >= g.dims.x) continue;
        const double v = vol(i, j, k);
        d.x() += sign[dx] * wy[dy] * wz[dz] * v;
        d.y() += wx[dx] * sign[dy] * wz[dz] * v;
        d.z() += wx[dx] * wy[dy] * sign[dz] * v;
      }
    }
  }
  return d.cwiseQuotient(g.spacing);
}

VectorVolume spatial_gradient(const Volume& vol) {
  const Geometry& g = vol.geometry();
  const Dims3 d = g.dims;
  if (d.x < 2 || d.y < 2 || d.z < 2) throw std::invalid_argument("spatial_gradient needs at least 2 voxels per axis");
  VectorVolume out(g);
  const int n[3] = {d.x, d.y, d.z};
  const double sp[3] = {g.spacing.x(), g.spacing.y(), g.spacing.z()};
#pragma omp parallel for schedule(static)
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const int pos[3] = {i, j, k};
        Vec3f grad{};
        for (int a = 0; a < 3; ++a) {
          int lo[3] = {i, j, k}, hi[3] = {i, j, k};
          double span = 2.0 * sp[a];
          if (pos[a] == 0) {
            hi[a] = 1;
            span = sp[a];
          } else if (pos[a] == n[a] - 1) {
            lo[a] = n[a] - 2;
            span = sp[a];
          } else {
            lo[a] = pos[a] - 1;
            hi[a] = pos[a] + 1;
          }
          grad[a] = static_cast<float>((static_cast<double>(vol(hi[0], hi[1], hi[2])) -
                                        static_cast<double>(vol(lo[0], lo[1], lo[2]))) /
                                       span);
        }
        out(i, j, k) = grad;
      }
  return out;
}

Volume gaussian_smooth(const Volume& vol, double sigma_voxels) {
  if (!(sigma_voxels > 0.0)) return vol;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_voxels));
  std::vector<double> w(2 * radius + 1);
  double total = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    w[t + radius] = std::exp(-0.5 * t * t / (sigma_voxels * sigma_voxels));
    total += w[t + radius];
  }
  for (double& x : w) x /= total;

  const Dims3 d = vol.dims();
  std::vector<double> cur(vol.data().begin(), vol.data().end());
  std::vector<double> next(cur.size());
  const int n[3] = {d.x, d.y, d.z};
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d.x), static_cast<std::size_t>(d.x) * d.y};
  for (int axis = 0; axis < 3; ++axis) {
    const int len = n[axis];
    const std::size_t st = stride[axis];
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t idx = 0; idx < static_cast<std::ptrdiff_t>(cur.size()); ++idx) {
      const int pos = static_cast<int>((static_cast<std::size_t>(idx) / st) % static_cast<std::size_t>(len));
      const std::size_t base = static_cast<std::size_t>(idx) - static_cast<std::size_t>(pos) * st;
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        const int q = std::clamp(pos + t, 0, len - 1);
        acc += w[t + radius] * cur[base + static_cast<std::size_t>(q) * st];
      }
      next[static_cast<std::size_t>(idx)] = acc;
    }
    std::swap(cur, next);
  }
  std::vector<float> data(cur.size());
  std::transform(cur.begin(), cur.end(), data.begin(), [](double v) { return static_cast<float>(v); });
  return Volume(vol.geometry(), std::move(data));
}

Volume downsample(const Volume& vol, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  const Dims3 d = vol.dims();
  if (factor > d.min()) throw std::invalid_argument("downsample factor exceeds a volume dimension");
  const Volume smooth = gaussian_smooth(vol, 0.5 * factor);
  if (factor == 1) return smooth;
  Geometry g = vol.geometry();
  g.dims = {(d.x + factor - 1) / factor, (d.y + factor - 1) / factor, (d.z + factor - 1) / factor};
  g.spacing *= factor;
  Volume out(g);
  for (int k = 0; k < g.dims.z; ++k)
    for (int j = 0; j < g.dims.y; ++j)
      for (int i = 0; i < g.dims.x; ++i) out(i, j, k) = smooth(i * factor, j * factor, k * factor);
  return out;
}

Volume normalize_intensity(const Volume& vol) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (float v : vol.data()) {
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  if (!(hi > lo)) throw std::invalid_argument("normalize_intensity: constant volume");
  const double scale = 1.0 / (hi - lo);
  std::vector<float> data(vol.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<float>(std::clamp((vol[i] - lo) * scale, 0.0, 1.0));
  return Volume(vol.geometry(), std::move(data));
}

std::vector<float> stack_channels(const Volume& first, const Volume& second) {
  if (!(first.dims() == second.dims())) throw std::invalid_argument("stack_channels: dims differ");
  std::vector<float> out;
  out.reserve(first.size() * 2);
  out.insert(out.end(), first.data().begin(), first.data().end());
  out.insert(out.end(), second.data().begin(), second.data().end());
  return out;
}

}  // namespace convreg
