#include "convreg/metric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "convreg/parallel.hpp"

namespace convreg {

MetricContext MetricContext::make(Volume fixed, Volume moving, std::optional<MaskVolume> mask) {
  MetricContext ctx;
  ctx.moving_gradient = spatial_gradient(moving);
  ctx.sample_points = all_sample_points(fixed.geometry());
  ctx.fixed = std::move(fixed);
  ctx.moving = std::move(moving);
  ctx.mask = std::move(mask);
  ctx.validate();
  return ctx;
}

void MetricContext::validate() const {
  if (fixed.empty() || moving.empty()) throw std::invalid_argument("metric context needs both images");
  if (!(moving_gradient.geometry() == moving.geometry()))
    throw std::invalid_argument("moving gradient geometry differs from the moving image");
  if (mask && !(mask->geometry() == fixed.geometry()))
    throw std::invalid_argument("mask geometry differs from the fixed image");
  if (warped_channel != 0 && warped_channel != 1) throw std::invalid_argument("warped channel must be 0 or 1");
  for (std::size_t idx : sample_points)
    if (idx >= fixed.size()) throw std::invalid_argument("sample point outside the fixed domain");
}

std::vector<std::size_t> all_sample_points(const Geometry& g) {
  std::vector<std::size_t> pts(g.count());
  std::iota(pts.begin(), pts.end(), std::size_t{0});
  return pts;
}

std::vector<std::size_t> draw_sample_points(const Geometry& g, std::size_t count, std::mt19937_64& rng,
                                            const MaskVolume* mask) {
  std::vector<std::size_t> candidates;
  if (mask) {
    for (std::size_t i = 0; i < mask->size(); ++i)
      if ((*mask)[i]) candidates.push_back(i);
  } else {
    candidates = all_sample_points(g);
  }
  if (count >= candidates.size()) return candidates;
  // Partial Fisher-Yates with our own index draws so the stream is portable.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t span = candidates.size() - i;
    const std::size_t j = i + static_cast<std::size_t>(rng() % span);
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(count);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

namespace {

template <typename T>
Tensor<T> make_pair(const Volume& fixed, const Volume& warped, int warped_channel) {
  Tensor<T> pair(1, 2, fixed.dims());
  T* f = pair.channel(0, 1 - warped_channel);
  T* w = pair.channel(0, warped_channel);
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    f[i] = static_cast<T>(fixed[i]);
    w[i] = static_cast<T>(warped[i]);
  }
  return pair;
}

template <typename T>
void check_size(const BasicNetwork<T>& net, const Volume& fixed) {
  if (fixed.dims().min() < net.patch_size())
    throw std::invalid_argument("fixed volume is smaller than the network patch size");
}

struct Bin {
  int lo;
  double frac;  // weight of lo+1; lo gets 1 - frac
};

Bin bin_of(double v, int bins) {
  const double t = std::clamp(v, 0.0, 1.0) * (bins - 1);
  const int lo = std::min(static_cast<int>(t), bins - 2);
  return {lo, t - lo};
}

void check_bins(int bins) {
  if (bins < 2) throw std::invalid_argument("MI needs at least 2 bins");
}

/// Joint histogram (fixed-major) of partial-volume contributions, normalized.
template <class Sample>
std::vector<double> joint_histogram(std::size_t n, int bins, Sample&& sample, double& total) {
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<double> hist(nb * nb, 0.0);
  deterministic_accumulate(n, hist, [&](std::size_t i, std::span<double> acc) {
    double f, m;
    if (!sample(i, f, m)) return;
    const Bin a = bin_of(f, bins), b = bin_of(m, bins);
    const double wa[2] = {1.0 - a.frac, a.frac}, wb[2] = {1.0 - b.frac, b.frac};
    for (int p = 0; p < 2; ++p)
      for (int q = 0; q < 2; ++q)
        acc[static_cast<std::size_t>(a.lo + p) * nb + static_cast<std::size_t>(b.lo + q)] += wa[p] * wb[q];
  });
  total = std::accumulate(hist.begin(), hist.end(), 0.0);
  if (total <= 0.0) throw std::invalid_argument("MI evaluated over an empty sample set");
  for (double& h : hist) h /= total;
  return hist;
}

double neg_mi_from_joint(const std::vector<double>& p, int bins, std::vector<double>* log_ratio) {
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<double> pf(nb, 0.0), pm(nb, 0.0);
  for (std::size_t a = 0; a < nb; ++a)
    for (std::size_t b = 0; b < nb; ++b) {
      pf[a] += p[a * nb + b];
      pm[b] += p[a * nb + b];
    }
  double mi = 0.0;
  if (log_ratio) log_ratio->assign(nb * nb, 0.0);
  for (std::size_t a = 0; a < nb; ++a)
    for (std::size_t b = 0; b < nb; ++b) {
      const double pab = p[a * nb + b];
      if (pab <= 0.0) continue;
      mi += pab * std::log(pab / (pf[a] * pm[b]));
      if (log_ratio) (*log_ratio)[a * nb + b] = std::log(pab / pm[b]);
    }
  return -std::max(mi, 0.0);
}

}  // namespace

template <typename T>
double cnn_metric_value(const BasicNetwork<T>& net, const MetricContext& ctx, const TransformStack& stack) {
  check_size(net, ctx.fixed);
  const Volume warped = resample(ctx.moving, stack, ctx.fixed.geometry());
  return forward_full(net, make_pair<T>(ctx.fixed, warped, ctx.warped_channel)).sum();
}

template <typename T>
MetricValueAndGradient cnn_metric_gradient(const BasicNetwork<T>& net, const MetricContext& ctx,
                                           const TransformStack& stack, Stage active) {
  check_size(net, ctx.fixed);
  if (!stack.has(active)) throw std::invalid_argument("active stage missing from the transform stack");
  const Volume warped = resample(ctx.moving, stack, ctx.fixed.geometry());
  DissimilarityMap<T> map;
  const Tensor<T> grad = input_gradient(net, make_pair<T>(ctx.fixed, warped, ctx.warped_channel), &map);
  const T* dwarped = grad.channel(0, ctx.warped_channel);

  MetricValueAndGradient out;
  out.value = map.sum();
  out.gradient = Eigen::VectorXd::Zero(stack.parameter_count(active));
  if (ctx.sample_points.empty()) return out;
  const double scale = static_cast<double>(ctx.fixed.size()) / static_cast<double>(ctx.sample_points.size());
  const Geometry& geo = ctx.fixed.geometry();
  std::span<double> g(out.gradient.data(), static_cast<std::size_t>(out.gradient.size()));
  deterministic_accumulate(ctx.sample_points.size(), g, [&](std::size_t i, std::span<double> acc) {
    const std::size_t idx = ctx.sample_points[i];
    const double dn = dwarped[idx];
    if (dn == 0.0) return;
    const Vec3 x = geo.to_physical(idx);
    const Vec3 grad_m = ctx.moving_gradient_at(apply_stack(stack, x));
    jacobian_stack(stack, x, active).accumulate(grad_m, dn * scale, acc);
  });
  return out;
}

double mi_value(const Volume& fixed, const Volume& warped, int bins, const MaskVolume* mask) {
  check_bins(bins);
  if (!(fixed.geometry() == warped.geometry())) throw std::invalid_argument("MI images must share a geometry");
  if (mask && !(mask->geometry() == fixed.geometry())) throw std::invalid_argument("mask geometry mismatch");
  double total = 0.0;
  const auto p = joint_histogram(fixed.size(), bins, [&](std::size_t i, double& f, double& m) {
    if (mask && !(*mask)[i]) return false;
    f = fixed[i];
    m = warped[i];
    return true;
  }, total);
  return neg_mi_from_joint(p, bins, nullptr);
}

MetricValueAndGradient mi_gradient(const MetricContext& ctx, const TransformStack& stack, Stage active, int bins) {
  check_bins(bins);
  if (!stack.has(active)) throw std::invalid_argument("active stage missing from the transform stack");
  const Geometry& geo = ctx.fixed.geometry();
  const auto& pts = ctx.sample_points;
  const MaskVolume* mask = ctx.mask ? &*ctx.mask : nullptr;

  // Samples mapped outside the moving image are dropped; their zero padding
  // would otherwise enter the histogram with no matching gradient.
  const Geometry& mgeo = ctx.moving.geometry();
  std::vector<double> warped(pts.size(), -1.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pts.size()); ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (mask && !(*mask)[pts[k]]) continue;
    const Vec3 y = apply_stack(stack, geo.to_physical(pts[k]));
    const Vec3 u = mgeo.to_continuous_index(y);
    bool inside = true;
    for (int a = 0; a < 3; ++a) inside = inside && u[a] >= 0.0 && u[a] <= mgeo.dims[a] - 1;
    if (inside) warped[k] = std::clamp(trilinear_sample(ctx.moving, y), 0.0, 1.0);
  }

  double total = 0.0;
  const auto p = joint_histogram(pts.size(), bins, [&](std::size_t i, double& f, double& m) {
    if (warped[i] < 0.0) return false;
    f = ctx.fixed[pts[i]];
    m = warped[i];
    return true;
  }, total);
  std::vector<double> log_ratio;
  MetricValueAndGradient out;
  out.value = neg_mi_from_joint(p, bins, &log_ratio);
  out.gradient = Eigen::VectorXd::Zero(stack.parameter_count(active));

  // d(-MI)/dtheta = -(1/N) sum_x sum_ab w_a(f) w_b'(m) log(p_ab / p_b) dm/dtheta
  const auto nb = static_cast<std::size_t>(bins);
  std::span<double> g(out.gradient.data(), static_cast<std::size_t>(out.gradient.size()));
  deterministic_accumulate(pts.size(), g, [&](std::size_t i, std::span<double> acc) {
    const std::size_t idx = pts[i];
    const double m = warped[i];
    if (m < 0.0) return;
    const Bin a = bin_of(ctx.fixed[idx], bins), b = bin_of(m, bins);
    const double wa[2] = {1.0 - a.frac, a.frac};
    double c = 0.0;
    for (int q = 0; q < 2; ++q) {
      const double row = wa[0] * log_ratio[static_cast<std::size_t>(a.lo) * nb + static_cast<std::size_t>(b.lo + q)] +
                         wa[1] * log_ratio[static_cast<std::size_t>(a.lo + 1) * nb + static_cast<std::size_t>(b.lo + q)];
      c += (q == 0 ? -1.0 : 1.0) * row;
    }
    c *= static_cast<double>(bins - 1);
    if (c == 0.0) return;
    const Vec3 x = geo.to_physical(idx);
    const Vec3 grad_m = ctx.moving_gradient_at(apply_stack(stack, x));
    jacobian_stack(stack, x, active).accumulate(grad_m, -c / total, acc);
  });
  return out;
}

std::string to_string(MetricKind k) {
  switch (k) {
    case MetricKind::Cnn: return "cnn";
    case MetricKind::Mi: return "mi";
    case MetricKind::MiMasked: return "mi+m";
  }
  return "unknown";
}

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "cnn") return MetricKind::Cnn;
  if (s == "mi") return MetricKind::Mi;
  if (s == "mi+m") return MetricKind::MiMasked;
  throw DataError("unknown metric '" + s + "' (expected cnn, mi or mi+m)");
}

MetricValueAndGradient metric_value_and_gradient(MetricKind kind, const Network* net, const MetricContext& ctx,
                                                 const TransformStack& stack, Stage active, int bins) {
  switch (kind) {
    case MetricKind::Cnn:
      if (!net) throw std::invalid_argument("the CNN metric needs a network");
      return cnn_metric_gradient(*net, ctx, stack, active);
    case MetricKind::Mi:
      if (ctx.mask) {
        MetricContext unmasked = ctx;
        unmasked.mask.reset();
        return mi_gradient(unmasked, stack, active, bins);
      }
      return mi_gradient(ctx, stack, active, bins);
    case MetricKind::MiMasked:
      if (!ctx.mask) throw std::invalid_argument("masked MI needs a mask in the metric context");
      return mi_gradient(ctx, stack, active, bins);
  }
  throw std::invalid_argument("unknown metric kind");
}

MaskVolume head_mask(const Volume& vol, double threshold) {
  MaskVolume mask(vol.geometry());
  for (std::size_t i = 0; i < vol.size(); ++i) mask[i] = vol[i] > threshold ? 1 : 0;
  return mask;
}

template <typename T>
std::vector<double> unary_potentials(const BasicNetwork<T>& net, const Volume& fixed, const Volume& moving,
                                     const TransformStack& stack, const Vec3& node_center,
                                     const std::vector<Vec3>& displacements) {
  const Geometry& geo = fixed.geometry();
  const int p = net.patch_size();
  const Vec3 c = geo.to_continuous_index(node_center);
  int start[3];
  for (int a = 0; a < 3; ++a) {
    start[a] = static_cast<int>(std::lround(c[a])) - p / 2;
    if (start[a] < 0 || start[a] + p > geo.dims[a]) throw std::invalid_argument("unary patch exceeds the fixed domain");
  }
  const std::size_t n = static_cast<std::size_t>(p) * p * p;
  std::vector<T> patch(2 * n);
  std::vector<Vec3> mapped(n);
  std::size_t v = 0;
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x, ++v) {
        patch[v] = static_cast<T>(fixed(start[0] + x, start[1] + y, start[2] + z));
        mapped[v] = apply_stack(stack, geo.to_physical(start[0] + x, start[1] + y, start[2] + z));
      }
  std::vector<double> out;
  out.reserve(displacements.size());
  for (const Vec3& u : displacements) {
    for (std::size_t i = 0; i < n; ++i) patch[n + i] = static_cast<T>(trilinear_sample(moving, mapped[i] + u));
    out.push_back(static_cast<double>(forward_patch<T>(net, patch)));
  }
  return out;
}

#define CONVREG_INSTANTIATE_METRIC(T)                                                                        \
  template double cnn_metric_value<T>(const BasicNetwork<T>&, const MetricContext&, const TransformStack&); \
  template MetricValueAndGradient cnn_metric_gradient<T>(const BasicNetwork<T>&, const MetricContext&,      \
                                                         const TransformStack&, Stage);                     \
  template std::vector<double> unary_potentials<T>(const BasicNetwork<T>&, const Volume&, const Volume&,    \
                                                   const TransformStack&, const Vec3&, const std::vector<Vec3>&);

CONVREG_INSTANTIATE_METRIC(float)
CONVREG_INSTANTIATE_METRIC(double)

}  // namespace convreg
