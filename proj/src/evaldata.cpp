#include "convreg/evaldata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "convreg/parallel.hpp"

namespace convreg {

void PhantomConfig::validate() const {
  if (dims.x < 4 || dims.y < 4 || dims.z < 4) throw std::invalid_argument("phantom dims must be at least 4");
  if (!(spacing.minCoeff() > 0.0)) throw std::invalid_argument("phantom spacing must be positive");
  if (classes < 2 || classes > 65535) throw std::invalid_argument("phantom needs at least 2 classes");
  if (blobs_per_class < 0) throw std::invalid_argument("blob count must be non-negative");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise sigma must be non-negative");
  if (!(bias_amplitude >= 0.0 && bias_amplitude < 1.0)) throw std::invalid_argument("bias amplitude must lie in [0, 1)");
  if (!(blur_sigma >= 0.0)) throw std::invalid_argument("blur sigma must be non-negative");
}

nlohmann::json to_json(const PhantomConfig& c) {
  return {{"dims", {c.dims.x, c.dims.y, c.dims.z}},
          {"spacing", {c.spacing.x(), c.spacing.y(), c.spacing.z()}},
          {"classes", c.classes},
          {"blobs_per_class", c.blobs_per_class},
          {"noise_sigma", c.noise_sigma},
          {"bias_amplitude", c.bias_amplitude},
          {"blur_sigma", c.blur_sigma},
          {"seed", c.seed}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j, PhantomConfig c) {
  try {
    if (!j.is_object()) throw DataError("phantom config must be an object");
    if (j.contains("dims")) {
      const auto d = j.at("dims").get<std::vector<int>>();
      if (d.size() != 3) throw DataError("phantom dims needs 3 entries");
      c.dims = {d[0], d[1], d[2]};
    }
    if (j.contains("spacing")) {
      const auto s = j.at("spacing").get<std::vector<double>>();
      if (s.size() != 3) throw DataError("phantom spacing needs 3 entries");
      c.spacing = Vec3(s[0], s[1], s[2]);
    }
    c.classes = j.value("classes", c.classes);
    c.blobs_per_class = j.value("blobs_per_class", c.blobs_per_class);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.bias_amplitude = j.value("bias_amplitude", c.bias_amplitude);
    c.blur_sigma = j.value("blur_sigma", c.blur_sigma);
    c.seed = j.value("seed", c.seed);
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad phantom config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("bad phantom config: ") + e.what());
  }
  return c;
}

double modality_a_level(int c, int classes) {
  if (c <= 0) return 0.0;
  if (classes <= 2) return 1.0;
  return 0.25 + 0.75 * static_cast<double>(c - 1) / static_cast<double>(classes - 2);
}

double modality_b_level(int c, int classes) {
  if (c <= 0) return 0.0;
  const int n = classes - 1;
  const int shift = (n + 1) / 2;
  return modality_a_level((c - 1 + shift) % n + 1, classes);
}

namespace {

struct Ellipsoid {
  Vec3 center;
  Vec3 semi_axes;
  Mat3 rotation = Mat3::Identity();

  [[nodiscard]] bool contains(const Vec3& p) const {
    const Vec3 q = rotation.transpose() * (p - center);
    return q.cwiseQuotient(semi_axes).squaredNorm() <= 1.0;
  }
};

Mat3 random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
  SimilarityParams p;
  p.rotation = Vec3(angle(rng), angle(rng), angle(rng));
  return p.rotation_matrix();
}

/// Smooth multiplicative field 1 + amplitude * f, |f| <= 1, from a few low-frequency cosines.
std::vector<double> bias_field(const Geometry& g, double amplitude, std::mt19937_64& rng) {
  std::vector<double> field(g.count(), 1.0);
  if (amplitude == 0.0) return field;
  constexpr int kTerms = 4;
  std::uniform_real_distribution<double> freq(-std::numbers::pi, std::numbers::pi), phase(0.0, 2.0 * std::numbers::pi),
      weight(0.2, 1.0);
  std::array<Vec3, kTerms> w;
  std::array<double, kTerms> phi, a;
  double norm = 0.0;
  for (int k = 0; k < kTerms; ++k) {
    w[k] = Vec3(freq(rng), freq(rng), freq(rng));
    phi[k] = phase(rng);
    a[k] = weight(rng);
    norm += a[k];
  }
  const Vec3 c = g.center(), half = 0.5 * (g.last_point() - g.origin).cwiseMax(Vec3::Constant(1e-9));
  for (std::size_t i = 0; i < field.size(); ++i) {
    const Vec3 u = (g.to_physical(i) - c).cwiseQuotient(half);
    double f = 0.0;
    for (int k = 0; k < kTerms; ++k) f += a[k] * std::cos(w[k].dot(u) + phi[k]);
    field[i] = 1.0 + amplitude * f / norm;
  }
  return field;
}

Volume render_modality(const LabelVolume& labels, const PhantomConfig& cfg, bool modality_b, std::uint64_t bias_seed,
                       std::uint64_t noise_seed) {
  Volume v(labels.geometry());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<float>(modality_b ? modality_b_level(labels[i], cfg.classes)
                                         : modality_a_level(labels[i], cfg.classes));
  if (cfg.blur_sigma > 0.0) v = gaussian_smooth(v, cfg.blur_sigma);
  std::mt19937_64 bias_rng(bias_seed), noise_rng(noise_seed);
  const auto bias = bias_field(v.geometry(), cfg.bias_amplitude, bias_rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = v[i] * bias[i];
    // Noise only on the head keeps the background exactly dark.
    if (cfg.noise_sigma > 0.0 && labels[i] != 0) x += cfg.noise_sigma * noise(noise_rng);
    v[i] = static_cast<float>(std::max(x, 0.0));
  }
  return normalize_intensity(v);
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  const Geometry geo{cfg.dims, cfg.spacing, Vec3::Zero()};
  std::mt19937_64 rng(derive_seed(cfg.seed, "phantom-shapes"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Vec3 extent = (geo.last_point() - geo.origin).cwiseMax(geo.spacing);

  Ellipsoid head;
  head.semi_axes = Vec3(0.40, 0.44, 0.38).cwiseProduct(extent) * (0.95 + 0.1 * unit(rng));
  head.center = geo.center() + 0.03 * Vec3(unit(rng) - 0.5, unit(rng) - 0.5, unit(rng) - 0.5).cwiseProduct(extent);

  std::vector<std::pair<int, Ellipsoid>> blobs;
  const double min_extent = extent.minCoeff();
  for (int c = 2; c < cfg.classes; ++c)
    for (int b = 0; b < cfg.blobs_per_class; ++b) {
      Ellipsoid e;
      // Uniform direction and radius fraction inside 0.6 of the head.
      Vec3 dir;
      do {
        dir = Vec3(2 * unit(rng) - 1, 2 * unit(rng) - 1, 2 * unit(rng) - 1);
      } while (dir.squaredNorm() > 1.0);
      e.center = head.center + 0.6 * dir.cwiseProduct(head.semi_axes);
      e.semi_axes = Vec3(0.08 + 0.1 * unit(rng), 0.08 + 0.1 * unit(rng), 0.08 + 0.1 * unit(rng)) * min_extent;
      e.rotation = random_rotation(rng);
      blobs.emplace_back(c, e);
    }
  std::shuffle(blobs.begin(), blobs.end(), rng);

  LabelVolume labels(geo);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(labels.size()); ++i) {
    const Vec3 p = geo.to_physical(static_cast<std::size_t>(i));
    if (!head.contains(p)) continue;
    std::uint16_t l = 1;
    for (const auto& [c, e] : blobs)
      if (e.contains(p)) l = static_cast<std::uint16_t>(c);
    labels[static_cast<std::size_t>(i)] = l;
  }

  Phantom out;
  out.modality_a = render_modality(labels, cfg, false, derive_seed(cfg.seed, "phantom-bias-a"),
                                   derive_seed(cfg.seed, "phantom-noise-a"));
  out.modality_b = render_modality(labels, cfg, true, derive_seed(cfg.seed, "phantom-bias-b"),
                                   derive_seed(cfg.seed, "phantom-noise-b"));
  out.labels = std::move(labels);
  return out;
}

TransformStack random_ground_truth_warp(const LabelVolume& labels, WarpKind kind, double magnitude,
                                        std::uint64_t seed) {
  if (!(magnitude >= 0.0)) throw std::invalid_argument("warp magnitude must be non-negative");
  const Geometry& g = labels.geometry();
  std::mt19937_64 rng(derive_seed(seed, "ground-truth-warp"));
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  TransformStack s;
  if (kind == WarpKind::Similarity) {
    const double radius = 0.5 * (g.last_point() - g.origin).norm();
    const double rot = radius > 0.0 ? std::min(0.2, magnitude / radius) : 0.0;
    const double ls = radius > 0.0 ? std::min(std::log(1.05), magnitude / radius) : 0.0;
    SimilarityParams p;
    p.center = g.center();
    p.translation = magnitude * Vec3(sym(rng), sym(rng), sym(rng));
    p.rotation = rot * Vec3(sym(rng), sym(rng), sym(rng));
    p.log_scale = ls * sym(rng);
    s.similarity = p;
  } else {
    BSplineGrid grid = BSplineGrid::covering(g, cube(8));
    Eigen::VectorXd params(grid.parameter_count());
    for (auto& x : params) x = magnitude * sym(rng);
    grid.set_parameters(params);
    s.bspline = std::move(grid);
  }

  std::size_t foreground = 0, kept = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0) continue;
    ++foreground;
    const Vec3 u = g.to_continuous_index(apply_stack(s, g.to_physical(i)));
    bool inside = true;
    for (int a = 0; a < 3; ++a) inside = inside && u[a] >= -0.5 && u[a] <= g.dims[a] - 0.5;
    kept += inside ? 1 : 0;
  }
  if (foreground > 0 && static_cast<double>(kept) < 0.9 * static_cast<double>(foreground))
    throw std::invalid_argument("warp magnitude moves more than 10% of the foreground out of the domain");
  return s;
}

OverlapScores dice_jaccard(const LabelVolume& a, const LabelVolume& b) {
  if (!(a.geometry() == b.geometry())) throw std::invalid_argument("label volumes must share a geometry");
  std::map<std::uint16_t, std::array<std::size_t, 3>> counts;  // |A|, |B|, |A and B|
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != 0) ++counts[a[i]][0];
    if (b[i] != 0) ++counts[b[i]][1];
    if (a[i] != 0 && a[i] == b[i]) ++counts[a[i]][2];
  }
  OverlapScores s;
  for (const auto& [label, c] : counts) {
    const auto sum = static_cast<double>(c[0] + c[1]);
    const auto inter = static_cast<double>(c[2]);
    LabelOverlap o;
    o.label = label;
    o.dice = 2.0 * inter / sum;
    o.jaccard = inter / (sum - inter);
    s.per_label.push_back(o);
    s.mean_dice += o.dice;
    s.mean_jaccard += o.jaccard;
  }
  if (!s.per_label.empty()) {
    s.mean_dice /= static_cast<double>(s.per_label.size());
    s.mean_jaccard /= static_cast<double>(s.per_label.size());
  }
  return s;
}

nlohmann::json to_json(const OverlapScores& s) {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& o : s.per_label) labels.push_back({{"label", o.label}, {"dice", o.dice}, {"jaccard", o.jaccard}});
  return {{"mean_dice", s.mean_dice}, {"mean_jaccard", s.mean_jaccard}, {"labels", labels}};
}

LabelVolume warp_labels(const LabelVolume& labels, const TransformStack& stack, const Geometry& fixed_geometry) {
  LabelVolume out(fixed_geometry);
  const Geometry& src = labels.geometry();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(out.size()); ++i) {
    const Vec3 u = src.to_continuous_index(apply_stack(stack, fixed_geometry.to_physical(static_cast<std::size_t>(i))));
    const int x = static_cast<int>(std::lround(u.x())), y = static_cast<int>(std::lround(u.y())),
              z = static_cast<int>(std::lround(u.z()));
    if (src.contains_index(x, y, z)) out[static_cast<std::size_t>(i)] = labels(x, y, z);
  }
  return out;
}

double mean_displacement(const TransformStack& stack, const Geometry& g) {
  return deterministic_sum(g.count(), [&](std::size_t i) {
           const Vec3 x = g.to_physical(i);
           return (apply_stack(stack, x) - x).norm();
         }) /
         static_cast<double>(g.count());
}

std::vector<SweepRow> perturbation_sweep(MetricKind kind, const Network* net, const MetricContext& ctx,
                                         const TransformStack& stack, Stage stage, int index,
                                         const std::vector<double>& offsets, int bins) {
  if (!stack.has(stage)) throw std::invalid_argument("sweep stage missing from the transform stack");
  if (index < 0 || index >= stack.parameter_count(stage)) throw std::invalid_argument("sweep parameter index out of range");
  TransformStack base = stack;
  for (Stage s : {Stage::Similarity, Stage::BSpline})
    if (base.has(s)) base.set_parameters(s, Eigen::VectorXd::Zero(base.parameter_count(s)));
  std::vector<SweepRow> rows;
  rows.reserve(offsets.size());
  for (double off : offsets) {
    TransformStack t = base;
    Eigen::VectorXd p = t.parameters(stage);
    p[index] = off;
    t.set_parameters(stage, p);
    const auto r = metric_value_and_gradient(kind, net, ctx, t, stage, bins);
    rows.push_back({off, r.value, r.gradient[index]});
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "offset,value,derivative\n";
  out.precision(17);
  for (const auto& r : rows) out << r.offset << ',' << r.value << ',' << r.derivative << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace convreg
