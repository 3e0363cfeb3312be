#include "convreg/registration.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace convreg {

void DescentConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("iteration count must be non-negative");
  if (!(initial_step > 0.0 && min_step > 0.0 && min_step < initial_step))
    throw std::invalid_argument("step lengths must satisfy 0 < min < initial");
  if (!(relaxation > 0.0 && relaxation < 1.0)) throw std::invalid_argument("relaxation must lie in (0, 1)");
}

DescentResult regular_step_descent(const Objective& f, const Eigen::VectorXd& theta0, const DescentConfig& config) {
  config.validate();
  DescentResult r;
  r.theta = theta0;
  r.value = std::numeric_limits<double>::quiet_NaN();
  r.stop_reason = "iteration limit";
  Eigen::VectorXd theta = theta0, g_prev;
  double step = config.initial_step;
  for (int it = 0; it < config.iterations; ++it) {
    const MetricValueAndGradient e = f(theta);
    ++r.evaluations;
    r.trace.push_back(e.value);
    if (r.evaluations == 1 || e.value < r.value) {
      r.value = e.value;
      r.theta = theta;
    }
    const double norm = e.gradient.norm();
    if (norm == 0.0) {
      r.stop_reason = "zero gradient";
      break;
    }
    if (g_prev.size() == e.gradient.size() && e.gradient.dot(g_prev) < 0.0) step *= config.relaxation;
    if (step < config.min_step) {
      r.stop_reason = "minimum step";
      break;
    }
    theta -= (step / norm) * e.gradient;
    g_prev = e.gradient;
  }
  return r;
}

PipelineConfig PipelineConfig::desk() { return {}; }

PipelineConfig PipelineConfig::paper() {
  PipelineConfig c;
  c.control_points = cube(10);
  c.samples = 200000;
  return c;
}

PipelineConfig PipelineConfig::by_scale(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw DataError("unknown scale '" + name + "' (expected desk or paper)");
}

void PipelineConfig::validate() const {
  if (scales < 1) throw std::invalid_argument("scales must be at least 1");
  if (iterations < 1) throw std::invalid_argument("iterations must be at least 1");
  if (control_points.min() < 4) throw std::invalid_argument("the B-spline grid needs at least 4 points per axis");
  if (samples < 1) throw std::invalid_argument("sample count must be positive");
  if (!(initial_step > 0.0 && min_step > 0.0 && min_step < initial_step))
    throw std::invalid_argument("step lengths must satisfy 0 < min < initial");
  if (!(relaxation > 0.0 && relaxation < 1.0)) throw std::invalid_argument("relaxation must lie in (0, 1)");
  if (mi_bins < 2) throw std::invalid_argument("MI needs at least 2 bins");
  if (warped_channel != 0 && warped_channel != 1) throw std::invalid_argument("warped channel must be 0 or 1");
  if (!similarity_stage && !bspline_stage) throw std::invalid_argument("at least one stage must be enabled");
}

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"metric", to_string(c.metric)},
          {"scales", c.scales},
          {"iterations", c.iterations},
          {"control_points", {c.control_points.x, c.control_points.y, c.control_points.z}},
          {"samples", c.samples},
          {"initial_step", c.initial_step},
          {"min_step", c.min_step},
          {"relaxation", c.relaxation},
          {"mi_bins", c.mi_bins},
          {"mask_threshold", c.mask_threshold},
          {"warped_channel", c.warped_channel},
          {"similarity_stage", c.similarity_stage},
          {"bspline_stage", c.bspline_stage}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig c) {
  try {
    if (!j.is_object()) throw DataError("pipeline config must be an object");
    if (j.contains("metric")) c.metric = metric_kind_from_string(j.at("metric").get<std::string>());
    c.scales = j.value("scales", c.scales);
    c.iterations = j.value("iterations", c.iterations);
    if (j.contains("control_points")) {
      const auto& cp = j.at("control_points");
      if (cp.is_number_integer()) {
        c.control_points = cube(cp.get<int>());
      } else {
        const auto v = cp.get<std::vector<int>>();
        if (v.size() != 3) throw DataError("control_points needs 1 or 3 entries");
        c.control_points = {v[0], v[1], v[2]};
      }
    }
    c.samples = j.value("samples", c.samples);
    c.initial_step = j.value("initial_step", c.initial_step);
    c.min_step = j.value("min_step", c.min_step);
    c.relaxation = j.value("relaxation", c.relaxation);
    c.mi_bins = j.value("mi_bins", c.mi_bins);
    c.mask_threshold = j.value("mask_threshold", c.mask_threshold);
    c.warped_channel = j.value("warped_channel", c.warped_channel);
    c.similarity_stage = j.value("similarity_stage", c.similarity_stage);
    c.bspline_stage = j.value("bspline_stage", c.bspline_stage);
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad pipeline config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("bad pipeline config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const RegistrationReport& r) {
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& t : r.traces)
    traces.push_back({{"stage", to_string(t.stage)},
                      {"level", t.level},
                      {"evaluations", t.evaluations},
                      {"stop_reason", t.stop_reason},
                      {"energy", t.energy}});
  nlohmann::json guard = nlohmann::json::array();
  for (const auto& [initial, final] : r.stage_guard) guard.push_back({{"initial", initial}, {"final", final}});
  return {{"metric", to_string(r.metric)},
          {"metric_evaluations", r.metric_evaluations},
          {"network_backward_passes", r.network_backward_passes},
          {"traces", traces},
          {"stage_guard", guard},
          {"transform", to_json(r.transform)}};
}

nlohmann::json timings_json(const RegistrationReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [stage, seconds] : r.stage_seconds) j[stage] = seconds;
  return j;
}

BSplineGrid bspline_level_grid(const Geometry& domain, Dims3 fine_dims, int level) {
  const BSplineGrid fine = BSplineGrid::covering(domain, fine_dims);
  if (level == 0) return fine;
  Dims3 d = fine_dims;
  for (int l = 0; l < level; ++l) d = {(d.x - 3 + 1) / 2 + 3, (d.y - 3 + 1) / 2 + 3, (d.z - 3 + 1) / 2 + 3};
  const Vec3 h = std::ldexp(1.0, level) * fine.control_spacing();
  return BSplineGrid(d, h, domain.origin - h);
}

namespace {

struct Level {
  int index = 0;
  MetricContext ctx;
};

/// Per-parameter multipliers mapping parameters onto comparable millimetre units.
Eigen::VectorXd parameter_scaling(Stage stage, int count, const Geometry& g) {
  Eigen::VectorXd w = Eigen::VectorXd::Ones(count);
  if (stage == Stage::Similarity) {
    const double length = 0.5 * (g.last_point() - g.origin).norm();
    for (int i = 3; i < 7; ++i) w[i] = length;
  }
  return w;
}

class Pipeline {
 public:
  Pipeline(const Volume& fixed, const Volume& moving, const Network* net, const PipelineConfig& cfg,
           std::uint64_t seed)
      : net_(net), cfg_(cfg), rng_(derive_seed(seed, "registration-samples")) {
    cfg_.validate();
    if (cfg_.metric == MetricKind::Cnn && !net_) throw std::invalid_argument("the CNN metric needs a network");
    for (int l = cfg_.scales - 1; l >= 0; --l) {
      const int factor = 1 << l;
      if (factor > fixed.dims().min() || factor > moving.dims().min())
        throw std::invalid_argument("too many scales for the image size");
      Volume f = l == 0 ? fixed : downsample(fixed, factor);
      Volume m = l == 0 ? moving : downsample(moving, factor);
      if (net_ && cfg_.metric == MetricKind::Cnn && f.dims().min() < net_->patch_size())
        throw std::invalid_argument("network patch size exceeds the coarsest pyramid level");
      std::optional<MaskVolume> mask;
      if (cfg_.metric == MetricKind::MiMasked) mask = head_mask(f, cfg_.mask_threshold);
      Level lv;
      lv.index = l;
      lv.ctx = MetricContext::make(std::move(f), std::move(m), std::move(mask));
      lv.ctx.warped_channel = cfg_.warped_channel;
      levels_.push_back(std::move(lv));
    }
  }

  RegistrationReport run(const Geometry& fixed_geometry) {
    report_.metric = cfg_.metric;
    TransformStack stack;
    SimilarityParams sim;
    sim.center = fixed_geometry.center();
    stack.similarity = sim;
    if (cfg_.similarity_stage) timed("similarity", [&] { run_stage(stack, Stage::Similarity, fixed_geometry); });
    if (cfg_.bspline_stage) timed("bspline", [&] { run_stage(stack, Stage::BSpline, fixed_geometry); });
    report_.transform = stack;
    return std::move(report_);
  }

 private:
  template <class Fn>
  void timed(const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    report_.stage_seconds.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  MetricValueAndGradient evaluate(MetricContext& ctx, const TransformStack& stack, Stage stage) {
    const MaskVolume* mask = ctx.mask ? &*ctx.mask : nullptr;
    ctx.sample_points = draw_sample_points(ctx.fixed.geometry(), cfg_.samples, rng_, mask);
    ++report_.metric_evaluations;
    if (cfg_.metric == MetricKind::Cnn) ++report_.network_backward_passes;
    return metric_value_and_gradient(cfg_.metric, net_, ctx, stack, stage, cfg_.mi_bins);
  }

  // Forward pass only for the CNN, so guard checks add no backward passes.
  double value_only(const MetricContext& ctx, const TransformStack& stack, Stage stage) const {
    if (cfg_.metric == MetricKind::Cnn) return cnn_metric_value(*net_, ctx, stack);
    return metric_value_and_gradient(cfg_.metric, net_, ctx, stack, stage, cfg_.mi_bins).value;
  }

  void run_stage(TransformStack& stack, Stage stage, const Geometry& domain) {
    const TransformStack initial = [&] {
      TransformStack s = stack;
      if (stage == Stage::BSpline) s.bspline = bspline_level_grid(domain, cfg_.control_points, 0);
      return s;
    }();
    for (std::size_t li = 0; li < levels_.size(); ++li) {
      Level& lv = levels_[li];
      if (stage == Stage::BSpline) {
        if (li == 0) {
          stack.bspline = bspline_level_grid(domain, cfg_.control_points, lv.index);
        } else {
          const BSplineGrid target = bspline_level_grid(domain, cfg_.control_points, lv.index);
          stack.bspline = stack.bspline->refined(target.control_dims());
        }
      }
      const Eigen::VectorXd w = parameter_scaling(stage, stack.parameter_count(stage), domain);
      DescentConfig dc;
      dc.iterations = cfg_.iterations;
      dc.initial_step = cfg_.initial_step * (1 << lv.index);
      dc.min_step = cfg_.min_step;
      dc.relaxation = cfg_.relaxation;
      TransformStack work = stack;
      const Objective objective = [&](const Eigen::VectorXd& phi) {
        work.set_parameters(stage, phi.cwiseQuotient(w));
        MetricValueAndGradient r = evaluate(lv.ctx, work, stage);
        r.gradient = r.gradient.cwiseQuotient(w);
        return r;
      };
      const DescentResult d = regular_step_descent(objective, stack.parameters(stage).cwiseProduct(w), dc);
      stack.set_parameters(stage, d.theta.cwiseQuotient(w));
      report_.traces.push_back({stage, lv.index, d.trace, d.evaluations, d.stop_reason});
    }
    // Keep the stage's starting transform if the optimized one is not better
    // at the finest scale, compared on one shared sample set.
    MetricContext& fine = levels_.back().ctx;
    const MaskVolume* mask = fine.mask ? &*fine.mask : nullptr;
    fine.sample_points = draw_sample_points(fine.fixed.geometry(), cfg_.samples, rng_, mask);
    const double e_initial = value_only(fine, initial, stage);
    const double e_final = value_only(fine, stack, stage);
    report_.stage_guard.emplace_back(e_initial, std::min(e_initial, e_final));
    if (e_final > e_initial) stack = initial;
  }

  const Network* net_;
  PipelineConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<Level> levels_;  // coarse to fine
  RegistrationReport report_;
};

}  // namespace

RegistrationReport register_images(const Volume& fixed, const Volume& moving, const Network* net,
                                   const PipelineConfig& config, std::uint64_t seed) {
  if (fixed.empty() || moving.empty()) throw std::invalid_argument("registration needs two volumes");
  Pipeline p(fixed, moving, net, config, seed);
  return p.run(fixed.geometry());
}

}  // namespace convreg
