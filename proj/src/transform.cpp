#include "convreg/transform.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace convreg {

namespace {

inline double snap(double u) {
  const double r = std::nearbyint(u);
  return std::abs(u - r) < 1e-9 ? r : u;
}

Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << 1, 0, 0, 0, c, -s, 0, s, c;
  return m;
}
Mat3 rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << c, 0, s, 0, 1, 0, -s, 0, c;
  return m;
}
Mat3 rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << c, -s, 0, s, c, 0, 0, 0, 1;
  return m;
}
Mat3 drot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << 0, 0, 0, 0, -s, -c, 0, c, -s;
  return m;
}
Mat3 drot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << -s, 0, c, 0, 0, 0, -c, 0, -s;
  return m;
}
Mat3 drot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 m;
  m << -s, -c, 0, c, -s, 0, 0, 0, 0;
  return m;
}

}  // namespace

// ---------------------------------------------------------------- similarity

Mat3 SimilarityParams::rotation_matrix() const {
  return rot_z(rotation.z()) * rot_y(rotation.y()) * rot_x(rotation.x());
}

Eigen::VectorXd SimilarityParams::parameters() const {
  Eigen::VectorXd p(kParameterCount);
  p << translation, rotation, log_scale;
  return p;
}

void SimilarityParams::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != kParameterCount) throw std::invalid_argument("similarity expects 7 parameters");
  translation = p.segment<3>(0);
  rotation = p.segment<3>(3);
  log_scale = p(6);
}

Vec3 apply_similarity(const SimilarityParams& p, const Vec3& x) {
  return p.center + p.scale() * (p.rotation_matrix() * (x - p.center)) + p.translation;
}

SimilarityJacobian similarity_jacobian(const SimilarityParams& p, const Vec3& x) {
  const Vec3 v = x - p.center;
  const double s = p.scale();
  const Mat3 rx = rot_x(p.rotation.x()), ry = rot_y(p.rotation.y()), rz = rot_z(p.rotation.z());
  SimilarityJacobian j;
  j.block<3, 3>(0, 0).setIdentity();
  j.col(3) = s * (rz * ry * drot_x(p.rotation.x()) * v);
  j.col(4) = s * (rz * drot_y(p.rotation.y()) * rx * v);
  j.col(5) = s * (drot_z(p.rotation.z()) * ry * rx * v);
  j.col(6) = s * (rz * ry * rx * v);
  return j;
}

// ---------------------------------------------------------------- B-spline

std::array<double, 4> cubic_bspline_weights(double t) {
  const double u = 1.0 - t;
  const double t2 = t * t, t3 = t2 * t;
  return {u * u * u / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
          t3 / 6.0};
}

std::array<double, 4> cubic_bspline_derivatives(double t) {
  const double u = 1.0 - t;
  return {-0.5 * u * u, 0.5 * (3.0 * t * t - 4.0 * t), 0.5 * (-3.0 * t * t + 2.0 * t + 1.0), 0.5 * t * t};
}

BSplineGrid::BSplineGrid(Dims3 control_dims, Vec3 control_spacing, Vec3 control_origin)
    : dims_(control_dims), spacing_(std::move(control_spacing)), origin_(std::move(control_origin)) {
  if (dims_.x < 4 || dims_.y < 4 || dims_.z < 4) throw std::invalid_argument("B-spline grid needs >= 4 control points per axis");
  if (!(spacing_.array() > 0.0).all()) throw std::invalid_argument("B-spline control spacing must be positive");
  params_ = Eigen::VectorXd::Zero(parameter_count());
}

BSplineGrid BSplineGrid::covering(const Geometry& domain, Dims3 control_dims) {
  if (control_dims.x < 4 || control_dims.y < 4 || control_dims.z < 4)
    throw std::invalid_argument("B-spline grid needs >= 4 control points per axis");
  const Vec3 extent = domain.last_point() - domain.origin;
  Vec3 h;
  for (int a = 0; a < 3; ++a) {
    const int intervals = control_dims[a] - 3;
    h(a) = extent(a) > 0.0 ? extent(a) / intervals : domain.spacing(a);
  }
  return BSplineGrid(control_dims, h, domain.origin - h);
}

BSplineGrid BSplineGrid::coarse_for(const Geometry& domain, Dims3 fine_dims) {
  const BSplineGrid fine = covering(domain, fine_dims);
  Dims3 cd;
  int* out[3] = {&cd.x, &cd.y, &cd.z};
  for (int a = 0; a < 3; ++a) *out[a] = (fine_dims[a] - 3 + 1) / 2 + 3;
  const Vec3 h = 2.0 * fine.control_spacing();
  return BSplineGrid(cd, h, domain.origin - h);
}

void BSplineGrid::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != parameter_count()) throw std::invalid_argument("B-spline parameter count mismatch");
  params_ = p;
}

bool BSplineGrid::locate(const Vec3& x, std::array<int, 3>& base, Vec3& t) const {
  for (int a = 0; a < 3; ++a) {
    const double u = snap((x(a) - origin_(a)) / spacing_(a));
    const int n = dims_[a];
    if (!(u >= 1.0 && u <= n - 2.0)) return false;
    int b = static_cast<int>(std::floor(u));
    if (b > n - 3) b = n - 3;
    base[a] = b;
    t(a) = u - b;
  }
  return true;
}

BSplineSupport BSplineGrid::support(const Vec3& x) const {
  BSplineSupport s;
  std::array<int, 3> base{};
  Vec3 t;
  if (!locate(x, base, t)) return s;
  const auto wx = cubic_bspline_weights(t.x()), wy = cubic_bspline_weights(t.y()), wz = cubic_bspline_weights(t.z());
  for (int c = 0; c < 4; ++c)
    for (int b = 0; b < 4; ++b)
      for (int a = 0; a < 4; ++a) {
        s.point[s.count] = point_index(base[0] - 1 + a, base[1] - 1 + b, base[2] - 1 + c);
        s.weight[s.count] = wx[a] * wy[b] * wz[c];
        ++s.count;
      }
  return s;
}

Vec3 BSplineGrid::displacement(const Vec3& x) const {
  const BSplineSupport s = support(x);
  Vec3 d = Vec3::Zero();
  for (int m = 0; m < s.count; ++m) d += s.weight[m] * params_.segment<3>(3 * s.point[m]);
  return d;
}

Mat3 BSplineGrid::displacement_jacobian(const Vec3& x) const {
  Mat3 jac = Mat3::Zero();
  std::array<int, 3> base{};
  Vec3 t;
  if (!locate(x, base, t)) return jac;
  const std::array<double, 4> w[3] = {cubic_bspline_weights(t.x()), cubic_bspline_weights(t.y()),
                                      cubic_bspline_weights(t.z())};
  const std::array<double, 4> dw[3] = {cubic_bspline_derivatives(t.x()), cubic_bspline_derivatives(t.y()),
                                       cubic_bspline_derivatives(t.z())};
  for (int c = 0; c < 4; ++c)
    for (int b = 0; b < 4; ++b)
      for (int a = 0; a < 4; ++a) {
        const Vec3 d = params_.segment<3>(3 * point_index(base[0] - 1 + a, base[1] - 1 + b, base[2] - 1 + c));
        const Vec3 grad(dw[0][a] * w[1][b] * w[2][c] / spacing_.x(), w[0][a] * dw[1][b] * w[2][c] / spacing_.y(),
                        w[0][a] * w[1][b] * dw[2][c] / spacing_.z());
        jac += d * grad.transpose();
      }
  return jac;
}

BSplineGrid BSplineGrid::refined(Dims3 fine_dims) const {
  BSplineGrid fine(fine_dims, 0.5 * spacing_, origin_ + 0.5 * spacing_);
  // Separable subdivision: x, then y, then z. Fine index j sits at coarse
  // coordinate (j+1)/2; missing coarse neighbours lie outside the support.
  std::vector<Vec3> cur(static_cast<std::size_t>(point_count()));
  for (int p = 0; p < point_count(); ++p) cur[static_cast<std::size_t>(p)] = control_displacement(p);
  int n[3] = {dims_.x, dims_.y, dims_.z};
  for (int axis = 0; axis < 3; ++axis) {
    int m[3] = {n[0], n[1], n[2]};
    m[axis] = fine_dims[axis];
    std::vector<Vec3> next(static_cast<std::size_t>(m[0]) * m[1] * m[2], Vec3::Zero());
    auto at = [&](const std::vector<Vec3>& v, const int* sz, int i, int j, int k) -> Vec3 {
      return v[static_cast<std::size_t>(i + sz[0] * (j + sz[1] * k))];
    };
    for (int k = 0; k < m[2]; ++k)
      for (int j = 0; j < m[1]; ++j)
        for (int i = 0; i < m[0]; ++i) {
          int idx[3] = {i, j, k};
          const int f = idx[axis];
          auto coarse = [&](int ci) -> Vec3 {
            if (ci < 0 || ci >= n[axis]) return Vec3::Zero();
            int src[3] = {i, j, k};
            src[axis] = ci;
            return at(cur, n, src[0], src[1], src[2]);
          };
          Vec3 v;
          if ((f + 1) % 2 == 0) {
            const int ci = (f + 1) / 2;
            v = (coarse(ci - 1) + 6.0 * coarse(ci) + coarse(ci + 1)) / 8.0;
          } else {
            const int ci = f / 2;
            v = 0.5 * (coarse(ci) + coarse(ci + 1));
          }
          next[static_cast<std::size_t>(i + m[0] * (j + m[1] * k))] = v;
        }
    cur = std::move(next);
    n[axis] = m[axis];
  }
  for (int p = 0; p < fine.point_count(); ++p) fine.set_control_displacement(p, cur[static_cast<std::size_t>(p)]);
  return fine;
}

Vec3 apply_bspline(const BSplineGrid& g, const Vec3& x) { return x + g.displacement(x); }

BSplineSupport bspline_jacobian(const BSplineGrid& g, const Vec3& x) { return g.support(x); }

// ---------------------------------------------------------------- stack

std::string to_string(Stage s) { return s == Stage::Similarity ? "similarity" : "bspline"; }

Stage stage_from_string(const std::string& s) {
  if (s == "similarity") return Stage::Similarity;
  if (s == "bspline") return Stage::BSpline;
  throw std::invalid_argument("unknown transform stage: " + s);
}

int TransformStack::parameter_count(Stage s) const {
  if (!has(s)) throw std::invalid_argument("transform stack has no " + to_string(s) + " stage");
  return s == Stage::Similarity ? SimilarityParams::kParameterCount : bspline->parameter_count();
}

Eigen::VectorXd TransformStack::parameters(Stage s) const {
  if (!has(s)) throw std::invalid_argument("transform stack has no " + to_string(s) + " stage");
  return s == Stage::Similarity ? similarity->parameters() : bspline->parameters();
}

void TransformStack::set_parameters(Stage s, const Eigen::VectorXd& p) {
  if (!has(s)) throw std::invalid_argument("transform stack has no " + to_string(s) + " stage");
  if (s == Stage::Similarity)
    similarity->set_parameters(p);
  else
    bspline->set_parameters(p);
}

Vec3 apply_stack(const TransformStack& s, const Vec3& x) {
  Vec3 y = s.similarity ? apply_similarity(*s.similarity, x) : x;
  if (s.bspline) y += s.bspline->displacement(y);
  return y;
}

StageJacobian jacobian_stack(const TransformStack& s, const Vec3& x, Stage active) {
  if (!s.has(active)) throw std::invalid_argument("active stage " + to_string(active) + " not in stack");
  StageJacobian j;
  j.stage = active;
  if (active == Stage::Similarity) {
    j.dense = similarity_jacobian(*s.similarity, x);
    if (s.bspline) {
      const Vec3 y = apply_similarity(*s.similarity, x);
      j.dense = (Mat3::Identity() + s.bspline->displacement_jacobian(y)) * j.dense;
    }
  } else {
    const Vec3 y = s.similarity ? apply_similarity(*s.similarity, x) : x;
    j.sparse = s.bspline->support(y);
  }
  return j;
}

void StageJacobian::accumulate(const Vec3& row, double scale, std::span<double> grad) const {
  if (stage == Stage::Similarity) {
    const Eigen::Matrix<double, 1, 7> r = row.transpose() * dense;
    for (int k = 0; k < 7; ++k) grad[static_cast<std::size_t>(k)] += scale * r(k);
  } else {
    for (int m = 0; m < sparse.count; ++m) {
      const double w = scale * sparse.weight[m];
      const std::size_t base = 3 * static_cast<std::size_t>(sparse.point[m]);
      grad[base] += w * row.x();
      grad[base + 1] += w * row.y();
      grad[base + 2] += w * row.z();
    }
  }
}

Eigen::MatrixXd StageJacobian::to_dense(int parameter_count) const {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(3, parameter_count);
  if (stage == Stage::Similarity) {
    m = dense;
  } else {
    for (int k = 0; k < sparse.count; ++k)
      for (int d = 0; d < 3; ++d) m(d, 3 * sparse.point[k] + d) += sparse.weight[k];
  }
  return m;
}

Volume resample(const Volume& moving, const TransformStack& s, const Geometry& fixed_geometry) {
  return resample(moving, [&s](const Vec3& x) { return apply_stack(s, x); }, fixed_geometry);
}

// ---------------------------------------------------------------- JSON

namespace {

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw DataError("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

}  // namespace

nlohmann::json to_json(const TransformStack& s) {
  nlohmann::json stages = nlohmann::json::array();
  if (s.similarity) {
    const Eigen::VectorXd p = s.similarity->parameters();
    stages.push_back({{"type", "similarity"},
                      {"parameters", std::vector<double>(p.data(), p.data() + p.size())},
                      {"center", vec_json(s.similarity->center)}});
  }
  if (s.bspline) {
    const auto& g = *s.bspline;
    const auto& p = g.parameters();
    stages.push_back({{"type", "bspline"},
                      {"control_dims", {g.control_dims().x, g.control_dims().y, g.control_dims().z}},
                      {"control_spacing", vec_json(g.control_spacing())},
                      {"control_origin", vec_json(g.control_origin())},
                      {"parameters", std::vector<double>(p.data(), p.data() + p.size())}});
  }
  return {{"stages", stages}};
}

TransformStack transform_stack_from_json(const nlohmann::json& j) {
  TransformStack s;
  try {
    for (const auto& st : j.at("stages")) {
      const auto type = st.at("type").get<std::string>();
      const auto params = st.at("parameters").get<std::vector<double>>();
      const Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(params.data(), static_cast<Eigen::Index>(params.size()));
      if (type == "similarity") {
        SimilarityParams sp;
        sp.center = json_vec(st.at("center"));
        sp.set_parameters(p);
        s.similarity = sp;
      } else if (type == "bspline") {
        const auto d = st.at("control_dims").get<std::vector<int>>();
        if (d.size() != 3) throw DataError("control_dims needs 3 entries");
        BSplineGrid g({d[0], d[1], d[2]}, json_vec(st.at("control_spacing")), json_vec(st.at("control_origin")));
        g.set_parameters(p);
        s.bspline = g;
      } else {
        throw DataError("unknown transform stage type: " + type);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed transform JSON: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("invalid transform JSON: ") + e.what());
  }
  return s;
}

}  // namespace convreg
