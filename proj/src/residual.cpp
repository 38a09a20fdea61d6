#include "ibn/residual.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <Eigen/SparseCholesky>

namespace ibn {

namespace {
using Triplet = Eigen::Triplet<double>;
constexpr int kMaxLocal = 12;
}  // namespace

std::vector<int> PdeProblem::boundary_components() const {
  if (kind == PdeKind::Poisson) return {0};
  return {0, 1};
}

void PdeProblem::validate() const {
  if (alpha == 0.0 && beta == 0.0) throw ConfigError("PdeProblem: alpha and beta both zero");
  if (kind == PdeKind::NavierStokes && !(viscosity > 0.0)) {
    throw ConfigError("PdeProblem: Navier-Stokes needs a positive viscosity");
  }
  if (!(continuity_weight > 0.0)) throw ConfigError("PdeProblem: continuity_weight must be positive");
  if (interior_value.size() != n_dof()) {
    throw ConfigError("PdeProblem: interior_value needs one entry per degree of freedom");
  }
  if (interior_weight.size() != 0 && interior_weight.size() != n_dof()) {
    throw ConfigError("PdeProblem: interior_weight needs one entry per degree of freedom");
  }
  if (quadrature_order < 1 || quadrature_order > 3) {
    throw ConfigError("PdeProblem: quadrature order must be 1, 2 or 3");
  }
  for (const auto& w : walls) {
    if (w.component < 0 || w.component >= n_dof()) {
      throw ConfigError("PdeProblem: wall condition on a nonexistent component");
    }
    if (!w.value) throw ConfigError("PdeProblem: wall condition without a value");
  }
}

PdeProblem PdeProblem::poisson(double f, double g, double g_in) {
  PdeProblem p;
  p.kind = PdeKind::Poisson;
  p.forcing = [f](const Vec2&) { return f; };
  p.boundary_value = [g](const Vec2&) { return g; };
  p.interior_value = VecX::Constant(1, g_in);
  return p;
}

int DofConstraints::fixed_count() const {
  return static_cast<int>(std::count(fixed.begin(), fixed.end(), 1));
}

void DofConstraints::apply(VecX& u) const {
  for (std::size_t k = 0; k < fixed.size(); ++k) {
    if (fixed[k]) u(static_cast<long>(k)) = values(static_cast<long>(k));
  }
}

void DofConstraints::zero_fixed(VecX& g) const {
  for (std::size_t k = 0; k < fixed.size(); ++k) {
    if (fixed[k]) g(static_cast<long>(k)) = 0.0;
  }
}

DofConstraints wall_constraints(const BackgroundGrid& grid, const PdeProblem& prob) {
  const int nd = prob.n_dof();
  DofConstraints c;
  c.fixed.assign(static_cast<std::size_t>(grid.num_nodes()) * nd, 0);
  c.values = VecX::Zero(static_cast<long>(grid.num_nodes()) * nd);
  for (const auto& wall : prob.walls) {
    for (int n = 0; n < grid.num_nodes(); ++n) {
      if (!grid.on_side(n, wall.side)) continue;
      const int k = n * nd + wall.component;
      c.fixed[k] = 1;
      c.values(k) = wall.value(grid.node_position(n));
    }
  }
  return c;
}

ImmersedProblem::ImmersedProblem(BackgroundGrid grid, OccupancyField occ,
                                 BoundaryPointCloud cloud, PdeProblem prob, LossWeights weights)
    : grid_(std::move(grid)),
      occ_(std::move(occ)),
      cloud_(std::move(cloud)),
      prob_(std::move(prob)),
      weights_(weights),
      table_(grid_, gauss_rule(prob_.quadrature_order)) {
  prob_.validate();
  if (!occ_.classified() || occ_.chi.size() != grid_.num_nodes()) {
    throw StateError("ImmersedProblem: occupancy is not classified for this grid");
  }
  if (!cloud_.empty() && cloud_.dim() != 2) {
    throw ConfigError("ImmersedProblem: assembly needs a 2D point cloud");
  }
  if (!cloud_.empty()) cloud_.validate();

  gauss_mask_.assign(grid_.num_elements(), 0);
  for (int e = 0; e < grid_.num_elements(); ++e) {
    const ElementLabel label = occ_.element_labels[e];
    if (label == ElementLabel::Inactive) continue;
    std::uint32_t mask = 0;
    for (int q = 0; q < table_.rule.size(); ++q) {
      const bool keep = label == ElementLabel::Active ||
                        occupancy_at(occ_, grid_, e, table_.rule.points.col(q)) <= occ_.threshold;
      if (keep) mask |= 1u << q;
    }
    gauss_mask_[e] = mask;
    if (mask) elements_.push_back(e);
  }

  cloud_loc_.reserve(cloud_.size());
  for (int i = 0; i < cloud_.size(); ++i) {
    const Vec2 p(cloud_.points(i, 0), cloud_.points(i, 1));
    if (!grid_.contains(p)) {
      std::ostringstream msg;
      msg << "cloud point " << i << " (" << p.x() << ", " << p.y() << ") lies outside the grid";
      throw DomainError(msg.str());
    }
    cloud_loc_.push_back(grid_.locate(p));
  }

  constraints_ = wall_constraints(grid_, prob_);
  const int nd = n_dof();
  row_active_.assign(static_cast<std::size_t>(size()), 1);
  for (int n = 0; n < grid_.num_nodes(); ++n) {
    for (int c = 0; c < nd; ++c) {
      const int k = n * nd + c;
      if (occ_.node_in_object[n] || constraints_.fixed[k]) row_active_[k] = 0;
    }
  }
  const double h = grid_.h();
  pressure_eps_ = prob_.pressure_stabilization * h * h;
}

double ImmersedProblem::boundary_weight() const {
  return weights_.inverse_h_scaling ? weights_.boundary / grid_.h() : weights_.boundary;
}

double ImmersedProblem::exterior_weight() const {
  return weights_.inverse_h_scaling ? weights_.exterior / grid_.h() : weights_.exterior;
}

double ImmersedProblem::pde_weight() const {
  if (!weights_.normalize_pde) return weights_.pde;
  const double h = grid_.h();
  return weights_.pde / (h * h);
}

double ImmersedProblem::weak_boundary_weight() const {
  return weights_.weak_boundary / grid_.h();
}

VecX ImmersedProblem::initial_guess() const {
  VecX u = VecX::Zero(size());
  const int nd = n_dof();
  for (int n = 0; n < grid_.num_nodes(); ++n) {
    if (!occ_.node_in_object[n]) continue;
    for (int c = 0; c < nd; ++c) u(n * nd + c) = prob_.interior_value(c);
  }
  constraints_.apply(u);
  return u;
}

template <typename Fn>
void ImmersedProblem::for_each_gauss_point(Fn&& fn) const {
  for (int e : elements_) {
    const std::uint32_t mask = gauss_mask_[e];
    for (int q = 0; q < table_.rule.size(); ++q) {
      if (mask & (1u << q)) fn(e, q);
    }
  }
}

void ImmersedProblem::local_residual(int e, int q, const double* uloc, double* rloc,
                                     double* jloc) const {
  const double w = table_.rule.weights(q) * table_.jacobian;
  const Eigen::Vector4d& n = table_.values[q];
  const Eigen::Matrix<double, 4, 2>& dn = table_.gradients[q];
  const Vec2 x = grid_.to_physical(e, table_.rule.points.col(q));

  if (prob_.kind == PdeKind::Poisson) {
    Vec2 g = Vec2::Zero();
    for (int b = 0; b < 4; ++b) g += uloc[b] * dn.row(b).transpose();
    const double f = prob_.forcing(x);
    for (int a = 0; a < 4; ++a) {
      rloc[a] = w * (dn.row(a).dot(g) - n(a) * f);
      if (jloc) {
        for (int b = 0; b < 4; ++b) jloc[a * 4 + b] = w * dn.row(a).dot(dn.row(b));
      }
    }
    return;
  }

  // Navier-Stokes, local dof index = 3 * node + component.
  Vec2 vel = Vec2::Zero();
  Eigen::Matrix2d grad = Eigen::Matrix2d::Zero();  // grad(c, d) = d u_c / d x_d
  double p = 0.0;
  Vec2 gp = Vec2::Zero();
  for (int b = 0; b < 4; ++b) {
    const double ux = uloc[3 * b];
    const double uy = uloc[3 * b + 1];
    const double pb = uloc[3 * b + 2];
    vel += n(b) * Vec2(ux, uy);
    grad.row(0) += ux * dn.row(b);
    grad.row(1) += uy * dn.row(b);
    p += n(b) * pb;
    gp += pb * dn.row(b).transpose();
  }
  const double nu = prob_.viscosity;
  const double eps = pressure_eps_;
  const Vec2 f(prob_.forcing(x), prob_.forcing_y(x));
  const double div = grad(0, 0) + grad(1, 1);
  const double cw = prob_.continuity_weight;

  for (int a = 0; a < 4; ++a) {
    for (int c = 0; c < 2; ++c) {
      const double conv = vel.dot(grad.row(c));
      rloc[3 * a + c] = w * (n(a) * conv + nu * dn.row(a).dot(grad.row(c)) - p * dn(a, c) -
                             n(a) * f(c));
    }
    rloc[3 * a + 2] = cw * w * (n(a) * div + eps * dn.row(a).dot(gp));
  }
  if (!jloc) return;

  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      const double adv_b = vel.dot(dn.row(b));
      const double diff_ab = dn.row(a).dot(dn.row(b));
      for (int c = 0; c < 2; ++c) {
        double* row = jloc + (3 * a + c) * kMaxLocal;
        for (int d = 0; d < 2; ++d) {
          double v = n(a) * n(b) * grad(c, d);
          if (c == d) v += n(a) * adv_b + nu * diff_ab;
          row[3 * b + d] = w * v;
        }
        row[3 * b + 2] = -w * n(b) * dn(a, c);
      }
      double* row = jloc + (3 * a + 2) * kMaxLocal;
      row[3 * b] = cw * w * n(a) * dn(b, 0);
      row[3 * b + 1] = cw * w * n(a) * dn(b, 1);
      row[3 * b + 2] = cw * w * eps * diff_ab;
    }
  }
}

ImmersedProblem::WeakBoundaryStencil ImmersedProblem::weak_stencil(int i) const {
  const auto& loc = cloud_loc_[i];
  WeakBoundaryStencil st;
  st.nodes = grid_.element_nodes(loc.element);
  st.value = shape_values(loc.local);
  const Eigen::Matrix<double, 4, 2> dn = shape_gradients(loc.local, grid_.hx(), grid_.hy());
  const Vec2 normal(cloud_.normals(i, 0), cloud_.normals(i, 1));
  st.trace = prob_.alpha * st.value + prob_.beta * (dn * normal);
  return st;
}

VecX ImmersedProblem::pde_residual(const VecX& u) const {
  if (u.size() != size()) throw ConfigError("pde_residual: field size mismatch");
  const int nd = n_dof();
  const int nl = 4 * nd;
  VecX r = VecX::Zero(size());
  double uloc[kMaxLocal];
  double rloc[kMaxLocal];
  for_each_gauss_point([&](int e, int q) {
    const auto nodes = grid_.element_nodes(e);
    for (int a = 0; a < 4; ++a) {
      for (int c = 0; c < nd; ++c) uloc[a * nd + c] = u(nodes[a] * nd + c);
    }
    local_residual(e, q, uloc, rloc, nullptr);
    for (int k = 0; k < nl; ++k) r(nodes[k / nd] * nd + k % nd) += rloc[k];
  });
  if (weak_boundary_weight() != 0.0 && !cloud_.empty()) {
    const BoundaryPenalty bp = boundary_penalty(u);
    const auto comps = prob_.boundary_components();
    const int nc = static_cast<int>(comps.size());
    const double lw = weak_boundary_weight();
    for (int i = 0; i < cloud_.size(); ++i) {
      const auto& loc = cloud_loc_[i];
      const auto nodes = grid_.element_nodes(loc.element);
      const Eigen::Vector4d n = shape_values(loc.local);
      for (int k = 0; k < nc; ++k) {
        const double b = lw * cloud_.areas(i) * bp.residuals(i * nc + k);
        for (int a = 0; a < 4; ++a) r(nodes[a] * nd + comps[k]) += n(a) * b;
      }
    }
  }
  for (int k = 0; k < size(); ++k) {
    if (!row_active_[k]) r(k) = 0.0;
  }
  return r;
}

SparseMatrix ImmersedProblem::pde_jacobian(const VecX& u) const {
  const int nd = n_dof();
  const int nl = 4 * nd;
  const int stride = prob_.kind == PdeKind::Poisson ? 4 : kMaxLocal;
  std::vector<Triplet> t;
  t.reserve(elements_.size() * table_.rule.size() * nl * nl);
  double uloc[kMaxLocal];
  double rloc[kMaxLocal];
  double jloc[kMaxLocal * kMaxLocal];
  for_each_gauss_point([&](int e, int q) {
    const auto nodes = grid_.element_nodes(e);
    for (int a = 0; a < 4; ++a) {
      for (int c = 0; c < nd; ++c) uloc[a * nd + c] = u(nodes[a] * nd + c);
    }
    local_residual(e, q, uloc, rloc, jloc);
    for (int i = 0; i < nl; ++i) {
      const int row = nodes[i / nd] * nd + i % nd;
      if (!row_active_[row]) continue;
      for (int j = 0; j < nl; ++j) {
        t.emplace_back(row, nodes[j / nd] * nd + j % nd, jloc[i * stride + j]);
      }
    }
  });
  if (weak_boundary_weight() != 0.0) {
    const double lw = weak_boundary_weight();
    for (int i = 0; i < cloud_.size(); ++i) {
      const WeakBoundaryStencil st = weak_stencil(i);
      for (int c : prob_.boundary_components()) {
        for (int a = 0; a < 4; ++a) {
          const int row = st.nodes[a] * nd + c;
          if (!row_active_[row]) continue;
          for (int b = 0; b < 4; ++b) {
            t.emplace_back(row, st.nodes[b] * nd + c, lw * cloud_.areas(i) * st.value(a) * st.trace(b));
          }
        }
      }
    }
  }
  SparseMatrix jac(size(), size());
  jac.setFromTriplets(t.begin(), t.end());
  return jac;
}

BoundaryPenalty ImmersedProblem::boundary_penalty(const VecX& u) const {
  const int nd = n_dof();
  const auto comps = prob_.boundary_components();
  const int nc = static_cast<int>(comps.size());
  BoundaryPenalty out;
  out.residuals.resize(static_cast<long>(cloud_.size()) * nc);
  for (int i = 0; i < cloud_.size(); ++i) {
    const auto& loc = cloud_loc_[i];
    const auto nodes = grid_.element_nodes(loc.element);
    const Eigen::Vector4d n = shape_values(loc.local);
    const Eigen::Matrix<double, 4, 2> dn = shape_gradients(loc.local, grid_.hx(), grid_.hy());
    const Vec2 p(cloud_.points(i, 0), cloud_.points(i, 1));
    const Vec2 normal(cloud_.normals(i, 0), cloud_.normals(i, 1));
    const double g = prob_.boundary_value(p);
    for (int k = 0; k < nc; ++k) {
      double val = 0.0;
      double dnv = 0.0;
      for (int a = 0; a < 4; ++a) {
        const double ua = u(nodes[a] * nd + comps[k]);
        val += n(a) * ua;
        dnv += ua * dn.row(a).dot(normal);
      }
      out.residuals(i * nc + k) = prob_.alpha * val + prob_.beta * dnv - g;
    }
  }
  out.value = out.residuals.squaredNorm();
  return out;
}

double ImmersedProblem::exterior_penalty(const VecX& u) const {
  const int nd = n_dof();
  double sum = 0.0;
  for (int n = 0; n < grid_.num_nodes(); ++n) {
    if (!occ_.node_in_object[n]) continue;
    for (int c = 0; c < nd; ++c) {
      const double wc = prob_.interior_weight.size() ? prob_.interior_weight(c) : 1.0;
      const double d = u(n * nd + c) - prob_.interior_value(c);
      sum += wc * d * d;
    }
  }
  return sum;
}

LossBreakdown ImmersedProblem::total_loss(const VecX& u) const {
  LossBreakdown out;
  out.weights = weights_;
  out.weights.boundary = boundary_weight();
  out.weights.exterior = exterior_weight();
  out.weights.inverse_h_scaling = false;
  out.weights.pde = pde_weight();
  out.weights.normalize_pde = false;
  out.pde_term = pde_weight() * pde_residual(u).squaredNorm();
  out.boundary_term = boundary_weight() * boundary_penalty(u).value;
  out.exterior_term = exterior_weight() * exterior_penalty(u);
  out.total = out.pde_term + out.boundary_term + out.exterior_term;
  return out;
}

double ImmersedProblem::loss_and_gradient(const VecX& u, VecX& grad) const {
  const int nd = n_dof();
  const int nl = 4 * nd;
  const int stride = prob_.kind == PdeKind::Poisson ? 4 : kMaxLocal;
  grad = VecX::Zero(size());

  // d ||R||^2 = 2 J^T R, accumulated element by element.
  const VecX r = pde_residual(u);
  double uloc[kMaxLocal];
  double rloc[kMaxLocal];
  double jloc[kMaxLocal * kMaxLocal];
  double rsel[kMaxLocal];
  for_each_gauss_point([&](int e, int q) {
    const auto nodes = grid_.element_nodes(e);
    for (int a = 0; a < 4; ++a) {
      for (int c = 0; c < nd; ++c) {
        uloc[a * nd + c] = u(nodes[a] * nd + c);
        rsel[a * nd + c] = r(nodes[a] * nd + c);
      }
    }
    local_residual(e, q, uloc, rloc, jloc);
    for (int j = 0; j < nl; ++j) {
      double acc = 0.0;
      for (int i = 0; i < nl; ++i) acc += jloc[i * stride + j] * rsel[i];
      grad(nodes[j / nd] * nd + j % nd) += 2.0 * pde_weight() * acc;
    }
  });
  if (weak_boundary_weight() != 0.0) {
    const double lw = weak_boundary_weight();
    for (int i = 0; i < cloud_.size(); ++i) {
      const WeakBoundaryStencil st = weak_stencil(i);
      for (int c : prob_.boundary_components()) {
        double acc = 0.0;
        for (int a = 0; a < 4; ++a) acc += st.value(a) * r(st.nodes[a] * nd + c);
        for (int b = 0; b < 4; ++b) {
          grad(st.nodes[b] * nd + c) += 2.0 * pde_weight() * lw * cloud_.areas(i) * acc * st.trace(b);
        }
      }
    }
  }
  double loss = pde_weight() * r.squaredNorm();

  const BoundaryPenalty bp = boundary_penalty(u);
  const double lb = boundary_weight();
  loss += lb * bp.value;
  const auto comps = prob_.boundary_components();
  const int nc = static_cast<int>(comps.size());
  for (int i = 0; i < cloud_.size(); ++i) {
    const auto& loc = cloud_loc_[i];
    const auto nodes = grid_.element_nodes(loc.element);
    const Eigen::Vector4d n = shape_values(loc.local);
    const Eigen::Matrix<double, 4, 2> dn = shape_gradients(loc.local, grid_.hx(), grid_.hy());
    const Vec2 normal(cloud_.normals(i, 0), cloud_.normals(i, 1));
    for (int k = 0; k < nc; ++k) {
      const double res = bp.residuals(i * nc + k);
      for (int a = 0; a < 4; ++a) {
        const double da = prob_.alpha * n(a) + prob_.beta * dn.row(a).dot(normal);
        grad(nodes[a] * nd + comps[k]) += 2.0 * lb * res * da;
      }
    }
  }

  const double le = exterior_weight();
  for (int n = 0; n < grid_.num_nodes(); ++n) {
    if (!occ_.node_in_object[n]) continue;
    for (int c = 0; c < nd; ++c) {
      const double wc = prob_.interior_weight.size() ? prob_.interior_weight(c) : 1.0;
      const double d = u(n * nd + c) - prob_.interior_value(c);
      loss += le * wc * d * d;
      grad(n * nd + c) += 2.0 * le * wc * d;
    }
  }
  constraints_.zero_fixed(grad);
  return loss;
}

VecX ImmersedProblem::loss_gradient(const VecX& u) const {
  VecX g;
  loss_and_gradient(u, g);
  return g;
}

namespace {
int object_dof_count(const OccupancyField& occ, int nd) { return occ.object_node_count() * nd; }
}  // namespace

double ImmersedProblem::projected_loss_and_gradient(const VecX& u, VecX& grad) const {
  VecX v = u;
  constraints_.apply(v);
  return loss_and_gradient(v, grad);
}

VecX ImmersedProblem::stacked_residual(const VecX& u) const {
  const int nd = n_dof();
  const BoundaryPenalty bp = boundary_penalty(u);
  const int nb = static_cast<int>(bp.residuals.size());
  VecX out(size() + nb + object_dof_count(occ_, nd));
  out.head(size()) = std::sqrt(pde_weight()) * pde_residual(u);
  out.segment(size(), nb) = std::sqrt(boundary_weight()) * bp.residuals;
  int row = size() + nb;
  const double se = std::sqrt(exterior_weight());
  for (int n = 0; n < grid_.num_nodes(); ++n) {
    if (!occ_.node_in_object[n]) continue;
    for (int c = 0; c < nd; ++c) {
      const double wc = prob_.interior_weight.size() ? prob_.interior_weight(c) : 1.0;
      out(row++) = se * std::sqrt(wc) * (u(n * nd + c) - prob_.interior_value(c));
    }
  }
  return out;
}

SparseMatrix ImmersedProblem::stacked_jacobian(const VecX& u) const {
  const int nd = n_dof();
  const auto comps = prob_.boundary_components();
  const int nc = static_cast<int>(comps.size());
  const int nb = cloud_.size() * nc;
  const int rows = size() + nb + object_dof_count(occ_, nd);

  const SparseMatrix jp = pde_jacobian(u);
  std::vector<Triplet> t;
  t.reserve(jp.nonZeros() + static_cast<std::size_t>(nb) * 4 + (rows - size() - nb));
  const double sp = std::sqrt(pde_weight());
  for (int k = 0; k < jp.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(jp, k); it; ++it) {
      t.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), sp * it.value());
    }
  }
  const double sb = std::sqrt(boundary_weight());
  for (int i = 0; i < cloud_.size(); ++i) {
    const auto& loc = cloud_loc_[i];
    const auto nodes = grid_.element_nodes(loc.element);
    const Eigen::Vector4d n = shape_values(loc.local);
    const Eigen::Matrix<double, 4, 2> dn = shape_gradients(loc.local, grid_.hx(), grid_.hy());
    const Vec2 normal(cloud_.normals(i, 0), cloud_.normals(i, 1));
    for (int k = 0; k < nc; ++k) {
      for (int a = 0; a < 4; ++a) {
        const double da = prob_.alpha * n(a) + prob_.beta * dn.row(a).dot(normal);
        t.emplace_back(size() + i * nc + k, nodes[a] * nd + comps[k], sb * da);
      }
    }
  }
  int row = size() + nb;
  const double se = std::sqrt(exterior_weight());
  for (int n = 0; n < grid_.num_nodes(); ++n) {
    if (!occ_.node_in_object[n]) continue;
    for (int c = 0; c < nd; ++c) {
      const double wc = prob_.interior_weight.size() ? prob_.interior_weight(c) : 1.0;
      t.emplace_back(row++, n * nd + c, se * std::sqrt(wc));
    }
  }
  SparseMatrix jac(rows, size());
  jac.setFromTriplets(t.begin(), t.end());
  return jac;
}

double ImmersedProblem::l2_norm(const VecX& u, int component, const ScalarFn& reference) const {
  const int nd = n_dof();
  double sum = 0.0;
  for_each_gauss_point([&](int e, int q) {
    const auto nodes = grid_.element_nodes(e);
    double v = 0.0;
    for (int a = 0; a < 4; ++a) v += table_.values[q](a) * u(nodes[a] * nd + component);
    if (reference) v -= reference(grid_.to_physical(e, table_.rule.points.col(q)));
    sum += table_.rule.weights(q) * table_.jacobian * v * v;
  });
  return std::sqrt(sum);
}

double ImmersedProblem::integrated_area() const {
  double sum = 0.0;
  for_each_gauss_point(
      [&](int, int q) { sum += table_.rule.weights(q) * table_.jacobian; });
  return sum;
}

namespace {

ImmersedProblem make_problem(const NodalField& u, const OccupancyField& occ,
                             const BoundaryPointCloud& cloud, const PdeProblem& prob,
                             const LossWeights& weights = {}) {
  if (u.n_dof != prob.n_dof()) {
    throw ConfigError("field has " + std::to_string(u.n_dof) + " dofs per node, problem needs " +
                      std::to_string(prob.n_dof()));
  }
  return ImmersedProblem(u.grid, occ, cloud, prob, weights);
}

}  // namespace

VecX poisson_residual(const NodalField& u, const OccupancyField& occ, const PdeProblem& prob) {
  if (prob.kind != PdeKind::Poisson) throw ConfigError("poisson_residual: not a Poisson problem");
  return make_problem(u, occ, {}, prob).pde_residual(u.values);
}

VecX ns_residual(const NodalField& u, const OccupancyField& occ, const PdeProblem& prob) {
  if (prob.kind != PdeKind::NavierStokes) {
    throw ConfigError("ns_residual: not a Navier-Stokes problem");
  }
  return make_problem(u, occ, {}, prob).pde_residual(u.values);
}

BoundaryPenalty boundary_penalty(const NodalField& u, const BoundaryPointCloud& cloud,
                                 const PdeProblem& prob) {
  OccupancyField none;
  none.chi = VecX::Zero(u.grid.num_nodes());
  classify(none, u.grid);
  PdeProblem p = prob;
  p.walls.clear();
  return make_problem(u, none, cloud, p).boundary_penalty(u.values);
}

double exterior_penalty(const NodalField& u, const OccupancyField& occ, const VecX& g_in) {
  if (g_in.size() != u.n_dof) throw ConfigError("exterior_penalty: g_in size mismatch");
  if (occ.node_in_object.size() != static_cast<std::size_t>(u.grid.num_nodes())) {
    throw StateError("exterior_penalty: occupancy is not classified for this grid");
  }
  double sum = 0.0;
  for (int n = 0; n < u.grid.num_nodes(); ++n) {
    if (!occ.node_in_object[n]) continue;
    for (int c = 0; c < u.n_dof; ++c) {
      const double d = u.at(n, c) - g_in(c);
      sum += d * d;
    }
  }
  return sum;
}

LossBreakdown total_loss(const NodalField& u, const OccupancyField& occ,
                         const BoundaryPointCloud& cloud, const PdeProblem& prob,
                         const LossWeights& weights) {
  return make_problem(u, occ, cloud, prob, weights).total_loss(u.values);
}

VecX loss_gradient(const NodalField& u, const OccupancyField& occ,
                   const BoundaryPointCloud& cloud, const PdeProblem& prob,
                   const LossWeights& weights) {
  return make_problem(u, occ, cloud, prob, weights).loss_gradient(u.values);
}

namespace {

// Columns of the stacked Jacobian that are free to move.
std::vector<int> free_columns(const ImmersedProblem& problem) {
  std::vector<int> cols;
  const auto& fixed = problem.constraints().fixed;
  for (int k = 0; k < problem.size(); ++k) {
    if (!fixed[k]) cols.push_back(k);
  }
  return cols;
}

SparseMatrix restrict_columns(const SparseMatrix& j, const std::vector<int>& cols) {
  std::vector<int> map(j.cols(), -1);
  for (std::size_t k = 0; k < cols.size(); ++k) map[cols[k]] = static_cast<int>(k);
  std::vector<Triplet> t;
  t.reserve(j.nonZeros());
  for (int k = 0; k < j.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(j, k); it; ++it) {
      const int c = map[it.col()];
      if (c >= 0) t.emplace_back(static_cast<int>(it.row()), c, it.value());
    }
  }
  SparseMatrix out(j.rows(), static_cast<long>(cols.size()));
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

// J^T J plus damping * diag; columns with no entries get a unit diagonal so
// the factorisation stays definite (their step is zero).
SparseMatrix normal_matrix(const SparseMatrix& jf, double damping) {
  SparseMatrix h = (jf.transpose() * jf).pruned();
  const VecX diag = h.diagonal();
  for (int k = 0; k < h.rows(); ++k) {
    h.coeffRef(k, k) += diag(k) > 0.0 ? damping * diag(k) : 1.0;
  }
  return h;
}

}  // namespace

VecX solve_normal_equations(const ImmersedProblem& problem, const VecX& u0) {
  VecX u = u0;
  problem.constraints().apply(u);
  const auto cols = free_columns(problem);
  const SparseMatrix jf = restrict_columns(problem.stacked_jacobian(u), cols);
  Eigen::SimplicialLDLT<SparseMatrix> solver(normal_matrix(jf, 0.0));
  if (solver.info() != Eigen::Success) {
    throw OptimizationError("solve_normal_equations: factorisation failed", 0);
  }
  // One solve plus two refinement passes against the exact residual.
  for (int pass = 0; pass < 3; ++pass) {
    const VecX r = problem.stacked_residual(u);
    const VecX step = solver.solve(-(jf.transpose() * r));
    for (std::size_t k = 0; k < cols.size(); ++k) u(cols[k]) += step(static_cast<long>(k));
  }
  return u;
}

VecX gauss_newton(const ImmersedProblem& problem, VecX u, const GaussNewtonOptions& options,
                  GaussNewtonReport* report) {
  problem.constraints().apply(u);
  const auto cols = free_columns(problem);
  VecX r = problem.stacked_residual(u);
  double loss = r.squaredNorm();
  GaussNewtonReport rep;
  rep.initial_loss = loss;
  double damping = 1e-6;
  bool done = false;
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  while (!done && rep.iterations < options.max_iterations) {
    const SparseMatrix jf = restrict_columns(problem.stacked_jacobian(u), cols);
    const VecX g = 2.0 * (jf.transpose() * r);
    rep.gradient_norm = g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
    rep.loss_history.push_back(loss);
    rep.gradient_history.push_back(rep.gradient_norm);
    rep.seconds_history.push_back(elapsed());
    if (rep.gradient_norm <= options.gradient_tol) {
      rep.converged = true;
      break;
    }
    bool accepted = false;
    while (damping < 1e12) {
      Eigen::SimplicialLDLT<SparseMatrix> solver(normal_matrix(jf, damping));
      if (solver.info() != Eigen::Success) {
        damping *= 10.0;
        continue;
      }
      const VecX step = solver.solve(-0.5 * g);
      VecX trial = u;
      for (std::size_t k = 0; k < cols.size(); ++k) trial(cols[k]) += step(static_cast<long>(k));
      const VecX tr = problem.stacked_residual(trial);
      const double tl = tr.squaredNorm();
      if (std::isfinite(tl) && tl <= loss) {
        const double rel = (loss - tl) / std::max(loss, 1e-300);
        u = std::move(trial);
        r = tr;
        loss = tl;
        damping = std::max(damping * 0.1, 1e-12);
        accepted = true;
        if (rel < options.relative_tol) {
          rep.converged = true;
          done = true;
        }
        break;
      }
      damping *= 10.0;
    }
    ++rep.iterations;
    if (!accepted) {
      rep.converged = true;  // no descent available at working precision
      break;
    }
  }
  if (!std::isfinite(loss)) throw OptimizationError("gauss_newton: non-finite loss", rep.iterations);
  rep.final_loss = loss;
  rep.seconds = elapsed();
  if (report) *report = rep;
  return u;
}

}  // namespace ibn
