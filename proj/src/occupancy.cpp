#include "ibn/occupancy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "ibn/parallel.hpp"

namespace ibn {

int OccupancyField::object_node_count() const {
  return static_cast<int>(std::count(node_in_object.begin(), node_in_object.end(), 1));
}

int OccupancyField::count(ElementLabel label) const {
  return static_cast<int>(std::count(element_labels.begin(), element_labels.end(), label));
}

std::vector<int> OccupancyField::assembly_elements() const {
  std::vector<int> out;
  out.reserve(element_labels.size());
  for (std::size_t e = 0; e < element_labels.size(); ++e) {
    if (element_labels[e] != ElementLabel::Inactive) out.push_back(static_cast<int>(e));
  }
  return out;
}

double winding_number(const BoundaryPointCloud& cloud, const VecX& q, double eps_sing) {
  if (cloud.empty()) return 0.0;
  const int d = cloud.dim();
  if (q.size() != d) throw ConfigError("winding_number: query dimension does not match cloud");
  const double norm = d == 2 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi;
  double sum = 0.0;
  for (int i = 0; i < cloud.size(); ++i) {
    const VecX diff = cloud.points.row(i).transpose() - q;
    const double r = std::max(diff.norm(), eps_sing);
    const double denom = d == 2 ? r * r : r * r * r;
    sum += cloud.areas(i) * diff.dot(cloud.normals.row(i).transpose()) / (norm * denom);
  }
  return sum;
}

double winding_number(const BoundaryPointCloud& cloud, const Vec2& q, double eps_sing) {
  if (cloud.empty()) return 0.0;
  if (cloud.dim() != 2) throw ConfigError("winding_number: 2D query for a 3D cloud");
  double sum = 0.0;
  for (int i = 0; i < cloud.size(); ++i) {
    const double dx = cloud.points(i, 0) - q.x();
    const double dy = cloud.points(i, 1) - q.y();
    const double r = std::max(std::hypot(dx, dy), eps_sing);
    sum += cloud.areas(i) * (dx * cloud.normals(i, 0) + dy * cloud.normals(i, 1)) / (r * r);
  }
  return sum / (2.0 * std::numbers::pi);
}

VecX winding_numbers(const BoundaryPointCloud& cloud, const MatX& queries, double eps_sing) {
  const int n = static_cast<int>(queries.rows());
  VecX out(n);
  parallel_chunks(n, [&](int, int begin, int end) {
    for (int k = begin; k < end; ++k) {
      if (queries.cols() == 2) {
        out(k) = winding_number(cloud, Vec2(queries(k, 0), queries(k, 1)), eps_sing);
      } else {
        out(k) = winding_number(cloud, VecX(queries.row(k).transpose()), eps_sing);
      }
    }
  });
  return out;
}

std::vector<ElementLabel> classify_elements(const OccupancyField& field,
                                            const BackgroundGrid& grid) {
  if (field.node_in_object.size() != static_cast<std::size_t>(grid.num_nodes())) {
    throw StateError("classify_elements: node labels missing or sized for another grid");
  }
  std::vector<ElementLabel> labels(grid.num_elements());
  for (int e = 0; e < grid.num_elements(); ++e) {
    int inside = 0;
    for (int n : grid.element_nodes(e)) inside += field.node_in_object[n];
    labels[e] = inside == 4   ? ElementLabel::Inactive
                : inside == 0 ? ElementLabel::Active
                              : ElementLabel::Cut;
  }
  return labels;
}

void classify(OccupancyField& field, const BackgroundGrid& grid) {
  if (field.chi.size() != grid.num_nodes()) {
    throw StateError("classify: chi is not sized for this grid");
  }
  field.node_in_object.assign(grid.num_nodes(), 0);
  for (int n = 0; n < grid.num_nodes(); ++n) {
    field.node_in_object[n] = field.chi(n) > field.threshold ? 1 : 0;
  }
  field.element_labels = classify_elements(field, grid);
}

namespace {

MatX node_positions(const BackgroundGrid& grid) {
  MatX pts(grid.num_nodes(), 2);
  for (int n = 0; n < grid.num_nodes(); ++n) pts.row(n) = grid.node_position(n).transpose();
  return pts;
}

VecX raw_winding(const BoundaryPointCloud& cloud, const BackgroundGrid& grid) {
  if (!cloud.empty() && cloud.dim() != 2) {
    throw ConfigError("occupancy: grid assembly is 2D; cloud is " + std::to_string(cloud.dim()) + "D");
  }
  return winding_numbers(cloud, node_positions(grid), kWindingSingularScale * grid.h());
}

}  // namespace

OccupancyField occupancy_grid(const BoundaryPointCloud& cloud, const BackgroundGrid& grid,
                              const OccupancyOptions& options) {
  OccupancyField field;
  field.threshold = options.threshold;
  field.side = options.side;
  const VecX w = raw_winding(cloud, grid);
  field.chi = options.side == MaskSide::Inside ? w : (VecX::Ones(w.size()) - w).eval();
  classify(field, grid);
  return field;
}

double occupancy_at(const OccupancyField& field, const BackgroundGrid& grid, int element,
                    const Vec2& local) {
  const Eigen::Vector4d n = shape_values(local);
  const auto nodes = grid.element_nodes(element);
  double v = 0.0;
  for (int a = 0; a < 4; ++a) v += n(a) * field.chi(nodes[a]);
  return v;
}

namespace {

using SparseMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

// h-scaled 5-point Laplacian. On the box boundary the missing neighbour is
// either dropped (that axis contributes nothing) or mirrored (zero normal
// derivative).
SparseMat laplacian_matrix(const BackgroundGrid& grid, bool mirror = false) {
  const double h = grid.h();
  const double cx = h / (grid.hx() * grid.hx());
  const double cy = h / (grid.hy() * grid.hy());
  std::vector<Triplet> t;
  auto axis = [&](int n, int k, int last, int lo_node, int hi_node, double c) {
    if (k > 0 && k < last) {
      t.emplace_back(n, lo_node, c);
      t.emplace_back(n, hi_node, c);
      t.emplace_back(n, n, -2.0 * c);
    } else if (mirror) {
      t.emplace_back(n, k == 0 ? hi_node : lo_node, 2.0 * c);
      t.emplace_back(n, n, -2.0 * c);
    }
  };
  for (int n = 0; n < grid.num_nodes(); ++n) {
    const auto [i, j] = grid.node_ij(n);
    axis(n, i, grid.nx(), i > 0 ? grid.node_index(i - 1, j) : -1,
         i < grid.nx() ? grid.node_index(i + 1, j) : -1, cx);
    axis(n, j, grid.ny(), j > 0 ? grid.node_index(i, j - 1) : -1,
         j < grid.ny() ? grid.node_index(i, j + 1) : -1, cy);
  }
  SparseMat l(grid.num_nodes(), grid.num_nodes());
  l.setFromTriplets(t.begin(), t.end());
  return l;
}

struct EikonalSystem {
  const BoundaryPointCloud& cloud;
  const BackgroundGrid& grid;
  const EikonalOptions& opt;
  ElementTable table;
  SparseMat lap;
  SparseMat lap_mirror;
  bool mirror = false;
  std::vector<BackgroundGrid::Location> cloud_loc;
  // +1 outside the cloud, -1 inside; flips the viscous term so that its kinks
  // point the same way as those of a signed distance on both sides.
  VecX side;
  double viscosity;  // weight on the h-scaled Laplacian
  // Nodes whose winding number is far from 1/2; phi must not take the wrong
  // sign there (one-sided penalty, zero at any correctly signed field).
  std::vector<int> confident;

  EikonalSystem(const BoundaryPointCloud& c, const BackgroundGrid& g, const EikonalOptions& o,
                VecX node_side)
      : cloud(c), grid(g), opt(o), table(g, gauss_rule(2)), lap(laplacian_matrix(g)),
        lap_mirror(laplacian_matrix(g, true)),
        side(std::move(node_side)), viscosity(o.tau) {
    cloud_loc.reserve(c.size());
    for (int i = 0; i < c.size(); ++i) {
      cloud_loc.push_back(g.locate(Vec2(c.points(i, 0), c.points(i, 1))));
    }
  }

  int interior_rows() const { return grid.num_elements() * table.rule.size(); }
  int rows() const { return interior_rows() + cloud.size() + static_cast<int>(confident.size()); }

  VecX residual(const VecX& phi, SparseMat* jac) const {
    const SparseMat& L = mirror ? lap_mirror : lap;
    const VecX lphi = side.cwiseProduct(L * phi);
    VecX r(rows());
    std::vector<Triplet> t;
    if (jac) t.reserve(static_cast<std::size_t>(interior_rows()) * 24 + cloud.size() * 4);
    const double nu = viscosity;
    const double delta2 = opt.grad_smoothing * opt.grad_smoothing;
    int row = 0;
    for (int e = 0; e < grid.num_elements(); ++e) {
      const auto nodes = grid.element_nodes(e);
      for (int q = 0; q < table.rule.size(); ++q, ++row) {
        const double s = std::sqrt(table.rule.weights(q) * table.jacobian);
        Vec2 g = Vec2::Zero();
        double lq = 0.0;
        for (int a = 0; a < 4; ++a) {
          g += phi(nodes[a]) * table.gradients[q].row(a).transpose();
          lq += table.values[q](a) * lphi(nodes[a]);
        }
        const double gn = std::sqrt(g.squaredNorm() + delta2);
        r(row) = s * (gn - nu * lq - 1.0);
        if (!jac) continue;
        for (int a = 0; a < 4; ++a) {
          t.emplace_back(row, nodes[a], s * table.gradients[q].row(a).dot(g) / gn);
        }
      }
    }
    if (jac && nu != 0.0) {
      const SparseMat lap_rows = L.transpose();  // column k holds row k of lap
      int rr = 0;
      for (int e = 0; e < grid.num_elements(); ++e) {
        const auto nodes = grid.element_nodes(e);
        for (int q = 0; q < table.rule.size(); ++q, ++rr) {
          const double s = std::sqrt(table.rule.weights(q) * table.jacobian);
          for (int a = 0; a < 4; ++a) {
            const double na = -s * nu * table.values[q](a) * side(nodes[a]);
            for (SparseMat::InnerIterator it(lap_rows, nodes[a]); it; ++it) {
              t.emplace_back(rr, static_cast<int>(it.row()), na * it.value());
            }
          }
        }
      }
    }
    const double sb = std::sqrt(opt.boundary_weight);
    for (int i = 0; i < cloud.size(); ++i, ++row) {
      const auto& loc = cloud_loc[i];
      const Eigen::Vector4d n = shape_values(loc.local);
      const auto nodes = grid.element_nodes(loc.element);
      double v = 0.0;
      for (int a = 0; a < 4; ++a) {
        v += n(a) * phi(nodes[a]);
        if (jac) t.emplace_back(row, nodes[a], sb * n(a));
      }
      r(row) = sb * v;
    }
    for (int n : confident) {
      const double wrong = std::min(0.0, side(n) * phi(n));
      r(row) = sb * wrong;
      if (jac && wrong < 0.0) t.emplace_back(row, n, sb * side(n));
      ++row;
    }
    if (jac) {
      jac->resize(rows(), grid.num_nodes());
      jac->setFromTriplets(t.begin(), t.end());
    }
    return r;
  }
};

struct StageResult {
  int iterations = 0;
  double loss = 0.0;
};

// Levenberg-Marquardt on one viscosity level. `max_iters` bounds accepted and
// rejected steps together.
StageResult eikonal_stage(const EikonalSystem& sys, VecX& phi, int max_iters, double tol,
                          double step) {
  SparseMat jac;
  VecX r = sys.residual(phi, &jac);
  StageResult out;
  out.loss = r.squaredNorm();
  double damping = 1e-3;
  int rejected_in_row = 0;
  int small_in_row = 0;
  Eigen::SimplicialLDLT<SparseMat> solver;
  for (; out.iterations < max_iters; ++out.iterations) {
    const SparseMat jtj = (jac.transpose() * jac).pruned();
    const VecX rhs = -(jac.transpose() * r);
    const VecX diag = jtj.diagonal();
    const double scale = std::max(diag.maxCoeff(), 1e-300);
    SparseMat a = jtj;
    for (int k = 0; k < a.rows(); ++k) a.coeffRef(k, k) += damping * (diag(k) + 1e-9 * scale);
    solver.compute(a);
    if (solver.info() != Eigen::Success) {
      damping *= 10.0;
      continue;
    }
    const VecX trial = phi + step * solver.solve(rhs);
    SparseMat trial_jac;
    const VecX trial_r = sys.residual(trial, &trial_jac);
    const double trial_loss = trial_r.squaredNorm();
    if (std::isfinite(trial_loss) && trial_loss < out.loss) {
      const double rel = (out.loss - trial_loss) / std::max(out.loss, 1e-300);
      phi = trial;
      r = trial_r;
      jac = std::move(trial_jac);
      out.loss = trial_loss;
      damping = std::max(damping * 0.3, 1e-12);
      rejected_in_row = 0;
      small_in_row = rel < tol ? small_in_row + 1 : 0;
      if (small_in_row >= 3) {
        ++out.iterations;
        break;
      }
    } else {
      damping *= 10.0;
      if (++rejected_in_row >= 50) {
        std::ostringstream msg;
        msg << "eikonal_sdf: loss failed to decrease for 50 consecutive iterations (iteration "
            << out.iterations << ", loss " << out.loss << ")";
        throw OptimizationError(msg.str(), out.iterations);
      }
      if (damping > 1e12) {
        ++out.iterations;
        break;  // stationary to working precision
      }
    }
  }
  return out;
}

VecX sign_of(const VecX& phi) {
  return phi.unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
}

}  // namespace

VecX scaled_nodal_laplacian(const VecX& phi, const BackgroundGrid& grid) {
  return laplacian_matrix(grid) * phi;
}

EikonalLoss eikonal_loss(const VecX& phi, const BoundaryPointCloud& cloud,
                         const BackgroundGrid& grid, const EikonalOptions& options) {
  const EikonalSystem sys(cloud, grid, options, sign_of(phi));
  const VecX r = sys.residual(phi, nullptr);
  EikonalLoss loss;
  loss.interior = r.head(sys.interior_rows()).squaredNorm();
  loss.boundary = r.tail(cloud.size()).squaredNorm();
  return loss;
}

OccupancyField eikonal_sdf(const BoundaryPointCloud& cloud, const BackgroundGrid& grid,
                           const EikonalOptions& options, EikonalReport* report) {
  if (!(options.tau >= 0.0 && options.tau <= 0.5)) {
    throw ConfigError("eikonal_sdf: tau must lie in [0, 0.5]");
  }
  if (options.iters < 1) throw ConfigError("eikonal_sdf: iters must be at least 1");
  if (!(options.step > 0.0 && options.step <= 1.0)) {
    throw ConfigError("eikonal_sdf: step must lie in (0, 1]");
  }
  if (cloud.empty()) throw ConfigError("eikonal_sdf: empty point cloud");

  const VecX w = raw_winding(cloud, grid);
  VecX phi = ((VecX::Constant(w.size(), 0.5) - w) * grid.h()).eval();

  EikonalSystem sys(cloud, grid, options, sign_of(phi));
  for (int n = 0; n < w.size(); ++n) {
    if (std::abs(w(n) - 0.5) > 0.25) sys.confident.push_back(n);
  }
  if (report) report->initial_loss = sys.residual(phi, nullptr).squaredNorm();

  // Continuation: start with a strong smoother (unscaled viscosity 0.1) so the
  // flat starting field grows into a single smooth cone instead of locking
  // into a sawtooth of |grad phi| = 1 pieces, then relax to tau. The smoothing
  // stages mirror at the box walls; otherwise the walls act as a second zero
  // level set.
  int used = 0;
  sys.mirror = true;
  for (double nu = 0.1 / grid.h(); nu > options.tau && used < options.iters; nu *= 0.25) {
    sys.viscosity = nu;
    used += eikonal_stage(sys, phi, std::min(30, options.iters - used), 1e-6, options.step).iterations;
  }
  sys.mirror = false;
  sys.viscosity = options.tau;
  const StageResult last =
      eikonal_stage(sys, phi, std::max(1, options.iters - used), options.tol, options.step);
  if (report) {
    report->iterations = used + last.iterations;
    report->final_loss = last.loss;
  }

  OccupancyField field;
  field.threshold = options.occupancy.threshold;
  field.side = options.occupancy.side;
  field.chi.resize(phi.size());
  for (int n = 0; n < phi.size(); ++n) {
    const bool inside_cloud = phi(n) < 0.0;
    const bool object = options.occupancy.side == MaskSide::Inside ? inside_cloud : !inside_cloud;
    field.chi(n) = object ? 1.0 : 0.0;
  }
  field.phi = std::move(phi);
  classify(field, grid);
  return field;
}

}  // namespace ibn
