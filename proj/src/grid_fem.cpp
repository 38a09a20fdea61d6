#include "ibn/grid_fem.hpp"

#include <numeric>
#include <sstream>

#include "ibn/parallel.hpp"

namespace ibn {

QuadratureRule gauss_rule(int order, int dim) {
  std::vector<double> x;
  std::vector<double> w;
  switch (order) {
    case 1:
      x = {0.0};
      w = {2.0};
      break;
    case 2: {
      const double a = 1.0 / std::sqrt(3.0);
      x = {-a, a};
      w = {1.0, 1.0};
      break;
    }
    case 3: {
      const double a = std::sqrt(0.6);
      x = {-a, 0.0, a};
      w = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
      break;
    }
    default:
      throw ConfigError("gauss_rule: unsupported order " + std::to_string(order) +
                        " (expected 1, 2 or 3)");
  }
  if (dim < 1 || dim > 3) {
    throw ConfigError("gauss_rule: unsupported dimension " + std::to_string(dim));
  }

  const int m = static_cast<int>(x.size());
  int total = 1;
  for (int d = 0; d < dim; ++d) total *= m;

  QuadratureRule rule;
  rule.points.resize(dim, total);
  rule.weights.resize(total);
  for (int k = 0; k < total; ++k) {
    int rem = k;
    double weight = 1.0;
    for (int d = 0; d < dim; ++d) {
      const int idx = rem % m;
      rem /= m;
      rule.points(d, k) = x[idx];
      weight *= w[idx];
    }
    rule.weights(k) = weight;
  }
  return rule;
}

BackgroundGrid::BackgroundGrid(int nx, int ny, const Vec2& lo, const Vec2& hi)
    : nx_(nx), ny_(ny), lo_(lo), hi_(hi) {
  if (nx < 1 || ny < 1) {
    throw ConfigError("BackgroundGrid: cell counts must be positive");
  }
  if (!(hi.x() > lo.x()) || !(hi.y() > lo.y())) {
    throw ConfigError("BackgroundGrid: empty domain box");
  }
  hx_ = (hi.x() - lo.x()) / nx;
  hy_ = (hi.y() - lo.y()) / ny;
}

Vec2 BackgroundGrid::node_position(int node) const {
  const auto [i, j] = node_ij(node);
  // Pin the last row/column to the box so that boundary nodes are exact.
  const double x = i == nx_ ? hi_.x() : lo_.x() + i * hx_;
  const double y = j == ny_ ? hi_.y() : lo_.y() + j * hy_;
  return {x, y};
}

std::array<int, 4> BackgroundGrid::element_nodes(int e) const {
  const auto [i, j] = element_ij(e);
  return {node_index(i, j), node_index(i + 1, j), node_index(i + 1, j + 1),
          node_index(i, j + 1)};
}

Vec2 BackgroundGrid::element_center(int e) const {
  const auto [i, j] = element_ij(e);
  return {lo_.x() + (i + 0.5) * hx_, lo_.y() + (j + 0.5) * hy_};
}

Vec2 BackgroundGrid::to_physical(int e, const Vec2& local) const {
  return element_center(e) + Vec2(0.5 * hx_ * local.x(), 0.5 * hy_ * local.y());
}

bool BackgroundGrid::contains(const Vec2& p) const {
  const double tx = kReferenceTolerance * (hi_.x() - lo_.x());
  const double ty = kReferenceTolerance * (hi_.y() - lo_.y());
  return p.x() >= lo_.x() - tx && p.x() <= hi_.x() + tx && p.y() >= lo_.y() - ty &&
         p.y() <= hi_.y() + ty;
}

BackgroundGrid::Location BackgroundGrid::locate(const Vec2& p) const {
  if (!p.allFinite() || !contains(p)) {
    std::ostringstream msg;
    msg << "point (" << p.x() << ", " << p.y() << ") lies outside the grid";
    throw DomainError(msg.str());
  }
  int i = static_cast<int>(std::floor((p.x() - lo_.x()) / hx_));
  int j = static_cast<int>(std::floor((p.y() - lo_.y()) / hy_));
  i = std::clamp(i, 0, nx_ - 1);
  j = std::clamp(j, 0, ny_ - 1);
  const int e = element_index(i, j);
  const Vec2 c = element_center(e);
  Vec2 local((p.x() - c.x()) * 2.0 / hx_, (p.y() - c.y()) * 2.0 / hy_);
  local = local.cwiseMax(-1.0).cwiseMin(1.0);
  return {e, local};
}

bool BackgroundGrid::on_side(int node, Side side) const {
  const auto [i, j] = node_ij(node);
  switch (side) {
    case Side::Left:
      return i == 0;
    case Side::Right:
      return i == nx_;
    case Side::Bottom:
      return j == 0;
    case Side::Top:
      return j == ny_;
  }
  return false;
}

bool BackgroundGrid::on_boundary(int node) const {
  const auto [i, j] = node_ij(node);
  return i == 0 || j == 0 || i == nx_ || j == ny_;
}

NodalField::NodalField(const BackgroundGrid& grid, int n_dof)
    : grid(grid), n_dof(n_dof), values(VecX::Zero(static_cast<long>(grid.num_nodes()) * n_dof)) {
  if (n_dof < 1) throw ConfigError("NodalField: n_dof must be positive");
}

NodalField::NodalField(const BackgroundGrid& grid, int n_dof, VecX v)
    : grid(grid), n_dof(n_dof), values(std::move(v)) {
  if (n_dof < 1) throw ConfigError("NodalField: n_dof must be positive");
  if (values.size() != static_cast<long>(grid.num_nodes()) * n_dof) {
    throw ConfigError("NodalField: value count does not match grid nodes times n_dof");
  }
}

VecX NodalField::component(int c) const {
  VecX out(grid.num_nodes());
  for (int n = 0; n < grid.num_nodes(); ++n) out(n) = at(n, c);
  return out;
}

NodalField sample_field(const BackgroundGrid& grid,
                        const std::function<double(const Vec2&)>& f) {
  NodalField field(grid, 1);
  for (int n = 0; n < grid.num_nodes(); ++n) field.values(n) = f(grid.node_position(n));
  return field;
}

VecX interpolate(const NodalField& field, const Vec2& p) {
  const auto loc = field.grid.locate(p);
  const Eigen::Vector4d n = shape_values(loc.local);
  const auto nodes = field.grid.element_nodes(loc.element);
  VecX out = VecX::Zero(field.n_dof);
  for (int a = 0; a < 4; ++a) {
    for (int c = 0; c < field.n_dof; ++c) out(c) += n(a) * field.at(nodes[a], c);
  }
  return out;
}

Eigen::MatrixX2d interpolate_gradient(const NodalField& field, const Vec2& p) {
  const auto loc = field.grid.locate(p);
  const Eigen::Matrix<double, 4, 2> g =
      shape_gradients(loc.local, field.grid.hx(), field.grid.hy());
  const auto nodes = field.grid.element_nodes(loc.element);
  Eigen::MatrixX2d out = Eigen::MatrixX2d::Zero(field.n_dof, 2);
  for (int a = 0; a < 4; ++a) {
    for (int c = 0; c < field.n_dof; ++c) out.row(c) += field.at(nodes[a], c) * g.row(a);
  }
  return out;
}

ElementTable::ElementTable(const BackgroundGrid& grid, const QuadratureRule& r)
    : rule(r), jacobian(grid.jacobian()) {
  if (rule.dim() != 2) throw ConfigError("ElementTable: 2D rule required");
  values.reserve(rule.size());
  gradients.reserve(rule.size());
  for (int q = 0; q < rule.size(); ++q) {
    const Vec2 local = rule.points.col(q);
    values.push_back(shape_values(local));
    gradients.push_back(shape_gradients(local, grid.hx(), grid.hy()));
  }
}

double integrate_masked(const BackgroundGrid& grid, std::span<const int> active_elements,
                        const ElementIntegrand& integrand, const QuadratureRule& rule) {
  if (rule.dim() != 2) throw ConfigError("integrate_masked: 2D rule required");
  const double jac = grid.jacobian();
  const int n = static_cast<int>(active_elements.size());
  std::vector<double> partial(chunk_count(n), 0.0);
  parallel_chunks(n, [&](int chunk, int begin, int end) {
    double sum = 0.0;
    for (int k = begin; k < end; ++k) {
      const int e = active_elements[k];
      for (int q = 0; q < rule.size(); ++q) {
        GaussPoint gp;
        gp.index = q;
        gp.local = rule.points.col(q);
        gp.x = grid.to_physical(e, gp.local);
        gp.weight = rule.weights(q) * jac;
        sum += gp.weight * integrand(e, gp);
      }
    }
    partial[chunk] = sum;
  });
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

std::vector<int> all_elements(const BackgroundGrid& grid) {
  std::vector<int> out(grid.num_elements());
  std::iota(out.begin(), out.end(), 0);
  return out;
}

}  // namespace ibn
