#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/SparseLU>

#include "ibn/parallel.hpp"
#include "ibn/residual.hpp"

using namespace ibn;

namespace {

const Vec2 kCenter(0.5, 0.5);
constexpr double kR = 0.25;

OccupancyField empty_occupancy(const BackgroundGrid& grid) {
  OccupancyField occ;
  occ.chi = VecX::Zero(grid.num_nodes());
  classify(occ, grid);
  return occ;
}

void add_walls(PdeProblem& prob, const ScalarFn& value) {
  for (Side s : {Side::Left, Side::Right, Side::Bottom, Side::Top}) prob.walls.push_back({s, 0, value});
}

PdeProblem disk_poisson() {
  PdeProblem prob = PdeProblem::poisson(1.0, 0.0, 0.0);
  add_walls(prob, [](const Vec2&) { return 0.0; });
  return prob;
}

ImmersedProblem disk_problem(int n, LossWeights w = {}) {
  const auto grid = BackgroundGrid::unit_square(n);
  const auto cloud = circle_cloud(kCenter, kR, 1000);
  auto occ = occupancy_grid(cloud, grid, {0.5, MaskSide::Outside});
  return ImmersedProblem(grid, occ, cloud, disk_poisson(), w);
}

ImmersedProblem obstacle_ns(int n) {
  const auto grid = BackgroundGrid::unit_square(n);
  const auto cloud = circle_cloud(Vec2(0.4, 0.5), 0.15, 400);
  PdeProblem prob;
  prob.kind = PdeKind::NavierStokes;
  prob.viscosity = 0.05;
  prob.interior_value = VecX::Zero(3);
  prob.interior_weight = Eigen::Vector3d(1, 1, 0.01);
  prob.quadrature_order = 3;
  prob.continuity_weight = 3.0;
  prob.forcing = [](const Vec2& x) { return std::sin(3 * x.y()); };
  const auto zero = [](const Vec2&) { return 0.0; };
  prob.walls.push_back({Side::Left, 0, [](const Vec2& p) { return 4 * p.y() * (1 - p.y()); }});
  prob.walls.push_back({Side::Left, 1, zero});
  for (Side s : {Side::Bottom, Side::Top}) {
    prob.walls.push_back({s, 0, zero});
    prob.walls.push_back({s, 1, zero});
  }
  return ImmersedProblem(grid, occupancy_grid(cloud, grid), cloud, prob);
}

// Classical bilinear stiffness matrix on a uniform square grid, assembled
// element by element from the closed-form 4x4 matrix, and the load vector of
// a constant source.
struct ClassicalFem {
  SparseMatrix k;
  VecX f;
};

ClassicalFem classical_fem(const BackgroundGrid& grid, double source,
                           const std::vector<std::uint32_t>* masks = nullptr) {
  Eigen::Matrix4d ke;
  ke << 4, -1, -2, -1, -1, 4, -1, -2, -2, -1, 4, -1, -1, -2, -1, 4;
  ke /= 6.0;
  const double h2 = grid.hx() * grid.hy();
  std::vector<Eigen::Triplet<double>> t;
  VecX f = VecX::Zero(grid.num_nodes());
  for (int e = 0; e < grid.num_elements(); ++e) {
    if (masks && (*masks)[e] == 0) continue;
    const auto nodes = grid.element_nodes(e);
    for (int a = 0; a < 4; ++a) {
      f(nodes[a]) += source * h2 / 4;
      for (int b = 0; b < 4; ++b) t.emplace_back(nodes[a], nodes[b], ke(a, b));
    }
  }
  SparseMatrix k(grid.num_nodes(), grid.num_nodes());
  k.setFromTriplets(t.begin(), t.end());
  return {k, f};
}

// Solves K u = F on the free nodes with the listed nodes held at `fixed`.
VecX solve_with_fixed(const SparseMatrix& k, const VecX& f, const std::vector<std::uint8_t>& held,
                      const VecX& fixed) {
  const int n = static_cast<int>(k.rows());
  std::vector<int> map(n, -1);
  int m = 0;
  for (int i = 0; i < n; ++i) {
    if (!held[i]) map[i] = m++;
  }
  std::vector<Eigen::Triplet<double>> t;
  VecX rhs = VecX::Zero(m);
  for (int i = 0; i < n; ++i) {
    if (map[i] >= 0) rhs(map[i]) = f(i);
  }
  for (int col = 0; col < n; ++col) {
    for (SparseMatrix::InnerIterator it(k, col); it; ++it) {
      const int row = static_cast<int>(it.row());
      if (map[row] < 0) continue;
      if (map[col] >= 0) {
        t.emplace_back(map[row], map[col], it.value());
      } else {
        rhs(map[row]) -= it.value() * fixed(col);
      }
    }
  }
  SparseMatrix a(m, m);
  a.setFromTriplets(t.begin(), t.end());
  Eigen::SparseLU<SparseMatrix> lu(a);
  REQUIRE(lu.info() == Eigen::Success);
  const VecX uf = lu.solve(rhs);
  VecX u = fixed;
  for (int i = 0; i < n; ++i) {
    if (map[i] >= 0) u(i) = uf(map[i]);
  }
  return u;
}

// Central differences of a scalar function over every coordinate.
VecX fd_gradient(const std::function<double(const VecX&)>& fn, const VecX& u) {
  VecX g(u.size());
  VecX v = u;
  for (long j = 0; j < u.size(); ++j) {
    const double step = 1e-6 * (1 + std::abs(u(j)));
    v(j) = u(j) + step;
    const double fp = fn(v);
    v(j) = u(j) - step;
    const double fm = fn(v);
    v(j) = u(j);
    g(j) = (fp - fm) / (2 * step);
  }
  return g;
}

}  // namespace

TEST_CASE("zero data gives a zero residual") {
  const auto grid = BackgroundGrid::unit_square(8);
  PdeProblem prob = PdeProblem::poisson(0.0, 0.0, 0.0);
  add_walls(prob, [](const Vec2&) { return 0.0; });
  const NodalField u(grid, 1);
  CHECK(poisson_residual(u, empty_occupancy(grid), prob).cwiseAbs().maxCoeff() == 0.0);
  const auto lb = total_loss(u, empty_occupancy(grid), {}, prob, {});
  CHECK(lb.total == 0.0);
}

TEST_CASE("a linear harmonic field is discretely exact") {
  const auto grid = BackgroundGrid::unit_square(16);
  PdeProblem prob = PdeProblem::poisson(0.0, 0.0, 0.0);
  add_walls(prob, [](const Vec2& p) { return p.x(); });
  const NodalField u = sample_field(grid, [](const Vec2& p) { return p.x(); });
  CHECK(poisson_residual(u, empty_occupancy(grid), prob).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("residual matches the classical stiffness assembly") {
  const auto grid = BackgroundGrid::unit_square(12);
  PdeProblem prob = PdeProblem::poisson(1.0, 0.0, 0.0);
  add_walls(prob, [](const Vec2&) { return 0.0; });
  const ImmersedProblem p(grid, empty_occupancy(grid), {}, prob);
  const auto fem = classical_fem(grid, 1.0);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  VecX u(grid.num_nodes());
  for (auto& v : u) v = nd(rng);
  const VecX r = p.pde_residual(u);
  const VecX classical = fem.k * u - fem.f;
  for (int i = 0; i < grid.num_nodes(); ++i) {
    if (grid.on_boundary(i)) {
      CHECK(r(i) == 0.0);
    } else {
      CHECK(std::abs(r(i) - classical(i)) <= 1e-12);
    }
  }
  // Constant Jacobian equals the stiffness rows.
  const SparseMatrix j = p.pde_jacobian(u);
  const int mid = grid.node_index(6, 6);
  for (int c = 0; c < grid.num_nodes(); ++c) {
    CHECK(std::abs(j.coeff(mid, c) - fem.k.coeff(mid, c)) <= 1e-13);
  }
}

TEST_CASE("no-object minimiser equals the classical FEM solve") {
  const auto grid = BackgroundGrid::unit_square(16);
  PdeProblem prob = PdeProblem::poisson(1.0, 0.0, 0.0);
  const auto wall = [](const Vec2& p) { return 0.1 * p.x() * p.y(); };
  add_walls(prob, wall);
  const ImmersedProblem p(grid, empty_occupancy(grid), {}, prob);
  const auto fem = classical_fem(grid, 1.0);
  std::vector<std::uint8_t> held(grid.num_nodes());
  VecX fixed = VecX::Zero(grid.num_nodes());
  for (int i = 0; i < grid.num_nodes(); ++i) {
    held[i] = grid.on_boundary(i);
    if (held[i]) fixed(i) = wall(grid.node_position(i));
  }
  const VecX oracle = solve_with_fixed(fem.k, fem.f, held, fixed);
  const VecX u = solve_normal_equations(p, p.initial_guess());
  CHECK((u - oracle).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK(p.loss_gradient(u).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("masked disk: residual vanishes at the masked FEM solution") {
  LossWeights w;
  w.weak_boundary = 0.0;
  const ImmersedProblem p = disk_problem(64, w);
  const auto& grid = p.grid();
  // Masked classical system: only elements with integrated Gauss points, and
  // only for square-rule masks that keep every point of the element.
  std::vector<std::uint32_t> masks(grid.num_elements(), 0);
  for (int e : p.assembly_elements()) masks[e] = p.gauss_mask(e);
  bool all_full = true;
  for (auto m : masks) all_full = all_full && (m == 0 || m == 0xF);
  REQUIRE(all_full == false);  // cut elements are partially integrated
  // Assemble the masked matrix point by point instead.
  const QuadratureRule rule = gauss_rule(2);
  std::vector<Eigen::Triplet<double>> t;
  VecX f = VecX::Zero(grid.num_nodes());
  const double jac = grid.jacobian();
  for (int e = 0; e < grid.num_elements(); ++e) {
    const auto nodes = grid.element_nodes(e);
    for (int q = 0; q < rule.size(); ++q) {
      if (!(masks[e] >> q & 1u)) continue;
      const Vec2 loc = rule.points.col(q);
      const auto n = shape_values(loc);
      const auto dn = shape_gradients(loc, grid.hx(), grid.hy());
      for (int a = 0; a < 4; ++a) {
        f(nodes[a]) += rule.weights(q) * jac * n(a);
        for (int b = 0; b < 4; ++b) {
          t.emplace_back(nodes[a], nodes[b], rule.weights(q) * jac * dn.row(a).dot(dn.row(b)));
        }
      }
    }
  }
  SparseMatrix k(grid.num_nodes(), grid.num_nodes());
  k.setFromTriplets(t.begin(), t.end());
  std::vector<std::uint8_t> held(grid.num_nodes());
  for (int i = 0; i < grid.num_nodes(); ++i) {
    held[i] = grid.on_boundary(i) || p.occupancy().node_in_object[i];
  }
  const VecX u = solve_with_fixed(k, f, held, VecX::Zero(grid.num_nodes()));
  CHECK(p.pde_residual(u).norm() <= 1e-8);
  const auto lb = p.total_loss(u);
  CHECK(lb.pde_term <= 1e-12);
  CHECK(lb.exterior_term == 0.0);
  // Object nodes sit at 0, so u^h at a cloud point inside a cut element is
  // bounded by |grad u| h = (R / 2) h.
  CHECK(lb.boundary_term <= p.cloud().size() * std::pow(0.5 * kR * grid.h(), 2));
}

TEST_CASE("disk minimiser is stationary and a strict local minimum") {
  const ImmersedProblem p = disk_problem(32);
  const VecX u = solve_normal_equations(p, p.initial_guess());
  CHECK(p.loss_gradient(u).cwiseAbs().maxCoeff() <= 1e-8);
  const double best = p.total_loss(u).total;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 1e-3);
  for (int k = 0; k < 100; ++k) {
    VecX v = u;
    for (auto& x : v) x += nd(rng);
    p.constraints().apply(v);
    CHECK(p.total_loss(v).total >= best);
  }
  // A second starting point reaches the same field.
  VecX start = VecX::Constant(u.size(), 0.3);
  const VecX u2 = solve_normal_equations(p, start);
  CHECK((u2 - u).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("Poisson loss gradient against central differences") {
  LossWeights w;
  w.inverse_h_scaling = true;
  const ImmersedProblem p = disk_problem(16, w);
  const auto fn = [&p](const VecX& u) {
    VecX g;
    return p.projected_loss_and_gradient(u, g);
  };
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (int s = 0; s < 20; ++s) {
    VecX u(p.size());
    for (auto& v : u) v = nd(rng);
    VecX g;
    p.projected_loss_and_gradient(u, g);
    const VecX fd = fd_gradient(fn, u);
    CHECK((fd - g).norm() <= 1e-6 * g.norm());
  }
}

TEST_CASE("Navier-Stokes loss gradient against central differences") {
  const ImmersedProblem p = obstacle_ns(16);
  const auto fn = [&p](const VecX& u) {
    VecX g;
    return p.projected_loss_and_gradient(u, g);
  };
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (int s = 0; s < 10; ++s) {
    VecX u(p.size());
    for (auto& v : u) v = nd(rng);
    VecX g;
    p.projected_loss_and_gradient(u, g);
    const VecX fd = fd_gradient(fn, u);
    CHECK((fd - g).norm() <= 1e-6 * g.norm());
  }
}

TEST_CASE("stacked residual and Jacobian") {
  const ImmersedProblem p = obstacle_ns(8);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 0.3);
  VecX u(p.size());
  for (auto& v : u) v = nd(rng);
  p.constraints().apply(u);
  const VecX r = p.stacked_residual(u);
  CHECK(r.squaredNorm() == doctest::Approx(p.total_loss(u).total).epsilon(1e-12));
  const SparseMatrix j = p.stacked_jacobian(u);
  VecX g = 2.0 * (j.transpose() * r);
  p.constraints().zero_fixed(g);
  CHECK((g - p.loss_gradient(u)).norm() <= 1e-10 * g.norm());
  // Directional derivative of the stacked residual.
  VecX d(p.size());
  for (auto& v : d) v = nd(rng);
  const double eps = 1e-6;
  const VecX fd = (p.stacked_residual(u + eps * d) - p.stacked_residual(u - eps * d)) / (2 * eps);
  CHECK((fd - j * d).norm() <= 1e-6 * (j * d).norm());
}

TEST_CASE("boundary penalty examples") {
  const auto grid = BackgroundGrid::unit_square(16);
  const auto cloud = circle_cloud(kCenter, kR, 200);
  SUBCASE("constant field at the boundary value") {
    PdeProblem prob = PdeProblem::poisson(0.0, 0.7, 0.7);
    const NodalField u = sample_field(grid, [](const Vec2&) { return 0.7; });
    CHECK(boundary_penalty(u, cloud, prob).value <= 1e-28);
  }
  SUBCASE("Neumann data of a linear field") {
    PdeProblem prob = PdeProblem::poisson(0.0, 1.0, 0.0);
    prob.alpha = 0.0;
    prob.beta = 1.0;
    BoundaryPointCloud line;
    line.points.resize(5, 2);
    line.normals.resize(5, 2);
    line.areas = VecX::Constant(5, 0.1);
    for (int i = 0; i < 5; ++i) {
      line.points.row(i) << 0.3 + 0.1 * i, 0.21 + 0.13 * i;
      line.normals.row(i) << 1, 0;
    }
    const NodalField u = sample_field(grid, [](const Vec2& p) { return p.x(); });
    const auto bp = boundary_penalty(u, line, prob);
    CHECK(bp.residuals.cwiseAbs().maxCoeff() <= 1e-10);
  }
  SUBCASE("exact disk solution has only interpolation error") {
    const auto fine = BackgroundGrid::unit_square(128);
    const auto dense = circle_cloud(kCenter, kR, 1000);
    const NodalField u = sample_field(fine, [](const Vec2& x) {
      const double r = (x - kCenter).norm();
      return 0.25 * (kR * kR - r * r);
    });
    const double h = fine.h();
    CHECK(boundary_penalty(u, dense, PdeProblem::poisson(1.0, 0.0, 0.0)).value <=
          dense.size() * std::pow(h * h, 2));
  }
}

TEST_CASE("exterior penalty examples") {
  const auto grid = BackgroundGrid::unit_square(16);
  const auto cloud = circle_cloud(kCenter, kR, 400);
  const auto occ = occupancy_grid(cloud, grid);
  const VecX g_in = VecX::Constant(1, 1.0);
  NodalField u(grid, 1, VecX::Constant(grid.num_nodes(), 1.0));
  CHECK(exterior_penalty(u, occ, g_in) == 0.0);

  const int deep = grid.node_index(8, 8);
  REQUIRE(occ.node_in_object[deep]);
  u.at(deep) = 3.0;
  CHECK(exterior_penalty(u, occ, g_in) == doctest::Approx(4.0));

  LossWeights w;
  w.exterior = 2.5;
  PdeProblem prob = PdeProblem::poisson(0.0, 1.0, 1.0);
  add_walls(prob, [](const Vec2&) { return 0.0; });
  const ImmersedProblem p(grid, occ, cloud, prob, w);
  VecX base = p.initial_guess();
  VecX bumped = base;
  bumped(deep) += 2.0;
  CHECK(p.total_loss(bumped).exterior_term - p.total_loss(base).exterior_term ==
        doctest::Approx(4.0 * 2.5));
  bumped = base;
  bumped(deep) += 1.0;
  VecX dg = p.loss_gradient(bumped) - p.loss_gradient(base);
  CHECK(dg(deep) == doctest::Approx(2 * 2.5));
  dg(deep) = 0;
  CHECK(dg.cwiseAbs().maxCoeff() <= 1e-12);

  CHECK(exterior_penalty(u, empty_occupancy(grid), g_in) == 0.0);
}

TEST_CASE("loss weights and 1/h scaling") {
  LossWeights w;
  w.boundary = 2.0;
  w.exterior = 3.0;
  const ImmersedProblem plain = disk_problem(16, w);
  w.inverse_h_scaling = true;
  const ImmersedProblem scaled = disk_problem(16, w);
  CHECK(scaled.boundary_weight() == doctest::Approx(2.0 * 16));
  CHECK(scaled.exterior_weight() == doctest::Approx(3.0 * 16));
  CHECK(plain.boundary_weight() == 2.0);
  CHECK(plain.pde_weight() == doctest::Approx(256.0));
  const VecX u = VecX::Constant(plain.size(), 0.01);
  const auto a = plain.total_loss(u);
  const auto b = scaled.total_loss(u);
  CHECK(a.total == doctest::Approx(a.pde_term + a.boundary_term + a.exterior_term));
  CHECK(b.boundary_term == doctest::Approx(16 * a.boundary_term));
  CHECK(b.exterior_term == doctest::Approx(16 * a.exterior_term));
}

TEST_CASE("Navier-Stokes residual examples") {
  const auto grid = BackgroundGrid::unit_square(8);
  PdeProblem prob;
  prob.kind = PdeKind::NavierStokes;
  prob.viscosity = 0.1;
  prob.interior_value = VecX::Zero(3);
  SUBCASE("zero state, zero force") {
    const NodalField u(grid, 3);
    CHECK(ns_residual(u, empty_occupancy(grid), prob).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("uniform flow") {
    NodalField u(grid, 3);
    for (int i = 0; i < grid.num_nodes(); ++i) u.at(i, 0) = 1.0;
    CHECK(ns_residual(u, empty_occupancy(grid), prob).cwiseAbs().maxCoeff() <= 1e-10);
  }
  SUBCASE("inlet rows are held by the wall values") {
    prob.walls.push_back({Side::Left, 0, [](const Vec2& p) { return 4 * p.y() * (1 - p.y()); }});
    const ImmersedProblem p(grid, empty_occupancy(grid), {}, prob);
    const VecX u0 = p.initial_guess();
    for (int j = 0; j <= grid.ny(); ++j) {
      const int n = grid.node_index(0, j);
      const double y = grid.node_position(n).y();
      CHECK(u0(3 * n) == 4 * y * (1 - y));
    }
    // Rows next to the inlet feel it.
    CHECK(p.pde_residual(u0).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("problem validation") {
  PdeProblem prob;
  prob.kind = PdeKind::NavierStokes;
  prob.viscosity = 0.1;
  prob.interior_value = VecX::Zero(3);
  prob.continuity_weight = 0.0;
  CHECK_THROWS_AS(prob.validate(), ConfigError);
  prob.continuity_weight = 1.0;
  prob.viscosity = -1.0;
  CHECK_THROWS_AS(prob.validate(), ConfigError);

  const ImmersedProblem p = disk_problem(8);
  CHECK_THROWS_AS(p.pde_residual(VecX::Zero(3)), ConfigError);
  CHECK_THROWS_AS(poisson_residual(NodalField(p.grid(), 3), p.occupancy(), prob), ConfigError);
}

TEST_CASE("residual is stable across thread counts") {
  const ImmersedProblem p = obstacle_ns(16);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  VecX u(p.size());
  for (auto& v : u) v = nd(rng);
  set_num_threads(1);
  const double one = p.total_loss(u).total;
  const VecX g1 = p.loss_gradient(u);
  set_num_threads(3);
  const double three = p.total_loss(u).total;
  const VecX g3 = p.loss_gradient(u);
  set_num_threads(1);
  CHECK(std::abs(one - three) <= 1e-10 * one);
  CHECK((g1 - g3).norm() <= 1e-10 * g1.norm());
}

TEST_CASE("Gauss-Newton solves a small obstacle flow") {
  const ImmersedProblem p = obstacle_ns(16);
  GaussNewtonReport rep;
  GaussNewtonOptions o;
  o.gradient_tol = 1e-8;
  o.relative_tol = 1e-10;
  const VecX u = gauss_newton(p, p.initial_guess(), o, &rep);
  CHECK(rep.converged);
  CHECK(rep.final_loss < rep.initial_loss);
  CHECK(rep.loss_history.size() == rep.seconds_history.size());
  for (std::size_t k = 1; k < rep.loss_history.size(); ++k) {
    CHECK(rep.loss_history[k] <= rep.loss_history[k - 1]);
  }
  CHECK(u.allFinite());
}
