#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "ibn/grid_fem.hpp"
#include "ibn/parallel.hpp"

using namespace ibn;

namespace {

double reference_monomial_integral(int a, int b) {
  auto one = [](int k) { return k % 2 ? 0.0 : 2.0 / (k + 1); };
  return one(a) * one(b);
}

}  // namespace

TEST_CASE("shape values at centre and corners") {
  const Eigen::Vector4d c = shape_values(Vec2(0, 0));
  for (int a = 0; a < 4; ++a) CHECK(c(a) == doctest::Approx(0.25).epsilon(1e-15));

  const Eigen::Vector4d corner = shape_values(Vec2(-1, -1));
  CHECK(corner(0) == 1.0);
  CHECK(corner(1) == 0.0);
  CHECK(corner(2) == 0.0);
  CHECK(corner(3) == 0.0);
}

TEST_CASE("shape functions reject points outside the reference element") {
  CHECK_THROWS_AS(shape_values(Vec2(1.5, 0)), DomainError);
  CHECK_THROWS_AS(shape_gradients(Vec2(0, -1.01), 0.1, 0.1), DomainError);
  CHECK_NOTHROW(shape_values(Vec2(1 + 1e-13, -1)));
}

TEST_CASE("partition of unity and zero gradient sum at random points") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 1000; ++k) {
    const Vec2 p(u(rng), u(rng));
    const Eigen::Vector4d n = shape_values(p);
    CHECK(std::abs(n.sum() - 1.0) <= 1e-13);
    CHECK(n.minCoeff() >= 0.0);
    CHECK(n.maxCoeff() <= 1.0);
    const Eigen::Matrix<double, 4, 2> g = shape_gradients(p, 0.3, 0.7);
    CHECK(g.colwise().sum().cwiseAbs().maxCoeff() <= 1e-13);
  }
}

TEST_CASE("shape gradients reproduce linear and bilinear fields") {
  const auto grid = BackgroundGrid::unit_square(1);
  const NodalField fx = sample_field(grid, [](const Vec2& p) { return p.x(); });
  const Eigen::MatrixX2d gx = interpolate_gradient(fx, Vec2(0.5, 0.5));
  CHECK(gx(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(gx(0, 1)) <= 1e-14);

  // d(xy) at (0.5, 0.5) is (y, x) = (0.5, 0.5).
  const NodalField fxy = sample_field(grid, [](const Vec2& p) { return p.x() * p.y(); });
  const Eigen::MatrixX2d gxy = interpolate_gradient(fxy, Vec2(0.5, 0.5));
  CHECK(gxy(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(gxy(0, 1) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("gauss rules") {
  SUBCASE("order 2 in 1D") {
    const QuadratureRule r = gauss_rule(2, 1);
    REQUIRE(r.size() == 2);
    CHECK(r.points(0, 0) == doctest::Approx(-1.0 / std::sqrt(3.0)));
    CHECK(r.points(0, 1) == doctest::Approx(1.0 / std::sqrt(3.0)));
    CHECK(r.weights(0) == 1.0);
    CHECK(r.weights(1) == 1.0);
    double x2 = 0.0;
    for (int q = 0; q < r.size(); ++q) x2 += r.weights(q) * r.points(0, q) * r.points(0, q);
    CHECK(x2 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("order 2 in 2D") {
    const QuadratureRule r = gauss_rule(2);
    REQUIRE(r.size() == 4);
    for (int q = 0; q < 4; ++q) CHECK(r.weights(q) == doctest::Approx(1.0));
  }
  SUBCASE("weights sum to the reference measure") {
    for (int order = 1; order <= 3; ++order) {
      for (int dim = 1; dim <= 3; ++dim) {
        CHECK(gauss_rule(order, dim).weights.sum() ==
              doctest::Approx(std::pow(2.0, dim)).epsilon(1e-14));
      }
    }
  }
  SUBCASE("exact for monomials up to degree 2 order - 1 per axis") {
    for (int order = 1; order <= 3; ++order) {
      const QuadratureRule r = gauss_rule(order);
      const int top = 2 * order - 1;
      for (int a = 0; a <= top; ++a) {
        for (int b = 0; b <= top; ++b) {
          double s = 0.0;
          for (int q = 0; q < r.size(); ++q) {
            s += r.weights(q) * std::pow(r.points(0, q), a) * std::pow(r.points(1, q), b);
          }
          CHECK(std::abs(s - reference_monomial_integral(a, b)) <= 1e-14);
        }
      }
    }
  }
  SUBCASE("unsupported order") { CHECK_THROWS_AS(gauss_rule(4), ConfigError); }
}

TEST_CASE("grid indexing and element ownership") {
  const BackgroundGrid grid(4, 2, Vec2(0, 0), Vec2(2, 1));
  CHECK(grid.hx() == doctest::Approx(0.5));
  CHECK(grid.hy() == doctest::Approx(0.5));
  CHECK(grid.num_nodes() == 15);
  for (int n = 0; n < grid.num_nodes(); ++n) {
    const auto [i, j] = grid.node_ij(n);
    CHECK(grid.node_index(i, j) == n);
  }
  const auto nodes = grid.element_nodes(grid.element_index(1, 1));
  CHECK(nodes[0] == grid.node_index(1, 1));
  CHECK(nodes[1] == grid.node_index(2, 1));
  CHECK(nodes[2] == grid.node_index(2, 2));
  CHECK(nodes[3] == grid.node_index(1, 2));

  // Shared face x = 0.5 belongs to the element on the right.
  CHECK(grid.locate(Vec2(0.5, 0.25)).element == grid.element_index(1, 0));
  // The last element is closed.
  CHECK(grid.locate(Vec2(2.0, 1.0)).element == grid.element_index(3, 1));
  CHECK_THROWS_AS(grid.locate(Vec2(2.1, 0.5)), DomainError);
  CHECK_THROWS_AS(grid.locate(Vec2(-0.1, 0.5)), DomainError);
}

TEST_CASE("interpolation") {
  const auto grid = BackgroundGrid::unit_square(8);

  SUBCASE("constant and linear fields") {
    const NodalField c = sample_field(grid, [](const Vec2&) { return 3.25; });
    CHECK(interpolate(c, Vec2(0.123, 0.77))(0) == doctest::Approx(3.25).epsilon(1e-15));
    CHECK(interpolate_gradient(c, Vec2(0.3, 0.3)).cwiseAbs().maxCoeff() <= 1e-13);
    const NodalField x = sample_field(grid, [](const Vec2& p) { return p.x(); });
    CHECK(std::abs(interpolate(x, Vec2(0.37, 0.9))(0) - 0.37) <= 1e-13);
  }

  SUBCASE("bilinear span is reproduced exactly") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const NodalField f = sample_field(
        grid, [](const Vec2& p) { return 1.5 - 2.0 * p.x() + 0.5 * p.y() + 3.0 * p.x() * p.y(); });
    for (int k = 0; k < 200; ++k) {
      const Vec2 p(u(rng), u(rng));
      const double exact = 1.5 - 2.0 * p.x() + 0.5 * p.y() + 3.0 * p.x() * p.y();
      CHECK(std::abs(interpolate(f, p)(0) - exact) <= 1e-13);
    }
  }

  SUBCASE("quadratic field converges at second order") {
    const auto fine = BackgroundGrid::unit_square(64);
    const double h = fine.h();
    const NodalField f = sample_field(fine, [](const Vec2& p) { return p.x() * p.x(); });
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      const Vec2 p(u(rng), u(rng));
      worst = std::max(worst, std::abs(interpolate(f, p)(0) - p.x() * p.x()));
    }
    // Linear interpolation error of x^2 is at most h^2 / 4.
    CHECK(worst <= 0.25 * h * h + 1e-15);
  }

  SUBCASE("gradient of a quadratic is first order") {
    const auto fine = BackgroundGrid::unit_square(128);
    const double h = fine.h();
    const NodalField f = sample_field(fine, [](const Vec2& p) { return p.x() * p.x(); });
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int k = 0; k < 100; ++k) {
      const Vec2 p(u(rng), u(rng));
      const Eigen::MatrixX2d g = interpolate_gradient(f, p);
      CHECK(std::abs(g(0, 0) - 2.0 * p.x()) <= h + 1e-12);
      CHECK(std::abs(g(0, 1)) <= 1e-12);
    }
  }

  SUBCASE("outside the domain") {
    const NodalField c(grid, 1);
    CHECK_THROWS_AS(interpolate(c, Vec2(1.2, 0.5)), DomainError);
  }
}

TEST_CASE("masked integration") {
  SUBCASE("unit integrand over every resolution") {
    for (int n = 4; n <= 256; n *= 2) {
      const auto grid = BackgroundGrid::unit_square(n);
      const auto all = all_elements(grid);
      CHECK(std::abs(integrate_masked(grid, all, [](int, const GaussPoint&) { return 1.0; }) -
                     1.0) <= 1e-12);
    }
  }
  SUBCASE("integrand x") {
    const auto grid = BackgroundGrid::unit_square(16);
    const auto all = all_elements(grid);
    CHECK(std::abs(integrate_masked(grid, all, [](int, const GaussPoint& g) { return g.x.x(); }) -
                   0.5) <= 1e-12);
  }
  SUBCASE("empty active set") {
    const auto grid = BackgroundGrid::unit_square(4);
    CHECK(integrate_masked(grid, {}, [](int, const GaussPoint&) { return 1.0; }) == 0.0);
  }
  SUBCASE("disk exterior area") {
    const int n = 64;
    const auto grid = BackgroundGrid::unit_square(n);
    const double r = 0.25;
    std::vector<int> outside;
    for (int e = 0; e < grid.num_elements(); ++e) {
      if ((grid.element_center(e) - Vec2(0.5, 0.5)).norm() >= r) outside.push_back(e);
    }
    const double area = integrate_masked(grid, outside, [](int, const GaussPoint&) { return 1.0; });
    const double exact = 1.0 - std::numbers::pi * r * r;
    CHECK(std::abs(area - exact) <= 4.0 * grid.h());
  }
  SUBCASE("thread count changes results by round-off only") {
    const auto grid = BackgroundGrid::unit_square(64);
    const auto all = all_elements(grid);
    auto f = [](int, const GaussPoint& g) { return std::sin(7 * g.x.x()) * std::exp(g.x.y()); };
    set_num_threads(1);
    const double one = integrate_masked(grid, all, f);
    set_num_threads(4);
    const double four = integrate_masked(grid, all, f);
    set_num_threads(1);
    CHECK(std::abs(one - four) <= 1e-10 * std::abs(one));
  }
}
