#ifndef IBN_GRID_FEM_HPP
#define IBN_GRID_FEM_HPP

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ibn/types.hpp"

namespace ibn {

// Reference element is [-1,1]^2 with corners ordered counterclockwise from the
// lower-left: (-1,-1), (1,-1), (1,1), (-1,1).
inline constexpr std::array<std::array<int, 2>, 4> kCornerSigns{
    {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}};

inline constexpr double kReferenceTolerance = 1e-12;

template <typename Scalar>
bool in_reference_element(const Eigen::Matrix<Scalar, 2, 1>& local) {
  using std::abs;
  return abs(local.x()) <= Scalar(1 + kReferenceTolerance) &&
         abs(local.y()) <= Scalar(1 + kReferenceTolerance);
}

/// Bilinear shape function values at a point of the reference element.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 1> shape_values(const Eigen::Matrix<Scalar, 2, 1>& local) {
  if (!in_reference_element(local)) {
    throw DomainError("shape_values: local coordinate outside [-1,1]^2");
  }
  Eigen::Matrix<Scalar, 4, 1> n;
  for (int a = 0; a < 4; ++a) {
    n(a) = Scalar(0.25) * (Scalar(1) + Scalar(kCornerSigns[a][0]) * local.x()) *
           (Scalar(1) + Scalar(kCornerSigns[a][1]) * local.y());
  }
  return n;
}

/// Physical-space gradients of the four bilinear shape functions; row a holds
/// dN_a/dx, dN_a/dy for an element of size hx by hy.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 2> shape_gradients(const Eigen::Matrix<Scalar, 2, 1>& local,
                                             Scalar hx, Scalar hy) {
  if (!in_reference_element(local)) {
    throw DomainError("shape_gradients: local coordinate outside [-1,1]^2");
  }
  Eigen::Matrix<Scalar, 4, 2> g;
  for (int a = 0; a < 4; ++a) {
    const Scalar sx = Scalar(kCornerSigns[a][0]);
    const Scalar sy = Scalar(kCornerSigns[a][1]);
    g(a, 0) = Scalar(0.25) * sx * (Scalar(1) + sy * local.y()) * (Scalar(2) / hx);
    g(a, 1) = Scalar(0.25) * sy * (Scalar(1) + sx * local.x()) * (Scalar(2) / hy);
  }
  return g;
}

struct QuadratureRule {
  Eigen::MatrixXd points;  // dim x n_points, reference coordinates
  VecX weights;

  int dim() const { return static_cast<int>(points.rows()); }
  int size() const { return static_cast<int>(weights.size()); }
};

// Tensor-product Gauss-Legendre rule of the given order (1, 2 or 3 points per
// axis) in `dim` dimensions.
QuadratureRule gauss_rule(int order, int dim = 2);

enum class Side { Left, Right, Bottom, Top };

// Axis-aligned uniform grid of bilinear elements. Nodes are numbered row-major
// with x fastest; elements likewise.
class BackgroundGrid {
 public:
  BackgroundGrid(int nx, int ny, const Vec2& lo, const Vec2& hi);

  static BackgroundGrid unit_square(int cells_per_side) {
    return {cells_per_side, cells_per_side, Vec2(0, 0), Vec2(1, 1)};
  }

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  const Vec2& lo() const { return lo_; }
  const Vec2& hi() const { return hi_; }
  double hx() const { return hx_; }
  double hy() const { return hy_; }
  double h() const { return std::max(hx_, hy_); }

  int num_nodes() const { return (nx_ + 1) * (ny_ + 1); }
  int num_elements() const { return nx_ * ny_; }

  int node_index(int i, int j) const { return j * (nx_ + 1) + i; }
  std::array<int, 2> node_ij(int node) const {
    return {node % (nx_ + 1), node / (nx_ + 1)};
  }
  Vec2 node_position(int node) const;

  int element_index(int i, int j) const { return j * nx_ + i; }
  std::array<int, 2> element_ij(int e) const { return {e % nx_, e / nx_}; }
  std::array<int, 4> element_nodes(int e) const;
  Vec2 element_center(int e) const;
  Vec2 to_physical(int e, const Vec2& local) const;

  bool contains(const Vec2& p) const;

  struct Location {
    int element;
    Vec2 local;
  };
  // Owning element of a physical point: half-open [x_i, x_{i+1}) except the
  // last element per axis, which is closed. Throws DomainError outside.
  Location locate(const Vec2& p) const;

  bool on_side(int node, Side side) const;
  bool on_boundary(int node) const;

  // Jacobian determinant of the reference-to-physical map.
  double jacobian() const { return 0.25 * hx_ * hy_; }
  double area() const { return (hi_ - lo_).prod(); }

  bool operator==(const BackgroundGrid&) const = default;

 private:
  int nx_;
  int ny_;
  Vec2 lo_;
  Vec2 hi_;
  double hx_;
  double hy_;
};

// Per-node unknowns, node-major: values[node * n_dof + component].
struct NodalField {
  NodalField(const BackgroundGrid& grid, int n_dof);
  NodalField(const BackgroundGrid& grid, int n_dof, VecX values);

  BackgroundGrid grid;
  int n_dof;
  VecX values;

  double& at(int node, int component = 0) { return values(node * n_dof + component); }
  double at(int node, int component = 0) const { return values(node * n_dof + component); }
  // Values of one component across all nodes.
  VecX component(int c) const;
  bool all_finite() const { return values.allFinite(); }
};

NodalField sample_field(const BackgroundGrid& grid,
                        const std::function<double(const Vec2&)>& f);

// Value(s) of u^h at p; one entry per degree of freedom.
VecX interpolate(const NodalField& field, const Vec2& p);

// Gradient of u^h at p as an n_dof x 2 matrix. Uses the owning element, so
// the result is one-sided on element faces.
Eigen::MatrixX2d interpolate_gradient(const NodalField& field, const Vec2& p);

// Shape function values and physical gradients tabulated at the points of a
// quadrature rule. All elements of a uniform grid share the same table.
struct ElementTable {
  ElementTable(const BackgroundGrid& grid, const QuadratureRule& rule);

  QuadratureRule rule;
  std::vector<Eigen::Vector4d> values;
  std::vector<Eigen::Matrix<double, 4, 2>> gradients;
  double jacobian;
};

struct GaussPoint {
  int index;       // within the rule
  Vec2 local;
  Vec2 x;          // physical position
  double weight;   // quadrature weight times Jacobian
};

using ElementIntegrand = std::function<double(int element, const GaussPoint& gp)>;

// Sum over the listed elements of sum over Gauss points of w |J| f(e, gp).
// Per-chunk partial sums are merged in a fixed order; results can differ
// across thread counts by round-off (well below 1e-10 relative).
double integrate_masked(const BackgroundGrid& grid, std::span<const int> active_elements,
                        const ElementIntegrand& integrand,
                        const QuadratureRule& rule = gauss_rule(2));

std::vector<int> all_elements(const BackgroundGrid& grid);

}  // namespace ibn

#endif  // IBN_GRID_FEM_HPP
