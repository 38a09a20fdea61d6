#ifndef IBN_RESIDUAL_HPP
#define IBN_RESIDUAL_HPP

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Sparse>

#include "ibn/geometry.hpp"
#include "ibn/grid_fem.hpp"
#include "ibn/occupancy.hpp"

namespace ibn {

using SparseMatrix = Eigen::SparseMatrix<double>;
using ScalarFn = std::function<double(const Vec2&)>;

enum class PdeKind { Poisson, NavierStokes };

// Strongly imposed value for one component on one side of the box.
struct DirichletWall {
  Side side;
  int component;
  ScalarFn value;
};

struct PdeProblem {
  PdeKind kind = PdeKind::Poisson;
  // Body force; component 1 is only read for Navier-Stokes.
  ScalarFn forcing = [](const Vec2&) { return 0.0; };
  ScalarFn forcing_y = [](const Vec2&) { return 0.0; };
  // Robin data on the immersed boundary: alpha u + beta du/dn = g.
  double alpha = 1.0;
  double beta = 0.0;
  ScalarFn boundary_value = [](const Vec2&) { return 0.0; };
  // Walls listed later win at shared corners.
  std::vector<DirichletWall> walls;
  double viscosity = 0.0;
  // Fill value for object nodes, one per degree of freedom.
  VecX interior_value = VecX::Zero(1);
  // Relative exterior-penalty weight per degree of freedom (empty: all 1).
  VecX interior_weight;
  // eps_p = pressure_stabilization * h^2.
  double pressure_stabilization = 1.0;
  // Scale of the continuity rows relative to the momentum rows. The loss is a
  // least-squares compromise once immersed-boundary penalties make the system
  // inconsistent, and this sets how much of the mismatch continuity absorbs.
  double continuity_weight = 1.0;
  int quadrature_order = 2;

  int n_dof() const { return kind == PdeKind::Poisson ? 1 : 3; }
  // Components the immersed-boundary penalty acts on.
  std::vector<int> boundary_components() const;
  void validate() const;

  static PdeProblem poisson(double f, double g, double g_in);
};

struct LossWeights {
  double pde = 1.0;
  // Weight of the boundary term inside the Galerkin residual, integrated over
  // the cloud with its area weights; scaled by 1/h (penalty FEM).
  double weak_boundary = 1.0;
  double boundary = 1.0;   // lambda_1
  double exterior = 1.0;   // lambda_2
  bool inverse_h_scaling = false;
  // Divide the pde weight by h^2. Galerkin rows shrink like h^2 (times the
  // strong residual), so without this the boundary terms take over as the
  // grid is refined and the solution drifts toward g_in.
  bool normalize_pde = true;
};

struct LossBreakdown {
  double pde_term = 0.0;
  double boundary_term = 0.0;
  double exterior_term = 0.0;
  double total = 0.0;
  LossWeights weights;
};

struct BoundaryPenalty {
  double value = 0.0;       // unweighted sum of squares
  VecX residuals;           // one per (point, component), point-major
};

// Fixed (strongly imposed) degrees of freedom from the wall conditions.
struct DofConstraints {
  std::vector<std::uint8_t> fixed;
  VecX values;

  int fixed_count() const;
  void apply(VecX& u) const;
  void zero_fixed(VecX& g) const;
};

DofConstraints wall_constraints(const BackgroundGrid& grid, const PdeProblem& prob);

// Everything needed to evaluate the immersed loss for one geometry: element
// and Gauss-point masks, cloud point locations and wall constraints.
class ImmersedProblem {
 public:
  ImmersedProblem(BackgroundGrid grid, OccupancyField occ, BoundaryPointCloud cloud,
                  PdeProblem prob, LossWeights weights = {});

  const BackgroundGrid& grid() const { return grid_; }
  const OccupancyField& occupancy() const { return occ_; }
  const BoundaryPointCloud& cloud() const { return cloud_; }
  const PdeProblem& problem() const { return prob_; }
  const DofConstraints& constraints() const { return constraints_; }
  int n_dof() const { return prob_.n_dof(); }
  int size() const { return grid_.num_nodes() * n_dof(); }
  double boundary_weight() const;
  double exterior_weight() const;
  double weak_boundary_weight() const;
  double pde_weight() const;

  // A field with the wall values applied and g_in on object nodes.
  VecX initial_guess() const;

  // Galerkin residual, one row per degree of freedom; rows of object nodes and
  // fixed dofs are zero.
  VecX pde_residual(const VecX& u) const;
  // Jacobian of pde_residual (constant for Poisson).
  SparseMatrix pde_jacobian(const VecX& u) const;

  BoundaryPenalty boundary_penalty(const VecX& u) const;
  double exterior_penalty(const VecX& u) const;

  LossBreakdown total_loss(const VecX& u) const;
  // Exact gradient of total_loss().total; zero on fixed dofs.
  VecX loss_gradient(const VecX& u) const;
  double loss_and_gradient(const VecX& u, VecX& grad) const;
  // Loss of u with the wall values written over its fixed dofs. Its gradient
  // is loss_gradient(), which is the true gradient of this function; use it
  // as the objective for unconstrained optimizers.
  double projected_loss_and_gradient(const VecX& u, VecX& grad) const;

  // The loss as a sum of squares: total = ||r||^2. Rows are the weighted pde
  // residual, boundary residuals and object-node residuals.
  VecX stacked_residual(const VecX& u) const;
  SparseMatrix stacked_jacobian(const VecX& u) const;

  // Which Gauss points of an element are integrated (bit q set).
  std::uint32_t gauss_mask(int element) const { return gauss_mask_[element]; }
  const std::vector<int>& assembly_elements() const { return elements_; }
  const ElementTable& table() const { return table_; }

  // Masked L2 norm over the integrated region of a nodal field component, or of
  // its difference from an analytic function.
  double l2_norm(const VecX& u, int component = 0, const ScalarFn& reference = {}) const;
  double integrated_area() const;

 private:
  template <typename Fn>
  void for_each_gauss_point(Fn&& fn) const;

  void local_residual(int element, int q, const double* uloc, double* rloc,
                      double* jloc) const;

  // Basis values at cloud point i and the derivative of its Robin trace
  // alpha u + beta du/dn with respect to the four element nodes.
  struct WeakBoundaryStencil {
    std::array<int, 4> nodes;
    Eigen::Vector4d value;
    Eigen::Vector4d trace;
  };
  WeakBoundaryStencil weak_stencil(int i) const;

  BackgroundGrid grid_;
  OccupancyField occ_;
  BoundaryPointCloud cloud_;
  PdeProblem prob_;
  LossWeights weights_;
  ElementTable table_;
  std::vector<int> elements_;
  std::vector<std::uint32_t> gauss_mask_;
  std::vector<BackgroundGrid::Location> cloud_loc_;
  std::vector<std::uint8_t> row_active_;
  DofConstraints constraints_;
  double pressure_eps_;
};

// Free-function forms of the loss pieces.
VecX poisson_residual(const NodalField& u, const OccupancyField& occ, const PdeProblem& prob);
VecX ns_residual(const NodalField& u, const OccupancyField& occ, const PdeProblem& prob);
BoundaryPenalty boundary_penalty(const NodalField& u, const BoundaryPointCloud& cloud,
                                 const PdeProblem& prob);
double exterior_penalty(const NodalField& u, const OccupancyField& occ, const VecX& g_in);
LossBreakdown total_loss(const NodalField& u, const OccupancyField& occ,
                         const BoundaryPointCloud& cloud, const PdeProblem& prob,
                         const LossWeights& weights);
VecX loss_gradient(const NodalField& u, const OccupancyField& occ,
                   const BoundaryPointCloud& cloud, const PdeProblem& prob,
                   const LossWeights& weights);

// Minimiser of a quadratic loss by one sparse solve of the normal equations of
// the stacked residual. For Navier-Stokes this is one Gauss-Newton step.
VecX solve_normal_equations(const ImmersedProblem& problem, const VecX& u0);

struct GaussNewtonReport {
  int iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double gradient_norm = 0.0;
  bool converged = false;
  // Loss and ||grad||_inf at the start of each iteration.
  std::vector<double> loss_history;
  std::vector<double> gradient_history;
  std::vector<double> seconds_history;
  double seconds = 0.0;
};

struct GaussNewtonOptions {
  int max_iterations = 50;
  double gradient_tol = 1e-10;   // on ||grad||_inf
  double relative_tol = 1e-14;   // on loss decrease
};

// Damped Gauss-Newton on the stacked residual.
VecX gauss_newton(const ImmersedProblem& problem, VecX u, const GaussNewtonOptions& options = {},
                  GaussNewtonReport* report = nullptr);

}  // namespace ibn

#endif  // IBN_RESIDUAL_HPP
