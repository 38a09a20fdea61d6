#ifndef IBN_OCCUPANCY_HPP
#define IBN_OCCUPANCY_HPP

#include <cstdint>
#include <optional>
#include <vector>

#include "ibn/geometry.hpp"
#include "ibn/grid_fem.hpp"

namespace ibn {

enum class ElementLabel : std::uint8_t { Active, Inactive, Cut };

// Which side of the cloud is the masked object region. Inside: the cloud
// encloses the object (heat source, obstacle). Outside: the cloud encloses the
// computational domain and everything beyond it is masked.
enum class MaskSide { Inside, Outside };

// Object occupancy on grid nodes. `chi` is oriented so that values above the
// threshold mean "object" regardless of MaskSide.
struct OccupancyField {
  VecX chi;
  std::optional<VecX> phi;
  double threshold = 0.5;
  MaskSide side = MaskSide::Inside;
  std::vector<std::uint8_t> node_in_object;
  std::vector<ElementLabel> element_labels;

  bool classified() const {
    return node_in_object.size() == static_cast<std::size_t>(chi.size()) &&
           !element_labels.empty();
  }
  int object_node_count() const;
  int count(ElementLabel label) const;
  // Elements that take part in assembly (active and cut).
  std::vector<int> assembly_elements() const;
};

inline constexpr double kWindingSingularScale = 1e-9;

// Generalised winding number of a closed oriented cloud at q. Uses the
// 1/(2 pi r^2) kernel for 2D clouds and 1/(4 pi r^3) for 3D. Distances below
// eps_sing are clamped to eps_sing.
double winding_number(const BoundaryPointCloud& cloud, const VecX& q, double eps_sing = 1e-9);
double winding_number(const BoundaryPointCloud& cloud, const Vec2& q, double eps_sing = 1e-9);

// Winding numbers for each row of `queries`.
VecX winding_numbers(const BoundaryPointCloud& cloud, const MatX& queries, double eps_sing);

struct OccupancyOptions {
  double threshold = 0.5;
  MaskSide side = MaskSide::Inside;
};

// Node labels from chi, then element labels from corner labels.
void classify(OccupancyField& field, const BackgroundGrid& grid);

// Inactive iff all corners are object nodes, active iff none are, cut
// otherwise.
std::vector<ElementLabel> classify_elements(const OccupancyField& field,
                                            const BackgroundGrid& grid);

OccupancyField occupancy_grid(const BoundaryPointCloud& cloud, const BackgroundGrid& grid,
                              const OccupancyOptions& options = {});

// Object occupancy interpolated at a point of an element; used to mask Gauss
// points of cut elements.
double occupancy_at(const OccupancyField& field, const BackgroundGrid& grid, int element,
                    const Vec2& local);

struct EikonalOptions {
  double tau = 0.1;         // viscosity weight in [0, 0.5]
  int iters = 200;           // Gauss-Newton iterations over all stages
  double step = 1.0;        // fraction of each Gauss-Newton step taken
  double boundary_weight = 1.0;
  double grad_smoothing = 1e-3;
  double tol = 1e-12;       // relative loss decrease that counts as converged
  OccupancyOptions occupancy{};
};

struct EikonalReport {
  int iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Discrete Eikonal loss and its pieces for a nodal SDF.
struct EikonalLoss {
  double interior = 0.0;
  double boundary = 0.0;
  double total() const { return interior + boundary; }
};
EikonalLoss eikonal_loss(const VecX& phi, const BoundaryPointCloud& cloud,
                         const BackgroundGrid& grid, const EikonalOptions& options);

// 5-point Laplacian of a nodal field, scaled by h so that the viscous term is
// dimensionless. Missing neighbours on the box boundary drop that axis.
VecX scaled_nodal_laplacian(const VecX& phi, const BackgroundGrid& grid);

// Signed distance (negative inside the cloud) by damped Gauss-Newton on
//   sum_gauss (|grad phi| - tau s h Lap phi - 1)^2 w|J| + lambda_b sum_i phi(p_i)^2
// where s = sign(phi0) and phi0 = (0.5 - chi_w) h. The smoother is first run
// much stronger and relaxed to tau over a few stages; phi is also kept from
// taking the wrong sign at nodes whose winding number is clearly 0 or 1.
// chi is then the object occupancy implied by sign(phi).
OccupancyField eikonal_sdf(const BoundaryPointCloud& cloud, const BackgroundGrid& grid,
                           const EikonalOptions& options = {},
                           EikonalReport* report = nullptr);

}  // namespace ibn

#endif  // IBN_OCCUPANCY_HPP
