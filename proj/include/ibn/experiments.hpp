#ifndef IBN_EXPERIMENTS_HPP
#define IBN_EXPERIMENTS_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibn/occupancy.hpp"
#include "ibn/optimizer.hpp"
#include "ibn/parametric_model.hpp"
#include "ibn/residual.hpp"

namespace ibn {

struct ShapeConfig {
  std::string type = "circle";  // circle | spline | file
  Vec2 center{0.5, 0.5};
  double radius = 0.25;
  int points = 1000;
  std::string path;  // type == file
  SplineShapeSpec spline;
};

struct PdeConfig {
  double f = 0.0;
  double alpha = 1.0;
  double beta = 0.0;
  double g = 1.0;
  double g_in = 1.0;
  double re = 40.0;
  std::optional<double> nu;  // overrides re
  double pressure_stabilization = 1.0;
  double continuity_weight = 10.0;
  double pressure_ghost_weight = 0.01;
};

struct WeightConfig {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  bool inverse_h = true;
  double weak_boundary = 1.0;
  double pde = 1.0;
  bool normalize_pde = true;
};

struct ScheduleConfig {
  std::string kind = "adam";
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double eta = 0.0;
  double mu = 0.0;    // 0: estimate
  double beta = 0.0;  // 0: estimate
  long epochs = 20000;
  double grad_tol = 1e-8;
  int batch_size = 0;
};

struct ChannelConfig {
  double length = 2.0;
  double height = 1.0;
  double chord = 0.25;
  Vec2 center{0.5, 0.5};
  int points = 1000;
};

struct ParametricConfig {
  std::uint64_t family_seed = 7;
  std::uint64_t net_seed = 1;
  int family_size = 8;
  int held_out = 2;
  std::vector<int> hidden{64, 64};
  double center_jitter = 0.05;
  double radius_min = 0.2;
  double radius_max = 0.3;
  int points = 400;
  std::vector<double> descriptor;  // query only
  std::string model_path;          // query only
};

// Everything a run needs; serialises to JSON and back without loss.
struct RunConfig {
  std::string kind = "poisson";  // poisson | ns | disk | parametric | shapes | occupancy | sdf | query
  int n_c = 32;
  std::vector<int> n_list{16, 32, 64, 128};
  std::string solver = "direct";  // direct | gradient (nodal problems)
  ShapeConfig shape;
  PdeConfig pde;
  WeightConfig weights;
  ScheduleConfig schedule;
  ChannelConfig channel;
  ParametricConfig parametric;
  EikonalOptions eikonal;
  std::string mask_side = "auto";  // auto | inside | outside
  std::string occupancy_method = "winding";  // winding | sdf
  int shape_count = 1;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string output_dir = "run";

  void validate() const;
  MaskSide resolved_mask_side() const;
};

// Defaults for one experiment kind: the heat problem for poisson, the disk
// with f = 1 for disk and parametric, Re 40 channel for ns.
RunConfig default_config(const std::string& kind);

nlohmann::json to_json(const RunConfig& config);
// Missing keys keep the defaults of the document's kind (default_kind when
// it names none); unknown keys are configuration errors. Values are checked
// later by RunConfig::validate, after command-line overrides.
RunConfig config_from_json(const nlohmann::json& j, const std::string& default_kind = "poisson");
RunConfig load_config(const std::filesystem::path& path,
                      const std::string& default_kind = "poisson");
void save_config(const RunConfig& config, const std::filesystem::path& path);

// 1/4 (R^2 - r^2) inside the disk, 0 for r > R by convention.
double exact_disk_solution(double r, double radius);

BoundaryPointCloud make_cloud(const ShapeConfig& shape);
StepSchedule make_schedule(const ScheduleConfig& s, double mu = 0.0, double beta = 0.0);

struct NodalSolve {
  VecX u;
  OptimTrace trace;
  bool converged = false;
};

// Minimises the problem's loss, either with the direct normal-equation solve
// or with the configured first-order schedule.
NodalSolve solve_nodal(const ImmersedProblem& problem, const RunConfig& config,
                       const std::optional<VecX>& reference = std::nullopt);

struct DiskRow {
  int n_c = 0;
  double h = 0.0;
  double error = 0.0;
  double center_value = 0.0;
  double seconds = 0.0;
  bool converged = true;
};

struct DiskConvergenceResult {
  std::vector<DiskRow> rows;
  double slope = 0.0;  // of L2 error against h, converged rows only
};

// Disk of radius R (shape.radius) with f = 1 and u = 0 on the circle; the
// disk interior is the computational domain.
ImmersedProblem disk_problem(int n_c, const RunConfig& config);
DiskConvergenceResult run_disk_convergence(const RunConfig& config, bool write_outputs = true);

// Gradient-based runs of the disk problem at each resolution, tracking the
// optimisation error against the direct minimiser and the terminal error
// against the analytic solution.
struct RateProbeRow {
  int n_c = 0;
  double h = 0.0;
  long epochs = 0;
  bool converged = false;
  double terminal_error = 0.0;        // ||u_K - u||_L2
  double direct_error = 0.0;          // same for the direct minimiser
  double tail_monotone_fraction = 0.0;  // of non-increasing steps of ||U_k - U_inf||
  double seconds = 0.0;
};

struct RateProbeReport {
  std::vector<RateProbeRow> rows;
  double slope_squared = 0.0;  // of ||u_K - u||^2 against h, converged rows only
  int excluded = 0;
};
RateProbeReport run_rate_probe(const RunConfig& config, bool write_outputs = true);

struct PoissonShapeResult {
  VecX u;
  OccupancyField occupancy;
  double min_active = 0.0;
  double max_active = 0.0;
  double boundary_mean = 0.0;      // mean u^h over cloud points
  double boundary_max_dev = 0.0;   // max |u^h(p_i) - g|
  OptimTrace trace;
};
PoissonShapeResult run_poisson_shape(const RunConfig& config, bool write_outputs = true);

struct NsDiagnostics {
  double divergence = 0.0;          // ||div u||_L2(active) / ||u||_L2
  double divergence_grad = 0.0;     // ||div u|| / ||grad u||
  double divergence_outside_band = 0.0;  // same ratio, one cell away from the body
  double symmetry_defect = 0.0;
  double slip = 0.0;                // max |u| over cloud points / U_max
  double u_max = 0.0;
  double stagnation_x = 0.0;        // max pressure on the upwind centreline
  double front_x = 0.0;             // leading edge of the body
  bool stagnation_on_front = false;
};

struct NsResult {
  VecX u;
  NsDiagnostics diagnostics;
  GaussNewtonReport report;
};

ImmersedProblem ns_channel_problem(const RunConfig& config);
NsResult run_ns_channel(const RunConfig& config, bool write_outputs = true);

struct ParametricShapeReport {
  VecX descriptor;
  bool held_out = false;
  double boundary_penalty = 0.0;
  double exterior_penalty = 0.0;
  double distance_to_direct = 0.0;
  double direct_error = 0.0;  // direct solve against the analytic disk solution
};

struct ParametricResult {
  DenseNet net;
  TrainResult training;
  std::vector<ParametricShapeReport> shapes;
  double train_mean_distance = 0.0;
  double held_out_max_distance = 0.0;
};

// Circle family for the disk problem with (cx, cy, R) descriptors. The first
// family_size - held_out shapes train the net.
std::vector<ShapeSample> circle_family(const RunConfig& config, std::vector<Vec3>* descriptors);
ParametricResult run_parametric(const RunConfig& config, bool write_outputs = true);

// Field predicted by a saved model for one descriptor.
VecX run_query(const RunConfig& config, bool write_outputs = true);

// Writes the configured shapes as point-cloud files; returns their paths.
std::vector<std::filesystem::path> run_gen_shapes(const RunConfig& config);
OccupancyField run_occupancy(const RunConfig& config, bool write_outputs = true);
OccupancyField run_sdf(const RunConfig& config, bool write_outputs = true);

}  // namespace ibn

#endif  // IBN_EXPERIMENTS_HPP
