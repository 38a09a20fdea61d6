#include "ibn/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>

#include "ibn/field_io.hpp"
#include "ibn/parallel.hpp"

namespace ibn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- json helpers ---------------------------------------------------------

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known) throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void read_vec2(const json& j, const char* key, Vec2& out, const std::string& where) {
  if (!j.contains(key)) return;
  std::vector<double> v;
  read(j, key, v, where);
  if (v.size() != 2) throw ConfigError(where + "." + key + ": expected two numbers");
  out = Vec2(v[0], v[1]);
}

json vec2_json(const Vec2& v) { return json::array({v.x(), v.y()}); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + ec.message(), dir.string());
}

void begin_run(const RunConfig& config, bool write_outputs) {
  config.validate();
  set_num_threads(config.threads);
  if (write_outputs) {
    ensure_dir(config.output_dir);
    save_config(config, fs::path(config.output_dir) / "config.json");
  }
}

std::vector<DirichletWall> zero_walls() {
  std::vector<DirichletWall> walls;
  for (Side s : {Side::Left, Side::Right, Side::Bottom, Side::Top}) {
    walls.push_back({s, 0, [](const Vec2&) { return 0.0; }});
  }
  return walls;
}

LossWeights loss_weights(const WeightConfig& w) {
  LossWeights out;
  out.pde = w.pde;
  out.weak_boundary = w.weak_boundary;
  out.boundary = w.lambda1;
  out.exterior = w.lambda2;
  out.inverse_h_scaling = w.inverse_h;
  out.normalize_pde = w.normalize_pde;
  return out;
}

PdeProblem poisson_problem(const RunConfig& config) {
  PdeProblem prob = PdeProblem::poisson(config.pde.f, config.pde.g, config.pde.g_in);
  prob.alpha = config.pde.alpha;
  prob.beta = config.pde.beta;
  prob.walls = zero_walls();
  return prob;
}

OccupancyField occupancy_for(const RunConfig& config, const BoundaryPointCloud& cloud,
                             const BackgroundGrid& grid) {
  OccupancyOptions oo;
  oo.side = config.resolved_mask_side();
  if (config.occupancy_method == "sdf") {
    EikonalOptions eo = config.eikonal;
    eo.occupancy = oo;
    return eikonal_sdf(cloud, grid, eo);
  }
  return occupancy_grid(cloud, grid, oo);
}

double inf_norm(const VecX& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// The disk solution with general forcing: f/4 (R^2 - r^2).
ScalarFn disk_reference(const Vec2& center, double radius, double f) {
  return [=](const Vec2& x) { return f * exact_disk_solution((x - center).norm(), radius); };
}

void write_occupancy(const OccupancyField& occ, const BackgroundGrid& grid, const fs::path& path) {
  std::vector<std::string> names{"chi", "object"};
  VecX object(grid.num_nodes());
  for (int i = 0; i < grid.num_nodes(); ++i) object(i) = occ.node_in_object[i];
  std::vector<VecX> values{occ.chi, object};
  if (occ.phi) {
    names.push_back("phi");
    values.push_back(*occ.phi);
  }
  write_fields_vtk(grid, names, values, path);
}

}  // namespace

// ---- RunConfig --------------------------------------------------------------

MaskSide RunConfig::resolved_mask_side() const {
  if (mask_side == "inside") return MaskSide::Inside;
  if (mask_side == "outside") return MaskSide::Outside;
  // The disk harnesses solve inside the circle; everything else treats the
  // cloud as an object in the box.
  return (kind == "disk" || kind == "parametric" || kind == "query") ? MaskSide::Outside
                                                                      : MaskSide::Inside;
}

void RunConfig::validate() const {
  static const std::vector<std::string> kinds{"poisson", "ns",        "disk",   "parametric",
                                              "shapes",  "occupancy", "sdf",    "query"};
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
    throw ConfigError("unknown experiment kind '" + kind + "'");
  }
  if (n_c < 1) throw ConfigError("n_c must be positive");
  if (n_list.empty()) throw ConfigError("n_list is empty");
  for (std::size_t i = 0; i < n_list.size(); ++i) {
    if (n_list[i] < 1) throw ConfigError("n_list entries must be positive");
    if (i > 0 && n_list[i] <= n_list[i - 1]) throw ConfigError("n_list must be ascending");
  }
  if (solver != "direct" && solver != "gradient") {
    throw ConfigError("solver must be 'direct' or 'gradient'");
  }
  if (shape.type != "circle" && shape.type != "spline" && shape.type != "file") {
    throw ConfigError("shape.type must be circle, spline or file");
  }
  if (shape.type == "circle" && !(shape.radius > 0)) throw ConfigError("shape.radius must be positive");
  if (shape.type == "file" && shape.path.empty()) throw ConfigError("shape.path is required");
  if (shape.points < 3) throw ConfigError("shape.points must be at least 3");
  if (shape.type == "spline") shape.spline.validate();
  if (mask_side != "auto" && mask_side != "inside" && mask_side != "outside") {
    throw ConfigError("mask_side must be auto, inside or outside");
  }
  if (occupancy_method != "winding" && occupancy_method != "sdf") {
    throw ConfigError("occupancy_method must be winding or sdf");
  }
  if (!(pde.re > 0)) throw ConfigError("pde.re must be positive");
  if (pde.nu && !(*pde.nu > 0)) throw ConfigError("pde.nu must be positive");
  if (!(pde.pressure_stabilization >= 0)) throw ConfigError("pde.pressure_stabilization must be >= 0");
  if (!(pde.continuity_weight > 0)) throw ConfigError("pde.continuity_weight must be positive");
  if (!(pde.pressure_ghost_weight >= 0)) throw ConfigError("pde.pressure_ghost_weight must be >= 0");
  if (!(weights.lambda1 >= 0) || !(weights.lambda2 >= 0) || !(weights.pde > 0) ||
      !(weights.weak_boundary >= 0)) {
    throw ConfigError("loss weights must be non-negative (pde positive)");
  }
  schedule_kind_from_string(schedule.kind);
  if (schedule.epochs < 0) throw ConfigError("schedule.epochs must be >= 0");
  if (schedule.batch_size < 0) throw ConfigError("schedule.batch_size must be >= 0");
  if (!(channel.length > 0) || !(channel.height > 0) || !(channel.chord > 0)) {
    throw ConfigError("channel dimensions must be positive");
  }
  if (channel.points < 3) throw ConfigError("channel.points must be at least 3");
  if (parametric.family_size < 2) throw ConfigError("parametric.family_size must be at least 2");
  if (parametric.held_out < 0 || parametric.held_out >= parametric.family_size) {
    throw ConfigError("parametric.held_out must leave at least one training shape");
  }
  for (int w : parametric.hidden) {
    if (w < 1) throw ConfigError("parametric.hidden widths must be positive");
  }
  if (!(parametric.radius_min > 0) || parametric.radius_max < parametric.radius_min) {
    throw ConfigError("parametric radius range is invalid");
  }
  if (parametric.center_jitter < 0) throw ConfigError("parametric.center_jitter must be >= 0");
  if (parametric.points < 3) throw ConfigError("parametric.points must be at least 3");
  if (!(eikonal.tau >= 0 && eikonal.tau <= 0.5)) throw ConfigError("eikonal.tau must be in [0, 0.5]");
  if (eikonal.iters < 1) throw ConfigError("eikonal.iters must be positive");
  if (shape_count < 1) throw ConfigError("shape_count must be positive");
  if (threads < 1) throw ConfigError("threads must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
}

RunConfig default_config(const std::string& kind) {
  RunConfig c;
  c.kind = kind;
  if (kind == "disk" || kind == "parametric" || kind == "query") {
    c.pde.f = 1.0;
    c.pde.g = 0.0;
    c.pde.g_in = 0.0;
  }
  if (kind == "parametric" || kind == "query") {
    c.n_c = 16;
    c.schedule.kind = "adam";
    c.schedule.lr = 1e-3;
    c.schedule.epochs = 2000;
  }
  if (kind == "ns") {
    c.weights.inverse_h = false;
    c.pde.g = 0.0;
    c.pde.g_in = 0.0;
  }
  if (kind == "disk") {
    c.n_list = {16, 32, 64, 128};
    c.schedule.lr = 1e-4;  // 3e-4 oscillates on the 1/h^2-weighted disk loss
    c.schedule.grad_tol = 1e-6;  // Adam's normalised step stalls around 1e-7
  }
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["kind"] = c.kind;
  j["n_c"] = c.n_c;
  j["n_list"] = c.n_list;
  j["solver"] = c.solver;
  j["shape"] = {{"type", c.shape.type},
                {"center", vec2_json(c.shape.center)},
                {"radius", c.shape.radius},
                {"points", c.shape.points},
                {"path", c.shape.path},
                {"spline",
                 {{"control_count", c.shape.spline.control_count},
                  {"seed", c.shape.spline.seed},
                  {"degree", c.shape.spline.degree},
                  {"samples", c.shape.spline.samples},
                  {"y_min", c.shape.spline.y_min},
                  {"y_max", c.shape.spline.y_max},
                  {"center", vec2_json(c.shape.spline.center)},
                  {"radius_scale", c.shape.spline.radius_scale}}}};
  j["pde"] = {{"f", c.pde.f},
              {"alpha", c.pde.alpha},
              {"beta", c.pde.beta},
              {"g", c.pde.g},
              {"g_in", c.pde.g_in},
              {"re", c.pde.re},
              {"nu", c.pde.nu ? json(*c.pde.nu) : json(nullptr)},
              {"pressure_stabilization", c.pde.pressure_stabilization},
              {"continuity_weight", c.pde.continuity_weight},
              {"pressure_ghost_weight", c.pde.pressure_ghost_weight}};
  j["weights"] = {{"lambda1", c.weights.lambda1},
                  {"lambda2", c.weights.lambda2},
                  {"inverse_h", c.weights.inverse_h},
                  {"weak_boundary", c.weights.weak_boundary},
                  {"pde", c.weights.pde},
                  {"normalize_pde", c.weights.normalize_pde}};
  j["schedule"] = {{"kind", c.schedule.kind},   {"lr", c.schedule.lr},
                   {"beta1", c.schedule.beta1}, {"beta2", c.schedule.beta2},
                   {"epsilon", c.schedule.epsilon}, {"eta", c.schedule.eta},
                   {"mu", c.schedule.mu},       {"beta", c.schedule.beta},
                   {"epochs", c.schedule.epochs}, {"grad_tol", c.schedule.grad_tol},
                   {"batch_size", c.schedule.batch_size}};
  j["channel"] = {{"length", c.channel.length},
                  {"height", c.channel.height},
                  {"chord", c.channel.chord},
                  {"center", vec2_json(c.channel.center)},
                  {"points", c.channel.points}};
  j["parametric"] = {{"family_seed", c.parametric.family_seed},
                     {"net_seed", c.parametric.net_seed},
                     {"family_size", c.parametric.family_size},
                     {"held_out", c.parametric.held_out},
                     {"hidden", c.parametric.hidden},
                     {"center_jitter", c.parametric.center_jitter},
                     {"radius_min", c.parametric.radius_min},
                     {"radius_max", c.parametric.radius_max},
                     {"points", c.parametric.points},
                     {"descriptor", c.parametric.descriptor},
                     {"model_path", c.parametric.model_path}};
  j["eikonal"] = {{"tau", c.eikonal.tau},
                  {"iters", c.eikonal.iters},
                  {"step", c.eikonal.step},
                  {"boundary_weight", c.eikonal.boundary_weight},
                  {"grad_smoothing", c.eikonal.grad_smoothing},
                  {"tol", c.eikonal.tol}};
  j["mask_side"] = c.mask_side;
  j["occupancy_method"] = c.occupancy_method;
  j["shape_count"] = c.shape_count;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig config_from_json(const json& j, const std::string& default_kind) {
  check_keys(j,
             {"kind", "n_c", "n_list", "solver", "shape", "pde", "weights", "schedule", "channel",
              "parametric", "eikonal", "mask_side", "occupancy_method", "shape_count", "seed",
              "threads", "output_dir"},
             "config");
  std::string kind = default_kind;
  read(j, "kind", kind, "config");
  RunConfig c = default_config(kind);
  read(j, "n_c", c.n_c, "config");
  read(j, "n_list", c.n_list, "config");
  read(j, "solver", c.solver, "config");
  read(j, "mask_side", c.mask_side, "config");
  read(j, "occupancy_method", c.occupancy_method, "config");
  read(j, "shape_count", c.shape_count, "config");
  read(j, "seed", c.seed, "config");
  read(j, "threads", c.threads, "config");
  read(j, "output_dir", c.output_dir, "config");

  if (j.contains("shape")) {
    const json& s = j.at("shape");
    check_keys(s, {"type", "center", "radius", "points", "path", "spline"}, "shape");
    read(s, "type", c.shape.type, "shape");
    read_vec2(s, "center", c.shape.center, "shape");
    read(s, "radius", c.shape.radius, "shape");
    read(s, "points", c.shape.points, "shape");
    read(s, "path", c.shape.path, "shape");
    if (s.contains("spline")) {
      const json& b = s.at("spline");
      auto& sp = c.shape.spline;
      check_keys(b, {"control_count", "seed", "degree", "samples", "y_min", "y_max", "center",
                     "radius_scale"},
                 "shape.spline");
      read(b, "control_count", sp.control_count, "shape.spline");
      read(b, "seed", sp.seed, "shape.spline");
      read(b, "degree", sp.degree, "shape.spline");
      read(b, "samples", sp.samples, "shape.spline");
      read(b, "y_min", sp.y_min, "shape.spline");
      read(b, "y_max", sp.y_max, "shape.spline");
      read_vec2(b, "center", sp.center, "shape.spline");
      read(b, "radius_scale", sp.radius_scale, "shape.spline");
    }
  }
  if (j.contains("pde")) {
    const json& p = j.at("pde");
    check_keys(p, {"f", "alpha", "beta", "g", "g_in", "re", "nu", "pressure_stabilization",
                   "continuity_weight", "pressure_ghost_weight"},
               "pde");
    read(p, "f", c.pde.f, "pde");
    read(p, "alpha", c.pde.alpha, "pde");
    read(p, "beta", c.pde.beta, "pde");
    read(p, "g", c.pde.g, "pde");
    read(p, "g_in", c.pde.g_in, "pde");
    read(p, "re", c.pde.re, "pde");
    if (p.contains("nu") && !p.at("nu").is_null()) {
      double nu = 0;
      read(p, "nu", nu, "pde");
      c.pde.nu = nu;
    } else if (p.contains("nu")) {
      c.pde.nu.reset();
    }
    read(p, "pressure_stabilization", c.pde.pressure_stabilization, "pde");
    read(p, "continuity_weight", c.pde.continuity_weight, "pde");
    read(p, "pressure_ghost_weight", c.pde.pressure_ghost_weight, "pde");
  }
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    check_keys(w, {"lambda1", "lambda2", "inverse_h", "weak_boundary", "pde", "normalize_pde"},
               "weights");
    read(w, "lambda1", c.weights.lambda1, "weights");
    read(w, "lambda2", c.weights.lambda2, "weights");
    read(w, "inverse_h", c.weights.inverse_h, "weights");
    read(w, "weak_boundary", c.weights.weak_boundary, "weights");
    read(w, "pde", c.weights.pde, "weights");
    read(w, "normalize_pde", c.weights.normalize_pde, "weights");
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    check_keys(s, {"kind", "lr", "beta1", "beta2", "epsilon", "eta", "mu", "beta", "epochs",
                   "grad_tol", "batch_size"},
               "schedule");
    read(s, "kind", c.schedule.kind, "schedule");
    read(s, "lr", c.schedule.lr, "schedule");
    read(s, "beta1", c.schedule.beta1, "schedule");
    read(s, "beta2", c.schedule.beta2, "schedule");
    read(s, "epsilon", c.schedule.epsilon, "schedule");
    read(s, "eta", c.schedule.eta, "schedule");
    read(s, "mu", c.schedule.mu, "schedule");
    read(s, "beta", c.schedule.beta, "schedule");
    read(s, "epochs", c.schedule.epochs, "schedule");
    read(s, "grad_tol", c.schedule.grad_tol, "schedule");
    read(s, "batch_size", c.schedule.batch_size, "schedule");
  }
  if (j.contains("channel")) {
    const json& s = j.at("channel");
    check_keys(s, {"length", "height", "chord", "center", "points"}, "channel");
    read(s, "length", c.channel.length, "channel");
    read(s, "height", c.channel.height, "channel");
    read(s, "chord", c.channel.chord, "channel");
    read_vec2(s, "center", c.channel.center, "channel");
    read(s, "points", c.channel.points, "channel");
  }
  if (j.contains("parametric")) {
    const json& s = j.at("parametric");
    auto& p = c.parametric;
    check_keys(s, {"family_seed", "net_seed", "family_size", "held_out", "hidden",
                   "center_jitter", "radius_min", "radius_max", "points", "descriptor",
                   "model_path"},
               "parametric");
    read(s, "family_seed", p.family_seed, "parametric");
    read(s, "net_seed", p.net_seed, "parametric");
    read(s, "family_size", p.family_size, "parametric");
    read(s, "held_out", p.held_out, "parametric");
    read(s, "hidden", p.hidden, "parametric");
    read(s, "center_jitter", p.center_jitter, "parametric");
    read(s, "radius_min", p.radius_min, "parametric");
    read(s, "radius_max", p.radius_max, "parametric");
    read(s, "points", p.points, "parametric");
    read(s, "descriptor", p.descriptor, "parametric");
    read(s, "model_path", p.model_path, "parametric");
  }
  if (j.contains("eikonal")) {
    const json& s = j.at("eikonal");
    check_keys(s, {"tau", "iters", "step", "boundary_weight", "grad_smoothing", "tol"}, "eikonal");
    read(s, "tau", c.eikonal.tau, "eikonal");
    read(s, "iters", c.eikonal.iters, "eikonal");
    read(s, "step", c.eikonal.step, "eikonal");
    read(s, "boundary_weight", c.eikonal.boundary_weight, "eikonal");
    read(s, "grad_smoothing", c.eikonal.grad_smoothing, "eikonal");
    read(s, "tol", c.eikonal.tol, "eikonal");
  }
  return c;
}

RunConfig load_config(const fs::path& path, const std::string& default_kind) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config", path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j, default_kind);
}

void save_config(const RunConfig& config, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config", path.string());
  out << to_json(config).dump(2) << '\n';
  if (!out) throw IoError("write failed", path.string());
}

// ---- shared pieces ----------------------------------------------------------

double exact_disk_solution(double r, double radius) {
  if (!(radius > 0)) throw DomainError("exact_disk_solution: radius must be positive");
  if (!(r >= 0)) throw DomainError("exact_disk_solution: r must be non-negative");
  if (r > radius) return 0.0;
  return 0.25 * (radius * radius - r * r);
}

BoundaryPointCloud make_cloud(const ShapeConfig& shape) {
  if (shape.type == "circle") return circle_cloud(shape.center, shape.radius, shape.points);
  if (shape.type == "spline") return sample_spline_shape(shape.spline);
  if (shape.type == "file") {
    return read_cloud(shape.path, [](const std::string& w) { std::cerr << "warning: " << w << '\n'; });
  }
  throw ConfigError("unknown shape type '" + shape.type + "'");
}

StepSchedule make_schedule(const ScheduleConfig& s, double mu, double beta) {
  if (s.mu > 0) mu = s.mu;
  if (s.beta > 0) beta = s.beta;
  switch (schedule_kind_from_string(s.kind)) {
    case ScheduleKind::ConstantSC:
      return StepSchedule::constant_sc(mu, beta);
    case ScheduleKind::ConstantPL:
      return StepSchedule::constant_pl(s.eta > 0 ? s.eta : 1.0 / beta, s.mu);
    case ScheduleKind::Diminishing:
      return StepSchedule::diminishing(mu);
    case ScheduleKind::Adam:
      return StepSchedule::adam(s.lr, s.beta1, s.beta2, s.epsilon);
    case ScheduleKind::Nesterov:
      return StepSchedule::nesterov(mu, beta);
  }
  throw ConfigError("unknown schedule");
}

NodalSolve solve_nodal(const ImmersedProblem& problem, const RunConfig& config,
                       const std::optional<VecX>& reference) {
  const LossGradFn fn = [&problem](const VecX& u, VecX& g) {
    return problem.projected_loss_and_gradient(u, g);
  };
  const VecX u0 = problem.initial_guess();
  NodalSolve out;
  if (config.solver == "direct") {
    const auto t0 = Clock::now();
    auto& tr = out.trace;
    auto row = [&](long epoch, const VecX& u) {
      VecX g;
      const double loss = fn(u, g);
      tr.epoch.push_back(epoch);
      tr.loss.push_back(loss);
      tr.grad_norm.push_back(inf_norm(g));
      tr.dist_to_ref.push_back(reference ? (u - *reference).norm() : kNaN);
      tr.seconds.push_back(since(t0));
    };
    row(0, u0);
    out.u = solve_normal_equations(problem, u0);
    row(1, out.u);
    if (!out.u.allFinite()) throw OptimizationError("direct solve produced non-finite values", 1);
    // The normal equations are solved to round-off; anything left is a
    // failed factorisation.
    out.converged = tr.grad_norm.back() <= 1e-6 * std::max(1.0, tr.grad_norm.front());
    tr.converged = out.converged;
    return out;
  }

  const ScheduleConfig& s = config.schedule;
  const ScheduleKind kind = schedule_kind_from_string(s.kind);
  const bool needs_curvature =
      ((kind == ScheduleKind::ConstantSC || kind == ScheduleKind::Nesterov) &&
       (s.mu <= 0 || s.beta <= 0)) ||
      (kind == ScheduleKind::Diminishing && s.mu <= 0) ||
      (kind == ScheduleKind::ConstantPL && s.eta <= 0 && s.beta <= 0);
  double mu = 0, beta = 0;
  if (needs_curvature) {
    // Margins: mu is underestimated and beta overestimated so the schedules
    // stay on the stable side of the estimate.
    const auto c = estimate_curvature(fn, u0, 3000, config.seed);
    mu = 0.5 * c.mu;
    beta = 1.01 * c.beta;
  }
  MinimizeOptions mo;
  mo.stop.max_epochs = s.epochs;
  mo.stop.gradient_tol = s.grad_tol;
  mo.fd_seed = config.seed + 1;
  mo.reference = reference;
  auto result = minimize(fn, u0, make_schedule(s, mu, beta), mo);
  out.u = std::move(result.theta);
  problem.constraints().apply(out.u);
  out.trace = std::move(result.trace);
  out.converged = out.trace.converged;
  return out;
}

// ---- disk convergence ---------------------------------------------------------

ImmersedProblem disk_problem(int n_c, const RunConfig& config) {
  auto grid = BackgroundGrid::unit_square(n_c);
  const auto cloud = circle_cloud(config.shape.center, config.shape.radius, config.shape.points);
  auto occ = occupancy_for(config, cloud, grid);
  return ImmersedProblem(grid, std::move(occ), cloud, poisson_problem(config),
                         loss_weights(config.weights));
}

DiskConvergenceResult run_disk_convergence(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  if (config.shape.type != "circle") throw ConfigError("disk convergence needs a circle shape");
  const fs::path dir(config.output_dir);
  const ScalarFn exact = disk_reference(config.shape.center, config.shape.radius, config.pde.f);
  DiskConvergenceResult res;
  OptimTrace all;
  for (int n : config.n_list) {
    const auto t0 = Clock::now();
    const ImmersedProblem problem = disk_problem(n, config);
    std::optional<VecX> reference;
    if (config.solver == "gradient") {
      reference = solve_normal_equations(problem, problem.initial_guess());
    }
    NodalSolve sol = solve_nodal(problem, config, reference);
    DiskRow row;
    row.n_c = n;
    row.h = problem.grid().h();
    row.error = problem.l2_norm(sol.u, 0, exact);
    // Node nearest the disk centre.
    const auto& g = problem.grid();
    const int ci = std::clamp(static_cast<int>(std::lround((config.shape.center.x() - g.lo().x()) / g.hx())), 0, g.nx());
    const int cj = std::clamp(static_cast<int>(std::lround((config.shape.center.y() - g.lo().y()) / g.hy())), 0, g.ny());
    row.center_value = sol.u(g.node_index(ci, cj));
    row.seconds = since(t0);
    row.converged = sol.converged;
    res.rows.push_back(row);
    for (std::size_t k = 0; k < sol.trace.size(); ++k) {
      all.epoch.push_back(sol.trace.epoch[k]);
      all.loss.push_back(sol.trace.loss[k]);
      all.grad_norm.push_back(sol.trace.grad_norm[k]);
      all.dist_to_ref.push_back(sol.trace.dist_to_ref[k]);
      all.seconds.push_back(sol.trace.seconds[k]);
    }
    if (write_outputs) {
      NodalField field(problem.grid(), 1, sol.u);
      write_field_vtk(field, dir / ("disk_n" + std::to_string(n) + ".vtk"), {"u"});
    }
    if (!sol.converged) {
      std::cerr << "disk n_c=" << n << ": solver did not converge (final |grad|_inf "
                << sol.trace.grad_norm.back() << " after " << sol.trace.epoch.back()
                << " epochs)\n";
      throw OptimizationError("disk convergence: n_c=" + std::to_string(n) + " did not converge",
                              sol.trace.epoch.back());
    }
  }
  std::vector<double> hs, errs;
  for (const auto& r : res.rows) {
    hs.push_back(r.h);
    errs.push_back(r.error);
  }
  res.slope = res.rows.size() >= 2 ? loglog_slope(hs, errs) : kNaN;
  all.converged = true;
  if (write_outputs) {
    CsvTable t;
    t.header = {"n_c", "h", "l2_error", "center_value", "seconds"};
    t.rows.resize(static_cast<long>(res.rows.size()), 5);
    for (std::size_t i = 0; i < res.rows.size(); ++i) {
      const auto& r = res.rows[i];
      t.rows.row(static_cast<long>(i)) << r.n_c, r.h, r.error, r.center_value, r.seconds;
    }
    write_csv(t, dir / "convergence.csv");
    CsvTable s;
    s.header = {"slope"};
    s.rows.resize(1, 1);
    s.rows(0, 0) = res.slope;
    write_csv(s, dir / "slope.csv");
    all.write_csv(dir / "trace.csv");
  }
  return res;
}

RateProbeReport run_rate_probe(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  if (config.shape.type != "circle") throw ConfigError("rate probe needs a circle shape");
  RunConfig gradient = config;
  gradient.solver = "gradient";
  const fs::path dir(config.output_dir);
  const ScalarFn exact = disk_reference(config.shape.center, config.shape.radius, config.pde.f);
  RateProbeReport rep;
  std::vector<double> hs, errs;
  for (int n : config.n_list) {
    const auto t0 = Clock::now();
    const ImmersedProblem problem = disk_problem(n, config);
    const VecX direct = solve_normal_equations(problem, problem.initial_guess());
    NodalSolve sol = solve_nodal(problem, gradient, direct);
    RateProbeRow row;
    row.n_c = n;
    row.h = problem.grid().h();
    row.epochs = sol.trace.epoch.back();
    row.converged = sol.converged;
    row.terminal_error = problem.l2_norm(sol.u, 0, exact);
    row.direct_error = problem.l2_norm(direct, 0, exact);
    const auto& dist = sol.trace.dist_to_ref;
    const std::size_t start = dist.size() / 2;
    int steps = 0, down = 0;
    // Increases below 1e-12 are round-off once the run has converged.
    for (std::size_t k = start + 1; k < dist.size(); ++k, ++steps) {
      down += dist[k] <= dist[k - 1] + 1e-12;
    }
    row.tail_monotone_fraction = steps ? static_cast<double>(down) / steps : 1.0;
    row.seconds = since(t0);
    if (row.converged) {
      hs.push_back(row.h);
      errs.push_back(row.terminal_error * row.terminal_error);
    } else {
      ++rep.excluded;
      std::cerr << "warning: rate probe n_c=" << n << " did not converge in " << row.epochs
                << " epochs; excluded from the fit\n";
    }
    if (write_outputs) sol.trace.write_csv(dir / ("trace_n" + std::to_string(n) + ".csv"));
    rep.rows.push_back(row);
  }
  rep.slope_squared = hs.size() >= 2 ? loglog_slope(hs, errs) : kNaN;
  if (write_outputs) {
    CsvTable t;
    t.header = {"n_c", "h", "epochs", "converged", "terminal_error", "direct_error",
                "tail_monotone_fraction", "seconds"};
    t.rows.resize(static_cast<long>(rep.rows.size()), 8);
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
      const auto& r = rep.rows[i];
      t.rows.row(static_cast<long>(i)) << r.n_c, r.h, static_cast<double>(r.epochs),
          r.converged ? 1.0 : 0.0, r.terminal_error, r.direct_error, r.tail_monotone_fraction,
          r.seconds;
    }
    write_csv(t, dir / "rate_probe.csv");
    // trace.csv for the run directory contract: the finest resolution.
    std::error_code ec;
    fs::copy_file(dir / ("trace_n" + std::to_string(config.n_list.back()) + ".csv"),
                  dir / "trace.csv", fs::copy_options::overwrite_existing, ec);
    if (ec) throw IoError("cannot write trace: " + ec.message(), (dir / "trace.csv").string());
  }
  return rep;
}

// ---- heat problem around a shape ----------------------------------------------

PoissonShapeResult run_poisson_shape(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  const fs::path dir(config.output_dir);
  const auto grid = BackgroundGrid::unit_square(config.n_c);
  const auto cloud = make_cloud(config.shape);
  auto occ = occupancy_for(config, cloud, grid);
  const ImmersedProblem problem(grid, occ, cloud, poisson_problem(config),
                                loss_weights(config.weights));
  NodalSolve sol = solve_nodal(problem, config);
  if (!sol.converged) {
    throw OptimizationError("solve-poisson: solver did not converge", sol.trace.epoch.back());
  }
  PoissonShapeResult res;
  res.u = sol.u;
  res.occupancy = occ;
  res.trace = sol.trace;
  res.min_active = std::numeric_limits<double>::infinity();
  res.max_active = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid.num_nodes(); ++i) {
    if (occ.node_in_object[i]) continue;
    res.min_active = std::min(res.min_active, sol.u(i));
    res.max_active = std::max(res.max_active, sol.u(i));
  }
  const NodalField field(grid, 1, sol.u);
  double sum = 0;
  for (int k = 0; k < cloud.size(); ++k) {
    const Vec2 p(cloud.points(k, 0), cloud.points(k, 1));
    const double v = interpolate(field, p)(0);
    sum += v;
    res.boundary_max_dev = std::max(res.boundary_max_dev, std::abs(v - config.pde.g));
  }
  res.boundary_mean = cloud.size() ? sum / cloud.size() : kNaN;

  if (write_outputs) {
    write_occupancy(occ, grid, dir / "occupancy.vtk");
    write_field_vtk(field, dir / "solution.vtk", {"u"});
    write_field_pgm(field, dir / "solution.pgm");
    sol.trace.write_csv(dir / "trace.csv");
  }
  // With no source the solution lies between the boundary data.
  if (config.pde.f == 0.0) {
    const double lo = std::min(0.0, config.pde.g) - 1e-6;
    const double hi = std::max(0.0, config.pde.g) + 1e-6;
    if (res.min_active < lo || res.max_active > hi) {
      throw StateError("solve-poisson: maximum principle violated, range [" +
                       std::to_string(res.min_active) + ", " + std::to_string(res.max_active) +
                       "]");
    }
  }
  return res;
}

// ---- channel flow ---------------------------------------------------------------

namespace {

BoundaryPointCloud channel_cloud(const RunConfig& config) {
  if (config.shape.type == "circle") {
    return circle_cloud(config.channel.center, 0.5 * config.channel.chord, config.channel.points);
  }
  return make_cloud(config.shape);
}

BackgroundGrid channel_grid(const RunConfig& config) {
  const auto& ch = config.channel;
  const int nx = std::max(1, static_cast<int>(std::lround(config.n_c * ch.length / ch.height)));
  return BackgroundGrid(nx, config.n_c, Vec2(0, 0), Vec2(ch.length, ch.height));
}

}  // namespace

ImmersedProblem ns_channel_problem(const RunConfig& config) {
  const auto grid = channel_grid(config);
  const auto cloud = channel_cloud(config);
  auto occ = occupancy_for(config, cloud, grid);
  PdeProblem prob;
  prob.kind = PdeKind::NavierStokes;
  // Peak inlet speed 1, length scale the chord.
  prob.viscosity = config.pde.nu ? *config.pde.nu : config.channel.chord / config.pde.re;
  prob.boundary_value = [g = config.pde.g](const Vec2&) { return g; };
  prob.alpha = config.pde.alpha;
  prob.beta = config.pde.beta;
  prob.interior_value = Eigen::Vector3d(config.pde.g_in, config.pde.g_in, 0.0);
  prob.interior_weight = Eigen::Vector3d(1.0, 1.0, config.pde.pressure_ghost_weight);
  prob.pressure_stabilization = config.pde.pressure_stabilization;
  prob.continuity_weight = config.pde.continuity_weight;
  prob.quadrature_order = 3;
  const double height = config.channel.height;
  const auto inlet = [height](const Vec2& p) {
    const double s = 2.0 * p.y() / height - 1.0;
    return 1.0 - s * s;
  };
  const auto zero = [](const Vec2&) { return 0.0; };
  prob.walls.push_back({Side::Left, 0, inlet});
  prob.walls.push_back({Side::Left, 1, zero});
  for (Side s : {Side::Bottom, Side::Top}) {
    prob.walls.push_back({s, 0, zero});
    prob.walls.push_back({s, 1, zero});
  }
  return ImmersedProblem(grid, std::move(occ), cloud, std::move(prob),
                         loss_weights(config.weights));
}

namespace {

NsDiagnostics ns_diagnostics(const ImmersedProblem& problem, const VecX& u) {
  const auto& grid = problem.grid();
  const auto& occ = problem.occupancy();
  const auto& cloud = problem.cloud();
  const NodalField f(grid, 3, u);
  NsDiagnostics d;

  // Mirror image about mid-height: node row j against row ny - j.
  double num = 0, den = 0;
  for (int j = 0; j <= grid.ny(); ++j) {
    for (int i = 0; i <= grid.nx(); ++i) {
      const int a = grid.node_index(i, j);
      const double ux = f.at(a, 0);
      const double uy = f.at(a, 1);
      num += std::pow(ux - f.at(grid.node_index(i, grid.ny() - j), 0), 2);
      den += ux * ux;
      d.u_max = std::max(d.u_max, std::hypot(ux, uy));
    }
  }
  d.symmetry_defect = den > 0 ? std::sqrt(num / den) : 0.0;

  double slip = 0;
  for (int k = 0; k < cloud.size(); ++k) {
    const VecX v = interpolate(f, Vec2(cloud.points(k, 0), cloud.points(k, 1)));
    slip = std::max(slip, std::hypot(v(0), v(1)));
  }
  d.slip = d.u_max > 0 ? slip / d.u_max : 0.0;

  // Divergence over the integrated region, optionally away from the body.
  const QuadratureRule rule = gauss_rule(3);
  const double jac = grid.jacobian();
  auto div_norms = [&](double band, double& div2, double& grad2) {
    div2 = grad2 = 0;
    for (int e : problem.assembly_elements()) {
      if (band > 0 && cloud.size() > 0) {
        const Vec2 c = grid.element_center(e);
        double dist = std::numeric_limits<double>::infinity();
        for (int k = 0; k < cloud.size(); ++k) {
          dist = std::min(dist, std::hypot(cloud.points(k, 0) - c.x(), cloud.points(k, 1) - c.y()));
        }
        if (dist < band) continue;
      }
      const auto nodes = grid.element_nodes(e);
      const std::uint32_t mask = problem.gauss_mask(e);
      for (int q = 0; q < rule.size(); ++q) {
        if (!(mask >> q & 1u)) continue;
        const Vec2 loc = rule.points.col(q);
        const auto dn = shape_gradients(loc, grid.hx(), grid.hy());
        Eigen::Matrix2d g = Eigen::Matrix2d::Zero();
        for (int a = 0; a < 4; ++a) {
          g.row(0) += f.at(nodes[a], 0) * dn.row(a);
          g.row(1) += f.at(nodes[a], 1) * dn.row(a);
        }
        const double w = rule.weights(q) * jac;
        div2 += w * g.trace() * g.trace();
        grad2 += w * g.squaredNorm();
      }
    }
  };
  const double unorm = std::hypot(problem.l2_norm(u, 0), problem.l2_norm(u, 1));
  double div2 = 0, grad2 = 0;
  div_norms(0.0, div2, grad2);
  d.divergence = unorm > 0 ? std::sqrt(div2) / unorm : 0.0;
  d.divergence_grad = grad2 > 0 ? std::sqrt(div2 / grad2) : 0.0;
  div_norms(grid.h(), div2, grad2);
  d.divergence_outside_band = unorm > 0 ? std::sqrt(div2) / unorm : 0.0;

  // Pressure maximum on the centreline row upwind of the body.
  if (cloud.size() > 0) {
    d.front_x = cloud.points.col(0).minCoeff();
    const double cy = cloud.points.col(1).mean();
    const int jc = std::clamp(static_cast<int>(std::lround((cy - grid.lo().y()) / grid.hy())), 0, grid.ny());
    const double back = cloud.points.col(0).maxCoeff();
    double pmax = -std::numeric_limits<double>::infinity();
    for (int i = 0; i <= grid.nx(); ++i) {
      const int node = grid.node_index(i, jc);
      const Vec2 pos = grid.node_position(node);
      if (pos.x() > 0.5 * (d.front_x + back)) break;
      if (occ.node_in_object[node]) continue;
      if (f.at(node, 2) > pmax) {
        pmax = f.at(node, 2);
        d.stagnation_x = pos.x();
      }
    }
    d.stagnation_on_front = std::abs(d.stagnation_x - d.front_x) <= grid.hx() * (1 + 1e-9);
  }
  return d;
}

}  // namespace

NsResult run_ns_channel(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  const fs::path dir(config.output_dir);
  const ImmersedProblem problem = ns_channel_problem(config);
  GaussNewtonOptions go;
  go.max_iterations = static_cast<int>(std::min<long>(config.schedule.epochs, 100));
  go.gradient_tol = config.schedule.grad_tol;
  go.relative_tol = 1e-10;
  NsResult res;
  res.u = gauss_newton(problem, problem.initial_guess(), go, &res.report);
  res.diagnostics = ns_diagnostics(problem, res.u);
  if (write_outputs) {
    const auto& g = problem.grid();
    const NodalField f(g, 3, res.u);
    write_field_vtk(f, dir / "flow.vtk", {"u_x", "u_y", "p"});
    write_field_pgm(f, dir / "speed_x.pgm", 0);
    write_occupancy(problem.occupancy(), g, dir / "occupancy.vtk");
    OptimTrace tr;
    const auto& rep = res.report;
    for (std::size_t k = 0; k < rep.loss_history.size(); ++k) {
      tr.epoch.push_back(static_cast<long>(k));
      tr.loss.push_back(rep.loss_history[k]);
      tr.grad_norm.push_back(rep.gradient_history[k]);
      tr.dist_to_ref.push_back(kNaN);
      tr.seconds.push_back(rep.seconds_history[k]);
    }
    if (rep.loss_history.empty() || rep.iterations > static_cast<int>(rep.loss_history.size()) - 1) {
      tr.epoch.push_back(rep.iterations);
      tr.loss.push_back(rep.final_loss);
      tr.grad_norm.push_back(inf_norm(problem.loss_gradient(res.u)));
      tr.dist_to_ref.push_back(kNaN);
      tr.seconds.push_back(rep.seconds);
    }
    tr.converged = rep.converged;
    tr.write_csv(dir / "trace.csv");
    const auto& d = res.diagnostics;
    CsvTable t;
    t.header = {"divergence", "divergence_grad", "divergence_outside_band", "symmetry_defect",
                "slip", "u_max", "stagnation_x", "front_x", "stagnation_on_front",
                "iterations", "final_loss"};
    t.rows.resize(1, 11);
    t.rows.row(0) << d.divergence, d.divergence_grad, d.divergence_outside_band,
        d.symmetry_defect, d.slip, d.u_max, d.stagnation_x, d.front_x,
        d.stagnation_on_front ? 1.0 : 0.0, rep.iterations, rep.final_loss;
    write_csv(t, dir / "diagnostics.csv");
  }
  return res;
}

// ---- parametric family -------------------------------------------------------------

namespace {

std::shared_ptr<const ImmersedProblem> circle_problem(const RunConfig& config, const Vec3& d) {
  const auto grid = BackgroundGrid::unit_square(config.n_c);
  const auto cloud = circle_cloud(d.head<2>(), d(2), config.parametric.points);
  auto occ = occupancy_for(config, cloud, grid);
  return std::make_shared<const ImmersedProblem>(grid, std::move(occ), cloud,
                                                 poisson_problem(config),
                                                 loss_weights(config.weights));
}

// Disk reference only exists for the masked-outside problem with zero data.
bool has_disk_reference(const RunConfig& config) {
  return config.resolved_mask_side() == MaskSide::Outside && config.pde.g == 0.0 &&
         config.pde.beta == 0.0;
}

std::vector<Vec3> circle_descriptors(const RunConfig& config, int count) {
  const auto& p = config.parametric;
  std::mt19937_64 rng(p.family_seed);
  std::uniform_real_distribution<double> ux(config.shape.center.x() - p.center_jitter,
                                            config.shape.center.x() + p.center_jitter);
  std::uniform_real_distribution<double> uy(config.shape.center.y() - p.center_jitter,
                                            config.shape.center.y() + p.center_jitter);
  std::uniform_real_distribution<double> ur(p.radius_min, p.radius_max);
  std::vector<Vec3> out;
  for (int s = 0; s < count; ++s) {
    // Draw order is part of the family definition.
    const double cx = ux(rng);
    const double cy = uy(rng);
    const double r = ur(rng);
    out.emplace_back(cx, cy, r);
  }
  return out;
}

}  // namespace

std::vector<ShapeSample> circle_family(const RunConfig& config, std::vector<Vec3>* descriptors) {
  const auto desc = circle_descriptors(config, config.parametric.family_size);
  std::vector<ShapeSample> family;
  for (const Vec3& d : desc) family.push_back({VecX(d), circle_problem(config, d)});
  if (descriptors) *descriptors = desc;
  return family;
}

ParametricResult run_parametric(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  const fs::path dir(config.output_dir);
  std::vector<Vec3> desc;
  const auto family = circle_family(config, &desc);
  const int n_train = config.parametric.family_size - config.parametric.held_out;
  const std::vector<ShapeSample> train(family.begin(), family.begin() + n_train);

  std::vector<int> sizes{3};
  for (int w : config.parametric.hidden) sizes.push_back(w);
  sizes.push_back(family.front().problem->size());
  ParametricResult res;
  res.net = DenseNet(sizes, config.parametric.net_seed);

  TrainOptions to;
  to.schedule = make_schedule(config.schedule);
  to.epochs = config.schedule.epochs;
  to.batch_size = config.schedule.batch_size;
  to.seed = config.seed;
  res.training = train_family(res.net, train, to);

  double train_sum = 0;
  for (std::size_t s = 0; s < family.size(); ++s) {
    const auto& prob = *family[s].problem;
    const VecX u = predict_field(res.net, family[s]);
    const VecX direct = solve_normal_equations(prob, prob.initial_guess());
    ParametricShapeReport r;
    r.descriptor = family[s].descriptor;
    r.held_out = static_cast<int>(s) >= n_train;
    r.boundary_penalty = prob.boundary_penalty(u).value;
    r.exterior_penalty = prob.exterior_penalty(u);
    r.distance_to_direct = prob.l2_norm(u - direct);
    r.direct_error = has_disk_reference(config)
                         ? prob.l2_norm(direct, 0,
                                        disk_reference(desc[s].head<2>(), desc[s](2), config.pde.f))
                         : kNaN;
    if (r.held_out) {
      res.held_out_max_distance = std::max(res.held_out_max_distance, r.distance_to_direct);
    } else {
      train_sum += r.distance_to_direct;
    }
    res.shapes.push_back(r);
  }
  res.train_mean_distance = train_sum / n_train;

  if (write_outputs) {
    res.net.save(dir / "model.txt");
    res.training.trace.write_csv(dir / "trace.csv");
    CsvTable t;
    t.header = {"shape", "cx", "cy", "radius", "held_out", "boundary_penalty",
                "exterior_penalty", "distance_to_direct", "direct_error"};
    t.rows.resize(static_cast<long>(res.shapes.size()), 9);
    for (std::size_t s = 0; s < res.shapes.size(); ++s) {
      const auto& r = res.shapes[s];
      t.rows.row(static_cast<long>(s)) << static_cast<double>(s), r.descriptor(0), r.descriptor(1),
          r.descriptor(2), r.held_out ? 1.0 : 0.0, r.boundary_penalty, r.exterior_penalty,
          r.distance_to_direct, r.direct_error;
    }
    write_csv(t, dir / "report.csv");
    const auto& last = family.back();
    const NodalField f(last.problem->grid(), 1, predict_field(res.net, last));
    write_field_vtk(f, dir / "prediction.vtk", {"u"});
    write_field_pgm(f, dir / "prediction.pgm");
  }
  return res;
}

VecX run_query(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  if (config.parametric.model_path.empty()) throw ConfigError("query needs parametric.model_path");
  const DenseNet net = DenseNet::load(config.parametric.model_path);
  const auto& d = config.parametric.descriptor;
  if (static_cast<int>(d.size()) != net.input_size() || d.size() != 3) {
    throw ConfigError("query descriptor must be (cx, cy, radius) matching the model input");
  }
  const Vec3 desc(d[0], d[1], d[2]);
  if (!(desc(2) > 0)) throw ConfigError("query radius must be positive");
  ShapeSample sample{VecX(desc), circle_problem(config, desc)};
  if (sample.problem->size() != net.output_size()) {
    throw ConfigError("model output size " + std::to_string(net.output_size()) +
                      " does not match the grid (" + std::to_string(sample.problem->size()) +
                      " nodes); set n_c to the training value");
  }
  const auto t0 = Clock::now();
  const VecX u = predict_field(net, sample);
  if (write_outputs) {
    const fs::path dir(config.output_dir);
    const auto& prob = *sample.problem;
    const NodalField f(prob.grid(), 1, u);
    write_field_vtk(f, dir / "query.vtk", {"u"});
    write_field_pgm(f, dir / "query.pgm");
    OptimTrace tr;
    VecX grad;
    tr.epoch.push_back(0);
    tr.loss.push_back(prob.projected_loss_and_gradient(u, grad));
    tr.grad_norm.push_back(inf_norm(grad));
    tr.dist_to_ref.push_back(kNaN);
    tr.seconds.push_back(since(t0));
    tr.write_csv(dir / "trace.csv");
    CsvTable t;
    t.header = {"boundary_penalty", "exterior_penalty", "loss"};
    t.rows.resize(1, 3);
    t.rows.row(0) << prob.boundary_penalty(u).value, prob.exterior_penalty(u), tr.loss[0];
    write_csv(t, dir / "query.csv");
  }
  return u;
}

// ---- geometry and occupancy writers ------------------------------------------------

std::vector<fs::path> run_gen_shapes(const RunConfig& config) {
  begin_run(config, true);
  const fs::path dir(config.output_dir);
  std::vector<fs::path> paths;
  const auto family = circle_descriptors(config, config.shape_count);
  CsvTable t;
  for (int k = 0; k < config.shape_count; ++k) {
    BoundaryPointCloud cloud;
    VecX descriptor;
    if (config.shape.type == "spline") {
      SplineShapeSpec spec = config.shape.spline;
      spec.seed += static_cast<std::uint64_t>(k);
      cloud = sample_spline_shape(spec);
      descriptor = spline_ordinates(spec);
    } else if (config.shape.type == "circle" && config.shape_count > 1) {
      descriptor = VecX(family[k]);
      cloud = circle_cloud(family[k].head<2>(), family[k](2), config.shape.points);
    } else {
      cloud = make_cloud(config.shape);
      descriptor = config.shape.type == "circle"
                       ? VecX(Eigen::Vector3d(config.shape.center.x(), config.shape.center.y(),
                                              config.shape.radius))
                       : VecX();
    }
    const fs::path path = dir / ("shape_" + std::to_string(k) + ".txt");
    write_cloud(cloud, path);
    paths.push_back(path);
    if (t.header.empty()) {
      t.header.push_back("shape");
      for (long i = 0; i < descriptor.size(); ++i) t.header.push_back("d" + std::to_string(i));
      t.rows.resize(config.shape_count, 1 + descriptor.size());
    }
    if (descriptor.size() + 1 == t.rows.cols()) {
      t.rows(k, 0) = k;
      t.rows.row(k).tail(descriptor.size()) = descriptor.transpose();
    }
  }
  write_csv(t, dir / "descriptors.csv");
  return paths;
}

OccupancyField run_occupancy(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  const auto grid = BackgroundGrid::unit_square(config.n_c);
  const auto cloud = make_cloud(config.shape);
  OccupancyOptions oo;
  oo.side = config.resolved_mask_side();
  OccupancyField occ = occupancy_grid(cloud, grid, oo);
  if (write_outputs) {
    const fs::path dir(config.output_dir);
    write_occupancy(occ, grid, dir / "occupancy.vtk");
    write_field_pgm(NodalField(grid, 1, occ.chi), dir / "occupancy.pgm");
    CsvTable t;
    t.header = {"active", "cut", "inactive", "object_nodes"};
    t.rows.resize(1, 4);
    t.rows.row(0) << occ.count(ElementLabel::Active), occ.count(ElementLabel::Cut),
        occ.count(ElementLabel::Inactive), occ.object_node_count();
    write_csv(t, dir / "labels.csv");
  }
  return occ;
}

OccupancyField run_sdf(const RunConfig& config, bool write_outputs) {
  begin_run(config, write_outputs);
  const auto grid = BackgroundGrid::unit_square(config.n_c);
  const auto cloud = make_cloud(config.shape);
  EikonalOptions eo = config.eikonal;
  eo.occupancy.side = config.resolved_mask_side();
  EikonalReport rep;
  const auto t0 = Clock::now();
  OccupancyField occ = eikonal_sdf(cloud, grid, eo, &rep);
  if (write_outputs) {
    const fs::path dir(config.output_dir);
    write_occupancy(occ, grid, dir / "sdf.vtk");
    write_field_pgm(NodalField(grid, 1, *occ.phi), dir / "sdf.pgm");
    OptimTrace tr;
    tr.epoch = {0, rep.iterations};
    tr.loss = {rep.initial_loss, rep.final_loss};
    tr.grad_norm = {kNaN, kNaN};
    tr.dist_to_ref = {kNaN, kNaN};
    tr.seconds = {0.0, since(t0)};
    tr.write_csv(dir / "trace.csv");
  }
  return occ;
}

}  // namespace ibn
