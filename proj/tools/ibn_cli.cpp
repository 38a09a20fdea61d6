#include <cstdio>
#include <cstring>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "ibn/experiments.hpp"

using namespace ibn;

namespace {

const std::map<std::string, std::string> kKinds{
    {"gen-shapes", "shapes"}, {"occupancy", "occupancy"}, {"sdf", "sdf"},
    {"solve-poisson", "poisson"}, {"solve-ns", "ns"}, {"converge-disk", "disk"},
    {"train-param", "parametric"}, {"query", "query"}};

Vec2 pair_of(const std::vector<double>& v) { return {v.at(0), v.at(1)}; }

void add_options(CLI::App& app, RunConfig& c, std::string& config_path) {
  app.add_option("--config", config_path, "JSON RunConfig; flags given alongside override it");
  app.add_option("--output,-o", c.output_dir, "output directory")->capture_default_str();
  app.add_option("--threads", c.threads, "worker threads")->capture_default_str();
  app.add_option("--seed", c.seed, "seed for sampling and checks")->capture_default_str();
  app.add_option("--n-c", c.n_c, "cells per unit length")->capture_default_str();
  app.add_option("--n-list", c.n_list, "resolutions for converge-disk")->capture_default_str();
  app.add_option("--solver", c.solver, "direct | gradient")->capture_default_str();
  app.add_option("--mask-side", c.mask_side, "auto | inside | outside")->capture_default_str();
  app.add_option("--occupancy-method", c.occupancy_method, "winding | sdf")->capture_default_str();
  app.add_option("--count", c.shape_count, "shapes to generate")->capture_default_str();

  app.add_option("--shape", c.shape.type, "circle | spline | file")->capture_default_str();
  app.add_option_function<std::vector<double>>(
         "--center", [&c](const std::vector<double>& v) { c.shape.center = pair_of(v); },
         "circle centre x y")
      ->expected(2);
  app.add_option("--radius", c.shape.radius, "circle radius")->capture_default_str();
  app.add_option("--points", c.shape.points, "circle samples")->capture_default_str();
  app.add_option_function<std::string>(
      "--cloud",
      [&c](const std::string& p) {
        c.shape.type = "file";
        c.shape.path = p;
      },
      "point-cloud file (sets --shape file)");
  app.add_option("--spline-controls", c.shape.spline.control_count)->capture_default_str();
  app.add_option("--spline-seed", c.shape.spline.seed)->capture_default_str();
  app.add_option("--spline-degree", c.shape.spline.degree)->capture_default_str();
  app.add_option("--spline-samples", c.shape.spline.samples)->capture_default_str();
  app.add_option("--y-min", c.shape.spline.y_min)->capture_default_str();
  app.add_option("--y-max", c.shape.spline.y_max)->capture_default_str();
  app.add_option("--radius-scale", c.shape.spline.radius_scale)->capture_default_str();
  app.add_option_function<std::vector<double>>(
         "--spline-center", [&c](const std::vector<double>& v) { c.shape.spline.center = pair_of(v); })
      ->expected(2);

  app.add_option("--f", c.pde.f, "source term")->capture_default_str();
  app.add_option("--alpha", c.pde.alpha, "Robin alpha")->capture_default_str();
  app.add_option("--beta", c.pde.beta, "Robin beta")->capture_default_str();
  app.add_option("--g", c.pde.g, "boundary value on the object")->capture_default_str();
  app.add_option("--g-in", c.pde.g_in, "fill value inside the object")->capture_default_str();
  app.add_option("--re", c.pde.re, "Reynolds number")->capture_default_str();
  app.add_option_function<double>("--nu", [&c](double v) { c.pde.nu = v; },
                                  "viscosity (overrides --re)");
  app.add_option("--pressure-stab", c.pde.pressure_stabilization)->capture_default_str();
  app.add_option("--continuity-weight", c.pde.continuity_weight)->capture_default_str();
  app.add_option("--pressure-ghost-weight", c.pde.pressure_ghost_weight)->capture_default_str();

  app.add_option("--lambda1", c.weights.lambda1, "boundary penalty weight")->capture_default_str();
  app.add_option("--lambda2", c.weights.lambda2, "exterior penalty weight")->capture_default_str();
  app.add_option("--inverse-h", c.weights.inverse_h, "scale penalties by 1/h")->capture_default_str();
  app.add_option("--weak-boundary", c.weights.weak_boundary)->capture_default_str();
  app.add_option("--pde-weight", c.weights.pde)->capture_default_str();
  app.add_option("--normalize-pde", c.weights.normalize_pde)->capture_default_str();

  app.add_option("--schedule", c.schedule.kind,
                 "constant_sc | constant_pl | diminishing | adam | nesterov")
      ->capture_default_str();
  app.add_option("--lr", c.schedule.lr)->capture_default_str();
  app.add_option("--beta1", c.schedule.beta1)->capture_default_str();
  app.add_option("--beta2", c.schedule.beta2)->capture_default_str();
  app.add_option("--epsilon", c.schedule.epsilon)->capture_default_str();
  app.add_option("--eta", c.schedule.eta, "constant step (0: 1/smoothness)")->capture_default_str();
  app.add_option("--mu", c.schedule.mu, "strong convexity (0: estimate)")->capture_default_str();
  app.add_option("--smoothness", c.schedule.beta, "gradient Lipschitz constant (0: estimate)")
      ->capture_default_str();
  app.add_option("--epochs", c.schedule.epochs)->capture_default_str();
  app.add_option("--grad-tol", c.schedule.grad_tol)->capture_default_str();
  app.add_option("--batch-size", c.schedule.batch_size)->capture_default_str();

  app.add_option("--channel-length", c.channel.length)->capture_default_str();
  app.add_option("--channel-height", c.channel.height)->capture_default_str();
  app.add_option("--chord", c.channel.chord)->capture_default_str();
  app.add_option_function<std::vector<double>>(
         "--channel-center", [&c](const std::vector<double>& v) { c.channel.center = pair_of(v); })
      ->expected(2);
  app.add_option("--channel-points", c.channel.points)->capture_default_str();

  app.add_option("--family-seed", c.parametric.family_seed)->capture_default_str();
  app.add_option("--net-seed", c.parametric.net_seed)->capture_default_str();
  app.add_option("--family-size", c.parametric.family_size)->capture_default_str();
  app.add_option("--held-out", c.parametric.held_out)->capture_default_str();
  app.add_option("--hidden", c.parametric.hidden)->capture_default_str();
  app.add_option("--center-jitter", c.parametric.center_jitter)->capture_default_str();
  app.add_option("--radius-min", c.parametric.radius_min)->capture_default_str();
  app.add_option("--radius-max", c.parametric.radius_max)->capture_default_str();
  app.add_option("--family-points", c.parametric.points)->capture_default_str();
  app.add_option("--descriptor", c.parametric.descriptor, "query descriptor cx cy radius");
  app.add_option("--model", c.parametric.model_path, "model checkpoint for query");

  app.add_option("--tau", c.eikonal.tau)->capture_default_str();
  app.add_option("--eikonal-iters", c.eikonal.iters)->capture_default_str();
  app.add_option("--eikonal-step", c.eikonal.step)->capture_default_str();
  app.add_option("--eikonal-boundary-weight", c.eikonal.boundary_weight)->capture_default_str();
  app.add_option("--grad-smoothing", c.eikonal.grad_smoothing)->capture_default_str();
  app.add_option("--eikonal-tol", c.eikonal.tol)->capture_default_str();
}

// The subcommand and --config must be known before flags are bound, so the
// flags can override values loaded from the file.
void prescan(int argc, char** argv, std::string& sub, std::string& config_path) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) {
      config_path = argv[++i];
    } else if (a.rfind("--config=", 0) == 0) {
      config_path = a.substr(9);
    } else if (sub.empty() && kKinds.count(a)) {
      sub = a;
    }
  }
}

int run(const std::string& sub, const RunConfig& c, bool rate_probe) {
  if (sub == "gen-shapes") {
    for (const auto& p : run_gen_shapes(c)) std::printf("%s\n", p.string().c_str());
  } else if (sub == "occupancy") {
    const auto occ = run_occupancy(c);
    std::printf("object nodes %d, cut elements %d\n", occ.object_node_count(),
                occ.count(ElementLabel::Cut));
  } else if (sub == "sdf") {
    const auto occ = run_sdf(c);
    std::printf("object nodes %d, phi range [%.6g, %.6g]\n", occ.object_node_count(),
                occ.phi->minCoeff(), occ.phi->maxCoeff());
  } else if (sub == "solve-poisson") {
    const auto r = run_poisson_shape(c);
    std::printf("u range on active nodes [%.6g, %.6g], boundary mean %.6g, max deviation %.3g\n",
                r.min_active, r.max_active, r.boundary_mean, r.boundary_max_dev);
  } else if (sub == "solve-ns") {
    const auto r = run_ns_channel(c);
    const auto& d = r.diagnostics;
    std::printf("iterations %d, loss %.6g\n", r.report.iterations, r.report.final_loss);
    std::printf("divergence %.4g (vs grad %.4g, outside band %.4g)\n", d.divergence,
                d.divergence_grad, d.divergence_outside_band);
    std::printf("symmetry %.4g, slip %.4g, stagnation x %.4g (front %.4g)\n", d.symmetry_defect,
                d.slip, d.stagnation_x, d.front_x);
  } else if (sub == "converge-disk" && rate_probe) {
    const auto r = run_rate_probe(c);
    for (const auto& row : r.rows) {
      std::printf("n_c %4d  epochs %7ld  %s  error %.6e (direct %.6e)  tail monotone %.3f  %.1fs\n",
                  row.n_c, row.epochs, row.converged ? "converged" : "NOT converged",
                  row.terminal_error, row.direct_error, row.tail_monotone_fraction, row.seconds);
    }
    std::printf("slope of squared error %.4f\n", r.slope_squared);
  } else if (sub == "converge-disk") {
    const auto r = run_disk_convergence(c);
    for (const auto& row : r.rows) {
      std::printf("n_c %4d  h %.5f  error %.6e  centre %.6f  %.2fs\n", row.n_c, row.h, row.error,
                  row.center_value, row.seconds);
    }
    std::printf("slope %.4f\n", r.slope);
  } else if (sub == "train-param") {
    const auto r = run_parametric(c);
    for (std::size_t s = 0; s < r.shapes.size(); ++s) {
      std::printf("shape %zu %s distance %.4e\n", s, r.shapes[s].held_out ? "held-out" : "train",
                  r.shapes[s].distance_to_direct);
    }
    std::printf("train mean %.4e, held-out max %.4e\n", r.train_mean_distance,
                r.held_out_max_distance);
  } else if (sub == "query") {
    const VecX u = run_query(c);
    std::printf("predicted %ld values, range [%.6g, %.6g]\n", static_cast<long>(u.size()),
                u.minCoeff(), u.maxCoeff());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::string sub, config_path;
  prescan(argc, argv, sub, config_path);
  RunConfig config = default_config(sub.empty() ? "poisson" : kKinds.at(sub));
  try {
    if (!config_path.empty()) {
      const std::string kind = kKinds.at(sub.empty() ? "solve-poisson" : sub);
      config = load_config(config_path, kind);
      if (config.kind != kind) {
        throw ConfigError("config kind '" + config.kind + "' does not match subcommand " + sub);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  CLI::App app{"Immersed-boundary FEM solver and experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  const std::pair<const char*, const char*> subs[] = {
      {"gen-shapes", "write point-cloud files"},
      {"occupancy", "winding-number occupancy on the grid"},
      {"sdf", "signed distance field by the Eikonal solve"},
      {"solve-poisson", "steady heat problem around a shape"},
      {"solve-ns", "steady channel flow past an obstacle"},
      {"converge-disk", "disk convergence study"},
      {"train-param", "train the parametric model on a circle family"},
      {"query", "evaluate a saved model for one descriptor"}};
  for (const auto& [name, help] : subs) app.add_subcommand(name, help);
  bool rate_probe = false;
  app.get_subcommand("converge-disk")
      ->add_flag("--rate-probe", rate_probe,
                 "run the gradient solver at each resolution and fit the squared error");
  add_options(app, config, config_path);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;  // usage errors count as configuration errors
  }

  try {
    return run(sub, config, rate_probe);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << " (" << e.path << ")\n";
    return 3;
  } catch (const OptimizationError& e) {
    std::cerr << "optimization error at epoch " << e.epoch << ": " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
