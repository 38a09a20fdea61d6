#include "ibn/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>

#include "ibn/field_io.hpp"

namespace ibn {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::ConstantSC: return "constant_sc";
    case ScheduleKind::ConstantPL: return "constant_pl";
    case ScheduleKind::Diminishing: return "diminishing";
    case ScheduleKind::Adam: return "adam";
    case ScheduleKind::Nesterov: return "nesterov";
  }
  return "?";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  for (ScheduleKind k : {ScheduleKind::ConstantSC, ScheduleKind::ConstantPL,
                         ScheduleKind::Diminishing, ScheduleKind::Adam, ScheduleKind::Nesterov}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown schedule '" + name + "'");
}

StepSchedule StepSchedule::constant_sc(double mu, double beta) {
  StepSchedule s;
  s.kind = ScheduleKind::ConstantSC;
  s.mu = mu;
  s.beta = beta;
  s.validate();
  return s;
}

StepSchedule StepSchedule::constant_pl(double eta, double mu) {
  StepSchedule s;
  s.kind = ScheduleKind::ConstantPL;
  s.eta = eta;
  s.mu = mu;
  s.validate();
  return s;
}

StepSchedule StepSchedule::diminishing(double mu) {
  StepSchedule s;
  s.kind = ScheduleKind::Diminishing;
  s.mu = mu;
  s.validate();
  return s;
}

StepSchedule StepSchedule::adam(double lr, double beta1, double beta2, double epsilon) {
  StepSchedule s;
  s.kind = ScheduleKind::Adam;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  s.validate();
  return s;
}

StepSchedule StepSchedule::nesterov(double mu, double beta) {
  StepSchedule s;
  s.kind = ScheduleKind::Nesterov;
  s.mu = mu;
  s.beta = beta;
  s.validate();
  return s;
}

void StepSchedule::validate() const {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive");
  };
  switch (kind) {
    case ScheduleKind::ConstantSC:
    case ScheduleKind::Nesterov:
      positive(mu, "mu");
      positive(beta, "beta");
      if (mu > beta) throw ConfigError("mu must not exceed beta");
      break;
    case ScheduleKind::ConstantPL:
      positive(eta, "eta");
      if (mu > 0.0 && eta >= 1.0 / (2.0 * mu)) throw ConfigError("constant_pl needs eta < 1/(2 mu)");
      break;
    case ScheduleKind::Diminishing:
      positive(mu, "mu");
      break;
    case ScheduleKind::Adam:
      positive(lr, "lr");
      positive(epsilon, "epsilon");
      if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("adam betas must lie in [0, 1)");
      }
      break;
  }
}

double StepSchedule::rate(long k) const {
  switch (kind) {
    case ScheduleKind::ConstantSC: return 2.0 / (mu + beta);
    case ScheduleKind::ConstantPL: return eta;
    case ScheduleKind::Diminishing: {
      const double kk = static_cast<double>(k);
      return (2.0 * kk + 1.0) / (2.0 * mu * (kk + 1.0) * (kk + 1.0));
    }
    case ScheduleKind::Adam: return lr;
    case ScheduleKind::Nesterov: return 1.0 / beta;
  }
  return 0.0;
}

double StepSchedule::momentum() const {
  if (kind != ScheduleKind::Nesterov) return 0.0;
  const double r = std::sqrt(beta / mu);
  return (r - 1.0) / (r + 1.0);
}

void OptimTrace::write_csv(const std::filesystem::path& path) const {
  CsvTable t;
  t.header = {"epoch", "loss", "grad_norm", "dist_to_ref", "seconds"};
  t.rows.resize(static_cast<Eigen::Index>(size()), 5);
  for (std::size_t i = 0; i < size(); ++i) {
    t.rows.row(static_cast<Eigen::Index>(i)) << static_cast<double>(epoch[i]), loss[i],
        grad_norm[i], dist_to_ref[i], seconds[i];
  }
  ibn::write_csv(t, path);
}

void check_gradient(const LossGradFn& fn, const VecX& theta, double tolerance,
                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  VecX d(theta.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = normal(rng);
  if (d.size() == 0) return;
  d /= d.norm();
  VecX g(theta.size());
  const double f0 = fn(theta, g);
  const double eps = 1e-6 * std::max(1.0, theta.cwiseAbs().maxCoeff());
  VecX scratch(theta.size());
  const double fp = fn(theta + eps * d, scratch);
  const double fm = fn(theta - eps * d, scratch);
  const double fd = (fp - fm) / (2.0 * eps);
  const double an = g.dot(d);
  // Relative test with a floor for round-off in the loss differences.
  const double floor = 1e-9 * (1.0 + std::abs(f0)) / eps;
  if (!std::isfinite(fd) || !std::isfinite(an) ||
      std::abs(fd - an) > tolerance * std::max(std::abs(fd), std::abs(an)) + floor) {
    throw OptimizationError("gradient check failed: analytic " + std::to_string(an) +
                                " vs finite difference " + std::to_string(fd),
                            0);
  }
}

namespace {

using Clock = std::chrono::steady_clock;

class Stepper {
 public:
  explicit Stepper(const StepSchedule& s, Eigen::Index n) : s_(s) {
    if (s.kind == ScheduleKind::Adam) {
      m_ = VecX::Zero(n);
      v_ = VecX::Zero(n);
    }
  }

  // Plain and adam updates; nesterov is handled by the caller since it needs
  // the gradient at the look-ahead point.
  void apply(VecX& theta, const VecX& grad, long k) {
    if (s_.kind != ScheduleKind::Adam) {
      theta -= s_.rate(k) * grad;
      return;
    }
    m_ = s_.beta1 * m_ + (1.0 - s_.beta1) * grad;
    v_ = s_.beta2 * v_ + (1.0 - s_.beta2) * grad.cwiseAbs2();
    const double t = static_cast<double>(k + 1);
    const double c1 = 1.0 - std::pow(s_.beta1, t);
    const double c2 = 1.0 - std::pow(s_.beta2, t);
    theta.array() -= s_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + s_.epsilon);
  }

 private:
  const StepSchedule& s_;
  VecX m_, v_;
};

struct Recorder {
  const MinimizeOptions& options;
  OptimTrace& trace;
  Clock::time_point start = Clock::now();

  // Records one row; returns true if the stop criteria are met.
  bool record(long epoch, const VecX& theta, double loss, const VecX& grad) {
    if (!std::isfinite(loss) || !grad.allFinite()) {
      throw OptimizationError("non-finite loss or gradient at epoch " + std::to_string(epoch),
                              epoch);
    }
    const double gn = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
    trace.epoch.push_back(epoch);
    trace.loss.push_back(loss);
    trace.grad_norm.push_back(gn);
    trace.dist_to_ref.push_back(options.reference ? (theta - *options.reference).norm()
                                                  : std::numeric_limits<double>::quiet_NaN());
    trace.seconds.push_back(std::chrono::duration<double>(Clock::now() - start).count());
    if (options.on_epoch) options.on_epoch(epoch, theta);
    const bool done = gn <= options.stop.gradient_tol || loss <= options.stop.loss_tol;
    if (done) trace.converged = true;
    return done;
  }
};

}  // namespace

MinimizeResult minimize(const LossGradFn& fn, VecX theta0, const StepSchedule& schedule,
                        const MinimizeOptions& options) {
  schedule.validate();
  if (options.fd_check) check_gradient(fn, theta0, options.fd_tolerance, options.fd_seed);
  MinimizeResult out;
  out.theta = std::move(theta0);
  Recorder rec{options, out.trace};
  Stepper stepper(schedule, out.theta.size());
  VecX grad(out.theta.size());
  VecX prev = out.theta;
  VecX look(out.theta.size());
  const double mom = schedule.momentum();
  for (long k = 0;; ++k) {
    const double loss = fn(out.theta, grad);
    if (rec.record(k, out.theta, loss, grad) || k >= options.stop.max_epochs) break;
    if (schedule.kind == ScheduleKind::Nesterov) {
      look = out.theta + mom * (out.theta - prev);
      prev = out.theta;
      fn(look, grad);
      if (!grad.allFinite()) throw OptimizationError("non-finite gradient", k);
      out.theta = look - schedule.rate(k) * grad;
    } else {
      stepper.apply(out.theta, grad, k);
    }
  }
  return out;
}

MinimizeResult minimize_stochastic(const SampleLossGradFn& fn, int n_samples, VecX theta0,
                                   const StepSchedule& schedule, int batch_size,
                                   std::uint64_t seed, const MinimizeOptions& options) {
  schedule.validate();
  if (n_samples <= 0) throw ConfigError("empty dataset");
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  if (schedule.kind == ScheduleKind::Nesterov) {
    throw ConfigError("nesterov is only available for full-batch minimize");
  }
  batch_size = std::min(batch_size, n_samples);
  std::vector<int> all(n_samples);
  std::iota(all.begin(), all.end(), 0);
  const LossGradFn full = [&](const VecX& t, VecX& g) { return fn(t, all, g); };
  if (options.fd_check) check_gradient(full, theta0, options.fd_tolerance, options.fd_seed);

  MinimizeResult out;
  out.theta = std::move(theta0);
  Recorder rec{options, out.trace};
  Stepper stepper(schedule, out.theta.size());
  std::mt19937_64 rng(seed);
  std::vector<int> order = all;
  std::vector<int> batch;
  std::uniform_int_distribution<int> pick(0, n_samples - 1);
  VecX grad(out.theta.size());
  long step = 0;
  for (long epoch = 0;; ++epoch) {
    const double loss = full(out.theta, grad);
    if (rec.record(epoch, out.theta, loss, grad) || epoch >= options.stop.max_epochs) break;
    const bool full_batch = batch_size == n_samples;
    if (!full_batch && options.sampling == Sampling::Reshuffle) {
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (int b = 0; b < n_samples; b += batch_size) {
      const int e = std::min(n_samples, b + batch_size);
      if (full_batch || options.sampling == Sampling::Reshuffle) {
        batch.assign(order.begin() + b, order.begin() + e);
      } else {
        batch.resize(e - b);
        for (int& i : batch) i = pick(rng);
      }
      std::sort(batch.begin(), batch.end());
      fn(out.theta, batch, grad);
      if (!grad.allFinite()) throw OptimizationError("non-finite gradient", epoch);
      stepper.apply(out.theta, grad, step++);
    }
  }
  return out;
}

namespace {

// Largest eigenvalue of op by power iteration from v (normalised in place).
double power_iteration(const std::function<VecX(const VecX&)>& op, VecX v, int iterations,
                       int* used) {
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double nv = v.norm();
    if (nv == 0.0) return 0.0;
    v /= nv;
    VecX w = op(v);
    const double next = v.dot(w);
    v = std::move(w);
    if (used) ++*used;
    if (it > 10 && std::abs(next - lambda) <= 1e-12 * std::abs(next)) return next;
    lambda = next;
  }
  return lambda;
}

}  // namespace

CurvatureEstimate estimate_curvature(const LossGradFn& fn, const VecX& theta, int iterations,
                                     std::uint64_t seed, double fd_step) {
  if (iterations <= 0) throw ConfigError("need at least one power iteration");
  VecX g0(theta.size());
  fn(theta, g0);
  VecX gs(theta.size());
  auto hv = [&](const VecX& v) -> VecX {
    fn(theta + fd_step * v, gs);
    return (gs - g0) / fd_step;
  };
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  VecX r(theta.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = normal(rng);
  r /= std::max(r.norm(), 1e-300);
  const VecX start = hv(r);

  CurvatureEstimate est;
  est.beta = power_iteration(hv, start, iterations, &est.iterations);
  const double beta = est.beta;
  const double top = power_iteration([&](const VecX& v) -> VecX { return beta * v - hv(v); },
                                     start, iterations, &est.iterations);
  est.mu = beta - top;
  return est;
}

ContractionProbe contraction_probe(double kappa, int steps) {
  if (!(kappa >= 1.0)) throw ConfigError("kappa must be >= 1");
  const Vec2 diag(1.0, kappa);
  const LossGradFn fn = [&](const VecX& t, VecX& g) {
    g = diag.cwiseProduct(t);
    return 0.5 * t.dot(g);
  };
  MinimizeOptions opt;
  opt.stop.max_epochs = steps;
  opt.stop.gradient_tol = 0.0;
  opt.fd_check = false;
  std::vector<double> norms;
  opt.on_epoch = [&](long, const VecX& t) { norms.push_back(t.norm()); };
  minimize(fn, Vec2(1.0, 1.0), StepSchedule::constant_sc(1.0, kappa), opt);
  ContractionProbe p;
  p.kappa = kappa;
  p.predicted = 1.0 - 2.0 / (kappa + 1.0);
  for (std::size_t k = 1; k < norms.size(); ++k) {
    if (norms[k - 1] < 1e-250) break;
    p.worst_deviation = std::max(p.worst_deviation, std::abs(norms[k] / norms[k - 1] - p.predicted));
  }
  return p;
}

SgdProblem SgdProblem::unit_circle(int samples, double noise, std::uint64_t seed) {
  if (samples < 2) throw ConfigError("need at least two samples");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * 3.14159265358979323846);
  std::normal_distribution<double> normal(0.0, noise);
  SgdProblem p;
  p.features.resize(samples, 2);
  p.targets.resize(samples);
  const Vec2 truth(1.0, -0.5);
  for (int i = 0; i < samples; ++i) {
    const double a = angle(rng);
    p.features.row(i) << std::cos(a), std::sin(a);
    p.targets(i) = p.features.row(i).dot(truth) + normal(rng);
  }
  const MatX H = p.features.transpose() * p.features / samples;
  p.optimum = H.ldlt().solve(p.features.transpose() * p.targets / samples);
  Eigen::SelfAdjointEigenSolver<MatX> eig(H);
  p.mu = eig.eigenvalues().minCoeff();
  p.beta = eig.eigenvalues().maxCoeff();
  return p;
}

double SgdProblem::loss(const VecX& theta, std::span<const int> batch, VecX& grad) const {
  grad = VecX::Zero(theta.size());
  double l = 0.0;
  for (int i : batch) {
    const double r = features.row(i).dot(theta) - targets(i);
    l += 0.5 * r * r;
    grad += r * features.row(i).transpose();
  }
  const double n = static_cast<double>(batch.size());
  grad /= n;
  return l / n;
}

namespace {

std::vector<double> sq_error_by_epoch(const SgdProblem& problem, const StepSchedule& schedule,
                                      int epochs, std::uint64_t seed) {
  MinimizeOptions opt;
  opt.stop.max_epochs = epochs;
  opt.stop.gradient_tol = 0.0;
  opt.stop.loss_tol = -1.0;
  opt.fd_check = false;
  opt.reference = problem.optimum;
  opt.sampling = Sampling::Replacement;
  const SampleLossGradFn fn = [&](const VecX& t, std::span<const int> b, VecX& g) {
    return problem.loss(t, b, g);
  };
  const auto res = minimize_stochastic(fn, static_cast<int>(problem.targets.size()),
                                       VecX::Zero(2), schedule, 1, seed, opt);
  std::vector<double> out;
  for (double d : res.trace.dist_to_ref) out.push_back(d * d);
  return out;
}

double tail_mean(const SgdProblem& problem, double eta, int epochs, int seeds) {
  double sum = 0.0;
  long count = 0;
  for (int s = 0; s < seeds; ++s) {
    const auto e = sq_error_by_epoch(problem, StepSchedule::constant_pl(eta), epochs,
                                     1000 + static_cast<std::uint64_t>(s));
    for (std::size_t k = e.size() / 2; k < e.size(); ++k, ++count) sum += e[k];
  }
  return sum / static_cast<double>(count);
}

}  // namespace

FloorProbe sgd_floor_probe(const SgdProblem& problem, double eta, int epochs, int seeds) {
  FloorProbe p;
  p.eta = eta;
  p.floor_full = tail_mean(problem, eta, epochs, seeds);
  p.floor_half = tail_mean(problem, 0.5 * eta, epochs, seeds);
  return p;
}

DecayProbe diminishing_decay_probe(const SgdProblem& problem, int epochs, int seeds) {
  const int n = static_cast<int>(problem.targets.size());
  std::vector<double> mean(epochs + 1, 0.0);
  for (int s = 0; s < seeds; ++s) {
    const auto e = sq_error_by_epoch(problem, StepSchedule::diminishing(problem.mu), epochs,
                                     2000 + static_cast<std::uint64_t>(s));
    for (int k = 0; k <= epochs; ++k) mean[k] += e[k] / seeds;
  }
  DecayProbe p;
  // Skip the transient: fit from a tenth of the run onward.
  for (int k = std::max(1, epochs / 10); k <= epochs; ++k) {
    p.steps.push_back(static_cast<double>(k) * n);
    p.mean_sq_error.push_back(mean[k]);
  }
  p.slope = loglog_slope(p.steps, p.mean_sq_error);
  return p;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("slope fit needs >= 2 points");
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw DomainError("log-log fit needs positive data");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace ibn
