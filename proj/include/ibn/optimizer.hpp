#ifndef IBN_OPTIMIZER_HPP
#define IBN_OPTIMIZER_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ibn/types.hpp"

namespace ibn {

enum class ScheduleKind { ConstantSC, ConstantPL, Diminishing, Adam, Nesterov };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct StepSchedule {
  ScheduleKind kind = ScheduleKind::Adam;
  double mu = 0.0;
  double beta = 0.0;
  double eta = 0.0;  // constant_pl step
  double lr = 3e-4;  // adam
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // 2 / (mu + beta)
  static StepSchedule constant_sc(double mu, double beta);
  // Fixed step eta; if mu > 0 it must satisfy eta < 1 / (2 mu).
  static StepSchedule constant_pl(double eta, double mu = 0.0);
  // (2k + 1) / (2 mu (k + 1)^2)
  static StepSchedule diminishing(double mu);
  static StepSchedule adam(double lr = 3e-4, double beta1 = 0.9, double beta2 = 0.999,
                           double epsilon = 1e-8);
  // Step 1/beta with momentum (sqrt(kappa) - 1) / (sqrt(kappa) + 1).
  static StepSchedule nesterov(double mu, double beta);

  void validate() const;
  // Step size at step k (0-based). For adam this is lr.
  double rate(long k) const;
  double momentum() const;
};

struct StopCriteria {
  long max_epochs = 20000;
  double gradient_tol = 1e-8;  // on ||grad||_inf
  double loss_tol = 0.0;       // stop once loss <= loss_tol
};

// One row per recorded epoch; row 0 is the starting point.
struct OptimTrace {
  std::vector<long> epoch;
  std::vector<double> loss;
  std::vector<double> grad_norm;
  std::vector<double> dist_to_ref;  // NaN without a reference
  std::vector<double> seconds;
  bool converged = false;

  std::size_t size() const { return epoch.size(); }
  void write_csv(const std::filesystem::path& path) const;
};

// Returns the loss at theta and writes its gradient to grad.
using LossGradFn = std::function<double(const VecX& theta, VecX& grad)>;

// Reshuffle: each epoch visits a fresh permutation once. Replacement: each
// step draws its batch iid uniformly, so every step's gradient is an unbiased
// estimate of the full gradient.
enum class Sampling { Reshuffle, Replacement };

struct MinimizeOptions {
  StopCriteria stop;
  bool fd_check = true;
  double fd_tolerance = 1e-4;
  std::uint64_t fd_seed = 1;
  Sampling sampling = Sampling::Reshuffle;
  std::optional<VecX> reference;
  // Called after every recorded epoch.
  std::function<void(long epoch, const VecX& theta)> on_epoch;
};

struct MinimizeResult {
  VecX theta;
  OptimTrace trace;
};

// Central-difference check of grad . d along one random direction; throws
// OptimizationError(epoch 0) on mismatch.
void check_gradient(const LossGradFn& fn, const VecX& theta, double tolerance,
                    std::uint64_t seed);

MinimizeResult minimize(const LossGradFn& fn, VecX theta0, const StepSchedule& schedule,
                        const MinimizeOptions& options = {});

// Mean loss and mean gradient over the sample indices in `batch` (sorted).
using SampleLossGradFn =
    std::function<double(const VecX& theta, std::span<const int> batch, VecX& grad)>;

// Mini-batch descent: each epoch takes ceil(n / batch) steps on batches drawn
// per options.sampling from a generator seeded by `seed`. The trace records the full-dataset loss and
// gradient once per epoch. With batch_size >= n_samples this follows the same
// trajectory as minimize().
MinimizeResult minimize_stochastic(const SampleLossGradFn& fn, int n_samples, VecX theta0,
                                   const StepSchedule& schedule, int batch_size,
                                   std::uint64_t seed, const MinimizeOptions& options = {});

struct CurvatureEstimate {
  double mu = 0.0;
  double beta = 0.0;
  int iterations = 0;
};

// Extreme Hessian eigenvalues at theta by power iteration on finite
// differences of the gradient; mu from a second run on beta*I - H. The start
// vector is H times a random vector, so directions the loss ignores (fixed
// dofs) stay out of the estimate.
CurvatureEstimate estimate_curvature(const LossGradFn& fn, const VecX& theta, int iterations,
                                     std::uint64_t seed, double fd_step = 1e-6);

// Synthetic probes of the step-size theory.
struct ContractionProbe {
  double kappa = 0.0;
  double predicted = 0.0;   // 1 - 2 / (kappa + 1)
  double worst_deviation = 0.0;  // max over steps of |measured - predicted|
};
ContractionProbe contraction_probe(double kappa, int steps = 30);

struct SgdProblem {
  MatX features;  // one sample per row, unit circle
  VecX targets;
  VecX optimum;   // least-squares minimiser of the finite sum
  double mu = 0.0;
  double beta = 0.0;

  static SgdProblem unit_circle(int samples, double noise, std::uint64_t seed);
  double loss(const VecX& theta, std::span<const int> batch, VecX& grad) const;
};

struct FloorProbe {
  double eta = 0.0;
  double floor_full = 0.0;  // tail mean of ||theta - theta*||^2 at eta
  double floor_half = 0.0;  // same at eta / 2
  double ratio() const { return floor_half / floor_full; }
};
FloorProbe sgd_floor_probe(const SgdProblem& problem, double eta, int epochs, int seeds);

struct DecayProbe {
  std::vector<double> steps;
  std::vector<double> mean_sq_error;
  double slope = 0.0;
};
DecayProbe diminishing_decay_probe(const SgdProblem& problem, int epochs, int seeds);

// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

}  // namespace ibn

#endif  // IBN_OPTIMIZER_HPP
