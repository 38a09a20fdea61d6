#ifndef IBN_PARAMETRIC_MODEL_HPP
#define IBN_PARAMETRIC_MODEL_HPP

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "ibn/optimizer.hpp"
#include "ibn/residual.hpp"

namespace ibn {

enum class Activation { Tanh, Identity };

// Fully connected network: tanh (or identity) on hidden layers, identity on
// the output, output multiplied by output_scale. Parameters are laid out
// layer by layer, each as W (row-major, out x in) followed by b.
class DenseNet {
 public:
  DenseNet() = default;
  // Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  DenseNet(std::vector<int> sizes, std::uint64_t seed, Activation hidden = Activation::Tanh,
           double output_scale = 0.1);

  const std::vector<int>& sizes() const { return sizes_; }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  int layers() const { return static_cast<int>(weights_.size()); }
  long parameter_count() const;
  Activation activation() const { return act_; }
  double output_scale() const { return scale_; }

  MatX& weight(int layer) { return weights_[layer]; }
  const MatX& weight(int layer) const { return weights_[layer]; }
  VecX& bias(int layer) { return biases_[layer]; }
  const VecX& bias(int layer) const { return biases_[layer]; }

  VecX parameters() const;
  void set_parameters(const VecX& theta);

  VecX forward(const VecX& input) const;
  // Gradient over the parameters of <cotangent, forward(input)>.
  VecX backward(const VecX& input, const VecX& cotangent) const;

  // Text checkpoint: magic/version line, layer sizes, activation, output
  // scale, then the parameter vector. The loader checks the size chain and
  // the parameter count.
  void save(const std::filesystem::path& path) const;
  static DenseNet load(const std::filesystem::path& path);

 private:
  void check_input(const VecX& input) const;

  std::vector<int> sizes_;
  std::vector<MatX> weights_;
  std::vector<VecX> biases_;
  Activation act_ = Activation::Tanh;
  double scale_ = 0.1;
};

// One geometry of a training family: its descriptor and the immersed problem
// built from its cloud and occupancy.
struct ShapeSample {
  VecX descriptor;
  std::shared_ptr<const ImmersedProblem> problem;
};

struct TrainOptions {
  StepSchedule schedule = StepSchedule::adam(1e-3);
  long epochs = 2000;
  int batch_size = 0;  // 0: full batch
  std::uint64_t seed = 0;
  bool fd_check = false;
};

struct TrainResult {
  OptimTrace trace;
  std::vector<double> shape_losses;  // terminal loss per shape
};

// Field the net predicts for one sample, with wall values applied.
VecX predict_field(const DenseNet& net, const ShapeSample& sample);

// Mean over `batch` of the projected loss of each predicted field, and its
// gradient over the net parameters.
double family_loss(const DenseNet& net, const std::vector<ShapeSample>& data,
                   std::span<const int> batch, VecX& grad);

TrainResult train_family(DenseNet& net, const std::vector<ShapeSample>& data,
                         const TrainOptions& options);

}  // namespace ibn

#endif  // IBN_PARAMETRIC_MODEL_HPP
