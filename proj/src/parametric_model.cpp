#include "ibn/parametric_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace ibn {

namespace {

constexpr const char* kMagic = "ibn-densenet";
constexpr int kVersion = 1;

}  // namespace

DenseNet::DenseNet(std::vector<int> sizes, std::uint64_t seed, Activation hidden,
                   double output_scale)
    : sizes_(std::move(sizes)), act_(hidden), scale_(output_scale) {
  if (sizes_.size() < 2) throw ConfigError("DenseNet needs at least input and output sizes");
  for (int s : sizes_) {
    if (s <= 0) throw ConfigError("DenseNet layer sizes must be positive");
  }
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    MatX w(sizes_[l + 1], sizes_[l]);
    // Row-major fill so the draw order matches the parameter layout.
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
    }
    VecX b(sizes_[l + 1]);
    for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = u(rng);
    weights_.push_back(std::move(w));
    biases_.push_back(std::move(b));
  }
}

long DenseNet::parameter_count() const {
  long n = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    n += static_cast<long>(sizes_[l] + 1) * sizes_[l + 1];
  }
  return n;
}

VecX DenseNet::parameters() const {
  VecX theta(parameter_count());
  Eigen::Index k = 0;
  for (int l = 0; l < layers(); ++l) {
    const MatX& w = weights_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) theta(k++) = w(r, c);
    }
    theta.segment(k, biases_[l].size()) = biases_[l];
    k += biases_[l].size();
  }
  return theta;
}

void DenseNet::set_parameters(const VecX& theta) {
  if (theta.size() != parameter_count()) throw ConfigError("parameter vector has wrong length");
  Eigen::Index k = 0;
  for (int l = 0; l < layers(); ++l) {
    MatX& w = weights_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = theta(k++);
    }
    biases_[l] = theta.segment(k, biases_[l].size());
    k += biases_[l].size();
  }
}

void DenseNet::check_input(const VecX& input) const {
  if (sizes_.empty()) throw StateError("DenseNet is empty");
  if (input.size() != input_size()) {
    throw ConfigError("descriptor length " + std::to_string(input.size()) + " != net input " +
                      std::to_string(input_size()));
  }
}

VecX DenseNet::forward(const VecX& input) const {
  check_input(input);
  VecX a = input;
  for (int l = 0; l < layers(); ++l) {
    VecX z = weights_[l] * a + biases_[l];
    if (l + 1 < layers() && act_ == Activation::Tanh) z = z.array().tanh();
    a = std::move(z);
  }
  return scale_ * a;
}

VecX DenseNet::backward(const VecX& input, const VecX& cotangent) const {
  check_input(input);
  if (cotangent.size() != output_size()) throw ConfigError("cotangent has wrong length");
  std::vector<VecX> acts{input};
  for (int l = 0; l < layers(); ++l) {
    VecX z = weights_[l] * acts.back() + biases_[l];
    if (l + 1 < layers() && act_ == Activation::Tanh) z = z.array().tanh();
    acts.push_back(std::move(z));
  }
  VecX grad(parameter_count());
  // Offsets of each layer's block in the flat layout.
  std::vector<Eigen::Index> offset(layers() + 1, 0);
  for (int l = 0; l < layers(); ++l) {
    offset[l + 1] = offset[l] + weights_[l].size() + biases_[l].size();
  }
  VecX delta = scale_ * cotangent;  // d/dz of the last layer
  for (int l = layers() - 1; l >= 0; --l) {
    const VecX& in = acts[l];
    const MatX& w = weights_[l];
    Eigen::Index k = offset[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      grad.segment(k, w.cols()) = delta(r) * in;
      k += w.cols();
    }
    grad.segment(k, delta.size()) = delta;
    if (l == 0) break;
    VecX back = w.transpose() * delta;
    if (act_ == Activation::Tanh) back.array() *= 1.0 - in.array().square();
    delta = std::move(back);
  }
  return grad;
}

void DenseNet::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing", path.string());
  out.precision(17);
  out << kMagic << ' ' << kVersion << '\n';
  out << "layers " << sizes_.size();
  for (int s : sizes_) out << ' ' << s;
  out << "\nactivation " << (act_ == Activation::Tanh ? "tanh" : "identity") << '\n';
  out << "output_scale " << scale_ << '\n';
  const VecX theta = parameters();
  out << "parameters " << theta.size() << '\n';
  for (Eigen::Index i = 0; i < theta.size(); ++i) out << theta(i) << '\n';
  if (!out) throw IoError("write failed", path.string());
}

DenseNet DenseNet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open", path.string());
  std::string word;
  int version = 0;
  if (!(in >> word >> version) || word != kMagic) throw ParseError("not a DenseNet checkpoint", 1);
  if (version != kVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 1);
  }
  std::size_t count = 0;
  if (!(in >> word >> count) || word != "layers" || count < 2) {
    throw ParseError("bad layers line", 2);
  }
  std::vector<int> sizes(count);
  for (int& s : sizes) {
    if (!(in >> s) || s <= 0) throw ParseError("bad layer size", 2);
  }
  std::string act;
  if (!(in >> word >> act) || word != "activation" || (act != "tanh" && act != "identity")) {
    throw ParseError("bad activation line", 3);
  }
  double scale = 0.0;
  if (!(in >> word >> scale) || word != "output_scale") throw ParseError("bad output_scale line", 4);
  long n = 0;
  if (!(in >> word >> n) || word != "parameters") throw ParseError("bad parameters line", 5);
  DenseNet net(sizes, 0, act == "tanh" ? Activation::Tanh : Activation::Identity, scale);
  if (n != net.parameter_count()) {
    throw ParseError("parameter count " + std::to_string(n) + " does not match layer sizes", 5);
  }
  VecX theta(n);
  for (long i = 0; i < n; ++i) {
    if (!(in >> theta(i))) throw ParseError("truncated parameter data", static_cast<int>(6 + i));
  }
  if (in >> word) throw ParseError("trailing data after parameters", static_cast<int>(6 + n));
  net.set_parameters(theta);
  return net;
}

VecX predict_field(const DenseNet& net, const ShapeSample& sample) {
  VecX u = net.forward(sample.descriptor);
  if (u.size() != sample.problem->size()) {
    throw ConfigError("net output length does not match the problem's field size");
  }
  sample.problem->constraints().apply(u);
  return u;
}

double family_loss(const DenseNet& net, const std::vector<ShapeSample>& data,
                   std::span<const int> batch, VecX& grad) {
  grad = VecX::Zero(net.parameter_count());
  double loss = 0.0;
  VecX gu;
  // Accumulate in descriptor order so the sum does not depend on where the
  // shapes sit in the dataset.
  std::vector<int> order(batch.begin(), batch.end());
  for (int s : order) {
    if (s < 0 || s >= static_cast<int>(data.size())) throw ConfigError("family_loss: bad sample index");
  }
  std::stable_sort(order.begin(), order.end(), [&data](int a, int b) {
    const VecX& da = data[a].descriptor;
    const VecX& db = data[b].descriptor;
    return std::lexicographical_compare(da.begin(), da.end(), db.begin(), db.end());
  });
  for (int s : order) {
    const ShapeSample& sample = data[s];
    const VecX u = net.forward(sample.descriptor);
    loss += sample.problem->projected_loss_and_gradient(u, gu);
    grad += net.backward(sample.descriptor, gu);
  }
  const double n = static_cast<double>(batch.size());
  grad /= n;
  return loss / n;
}

TrainResult train_family(DenseNet& net, const std::vector<ShapeSample>& data,
                         const TrainOptions& options) {
  if (data.empty()) throw ConfigError("training set is empty");
  const int n = static_cast<int>(data.size());
  const SampleLossGradFn fn = [&](const VecX& theta, std::span<const int> batch, VecX& grad) {
    DenseNet local = net;
    local.set_parameters(theta);
    return family_loss(local, data, batch, grad);
  };
  MinimizeOptions mo;
  mo.stop.max_epochs = options.epochs;
  mo.stop.gradient_tol = 0.0;
  mo.stop.loss_tol = -1.0;
  mo.fd_check = options.fd_check;
  const int batch = options.batch_size > 0 ? options.batch_size : n;
  MinimizeResult res =
      minimize_stochastic(fn, n, net.parameters(), options.schedule, batch, options.seed, mo);
  net.set_parameters(res.theta);
  TrainResult out;
  out.trace = std::move(res.trace);
  VecX g;
  for (int s = 0; s < n; ++s) {
    const int one[1] = {s};
    out.shape_losses.push_back(family_loss(net, data, one, g));
  }
  return out;
}

}  // namespace ibn
