#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <Eigen/SVD>

#include "ibn/parametric_model.hpp"

using namespace ibn;

namespace fs = std::filesystem;

namespace {

double spectral_norm(const MatX& w) {
  return Eigen::JacobiSVD<MatX>(w).singularValues()(0);
}

std::shared_ptr<const ImmersedProblem> circle_problem(int n, const Vec3& d) {
  const auto grid = BackgroundGrid::unit_square(n);
  const auto cloud = circle_cloud(d.head<2>(), d(2), 400);
  auto prob = PdeProblem::poisson(1.0, 0.0, 0.0);
  for (Side s : {Side::Left, Side::Right, Side::Bottom, Side::Top}) {
    prob.walls.push_back({s, 0, [](const Vec2&) { return 0.0; }});
  }
  LossWeights w;
  w.inverse_h_scaling = true;
  return std::make_shared<const ImmersedProblem>(
      grid, occupancy_grid(cloud, grid, {0.5, MaskSide::Outside}), cloud, prob, w);
}

double disk_error(const ImmersedProblem& p, const VecX& u, const Vec3& d) {
  return p.l2_norm(u, 0, [&d](const Vec2& x) {
    const double r = (x - d.head<2>()).norm();
    return r < d(2) ? 0.25 * (d(2) * d(2) - r * r) : 0.0;
  });
}

}  // namespace

TEST_CASE("parameter layout and counts") {
  DenseNet net({3, 5, 4}, 1);
  CHECK(net.parameter_count() == 3 * 5 + 5 + 5 * 4 + 4);
  CHECK(net.layers() == 2);
  const VecX th = net.parameters();
  CHECK(th(0) == net.weight(0)(0, 0));
  CHECK(th(1) == net.weight(0)(0, 1));  // row-major
  CHECK(th(15) == net.bias(0)(0));
  DenseNet other({3, 5, 4}, 2);
  other.set_parameters(th);
  CHECK(other.parameters() == th);
  CHECK_THROWS_AS(other.set_parameters(VecX::Zero(3)), ConfigError);
  CHECK_THROWS_AS(DenseNet({3}, 1), ConfigError);
  CHECK_THROWS_AS(net.forward(VecX::Zero(2)), ConfigError);
}

TEST_CASE("initialisation range") {
  DenseNet net({4, 50, 3}, 9);
  for (int l = 0; l < net.layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(net.sizes()[l]));
    CHECK(net.weight(l).cwiseAbs().maxCoeff() <= bound);
    CHECK(net.bias(l).cwiseAbs().maxCoeff() <= bound);
  }
  DenseNet same({4, 50, 3}, 9);
  CHECK(same.parameters() == net.parameters());
}

TEST_CASE("forward examples") {
  DenseNet net({3, 8, 8, 6}, 4);
  net.set_parameters(VecX::Zero(net.parameter_count()));
  CHECK(net.forward(Eigen::Vector3d(0.1, 0.2, 0.3)).cwiseAbs().maxCoeff() == 0.0);

  DenseNet r({3, 8, 8, 6}, 4);
  const VecX d = Eigen::Vector3d(0.5, 0.4, 0.2);
  CHECK(r.forward(d) == r.forward(d));
}

TEST_CASE("weight perturbations are bounded by layer norms") {
  DenseNet net({3, 16, 16, 10}, 5);
  const VecX d = Eigen::Vector3d(0.4, 0.6, 0.25);
  const VecX base = net.forward(d);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> layer_pick(0, net.layers() - 1);
  const double delta = 1e-3;
  for (int trial = 0; trial < 10; ++trial) {
    const int l = layer_pick(rng);
    std::uniform_int_distribution<int> ri(0, static_cast<int>(net.weight(l).rows()) - 1);
    std::uniform_int_distribution<int> ci(0, static_cast<int>(net.weight(l).cols()) - 1);
    DenseNet p = net;
    p.weight(l)(ri(rng), ci(rng)) += delta;
    // Input to layer l.
    VecX x = d;
    for (int k = 0; k < l; ++k) x = (net.weight(k) * x + net.bias(k)).array().tanh().matrix();
    double lip = net.output_scale() * x.norm();
    for (int k = l + 1; k < net.layers(); ++k) lip *= spectral_norm(net.weight(k));
    CHECK((p.forward(d) - base).norm() <= lip * delta * (1 + 1e-9));
  }
}

TEST_CASE("backward against central differences") {
  DenseNet net({3, 12, 12, 7}, 11);
  const VecX d = Eigen::Vector3d(0.3, -0.2, 0.8);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  VecX cot(7);
  for (auto& v : cot) v = nd(rng);
  const VecX g = net.backward(d, cot);
  const VecX th = net.parameters();
  std::uniform_int_distribution<long> pick(0, th.size() - 1);
  for (int k = 0; k < 20; ++k) {
    const long j = pick(rng);
    const double step = 1e-6;
    VecX tp = th, tm = th;
    tp(j) += step;
    tm(j) -= step;
    DenseNet a = net, b = net;
    a.set_parameters(tp);
    b.set_parameters(tm);
    const double fd = (cot.dot(a.forward(d)) - cot.dot(b.forward(d))) / (2 * step);
    CHECK(std::abs(fd - g(j)) <= 1e-5 * std::max(std::abs(g(j)), 1e-3));
  }
  CHECK(net.backward(d, VecX::Zero(7)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("one-layer identity net has outer-product gradients") {
  DenseNet net({3, 2}, 3, Activation::Identity, 0.5);
  const VecX x = Eigen::Vector3d(1.0, -2.0, 0.5);
  const VecX c = Eigen::Vector2d(0.3, -1.1);
  const VecX g = net.backward(x, c);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) CHECK(g(i * 3 + j) == doctest::Approx(0.5 * c(i) * x(j)));
    CHECK(g(6 + i) == doctest::Approx(0.5 * c(i)));
  }
  CHECK((net.forward(x) - 0.5 * (net.weight(0) * x + net.bias(0))).norm() <= 1e-15);
}

TEST_CASE("checkpoint round trip and validation") {
  const fs::path path = fs::temp_directory_path() / "ibn_net.txt";
  DenseNet net({3, 6, 5}, 21, Activation::Tanh, 0.25);
  net.save(path);
  const DenseNet back = DenseNet::load(path);
  CHECK(back.sizes() == net.sizes());
  CHECK(back.parameters() == net.parameters());
  CHECK(back.output_scale() == 0.25);
  CHECK(back.activation() == Activation::Tanh);

  {
    std::ofstream out(path);
    out << "ibn-densenet 1\nlayers 2 3 5\nactivation tanh\noutput_scale 0.1\nparameters 3\n1\n2\n3\n";
  }
  CHECK_THROWS_AS(DenseNet::load(path), ParseError);
  {
    std::ofstream out(path);
    out << "something else\n";
  }
  CHECK_THROWS_AS(DenseNet::load(path), ParseError);
  fs::remove(path);
  CHECK_THROWS_AS(DenseNet::load(path), IoError);
}

TEST_CASE("single-shape overfit matches the direct solve") {
  const Vec3 d(0.5, 0.5, 0.25);
  const ShapeSample s{VecX(d), circle_problem(32, d)};
  const auto& p = *s.problem;
  const VecX direct = solve_normal_equations(p, p.initial_guess());
  DenseNet net({3, 64, 64, p.size()}, 1);
  TrainOptions o;
  o.epochs = 2000;
  const auto res = train_family(net, {s}, o);
  CHECK(res.trace.size() == 2001);
  CHECK(res.trace.loss.back() < res.trace.loss.front());
  const VecX u = predict_field(net, s);
  CHECK(p.l2_norm(u - direct) <= 5 * disk_error(p, direct, d));
  // Walls are imposed on the prediction.
  for (int i = 0; i < p.grid().num_nodes(); ++i) {
    if (p.grid().on_boundary(i)) CHECK(u(i) == 0.0);
  }
}

TEST_CASE("family training: generalisation and order independence") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> uc(0.45, 0.55), ur(0.2, 0.3);
  std::vector<ShapeSample> all;
  for (int k = 0; k < 8; ++k) {
    const double cx = uc(rng), cy = uc(rng), r = ur(rng);
    const Vec3 d(cx, cy, r);
    all.push_back({VecX(d), circle_problem(16, d)});
  }
  const std::vector<ShapeSample> train(all.begin(), all.begin() + 6);
  DenseNet net({3, 32, 32, all[0].problem->size()}, 1);
  DenseNet init = net;
  TrainOptions o;
  o.epochs = 600;
  train_family(net, train, o);
  double train_bp = 0;
  for (int k = 0; k < 6; ++k) {
    train_bp += all[k].problem->boundary_penalty(predict_field(net, all[k])).value / 6;
  }
  for (int k = 6; k < 8; ++k) {
    CHECK(all[k].problem->boundary_penalty(predict_field(net, all[k])).value <= 10 * train_bp);
  }

  std::vector<ShapeSample> shuffled(train.rbegin(), train.rend());
  DenseNet again = init;
  train_family(again, shuffled, o);
  CHECK(again.parameters() == net.parameters());

  DenseNet rerun = init;
  train_family(rerun, train, o);
  CHECK(rerun.parameters() == net.parameters());
}

TEST_CASE("mini-batch training is seeded") {
  std::vector<ShapeSample> data;
  for (double r : {0.2, 0.24, 0.28}) {
    const Vec3 d(0.5, 0.5, r);
    data.push_back({VecX(d), circle_problem(8, d)});
  }
  DenseNet a({3, 8, data[0].problem->size()}, 2);
  DenseNet b = a, c = a;
  TrainOptions o;
  o.epochs = 20;
  o.batch_size = 1;
  o.seed = 4;
  train_family(a, data, o);
  train_family(b, data, o);
  o.seed = 5;
  train_family(c, data, o);
  CHECK(a.parameters() == b.parameters());
  CHECK(a.parameters() != c.parameters());
}

TEST_CASE("family loss gradient") {
  std::vector<ShapeSample> data;
  for (double r : {0.22, 0.27}) {
    const Vec3 d(0.5, 0.52, r);
    data.push_back({VecX(d), circle_problem(8, d)});
  }
  DenseNet net({3, 6, data[0].problem->size()}, 3);
  const int batch[] = {0, 1};
  VecX g;
  family_loss(net, data, batch, g);
  TrainOptions o;
  o.epochs = 1;
  o.fd_check = true;
  DenseNet copy = net;
  CHECK_NOTHROW(train_family(copy, data, o));
  const VecX th = net.parameters();
  VecX dir = VecX::Random(th.size());
  const double eps = 1e-6;
  DenseNet p = net, m = net;
  p.set_parameters(th + eps * dir);
  m.set_parameters(th - eps * dir);
  VecX tmp;
  const double fd = (family_loss(p, data, batch, tmp) - family_loss(m, data, batch, tmp)) / (2 * eps);
  CHECK(fd == doctest::Approx(g.dot(dir)).epsilon(1e-5));
  const int bad[] = {5};
  CHECK_THROWS_AS(family_loss(net, data, bad, g), ConfigError);
}
