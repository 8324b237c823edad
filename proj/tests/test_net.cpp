#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fntk/errors.hpp"
#include "fntk/io.hpp"
#include "fntk/net.hpp"
#include "test_util.hpp"

using namespace fntk;
using fntk::testing::rel_err;

namespace {

MlpArchitecture arch(Index d, std::vector<Index> hidden, Index o, Activation act) {
  MlpArchitecture a;
  a.input_dim = d;
  a.hidden_widths = std::move(hidden);
  a.output_dim = o;
  a.activation = act;
  return a;
}

// Independent forward pass: plain loops over the documented flat layout.
std::vector<double> reference_forward(const std::vector<std::size_t>& widths,
                                      const std::vector<double>& theta,
                                      std::vector<double> x) {
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fin = widths[l], fout = widths[l + 1];
    std::vector<double> y(fout, 0.0);
    for (std::size_t r = 0; r < fout; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < fin; ++c) acc += theta[offset + r * fin + c] * x[c];
      y[r] = acc;
    }
    offset += fin * fout;
    for (std::size_t r = 0; r < fout; ++r) y[r] += theta[offset + r];
    offset += fout;
    if (l + 2 < widths.size())
      for (double& v : y) v = std::tanh(v);
    x = std::move(y);
  }
  return x;
}

// Central differences of the flattened outputs, column j of the result is
// d f / d theta_j, i.e. the transpose of the Jacobian layout.
Matrix finite_difference_jacobian(const MlpNetwork& net, const Matrix& x, double h) {
  const Index p = net.parameter_count();
  const Index no = x.rows() * net.architecture().network_outputs();
  Matrix fd(p, no);
  for (Index j = 0; j < p; ++j) {
    Vector plus = net.theta(), minus = net.theta();
    plus[j] += h;
    minus[j] -= h;
    const RowMatrix fp = net.with_parameters(plus).forward(x);
    const RowMatrix fm = net.with_parameters(minus).forward(x);
    for (Index k = 0; k < no; ++k) fd(j, k) = (fp.data()[k] - fm.data()[k]) / (2 * h);
  }
  return fd;
}

}  // namespace

TEST_CASE("architecture parameter count and layout") {
  const auto a = arch(2, {16}, 2, Activation::tanh);
  CHECK(a.parameter_count() == (2 + 1) * 16 + (16 + 1) * 2);
  const auto layers = a.layers();
  REQUIRE(layers.size() == 2);
  CHECK(layers[1].weight_offset == 48);
  CHECK(layers[1].bias_offset == 48 + 32);

  auto h = arch(1, {40, 40}, 1, Activation::tanh);
  h.heteroscedastic = true;
  CHECK(h.network_outputs() == 2);
  CHECK(h.mean_channels() == std::vector<Index>{0});

  auto nb = arch(3, {4}, 1, Activation::relu);
  nb.use_bias = false;
  CHECK(nb.parameter_count() == 3 * 4 + 4);

  CHECK_THROWS_AS(ParameterVector(a, Vector::Zero(3)), ContractViolation);
  Vector bad = Vector::Zero(a.parameter_count());
  bad[0] = std::nan("");
  CHECK_THROWS_AS(ParameterVector(a, bad), ContractViolation);
}

TEST_CASE("forward: affine map") {
  const auto a = arch(1, {}, 1, Activation::identity);
  const MlpNetwork net(a, ParameterVector(a, Vector{{2.0, 1.0}}));
  CHECK(net.forward(Matrix::Constant(1, 1, 3.0))(0, 0) == doctest::Approx(7.0));
  CHECK_THROWS_AS(net.forward(Matrix::Zero(1, 2)), ContractViolation);
}

TEST_CASE("forward: zero network") {
  const auto a = arch(3, {5, 5}, 2, Activation::tanh);
  Vector theta = Vector::Zero(a.parameter_count());
  const MlpNetwork zero(a, ParameterVector(a, theta));
  CHECK(zero.forward(fntk::testing::random_matrix(4, 3, 1)).isZero());

  // Zero weights, unit biases: tanh chain of biases.
  for (const auto& l : a.layers())
    theta.segment(l.bias_offset, l.fan_out).setOnes();
  const MlpNetwork biased(a, ParameterVector(a, theta));
  // Zero weights: each layer sees only its own bias, and the output is linear.
  CHECK(biased.forward(Matrix::Zero(1, 3))(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("forward: matches an independent implementation") {
  const auto a = arch(1, {8}, 1, Activation::tanh);
  const MlpNetwork net = MlpNetwork::initialize(a, 7);
  // Non-zero biases so they are exercised.
  Vector theta = net.theta() + 0.1 * fntk::testing::random_matrix(a.parameter_count(), 1, 8).col(0);
  const MlpNetwork perturbed = net.with_parameters(theta);
  const std::vector<double> t(theta.data(), theta.data() + theta.size());
  const auto want = reference_forward({1, 8, 1}, t, {0.5});
  CHECK(perturbed.forward(Matrix::Constant(1, 1, 0.5))(0, 0) ==
        doctest::Approx(want[0]).epsilon(1e-14));
}

TEST_CASE("vjp: zero cotangent and affine analytic Jacobian") {
  const auto a = arch(3, {}, 2, Activation::identity);
  const MlpNetwork net = MlpNetwork::initialize(a, 3);
  const Matrix x{{0.5, -1.0, 2.0}};
  const JacobianOperator jac(net, x);
  CHECK(jac.vjp(Vector::Zero(2)).isZero());

  const Vector g = jac.vjp(Vector{{1.0, 0.0}});
  // Row 0 of W receives x, row 1 nothing; bias block is e1.
  CHECK(rel_err(Vector(g.segment(0, 3)), Vector(x.row(0).transpose())) < 1e-15);
  CHECK(g.segment(3, 3).isZero());
  CHECK(rel_err(Vector(g.segment(6, 2)), Vector{{1.0, 0.0}}) < 1e-15);

  CHECK_THROWS_AS(jac.vjp(Vector::Zero(3)), ContractViolation);
  CHECK_THROWS_AS(jac.vjp(Vector::Constant(2, std::nan(""))), ContractViolation);
}

TEST_CASE("vjp and jvp match the dense Jacobian") {
  const auto a = arch(2, {16}, 2, Activation::tanh);
  const MlpNetwork net = MlpNetwork::initialize(a, 11);
  const Matrix x = fntk::testing::random_matrix(3, 2, 12);
  const JacobianOperator jac(net, x);
  const Matrix j = dense_jacobian(jac);
  Rng rng(13);
  for (int k = 0; k < 5; ++k) {
    const Vector u = rng.normal_vector(jac.output_count());
    const Vector v = rng.normal_vector(jac.parameter_count());
    CHECK(rel_err(jac.vjp(u), Vector(j * u)) <= 1e-10);
    CHECK(rel_err(jac.jvp(v), Vector(j.transpose() * v)) <= 1e-10);
  }
}

TEST_CASE("jvp: zero tangent and bias perturbation") {
  const auto a = arch(1, {}, 1, Activation::identity);
  const MlpNetwork net(a, ParameterVector(a, Vector{{2.0, 1.0}}));
  const JacobianOperator jac(net, Matrix{{1.0}, {2.0}, {-3.0}});
  CHECK(jac.jvp(Vector::Zero(2)).isZero());
  const double delta = 0.25;
  CHECK(rel_err(jac.jvp(Vector{{0.0, delta}}), Vector::Constant(3, delta)) < 1e-15);
}

TEST_CASE("adjoint identity over random pairs") {
  const auto a = arch(2, {16}, 2, Activation::tanh);
  const MlpNetwork net = MlpNetwork::initialize(a, 21);
  const JacobianOperator jac(net, fntk::testing::random_matrix(3, 2, 22));
  Rng rng(23);
  for (int k = 0; k < 20; ++k) {
    const Vector u = rng.normal_vector(jac.output_count());
    const Vector v = rng.normal_vector(jac.parameter_count());
    const double lhs = u.dot(jac.jvp(v));
    const double rhs = jac.vjp(u).dot(v);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(std::abs(lhs), 1.0));
  }
}

TEST_CASE("vjp linearity") {
  const auto a = arch(2, {6, 5}, 3, Activation::relu);
  const MlpNetwork net = MlpNetwork::initialize(a, 31);
  const JacobianOperator jac(net, fntk::testing::random_matrix(4, 2, 32));
  Rng rng(33);
  const Vector u1 = rng.normal_vector(jac.output_count());
  const Vector u2 = rng.normal_vector(jac.output_count());
  const double alpha = -1.7;
  CHECK(rel_err(jac.vjp(alpha * u1 + u2), Vector(alpha * jac.vjp(u1) + jac.vjp(u2))) <= 1e-12);
}

TEST_CASE("dense_jacobian: affine 1-D analytic") {
  const auto a = arch(1, {}, 1, Activation::identity);
  const MlpNetwork net(a, ParameterVector(a, Vector{{0.3, -0.2}}));
  const Matrix j = dense_jacobian(JacobianOperator(net, Matrix{{1.0}, {2.0}}));
  CHECK(j.isApprox(Matrix{{1.0, 2.0}, {1.0, 1.0}}));
}

TEST_CASE("dense_jacobian: central finite differences") {
  for (std::uint64_t seed : {41, 42, 43}) {
    const auto a = arch(1, {8}, 1, Activation::tanh);
    const MlpNetwork net = MlpNetwork::initialize(a, seed);
    const Matrix x = fntk::testing::random_matrix(5, 1, seed + 100);
    const Matrix j = dense_jacobian(JacobianOperator(net, x));
    const Matrix fd = finite_difference_jacobian(net, x, 1e-5);
    for (Index r = 0; r < j.rows(); ++r)
      for (Index c = 0; c < j.cols(); ++c) {
        const double denom = std::max(std::abs(j(r, c)), 1e-6);
        CHECK(std::abs(j(r, c) - fd(r, c)) / denom <= 1e-4);
      }
  }
}

TEST_CASE("dense_jacobian: memory cap") {
  const auto a = arch(1, {8}, 1, Activation::tanh);
  const JacobianOperator jac(MlpNetwork::initialize(a, 1), Matrix::Zero(10, 1));
  CHECK_THROWS_AS(jac.dense(10), ResourceError);
}

TEST_CASE("channel selection on a heteroscedastic head") {
  auto a = arch(2, {5}, 2, Activation::tanh);
  a.heteroscedastic = true;
  const MlpNetwork net = MlpNetwork::initialize(a, 51);
  const Matrix x = fntk::testing::random_matrix(3, 2, 52);
  const JacobianOperator full(net, x);
  const JacobianOperator means(net, x, a.mean_channels());
  CHECK(full.channels_per_datum() == 4);
  CHECK(means.channels_per_datum() == 2);
  const Matrix jf = full.dense();
  const Matrix jm = means.dense();
  for (Index i = 0; i < 3; ++i)
    for (Index c = 0; c < 2; ++c) CHECK(jm.col(i * 2 + c).isApprox(jf.col(i * 4 + 2 * c)));
}

TEST_CASE("train: affine net on linear data reaches tiny MSE") {
  const auto a = arch(1, {}, 1, Activation::identity);
  TaskDataset d;
  d.inputs = Vector::LinSpaced(20, -1, 1);
  d.targets = (3.0 * d.inputs.array() - 0.5).matrix();
  OptimizerConfig cfg;
  cfg.optimizer = OptimizerKind::sgd_momentum;
  cfg.learning_rate = 0.05;
  cfg.epochs = 400;
  cfg.batch_size = 5;
  const auto res = train(MlpNetwork::initialize(a, 1), d, cfg);
  CHECK(mean_squared_error(res.network.forward(d.inputs), d.targets) <= 1e-6);
  CHECK(res.loss_trace.size() == 400);
}

TEST_CASE("train: zero learning rate leaves parameters unchanged") {
  const auto a = arch(1, {4}, 1, Activation::tanh);
  const MlpNetwork net = MlpNetwork::initialize(a, 2);
  TaskDataset d;
  d.inputs = Vector::LinSpaced(7, -1, 1);
  d.targets = d.inputs.array().sin().matrix();
  OptimizerConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 3;
  for (auto kind : {OptimizerKind::sgd_momentum, OptimizerKind::adam}) {
    cfg.optimizer = kind;
    const auto res = train(net, d, cfg);
    CHECK(res.network.theta() == net.theta());
  }
}

TEST_CASE("train: bitwise determinism and last-layer-only updates") {
  const auto a = arch(1, {6, 6}, 1, Activation::tanh);
  const MlpNetwork net = MlpNetwork::initialize(a, 3);
  TaskDataset d;
  d.inputs = Vector::LinSpaced(30, -3, 3);
  d.targets = d.inputs.array().sin().matrix();
  OptimizerConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  cfg.seed = 99;
  const auto r1 = train(net, d, cfg);
  const auto r2 = train(net, d, cfg);
  CHECK(r1.network.theta() == r2.network.theta());
  CHECK(r1.loss_trace == r2.loss_trace);

  cfg.last_layer_only = true;
  const auto r3 = train(net, d, cfg);
  const Index last = a.layers().back().weight_offset;
  CHECK(r3.network.theta().head(last) == net.theta().head(last));
  CHECK(r3.network.theta().tail(a.parameter_count() - last) !=
        net.theta().tail(a.parameter_count() - last));
  const Matrix probe{{0.3}};
  CHECK(r3.network.features(probe) == net.features(probe));
}

TEST_CASE("train: divergence reports the epoch") {
  const auto a = arch(1, {}, 1, Activation::identity);
  TaskDataset d;
  d.inputs = Vector::LinSpaced(10, 100, 200);
  d.targets = d.inputs;
  OptimizerConfig cfg;
  cfg.learning_rate = 10.0;
  cfg.epochs = 50;
  cfg.batch_size = 10;
  try {
    train(MlpNetwork::initialize(a, 1), d, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDivergence& e) {
    CHECK(e.epoch() < 50);
  }
}

TEST_CASE("losses: gradients match finite differences") {
  Rng rng(61);
  const Matrix out = fntk::testing::random_matrix(3, 4, 62);
  struct Case {
    LossKind kind;
    Matrix targets;
  };
  Matrix labels(3, 1);
  labels << 0, 3, 1;
  const std::vector<Case> cases{{LossKind::mse, fntk::testing::random_matrix(3, 4, 63)},
                                {LossKind::heteroscedastic_gaussian,
                                 fntk::testing::random_matrix(3, 2, 64)},
                                {LossKind::categorical_ce, labels}};
  for (const auto& c : cases) {
    Matrix grad;
    loss_value(c.kind, out, c.targets, &grad);
    for (Index i = 0; i < out.rows(); ++i)
      for (Index j = 0; j < out.cols(); ++j) {
        Matrix plus = out, minus = out;
        plus(i, j) += 1e-6;
        minus(i, j) -= 1e-6;
        const double fd =
            (loss_value(c.kind, plus, c.targets) - loss_value(c.kind, minus, c.targets)) / 2e-6;
        CHECK(grad(i, j) == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
      }
  }
}

TEST_CASE("checkpoint round trip") {
  auto a = arch(2, {3, 4}, 1, Activation::relu);
  a.heteroscedastic = true;
  const MlpNetwork net = MlpNetwork::initialize(a, 71);
  const std::string path =
      (std::filesystem::temp_directory_path() / "fntk_test_ckpt.json").string();
  save_checkpoint(net, path);
  const MlpNetwork back = load_checkpoint(path);
  CHECK(back.architecture() == a);
  CHECK(back.theta() == net.theta());
  CHECK(back.fingerprint() == net.fingerprint());
  std::filesystem::remove(path);

  CHECK_THROWS_AS(checkpoint_from_json("{not json"), InputError);
  std::string text = checkpoint_to_json(net);
  const auto pos = text.find("\"layout_version\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 19, "\"layout_version\": 9");
  CHECK_THROWS_AS(checkpoint_from_json(text), InputError);
}

TEST_CASE("dataset CSV round trip is lossless") {
  TaskDataset d;
  d.inputs = fntk::testing::random_matrix(5, 2, 81);
  d.targets = fntk::testing::random_matrix(5, 1, 82) * 1e-7;
  const TaskDataset back = dataset_from_csv(dataset_to_csv(d));
  CHECK(back.inputs == d.inputs);
  CHECK(back.targets == d.targets);
  CHECK(inputs_from_csv("x_0,x_1\n", 2).rows() == 0);
  CHECK_THROWS_AS(dataset_from_csv("x_0,y_0\n1,abc\n"), InputError);
}
