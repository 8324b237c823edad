#include <doctest.h>

#include <cmath>
#include <limits>

#include <Eigen/LU>

#include "fntk/errors.hpp"
#include "fntk/fisher.hpp"
#include "fntk/glm.hpp"
#include "fntk/random.hpp"
#include "test_util.hpp"

using namespace fntk;
using namespace fntk::testing;

namespace {

// Two blobs at (-2, 0) and (2, 0), std 0.5, with |x0| >= 0.5 enforced so the
// classes are separated by a margin.
TaskDataset blobs(Index n, std::uint64_t seed) {
  Rng rng(seed);
  TaskDataset d;
  d.inputs.resize(n, 2);
  d.targets.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double cx = label == 0 ? -2.0 : 2.0;
    double x0;
    do {
      x0 = cx + 0.5 * rng.normal();
    } while (std::abs(x0) < 0.5 || (x0 > 0) != (label == 1));
    d.inputs(i, 0) = x0;
    d.inputs(i, 1) = 0.5 * rng.normal();
    d.targets(i, 0) = label;
  }
  return d;
}

// Plain binary logistic regression on (x, 1) by full-batch gradient descent.
double logistic_oracle_accuracy(const TaskDataset& train, const TaskDataset& test) {
  Eigen::Vector3d w = Eigen::Vector3d::Zero();
  for (int it = 0; it < 2000; ++it) {
    Eigen::Vector3d g = Eigen::Vector3d::Zero();
    for (Index i = 0; i < train.size(); ++i) {
      const Eigen::Vector3d x(train.inputs(i, 0), train.inputs(i, 1), 1.0);
      const double pr = 1.0 / (1.0 + std::exp(-w.dot(x)));
      g += (pr - train.targets(i, 0)) * x;
    }
    w -= 0.1 * g / static_cast<double>(train.size());
  }
  int hits = 0;
  for (Index i = 0; i < test.size(); ++i) {
    const Eigen::Vector3d x(test.inputs(i, 0), test.inputs(i, 1), 1.0);
    hits += ((w.dot(x) > 0) ? 1 : 0) == static_cast<int>(test.targets(i, 0));
  }
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

MlpNetwork source_classifier(const TaskDataset& data) {
  MlpArchitecture a;
  a.input_dim = 2;
  a.hidden_widths = {8};
  a.output_dim = 2;
  a.activation = Activation::tanh;
  OptimizerConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.loss = LossKind::categorical_ce;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 30;
  cfg.batch_size = 20;
  return train(MlpNetwork::initialize(a, 3), data, cfg).network;
}

// Two-parameter linear model: logits = W x, W 2 x 1.
MlpNetwork two_parameter_net() {
  MlpArchitecture a;
  a.input_dim = 1;
  a.output_dim = 2;
  a.activation = Activation::identity;
  a.use_bias = false;
  return MlpNetwork(a, ParameterVector(a, Vector{{0.3, -0.4}}));
}

MlpNetwork zero_jacobian_classifier() {
  MlpArchitecture a;
  a.input_dim = 2;
  a.hidden_widths = {4};
  a.output_dim = 2;
  a.activation = Activation::relu;
  a.use_bias = false;
  return MlpNetwork(a, ParameterVector(a, Vector::Zero(a.parameter_count())));
}

}  // namespace

TEST_CASE("glm_logits: base cases") {
  const TaskDataset d = blobs(10, 1);
  const MlpNetwork net = source_classifier(blobs(40, 2));
  LinearizedGlm glm(net);
  const Matrix z = glm_logits(glm, d.inputs);
  CHECK(z.isZero());
  const Matrix p = softmax(z);
  CHECK((p.array() - 0.5).abs().maxCoeff() <= 1e-15);

  LinearizedGlm with_f(net, true);
  CHECK(glm_logits(with_f, d.inputs) == net.forward(d.inputs));

  // Affine net: J^T theta reproduces the affine map.
  MlpArchitecture aa;
  aa.input_dim = 2;
  aa.output_dim = 3;
  aa.activation = Activation::identity;
  const MlpNetwork affine = MlpNetwork::initialize(aa, 5);
  LinearizedGlm lin(affine);
  lin.coefficients = affine.theta();
  const Matrix j = dense_jacobian(JacobianOperator(affine, d.inputs));
  const Vector flat = j.transpose() * affine.theta();
  const Matrix got = glm_logits(lin, d.inputs);
  for (Index i = 0; i < d.size(); ++i)
    for (Index c = 0; c < 3; ++c) CHECK(std::abs(got(i, c) - flat[i * 3 + c]) <= 1e-12);
  CHECK((got - affine.forward(d.inputs)).cwiseAbs().maxCoeff() <= 1e-12);

  CHECK_THROWS_AS(glm_logits(lin, d.inputs, Vector::Zero(2)), ContractViolation);
  CHECK_THROWS_AS(LinearizedGlm(net, false, 0.0), ContractViolation);
}

TEST_CASE("fit_map: separable blobs reach the logistic oracle") {
  const TaskDataset tr = blobs(200, 11), te = blobs(200, 12);
  const double oracle = logistic_oracle_accuracy(tr, te);
  CHECK(oracle >= 0.98);
  const LinearizedGlm glm(source_classifier(tr));
  GlmFitConfig cfg;
  cfg.epochs = 40;
  const auto map = fit_map(glm, tr, cfg);
  CHECK(map.model.base.fingerprint() == glm.base.fingerprint());
  GaussianPosteriorApprox point;
  point.mean = map.model.coefficients;
  CHECK(accuracy(predict_class(map.model, point, tr.inputs, PredictMode::mean).labels, tr) >= 0.98);
  const double acc = accuracy(predict_class(map.model, point, te.inputs, PredictMode::mean).labels, te);
  CHECK(acc >= 0.95);
  CHECK(std::abs(acc - oracle) <= 0.03);
  // Smoothed trace decreases.
  CHECK(map.loss_trace.back() < map.loss_trace.front());

  const auto none = fit_map(glm, tr, GlmFitConfig{.epochs = 0});
  CHECK(none.model.coefficients == glm.coefficients);
  CHECK(none.loss_trace.empty());
}

TEST_CASE("fit_map: stronger priors shrink the coefficients") {
  const TaskDataset tr = blobs(60, 21);
  const LinearizedGlm base(source_classifier(tr));
  GlmFitConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 1e-2;
  std::vector<double> norms;
  for (double pv : {1.0, 1e-1, 1e-2, 1e-3, 1e-4}) {
    LinearizedGlm glm = base;
    glm.prior_variance = pv;
    norms.push_back(fit_map(glm, tr, cfg).model.coefficients.norm());
  }
  for (std::size_t k = 1; k < norms.size(); ++k) CHECK(norms[k] < norms[k - 1]);
  CHECK(norms.back() < 0.1 * norms.front());
}

TEST_CASE("gaussian KL to the prior") {
  const Vector mu = Vector::Zero(5), one = Vector::Ones(5);
  CHECK(gaussian_kl_to_prior(mu, one, 1.0) == 0.0);
  Vector shifted = mu;
  shifted[0] = 1.0;
  CHECK(gaussian_kl_to_prior(shifted, one, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(softplus(inverse_softplus(0.7)) == doctest::Approx(0.7));
}

TEST_CASE("fit_svi: ELBO improves and mean parameters classify") {
  const TaskDataset tr = blobs(200, 31), te = blobs(200, 32);
  const LinearizedGlm glm(source_classifier(tr));
  GlmFitConfig cfg;
  cfg.epochs = 40;
  const auto q = fit_svi(glm, tr, cfg);
  CHECK(q.kind == ApproxKind::meanfield);
  CHECK((q.scales().array() > 0.0).all());
  const std::size_t steps = q.elbo_trace.size();
  const std::size_t tail = steps / 5;
  double avg = 0.0;
  for (std::size_t k = steps - tail; k < steps; ++k) avg += q.elbo_trace[k] / static_cast<double>(tail);
  CHECK(avg > q.elbo_trace.front());
  CHECK(accuracy(predict_class(glm, q, te.inputs, PredictMode::mean).labels, te) >= 0.95);

  const auto q2 = fit_svi(glm, tr, cfg);
  CHECK(q2.mean == q.mean);
  CHECK(q2.raw_scale == q.raw_scale);
}

TEST_CASE("fit_laplace: dense covariance on a two-parameter GLM") {
  const MlpNetwork net = two_parameter_net();
  LinearizedGlm glm(net, false, 2.0);
  TaskDataset d;
  d.inputs = Vector{{-1.5, -0.3, 0.4, 1.1, 2.0, -0.8}};
  d.targets = Vector{{0, 1, 0, 1, 1, 0}};
  GlmFitConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 3;
  const auto lap = fit_laplace(glm, d, cfg);
  CHECK(lap.laplace_rank == 2);

  // Dense oracle: sum_i J_i (diag(p_i) - p_i p_i^T) J_i^T + I / prior.
  const Matrix j = dense_jacobian(JacobianOperator(net, d.inputs));
  Matrix h = Matrix::Identity(2, 2) / 2.0;
  for (Index i = 0; i < d.size(); ++i) {
    const Matrix ji = j.middleCols(2 * i, 2);
    const Vector zi = ji.transpose() * lap.mean;
    const double e0 = std::exp(zi[0]), e1 = std::exp(zi[1]);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    Matrix hb(2, 2);
    hb << p0 - p0 * p0, -p0 * p1, -p0 * p1, p1 - p1 * p1;
    h += ji * hb * ji.transpose();
  }
  const Matrix want = h.inverse();
  CHECK(rel_err(posterior_covariance(lap), want) <= 1e-6);

  // Sampling covariance; 1e6 draws keep the Monte Carlo error well under 1e-2.
  const int draws = 1000000;
  Matrix acc = Matrix::Zero(2, 2);
  for (int s = 0; s < draws; ++s) {
    const Vector dv = sample_coefficients(glm, lap, d.inputs, static_cast<std::uint64_t>(s)) - lap.mean;
    acc += dv * dv.transpose();
  }
  CHECK(rel_err(acc / draws, want) <= 1e-2);
}

TEST_CASE("fit_laplace: zero Jacobian falls back to the prior") {
  LinearizedGlm glm(zero_jacobian_classifier(), false, 0.5);
  const TaskDataset d = blobs(20, 41);
  const auto lap = fit_laplace(glm, d, GlmFitConfig{});
  CHECK(lap.mean.isZero());
  const Index p = glm.parameter_count();
  Vector sum = Vector::Zero(p), sq = Vector::Zero(p);
  const int draws = 1000;
  for (int s = 0; s < draws; ++s) {
    const Vector v = sample_coefficients(glm, lap, d.inputs, static_cast<std::uint64_t>(s));
    sum += v;
    sq += v.cwiseAbs2();
  }
  const Vector var = sq / draws - (sum / draws).cwiseAbs2();
  CHECK(((var.array() - 0.5).abs() <= 0.1 * 0.5).all());
}

TEST_CASE("predict_class: simplex, ties and determinism") {
  const TaskDataset tr = blobs(40, 51);
  const LinearizedGlm glm(source_classifier(tr));
  GaussianPosteriorApprox zero;
  zero.mean = Vector::Zero(glm.parameter_count());
  const auto uni = predict_class(glm, zero, tr.inputs, PredictMode::mean);
  CHECK((uni.probabilities.array() - 0.5).abs().maxCoeff() <= 1e-15);
  for (Index l : uni.labels) CHECK(l == 0);

  GlmFitConfig cfg;
  cfg.epochs = 5;
  for (const auto& approx : {fit_laplace(glm, tr, cfg), fit_svi(glm, tr, cfg)}) {
    const auto mean = predict_class(glm, approx, tr.inputs, PredictMode::mean);
    CHECK((mean.probabilities - softmax(glm_logits(glm, tr.inputs, approx.mean)))
              .cwiseAbs()
              .maxCoeff() == 0.0);
    const auto s1 = predict_class(glm, approx, tr.inputs, PredictMode::single_sample, 9);
    const auto s2 = predict_class(glm, approx, tr.inputs, PredictMode::single_sample, 9);
    CHECK(s1.probabilities == s2.probabilities);
    CHECK((s1.probabilities.array() >= 0.0).all());
    CHECK(((s1.probabilities.rowwise().sum().array() - 1.0).abs() <= 1e-12).all());
  }

  GlmFitConfig tb = cfg;
  tb.fisher_source = FisherSource::test_batch;
  const auto lap_tb = fit_laplace(glm, tr, tb);
  CHECK(lap_tb.root.cols() == 0);
  const auto sb = predict_class(glm, lap_tb, tr.inputs.topRows(10), PredictMode::single_sample, 3);
  CHECK(((sb.probabilities.rowwise().sum().array() - 1.0).abs() <= 1e-12).all());

  const std::string csv = class_predictions_to_csv(uni);
  CHECK(csv.rfind("index,label,prob_0,prob_1\n0,0,0.5,0.5\n", 0) == 0);
}

TEST_CASE("logits shift invariance") {
  const Matrix z = random_matrix(6, 4, 61);
  const Matrix shifted = z + Vector::LinSpaced(6, -3, 7).replicate(1, 4);
  CHECK((softmax(z) - softmax(shifted)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("labels are validated") {
  LinearizedGlm glm(two_parameter_net());
  TaskDataset d;
  d.inputs = Matrix{{0.1}, {0.2}};
  d.targets = Matrix{{0.0}, {2.0}};
  CHECK_THROWS_AS(fit_map(glm, d, GlmFitConfig{}), ContractViolation);
  d.targets(1, 0) = 0.5;
  CHECK_THROWS_AS(fit_map(glm, d, GlmFitConfig{}), ContractViolation);
}
