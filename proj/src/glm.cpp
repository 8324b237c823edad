#include "fntk/glm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include "fntk/errors.hpp"
#include "fntk/fisher.hpp"
#include "fntk/random.hpp"

namespace fntk {

LinearizedGlm::LinearizedGlm(MlpNetwork net, bool include_output, double prior_var)
    : base(std::move(net)),
      coefficients(Vector::Zero(base.parameter_count())),
      include_network_output(include_output),
      prior_variance(prior_var) {
  if (!(prior_variance > 0.0) || !std::isfinite(prior_variance)) {
    throw ContractViolation("GLM prior variance must be positive and finite");
  }
  if (base.architecture().heteroscedastic || num_classes() < 2) {
    throw ContractViolation("GLM needs a plain network with at least 2 outputs");
  }
}

namespace {

Matrix unflatten(const Vector& v, Index cols) {
  Matrix out(v.size() / cols, cols);
  for (Index i = 0; i < out.rows(); ++i)
    for (Index c = 0; c < cols; ++c) out(i, c) = v[i * cols + c];
  return out;
}

Vector flatten(const Matrix& m) {
  Vector out(m.size());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index c = 0; c < m.cols(); ++c) out[i * m.cols() + c] = m(i, c);
  return out;
}

Matrix logits_from(const LinearizedGlm& model, const JacobianOperator& jac, const Vector& coef) {
  Matrix z = unflatten(jac.jvp(coef), model.num_classes());
  if (model.include_network_output) z += jac.outputs();
  return z;
}

struct Adam {
  explicit Adam(Index n, const GlmFitConfig& c) : m(Vector::Zero(n)), v(Vector::Zero(n)), cfg(c) {}
  void step(Vector& x, const Vector& g) {
    ++t;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    x.array() -= cfg.learning_rate * (m.array() / bc1) /
                 ((v.array() / bc2).sqrt() + cfg.adam_epsilon);
  }
  Vector m, v;
  GlmFitConfig cfg;
  std::size_t t = 0;
};

void check_config(const GlmFitConfig& cfg) {
  if (cfg.batch_size == 0) throw ContractViolation("GLM fit: batch size must be positive");
  if (!(cfg.learning_rate >= 0.0)) throw ContractViolation("GLM fit: learning rate must be >= 0");
}

// Mini-batch index lists for one epoch.
std::vector<std::vector<Index>> epoch_batches(Rng& rng, Index n, std::size_t batch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<Index>> out;
  for (std::size_t s = 0; s < order.size(); s += batch) {
    const std::size_t e = std::min(order.size(), s + batch);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

double map_objective(const LinearizedGlm& model, const JacobianOperator& jac,
                     const TaskDataset& data, const Vector& coef) {
  const double nll = loss_value(LossKind::categorical_ce, logits_from(model, jac, coef),
                                data.targets);
  const auto n = static_cast<double>(data.size());
  return nll + coef.squaredNorm() / (2.0 * model.prior_variance * n);
}

}  // namespace

Matrix glm_logits(const LinearizedGlm& model, const Matrix& inputs) {
  return glm_logits(model, inputs, model.coefficients);
}

Matrix glm_logits(const LinearizedGlm& model, const Matrix& inputs, const Vector& coefficients) {
  if (coefficients.size() != model.parameter_count()) {
    throw ContractViolation("glm_logits: coefficient vector has length " +
                            std::to_string(coefficients.size()) + ", expected " +
                            std::to_string(model.parameter_count()));
  }
  if (inputs.rows() == 0) return Matrix(0, model.num_classes());
  return logits_from(model, JacobianOperator(model.base, inputs), coefficients);
}

void validate_labels(const TaskDataset& data, Index num_classes) {
  data.validate();
  if (data.targets.cols() != 1) {
    throw ContractViolation("classification data needs a single label column");
  }
  for (Index i = 0; i < data.size(); ++i) {
    const double y = data.targets(i, 0);
    if (y < 0 || y >= static_cast<double>(num_classes) || std::floor(y) != y) {
      throw ContractViolation("class label at row " + std::to_string(i) +
                              " is not in 0.." + std::to_string(num_classes - 1));
    }
  }
}

MapResult fit_map(const LinearizedGlm& model, const TaskDataset& data, const GlmFitConfig& cfg) {
  check_config(cfg);
  validate_labels(data, model.num_classes());
  MapResult result{model, {}};
  if (cfg.epochs == 0 || data.size() == 0) return result;

  const auto n = static_cast<double>(data.size());
  const JacobianOperator full(model.base, data.inputs);
  Vector coef = model.coefficients;
  Adam adam(coef.size(), cfg);
  Rng rng = Rng::stream(cfg.seed, "training");

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : epoch_batches(rng, data.size(), cfg.batch_size)) {
      const TaskDataset batch = data.subset(rows);
      const JacobianOperator jac(model.base, batch.inputs);
      Matrix g;
      loss_value(LossKind::categorical_ce, logits_from(model, jac, coef), batch.targets, &g);
      // Per-datum scale: mean batch NLL + prior / n.
      const Vector grad = jac.vjp(flatten(g)) + coef / (model.prior_variance * n);
      if (!grad.allFinite()) {
        throw TrainingDivergence("GLM MAP fit diverged at epoch " + std::to_string(epoch), epoch);
      }
      adam.step(coef, grad);
    }
    const double obj = map_objective(model, full, data, coef);
    if (!std::isfinite(obj)) {
      throw TrainingDivergence("GLM MAP fit diverged at epoch " + std::to_string(epoch), epoch);
    }
    result.loss_trace.push_back(obj);
  }
  result.model.coefficients = coef;
  return result;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw ContractViolation("inverse_softplus needs a positive argument");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

Vector GaussianPosteriorApprox::scales() const {
  return raw_scale.unaryExpr([](double v) { return softplus(v); });
}

double gaussian_kl_to_prior(const Vector& mu, const Vector& scale, double prior_variance) {
  if (mu.size() != scale.size()) throw ContractViolation("gaussian KL: size mismatch");
  double kl = 0.0;
  for (Index k = 0; k < mu.size(); ++k) {
    const double s2 = scale[k] * scale[k];
    kl += 0.5 * ((s2 + mu[k] * mu[k]) / prior_variance - 1.0 - std::log(s2 / prior_variance));
  }
  return kl;
}

GaussianPosteriorApprox fit_svi(const LinearizedGlm& model, const TaskDataset& data,
                                const GlmFitConfig& cfg) {
  check_config(cfg);
  validate_labels(data, model.num_classes());
  if (data.size() == 0) throw ContractViolation("fit_svi: empty dataset");
  const Index p = model.parameter_count();
  const auto n = static_cast<double>(data.size());
  const double pv = model.prior_variance;

  GaussianPosteriorApprox q;
  q.kind = ApproxKind::meanfield;
  q.prior_variance = pv;
  q.train_size = data.size();
  Vector state(2 * p);
  state.head(p).setZero();
  state.tail(p).setConstant(-5.0);
  Adam adam(2 * p, cfg);
  Rng order_rng = Rng::stream(cfg.seed, "training");
  Rng noise_rng = Rng::stream(cfg.seed, "sampling");

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : epoch_batches(order_rng, data.size(), cfg.batch_size)) {
      const TaskDataset batch = data.subset(rows);
      const JacobianOperator jac(model.base, batch.inputs);
      const Vector mu = state.head(p), raw = state.tail(p);
      const Vector s = raw.unaryExpr([](double v) { return softplus(v); });
      const Vector z = noise_rng.normal_vector(p);
      const Vector coef = mu + s.cwiseProduct(z);
      Matrix g;
      const double nll =
          loss_value(LossKind::categorical_ce, logits_from(model, jac, coef), batch.targets, &g);
      // (n / B) sum over the batch = n * batch mean.
      const Vector gdata = n * jac.vjp(flatten(g));
      const double kl = gaussian_kl_to_prior(mu, s, pv);
      const double neg_elbo = n * nll + kl;
      if (!std::isfinite(neg_elbo) || !gdata.allFinite()) {
        throw TrainingDivergence("SVI diverged at epoch " + std::to_string(epoch), epoch);
      }
      Vector grad(2 * p);
      grad.head(p) = gdata + mu / pv;
      for (Index k = 0; k < p; ++k) {
        const double ds = gdata[k] * z[k] + s[k] / pv - 1.0 / s[k];
        grad[p + k] = ds / (1.0 + std::exp(-raw[k]));
      }
      adam.step(state, grad / n);
      q.elbo_trace.push_back(-neg_elbo);
      q.loss_trace.push_back(neg_elbo);
    }
  }
  q.mean = state.head(p);
  q.raw_scale = state.tail(p);
  return q;
}

SymmetricLinearOperator laplace_precision(const LinearizedGlm& model, const Matrix& inputs,
                                          const Vector& at, double data_scale) {
  const Index p = model.parameter_count();
  const double pv = model.prior_variance;
  SymmetricLinearOperator op;
  op.dimension = p;
  if (inputs.rows() == 0) {
    op.apply = [pv](const Vector& v) { return Vector(v / pv); };
    return op;
  }
  auto jac = std::make_shared<JacobianOperator>(model.base, inputs);
  const Matrix probs = softmax(logits_from(model, *jac, at));
  const Index c = model.num_classes();
  op.apply = [jac, probs, c, pv, data_scale](const Vector& v) {
    const Matrix u = unflatten(jac->jvp(v), c);
    Matrix hu(u.rows(), c);
    for (Index i = 0; i < u.rows(); ++i) {
      const double pu = probs.row(i).dot(u.row(i));
      hu.row(i) = probs.row(i).array() * (u.row(i).array() - pu);
    }
    return Vector(data_scale * jac->vjp(flatten(hu)) + v / pv);
  };
  return op;
}

namespace {

void laplace_root(GaussianPosteriorApprox& approx, const SymmetricLinearOperator& precision,
                  Index rank, std::uint64_t seed) {
  const Index p = precision.dimension;
  Rng rng = Rng::stream(seed, "laplace");
  LanczosOptions lo;
  lo.restart_on_breakdown = true;
  const auto factors =
      lanczos_factorize(precision, rng.normal_vector(p), std::min(rank, p), lo);
  approx.root = lowrank_inverse_root(factors);
  approx.basis = factors.basis;
  approx.laplace_rank = factors.rank;
}

}  // namespace

GaussianPosteriorApprox fit_laplace(const LinearizedGlm& model, const TaskDataset& data,
                                    const GlmFitConfig& cfg) {
  if (cfg.laplace_rank < 1) throw ContractViolation("fit_laplace: rank must be >= 1");
  const MapResult map = fit_map(model, data, cfg);
  GaussianPosteriorApprox approx;
  approx.kind = ApproxKind::laplace;
  approx.mean = map.model.coefficients;
  approx.prior_variance = model.prior_variance;
  approx.fisher_source = cfg.fisher_source;
  approx.train_size = data.size();
  approx.laplace_rank = cfg.laplace_rank;
  approx.loss_trace = map.loss_trace;
  if (cfg.fisher_source == FisherSource::training) {
    laplace_root(approx, laplace_precision(model, data.inputs, approx.mean, 1.0),
                 cfg.laplace_rank, cfg.seed);
  }
  return approx;
}

Matrix posterior_covariance(const GaussianPosteriorApprox& approx) {
  const Index p = approx.mean.size();
  switch (approx.kind) {
    case ApproxKind::map: return Matrix::Zero(p, p);
    case ApproxKind::meanfield: return approx.scales().cwiseAbs2().asDiagonal();
    case ApproxKind::laplace:
      if (approx.root.cols() == 0 && approx.fisher_source == FisherSource::test_batch) {
        throw ContractViolation("test-batch Laplace covariance depends on the prediction batch");
      }
      return approx.root * approx.root.transpose() +
             approx.prior_variance *
                 (Matrix::Identity(p, p) - approx.basis * approx.basis.transpose());
  }
  return Matrix::Zero(p, p);
}

Vector sample_coefficients(const LinearizedGlm& model, const GaussianPosteriorApprox& approx,
                           const Matrix& inputs, std::uint64_t seed) {
  const Index p = approx.mean.size();
  Rng rng = Rng::stream(seed, "sampling");
  switch (approx.kind) {
    case ApproxKind::map: return approx.mean;
    case ApproxKind::meanfield:
      return approx.mean + approx.scales().cwiseProduct(rng.normal_vector(p));
    case ApproxKind::laplace: {
      GaussianPosteriorApprox a = approx;
      if (a.fisher_source == FisherSource::test_batch) {
        const double scale = inputs.rows() > 0 ? static_cast<double>(a.train_size) /
                                                     static_cast<double>(inputs.rows())
                                               : 0.0;
        laplace_root(a, laplace_precision(model, inputs, a.mean, scale), a.laplace_rank, seed);
      }
      const Vector zr = rng.normal_vector(a.root.cols());
      const Vector zp = rng.normal_vector(p);
      const Vector complement = zp - a.basis * (a.basis.transpose() * zp);
      return a.mean + a.root * zr + std::sqrt(a.prior_variance) * complement;
    }
  }
  return approx.mean;
}

ClassPrediction predict_class(const LinearizedGlm& model, const GaussianPosteriorApprox& approx,
                              const Matrix& inputs, PredictMode mode, std::uint64_t seed) {
  const Vector coef = mode == PredictMode::mean
                          ? approx.mean
                          : sample_coefficients(model, approx, inputs, seed);
  ClassPrediction out;
  out.probabilities = softmax(glm_logits(model, inputs, coef));
  out.labels.resize(static_cast<std::size_t>(inputs.rows()));
  for (Index i = 0; i < inputs.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < out.probabilities.cols(); ++c) {
      if (out.probabilities(i, c) > out.probabilities(i, best)) best = c;
    }
    out.labels[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

double accuracy(const std::vector<Index>& labels, const TaskDataset& data) {
  if (static_cast<Index>(labels.size()) != data.size()) {
    throw ContractViolation("accuracy: label count mismatch");
  }
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<double>(labels[i]) == data.targets(static_cast<Index>(i), 0)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::string class_predictions_to_csv(const ClassPrediction& pred) {
  std::string out = "index,label";
  for (Index c = 0; c < pred.probabilities.cols(); ++c) out += ",prob_" + std::to_string(c);
  out += '\n';
  char buf[40];
  for (Index i = 0; i < pred.probabilities.rows(); ++i) {
    out += std::to_string(i) + ',' + std::to_string(pred.labels[static_cast<std::size_t>(i)]);
    for (Index c = 0; c < pred.probabilities.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", pred.probabilities(i, c));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::string_view to_string(ApproxKind k) {
  switch (k) {
    case ApproxKind::map: return "map";
    case ApproxKind::laplace: return "laplace";
    case ApproxKind::meanfield: return "meanfield";
  }
  return "?";
}

ApproxKind parse_approx_kind(std::string_view s) {
  if (s == "map") return ApproxKind::map;
  if (s == "laplace") return ApproxKind::laplace;
  if (s == "meanfield" || s == "svi") return ApproxKind::meanfield;
  throw ContractViolation("unknown posterior approximation '" + std::string(s) + "'");
}

std::string_view to_string(FisherSource s) {
  return s == FisherSource::training ? "training" : "test_batch";
}

FisherSource parse_fisher_source(std::string_view s) {
  if (s == "training") return FisherSource::training;
  if (s == "test_batch") return FisherSource::test_batch;
  throw ContractViolation("unknown Fisher source '" + std::string(s) + "'");
}

}  // namespace fntk
