#pragma once

// Linearized categorical GLM: logits(x) = J(x)^T theta' (+ f(x; theta)), with
// the network frozen at theta and only the coefficients theta' learned. MAP,
// Laplace and mean-field variational posteriors over theta'.

#include <cstdint>
#include <string>
#include <vector>

#include "fntk/linalg.hpp"
#include "fntk/net.hpp"

namespace fntk {

struct LinearizedGlm {
  MlpNetwork base;
  Vector coefficients;
  bool include_network_output = false;
  double prior_variance = 1.0;

  LinearizedGlm(MlpNetwork net, bool include_output = false, double prior_var = 1.0);
  Index num_classes() const noexcept { return base.architecture().output_dim; }
  Index parameter_count() const noexcept { return base.parameter_count(); }
};

// n x C logits at the model's coefficients, or at `coefficients` if given.
Matrix glm_logits(const LinearizedGlm& model, const Matrix& inputs);
Matrix glm_logits(const LinearizedGlm& model, const Matrix& inputs, const Vector& coefficients);

// Classification data: targets is an n x 1 column of integer labels.
void validate_labels(const TaskDataset& data, Index num_classes);

enum class FisherSource { training, test_batch };

struct GlmFitConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Laplace only.
  Index laplace_rank = 64;
  FisherSource fisher_source = FisherSource::training;
};

struct MapResult {
  LinearizedGlm model;
  std::vector<double> loss_trace;  // full-data objective / n after each epoch
};

// Minimizes sum_i NLL_i + |theta'|^2 / (2 prior_variance) with Adam.
MapResult fit_map(const LinearizedGlm& model, const TaskDataset& data, const GlmFitConfig& cfg);

enum class ApproxKind { map, laplace, meanfield };

struct GaussianPosteriorApprox {
  ApproxKind kind = ApproxKind::map;
  Vector mean;
  // Mean-field: scale = softplus(raw_scale).
  Vector raw_scale;
  // Laplace: covariance = root root^T + prior_variance (I - basis basis^T).
  Matrix root;
  Matrix basis;
  double prior_variance = 1.0;
  FisherSource fisher_source = FisherSource::training;
  Index train_size = 0;
  Index laplace_rank = 0;
  std::vector<double> loss_trace;  // MAP objective (laplace) or negative ELBO (meanfield)
  std::vector<double> elbo_trace;  // meanfield only, per step

  Vector scales() const;  // mean-field scales
};

double softplus(double x);
double inverse_softplus(double y);

// KL(N(mu, diag(scale^2)) || N(0, prior_variance I)).
double gaussian_kl_to_prior(const Vector& mu, const Vector& scale, double prior_variance);

// Mean-field SVI with one reparameterized sample per step; mu = 0, raw = -5 at
// start. Steps = epochs * ceil(n / batch).
GaussianPosteriorApprox fit_svi(const LinearizedGlm& model, const TaskDataset& data,
                                const GlmFitConfig& cfg);

// Precision n F(theta_MAP) + I / prior_variance, with F the per-datum GLM
// Fisher (1/n) J H J^T.
SymmetricLinearOperator laplace_precision(const LinearizedGlm& model, const Matrix& inputs,
                                          const Vector& at, double data_scale);

GaussianPosteriorApprox fit_laplace(const LinearizedGlm& model, const TaskDataset& data,
                                    const GlmFitConfig& cfg);

// Covariance of a Laplace or mean-field approximation, assembled densely.
Matrix posterior_covariance(const GaussianPosteriorApprox& approx);

enum class PredictMode { mean, single_sample };

struct ClassPrediction {
  Matrix probabilities;        // n x C
  std::vector<Index> labels;   // argmax, lowest index on ties
};

// Draw of theta' from the approximation. Test-batch Laplace needs `inputs`.
Vector sample_coefficients(const LinearizedGlm& model, const GaussianPosteriorApprox& approx,
                           const Matrix& inputs, std::uint64_t seed);

ClassPrediction predict_class(const LinearizedGlm& model, const GaussianPosteriorApprox& approx,
                              const Matrix& inputs, PredictMode mode, std::uint64_t seed = 0);

double accuracy(const std::vector<Index>& labels, const TaskDataset& data);
std::string class_predictions_to_csv(const ClassPrediction& pred);

std::string_view to_string(ApproxKind k);
ApproxKind parse_approx_kind(std::string_view s);
std::string_view to_string(FisherSource s);
FisherSource parse_fisher_source(std::string_view s);

}  // namespace fntk
