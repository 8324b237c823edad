#pragma once

// Gaussian-process regression with the finite neural tangent kernel
// k(x, x') = J(x)^T J(x'), taken at the trained parameters.
//
// Two equivalent views are provided. The function-space fit solves the
// (n*o) x (n*o) system (J^T J + s I) c = y; the parameter-space fit solves the
// p x p system (J J^T + s I) m = J y. Predictions from either need one
// Jacobian pass over the test inputs plus the cached quantities:
//
//   function space : mean = J*^T m,  var = |J*|^2 - |R^T J*|^2,
//                    m = J c, R R^T ~ J (J^T J + s I)^{-1} J^T
//   parameter space: mean = J*^T m,  var = s |B^T J*|^2,
//                    B B^T ~ (J J^T + s I)^{-1}
//
// Regression is done on residuals y - mu(X); mu(X*) is added back.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fntk/linalg.hpp"
#include "fntk/net.hpp"

namespace fntk {

enum class MeanFunctionKind {
  zero,            // mu(x) = 0
  jacobian_mean,   // mu(x) = J(x)^T theta
  linearized_nn,   // mu(x) = f(x; theta) + J(x)^T theta
  network_output,  // mu(x) = f(x; theta)
};

enum class InferenceSpace { function, parameter };

std::string_view to_string(MeanFunctionKind k);
std::string_view to_string(InferenceSpace s);
MeanFunctionKind parse_mean_kind(std::string_view s);
InferenceSpace parse_space(std::string_view s);

// mu(X) over the operator's channels, flattened datum-major.
Vector mean_function(MeanFunctionKind kind, const JacobianOperator& jac);

// (n1*o) x (n2*o) block kernel J(X1)^T J(X2).
Matrix kernel_matrix(const MlpNetwork& net, const Matrix& x1, const Matrix& x2,
                     const std::vector<Index>& channels = {},
                     std::size_t cap = kDefaultDenseCap);

struct GpOptions {
  // 0 picks min(dimension, 256).
  Index rank = 0;
  CgOptions cg;
  // A fit fails when CG stops with residual above this fraction of |rhs|.
  double fit_residual_tol = 1e-4;
  // Output channels to model; empty selects the network's mean channels.
  std::vector<Index> channels;
  // Replaces J J^T in the parameter-space system (e.g. a scaled Fisher
  // operator). Must have dimension p and no shift.
  std::optional<SymmetricLinearOperator> parameter_gram;
};

struct NtkPosterior {
  InferenceSpace space = InferenceSpace::function;
  MeanFunctionKind mean_kind = MeanFunctionKind::zero;
  double noise_variance = 1.0;
  std::uint64_t network_fingerprint = 0;
  std::vector<Index> channels;
  Vector mean_cache;      // length p in both spaces
  Matrix variance_root;   // p x rank: R (function) or B (parameter)
  // Free-form text stored with the cache (tool version, config hash).
  std::string provenance;
  // Diagnostics.
  std::size_t cg_iterations = 0;
  double cg_residual = 0.0;
  Index lanczos_rank = 0;
};

NtkPosterior fit_function_space(const MlpNetwork& net, const TaskDataset& data,
                                MeanFunctionKind mean, const GpOptions& options = {});
NtkPosterior fit_parameter_space(const MlpNetwork& net, const TaskDataset& data,
                                 MeanFunctionKind mean, const GpOptions& options = {});

// Function space when n*o <= p, else parameter space.
InferenceSpace default_space(const MlpNetwork& net, Index num_outputs);
NtkPosterior fit_posterior(const MlpNetwork& net, const TaskDataset& data,
                           MeanFunctionKind mean, std::optional<InferenceSpace> space = {},
                           const GpOptions& options = {});

struct Prediction {
  Matrix mean;       // m x o
  Matrix variance;   // m x o, clamped at 0
  std::size_t clamped = 0;
  double min_raw_variance = 0.0;
};

// Throws ConsistencyError when `net` is not the network the posterior was
// fitted with.
Prediction predict(const NtkPosterior& posterior, const MlpNetwork& net, const Matrix& inputs);

// Prior predictive variance diag(J*^T J*) for each test output.
Matrix prior_variance(const MlpNetwork& net, const Matrix& inputs,
                      const std::vector<Index>& channels = {});

struct LmlOptions {
  std::vector<Index> channels;
  std::size_t dense_cap = kDefaultDenseCap;
  // Dense factorization is used while min(n*o, p) stays below this.
  Index dense_max_dim = 4000;
  Index slq_rank = 64;
  std::size_t slq_probes = 16;
  std::uint64_t seed = 0;
  CgOptions cg;
};

// log N(y - mu(X) | 0, J^T J + s I).
double log_marginal_likelihood(const MlpNetwork& net, const TaskDataset& data,
                               MeanFunctionKind mean, const LmlOptions& options = {});

// Binary posterior cache, little-endian f64.
inline constexpr std::uint32_t kPosteriorFormatVersion = 1;
std::string serialize_posterior(const NtkPosterior& posterior);
NtkPosterior deserialize_posterior(std::string_view bytes);
void save_posterior(const NtkPosterior& posterior, const std::string& path);
NtkPosterior load_posterior(const std::string& path);

}  // namespace fntk
