#pragma once

// Fisher-vector products for Gaussian and categorical likelihoods, exact
// (jvp -> Hessian block -> vjp) and finite-difference (one extra forward pass
// at theta + eps v followed by the gradient of a KL divergence).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fntk/linalg.hpp"
#include "fntk/net.hpp"

namespace fntk {

struct LikelihoodKind {
  enum class Family { gaussian, categorical };
  Family family = Family::gaussian;
  double noise_variance = 1.0;  // gaussian only
  Index num_classes = 0;        // categorical only

  static LikelihoodKind gaussian(double noise_variance);
  static LikelihoodKind categorical(Index num_classes);
  void validate() const;
};

struct FvpConfig {
  double epsilon = 1e-4;
  void validate() const;  // epsilon in [1e-8, 1e-1]
};

// Row-wise log-softmax, stable for large logits.
Matrix log_softmax(const Matrix& logits);
Matrix softmax(const Matrix& logits);

// Sum over data of KL(p(y | outputs_p) || p(y | outputs_q)). Categorical
// outputs are logits.
double kl_divergence(const LikelihoodKind& like, const Matrix& outputs_p, const Matrix& outputs_q);
// Gradient of kl_divergence with respect to outputs_q, holding the first
// distribution fixed.
Matrix kl_gradient_second(const LikelihoodKind& like, const Matrix& outputs_p,
                          const Matrix& outputs_q);

// A differentiable model evaluated on a fixed batch. Networks are wrapped by
// network_view; tests can supply closed-form models directly.
struct ModelView {
  Index parameter_count = 0;
  Index num_data = 0;
  Index channels = 0;
  Vector theta;
  std::function<Matrix(const Vector& theta)> outputs;                        // n x o
  std::function<Vector(const Vector& theta, const Matrix& cotangent)> vjp;  // -> p
  std::function<Matrix(const Vector& theta, const Vector& tangent)> jvp;    // -> n x o
};

// Channels: the mean channels for gaussian, all logits for categorical.
ModelView network_view(const MlpNetwork& net, const Matrix& inputs, const LikelihoodKind& like);

// (1/n) J H J^T v.
Vector exact_fvp(const ModelView& model, const Vector& v, const LikelihoodKind& like);
Vector exact_fvp(const MlpNetwork& net, const Matrix& inputs, const Vector& v,
                 const LikelihoodKind& like);

// (1/(eps n)) grad_{theta'} KL(p(y|theta) || p(y|theta')) at theta' = theta + eps v.
Vector fd_fvp(const ModelView& model, const Vector& v, const LikelihoodKind& like,
              const FvpConfig& cfg = {});
Vector fd_fvp(const MlpNetwork& net, const Matrix& inputs, const Vector& v,
              const LikelihoodKind& like, const FvpConfig& cfg = {});

struct FvpSweepRow {
  double epsilon = 0.0;
  double mean_rel_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t probes = 0;
  std::uint64_t seed = 0;
};

// Err(eps) = |exact - fd(eps)| / |exact| over random unit probes; the same
// probes are reused for every eps.
std::vector<FvpSweepRow> fvp_error_sweep(const ModelView& model, const LikelihoodKind& like,
                                         const std::vector<double>& epsilons,
                                         std::size_t num_probes, std::uint64_t seed);
std::string sweep_to_csv(const std::vector<FvpSweepRow>& rows);

enum class FisherBackend { exact, finite_difference };

struct FisherOperatorOptions {
  FisherBackend backend = FisherBackend::exact;
  FvpConfig fvp;
  // Multiplies (1/n) J H J^T. Zero selects n * sigma^2 for gaussian (giving
  // J J^T) and n for categorical.
  double scale = 0.0;
  // Seed for the two probes of the symmetry self-test.
  std::uint64_t seed = 0;
};

struct FisherOperator {
  SymmetricLinearOperator op;
  double scale = 1.0;
  // |<u, F v> - <v, F u>| / (|u| |F v|) on two random probes.
  double symmetry_defect = 0.0;
  bool symmetry_warning = false;
};

FisherOperator fisher_operator(const MlpNetwork& net, const Matrix& inputs,
                               const LikelihoodKind& like,
                               const FisherOperatorOptions& options = {});

}  // namespace fntk
