#pragma once

// Matrix-free Krylov machinery over symmetric positive (semi)definite
// operators: conjugate gradients, Lanczos tridiagonalization with full
// reorthogonalization, Lanczos solves and low-rank inverse roots.

#include <cstddef>
#include <functional>
#include <optional>

#include <Eigen/Core>

namespace fntk {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// y = apply(x) + shift * x. `apply` must be linear, symmetric and pure.
struct SymmetricLinearOperator {
  Index dimension = 0;
  std::function<Vector(const Vector&)> apply;
  double shift = 0.0;

  Vector operator()(const Vector& x) const;

  static SymmetricLinearOperator from_dense(Matrix a, double shift = 0.0);
};

// Column-by-column assembly; intended for tests and small diagnostics.
Matrix assemble_dense(const SymmetricLinearOperator& op);

struct CgOptions {
  double tol = 1e-8;
  // 0 selects max(1000, 2 * dimension).
  std::size_t max_iter = 0;
  // Jacobi preconditioner: diagonal of the shifted operator.
  std::optional<Vector> jacobi_diagonal;
};

struct CgResult {
  Vector x;
  double residual_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

// Solves op(x) = b. Returns the best iterate (smallest residual) when
// max_iter is reached; check `converged`.
CgResult cg_solve(const SymmetricLinearOperator& op, const Vector& b,
                  const CgOptions& options = {});

struct LanczosOptions {
  // Relative to a running estimate of ||A||.
  double breakdown_tol = 1e-12;
  // On breakdown, continue from a fresh direction orthogonal to the current
  // basis (T gets a zero coupling) instead of returning early. Needed when a
  // full-rank factorization is required from a probe that misses part of the
  // spectrum.
  bool restart_on_breakdown = false;
};

struct LanczosFactors {
  Matrix basis;          // dimension x rank, orthonormal columns
  Vector alpha;          // diagonal of T (rank)
  Vector beta;           // off-diagonal of T (rank - 1)
  Index rank = 0;
  Index requested_rank = 0;
  bool breakdown = false;
  // Residual coupling beta_m and direction q_{m+1}, so that
  // A Q_m = Q_m T_m + beta_m q_{m+1} e_m^T.
  double next_beta = 0.0;
  Vector next_basis;

  Matrix tridiagonal() const;
};

LanczosFactors lanczos_factorize(const SymmetricLinearOperator& op,
                                 const Vector& probe, Index rank,
                                 const LanczosOptions& options = {});

// ||b|| Q T^{-1} e1; the factors must have been built from probe b / ||b||.
Vector lanczos_solve(const LanczosFactors& factors, const Vector& b);

// R = Q T^{-1/2} with R R^T approximating A^{-1}.
Matrix lowrank_inverse_root(const LanczosFactors& factors);

// Eigenvalues of T, ascending.
Vector ritz_values(const LanczosFactors& factors);

// Stochastic Lanczos quadrature estimate of log det(A) using Rademacher
// probes drawn from `seed`.
double lanczos_logdet(const SymmetricLinearOperator& op, Index rank,
                      std::size_t num_probes, std::uint64_t seed);

}  // namespace fntk
