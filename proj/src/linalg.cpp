#include "fntk/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "fntk/errors.hpp"
#include "fntk/random.hpp"

namespace fntk {

Vector SymmetricLinearOperator::operator()(const Vector& x) const {
  if (x.size() != dimension) {
    throw ContractViolation("operator applied to vector of length " +
                            std::to_string(x.size()) + ", expected " +
                            std::to_string(dimension));
  }
  Vector y = apply(x);
  if (shift != 0.0) y += shift * x;
  return y;
}

SymmetricLinearOperator SymmetricLinearOperator::from_dense(Matrix a, double shift) {
  if (a.rows() != a.cols()) throw ContractViolation("dense operator must be square");
  const Index n = a.rows();
  return {n, [a = std::move(a)](const Vector& x) -> Vector { return a * x; }, shift};
}

Matrix assemble_dense(const SymmetricLinearOperator& op) {
  Matrix a(op.dimension, op.dimension);
  Vector e = Vector::Zero(op.dimension);
  for (Index j = 0; j < op.dimension; ++j) {
    e[j] = 1.0;
    a.col(j) = op(e);
    e[j] = 0.0;
  }
  return a;
}

CgResult cg_solve(const SymmetricLinearOperator& op, const Vector& b,
                  const CgOptions& options) {
  const Index n = op.dimension;
  if (b.size() != n) {
    throw ContractViolation("cg_solve: right-hand side has length " +
                            std::to_string(b.size()) + ", operator dimension is " +
                            std::to_string(n));
  }
  if (!(options.tol > 0.0)) throw ContractViolation("cg_solve: tol must be positive");
  if (options.jacobi_diagonal && options.jacobi_diagonal->size() != n) {
    throw ContractViolation("cg_solve: preconditioner diagonal has wrong length");
  }
  const std::size_t max_iter =
      options.max_iter > 0 ? options.max_iter
                           : std::max<std::size_t>(1000, 2 * static_cast<std::size_t>(n));

  CgResult result;
  result.x = Vector::Zero(n);
  const double b_norm = b.norm();
  if (!std::isfinite(b_norm)) throw ContractViolation("cg_solve: non-finite right-hand side");
  if (b_norm == 0.0) {
    result.converged = true;
    return result;
  }
  const double target = options.tol * b_norm;

  auto precondition = [&](const Vector& r) -> Vector {
    if (!options.jacobi_diagonal) return r;
    return r.cwiseQuotient(*options.jacobi_diagonal);
  };

  Vector x = Vector::Zero(n);
  Vector r = b;
  Vector z = precondition(r);
  Vector p = z;
  double rz = r.dot(z);
  double r_norm = b_norm;

  Vector best_x = x;
  double best_norm = b_norm;

  for (std::size_t k = 1; k <= max_iter; ++k) {
    const Vector ap = op(p);
    const double curvature = p.dot(ap);
    if (!std::isfinite(curvature)) {
      throw NumericBreakdown("cg_solve: non-finite value at iteration " + std::to_string(k),
                             static_cast<std::ptrdiff_t>(k));
    }
    if (curvature <= 0.0) {
      throw NumericBreakdown("cg_solve: non-positive curvature at iteration " +
                                 std::to_string(k) + " (operator not SPD)",
                             static_cast<std::ptrdiff_t>(k));
    }
    const double step = rz / curvature;
    x += step * p;
    r -= step * ap;
    r_norm = r.norm();
    if (!std::isfinite(r_norm) || !x.allFinite()) {
      throw NumericBreakdown("cg_solve: non-finite iterate at iteration " + std::to_string(k),
                             static_cast<std::ptrdiff_t>(k));
    }
    result.iterations = k;
    if (r_norm <= target) {
      // Guard against drift of the recursive residual.
      Vector true_r = b - op(x);
      const double true_norm = true_r.norm();
      if (true_norm <= target) {
        r_norm = true_norm;
        best_x = x;
        best_norm = true_norm;
        result.converged = true;
        break;
      }
      r = std::move(true_r);
      r_norm = true_norm;
      z = precondition(r);
      p = z;
      rz = r.dot(z);
      continue;
    }
    if (r_norm < best_norm) {
      best_norm = r_norm;
      best_x = x;
    }
    z = precondition(r);
    const double rz_next = r.dot(z);
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }

  result.x = std::move(best_x);
  result.residual_norm = best_norm;
  return result;
}

Matrix LanczosFactors::tridiagonal() const {
  Matrix t = Matrix::Zero(rank, rank);
  for (Index i = 0; i < rank; ++i) {
    t(i, i) = alpha[i];
    if (i + 1 < rank) {
      t(i, i + 1) = beta[i];
      t(i + 1, i) = beta[i];
    }
  }
  return t;
}

namespace {

// Two passes of classical Gram-Schmidt against the first `cols` columns.
void orthogonalize(Vector& w, const Matrix& q, Index cols) {
  for (int pass = 0; pass < 2; ++pass) {
    const auto block = q.leftCols(cols);
    w -= block * (block.transpose() * w);
  }
}

Eigen::SelfAdjointEigenSolver<Matrix> eigen_tridiagonal(const LanczosFactors& f) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver;
  Vector sub = f.rank > 1 ? Vector(f.beta.head(f.rank - 1)) : Vector();
  solver.computeFromTridiagonal(f.alpha.head(f.rank), sub, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw NumericBreakdown("tridiagonal eigendecomposition failed");
  }
  return solver;
}

}  // namespace

LanczosFactors lanczos_factorize(const SymmetricLinearOperator& op, const Vector& probe,
                                 Index rank, const LanczosOptions& options) {
  const Index n = op.dimension;
  if (probe.size() != n) throw ContractViolation("lanczos_factorize: probe length mismatch");
  if (rank < 1 || rank > n) {
    throw ContractViolation("lanczos_factorize: rank must be in [1, dimension]");
  }
  const double probe_norm = probe.norm();
  if (!(probe_norm > 0.0) || !std::isfinite(probe_norm)) {
    throw ContractViolation("lanczos_factorize: probe must be nonzero and finite");
  }

  LanczosFactors f;
  f.requested_rank = rank;
  f.basis = Matrix::Zero(n, rank);
  f.alpha = Vector::Zero(rank);
  f.beta = Vector::Zero(std::max<Index>(rank - 1, 0));
  f.basis.col(0) = probe / probe_norm;

  Rng restart_rng(0x1a2c05ULL);
  double norm_estimate = 0.0;
  double prev_beta = 0.0;
  Index achieved = rank;

  for (Index j = 0; j < rank; ++j) {
    Vector w = op(f.basis.col(j));
    if (!w.allFinite()) {
      throw NumericBreakdown("lanczos_factorize: non-finite operator output at step " +
                                 std::to_string(j),
                             static_cast<std::ptrdiff_t>(j));
    }
    const double a = f.basis.col(j).dot(w);
    f.alpha[j] = a;
    w -= a * f.basis.col(j);
    if (j > 0) w -= prev_beta * f.basis.col(j - 1);
    orthogonalize(w, f.basis, j + 1);
    const double b = w.norm();
    norm_estimate = std::max(norm_estimate, std::abs(a) + b + prev_beta);

    if (j + 1 == rank) {
      f.next_beta = b;
      f.next_basis = b > 0.0 ? Vector(w / b) : Vector::Zero(n);
      break;
    }
    if (b < options.breakdown_tol * std::max(1.0, norm_estimate)) {
      if (!options.restart_on_breakdown) {
        achieved = j + 1;
        f.breakdown = true;
        break;
      }
      f.breakdown = true;
      Vector fresh;
      double fresh_norm = 0.0;
      for (int attempt = 0; attempt < 8 && fresh_norm < 1e-3; ++attempt) {
        fresh = restart_rng.unit_vector(n);
        orthogonalize(fresh, f.basis, j + 1);
        fresh_norm = fresh.norm();
      }
      if (fresh_norm < 1e-3) {
        throw NumericBreakdown("lanczos_factorize: could not extend basis after breakdown",
                               static_cast<std::ptrdiff_t>(j));
      }
      f.beta[j] = 0.0;
      f.basis.col(j + 1) = fresh / fresh_norm;
      prev_beta = 0.0;
      continue;
    }
    f.beta[j] = b;
    f.basis.col(j + 1) = w / b;
    prev_beta = b;
  }

  if (achieved < rank) {
    f.basis.conservativeResize(n, achieved);
    f.alpha.conservativeResize(achieved);
    f.beta.conservativeResize(std::max<Index>(achieved - 1, 0));
    f.next_beta = 0.0;
    f.next_basis = Vector::Zero(n);
  }
  f.rank = achieved;
  return f;
}

Vector ritz_values(const LanczosFactors& factors) {
  return eigen_tridiagonal(factors).eigenvalues();
}

Vector lanczos_solve(const LanczosFactors& factors, const Vector& b) {
  if (b.size() != factors.basis.rows()) {
    throw ContractViolation("lanczos_solve: right-hand side length mismatch");
  }
  const double b_norm = b.norm();
  if (b_norm == 0.0) return Vector::Zero(b.size());
  const double alignment = factors.basis.col(0).dot(b) / b_norm;
  if (std::abs(alignment - 1.0) > 1e-8) {
    throw ContractViolation("lanczos_solve: factors were not built from probe b/||b||");
  }
  const auto solver = eigen_tridiagonal(factors);
  const Vector& lambda = solver.eigenvalues();
  const double scale = lambda.cwiseAbs().maxCoeff();
  if (lambda.cwiseAbs().minCoeff() <= 1e-14 * std::max(scale, 1e-300)) {
    throw NumericBreakdown("lanczos_solve: tridiagonal factor is singular");
  }
  const Matrix& v = solver.eigenvectors();
  // T^{-1} e1 = V diag(1/lambda) V^T e1
  const Vector coeff = v * v.row(0).transpose().cwiseQuotient(lambda);
  return b_norm * (factors.basis * coeff);
}

Matrix lowrank_inverse_root(const LanczosFactors& factors) {
  const auto solver = eigen_tridiagonal(factors);
  const Vector& lambda = solver.eigenvalues();
  if (lambda.minCoeff() <= 1e-14) {
    throw NumericBreakdown(
        "lowrank_inverse_root: tridiagonal factor has eigenvalue <= 1e-14; "
        "increase the diagonal (sigma^2) shift");
  }
  const Matrix& v = solver.eigenvectors();
  const Matrix t_inv_sqrt = v * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
  return factors.basis * t_inv_sqrt;
}

double lanczos_logdet(const SymmetricLinearOperator& op, Index rank,
                      std::size_t num_probes, std::uint64_t seed) {
  if (num_probes == 0) throw ContractViolation("lanczos_logdet: need at least one probe");
  const Index n = op.dimension;
  rank = std::min(rank, n);
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t s = 0; s < num_probes; ++s) {
    Vector z(n);
    for (Index i = 0; i < n; ++i) z[i] = (rng.next_u64() & 1U) ? 1.0 : -1.0;
    const LanczosFactors f = lanczos_factorize(op, z, rank);
    const auto solver = eigen_tridiagonal(f);
    const Vector& lambda = solver.eigenvalues();
    if (lambda.minCoeff() <= 0.0) {
      throw NumericBreakdown("lanczos_logdet: non-positive Ritz value");
    }
    const Vector weights = solver.eigenvectors().row(0).transpose().array().square();
    total += static_cast<double>(n) * weights.dot(lambda.array().log().matrix());
  }
  return total / static_cast<double>(num_probes);
}

}  // namespace fntk
