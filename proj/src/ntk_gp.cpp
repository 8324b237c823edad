#include "fntk/ntk_gp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>

#include "fntk/errors.hpp"

namespace fntk {

std::string_view to_string(MeanFunctionKind k) {
  switch (k) {
    case MeanFunctionKind::zero: return "zero";
    case MeanFunctionKind::jacobian_mean: return "jacobian_mean";
    case MeanFunctionKind::linearized_nn: return "linearized_nn";
    case MeanFunctionKind::network_output: return "network_output";
  }
  return "?";
}

std::string_view to_string(InferenceSpace s) {
  return s == InferenceSpace::function ? "function" : "parameter";
}

MeanFunctionKind parse_mean_kind(std::string_view s) {
  if (s == "zero") return MeanFunctionKind::zero;
  if (s == "jacobian_mean") return MeanFunctionKind::jacobian_mean;
  if (s == "linearized_nn") return MeanFunctionKind::linearized_nn;
  if (s == "network_output") return MeanFunctionKind::network_output;
  throw ContractViolation("unknown mean function '" + std::string(s) + "'");
}

InferenceSpace parse_space(std::string_view s) {
  if (s == "function") return InferenceSpace::function;
  if (s == "parameter") return InferenceSpace::parameter;
  throw ContractViolation("unknown inference space '" + std::string(s) + "'");
}

Vector mean_function(MeanFunctionKind kind, const JacobianOperator& jac) {
  switch (kind) {
    case MeanFunctionKind::zero: return Vector::Zero(jac.output_count());
    case MeanFunctionKind::jacobian_mean: return jac.jvp(jac.network().theta());
    case MeanFunctionKind::linearized_nn:
      return jac.selected_outputs() + jac.jvp(jac.network().theta());
    case MeanFunctionKind::network_output: return jac.selected_outputs();
  }
  return Vector::Zero(jac.output_count());
}

namespace {

std::vector<Index> resolve_channels(const MlpNetwork& net, const std::vector<Index>& channels) {
  return channels.empty() ? net.architecture().mean_channels() : channels;
}

void check_targets(const TaskDataset& data, Index channels) {
  data.validate();
  if (data.targets.cols() != channels) {
    throw ContractViolation("GP fit: targets have " + std::to_string(data.targets.cols()) +
                            " columns, model has " + std::to_string(channels) +
                            " output channels");
  }
}

Vector probe_for(const Vector& rhs) {
  if (rhs.norm() > 0.0) return rhs;
  return Vector::Ones(rhs.size());
}

CgResult solve_or_throw(const SymmetricLinearOperator& op, const Vector& rhs,
                        const GpOptions& options) {
  CgResult r = cg_solve(op, rhs, options.cg);
  if (!r.converged && r.residual_norm > options.fit_residual_tol * rhs.norm()) {
    throw FitError("GP fit: conjugate gradients stopped after " +
                       std::to_string(r.iterations) + " iterations with residual " +
                       std::to_string(r.residual_norm),
                   r.residual_norm);
  }
  return r;
}

Matrix to_rows(const Vector& flat, Index cols) {
  const Index rows = cols == 0 ? 0 : flat.size() / cols;
  return Eigen::Map<const RowMatrix>(flat.data(), rows, cols);
}

}  // namespace

Matrix kernel_matrix(const MlpNetwork& net, const Matrix& x1, const Matrix& x2,
                     const std::vector<Index>& channels, std::size_t cap) {
  const auto ch = resolve_channels(net, channels);
  const Matrix j1 = JacobianOperator(net, x1, ch).dense(cap);
  const Matrix j2 = JacobianOperator(net, x2, ch).dense(cap);
  return j1.transpose() * j2;
}

InferenceSpace default_space(const MlpNetwork& net, Index num_outputs) {
  return num_outputs <= net.parameter_count() ? InferenceSpace::function
                                               : InferenceSpace::parameter;
}

NtkPosterior fit_function_space(const MlpNetwork& net, const TaskDataset& data,
                                MeanFunctionKind mean, const GpOptions& options) {
  const auto channels = resolve_channels(net, options.channels);
  check_targets(data, static_cast<Index>(channels.size()));
  const JacobianOperator jac(net, data.inputs, channels);
  const Index dim = jac.output_count();
  const double s2 = data.noise_variance;

  const Vector residual = data.flat_targets() - mean_function(mean, jac);
  const SymmetricLinearOperator gram{
      dim, [&jac](const Vector& c) -> Vector { return jac.jvp(jac.vjp(c)); }, s2};

  const CgResult solve = solve_or_throw(gram, residual, options);

  NtkPosterior post;
  post.space = InferenceSpace::function;
  post.mean_kind = mean;
  post.noise_variance = s2;
  post.network_fingerprint = net.fingerprint();
  post.channels = channels;
  post.mean_cache = jac.vjp(solve.x);
  post.cg_iterations = solve.iterations;
  post.cg_residual = solve.residual_norm;

  const Index rank = options.rank > 0 ? std::min(options.rank, dim) : std::min<Index>(dim, 256);
  LanczosOptions lopts;
  lopts.restart_on_breakdown = true;
  const LanczosFactors f = lanczos_factorize(gram, probe_for(residual), rank, lopts);
  const Matrix root = lowrank_inverse_root(f);  // dim x rank
  post.variance_root.resize(jac.parameter_count(), root.cols());
  for (Index k = 0; k < root.cols(); ++k) post.variance_root.col(k) = jac.vjp(root.col(k));
  post.lanczos_rank = f.rank;
  return post;
}

NtkPosterior fit_parameter_space(const MlpNetwork& net, const TaskDataset& data,
                                 MeanFunctionKind mean, const GpOptions& options) {
  const auto channels = resolve_channels(net, options.channels);
  check_targets(data, static_cast<Index>(channels.size()));
  const JacobianOperator jac(net, data.inputs, channels);
  const Index p = jac.parameter_count();
  const double s2 = data.noise_variance;

  SymmetricLinearOperator gram;
  if (options.parameter_gram) {
    if (options.parameter_gram->dimension != p) {
      throw ContractViolation("parameter_gram dimension does not match parameter count");
    }
    gram = *options.parameter_gram;
    gram.shift += s2;
  } else {
    gram = {p, [&jac](const Vector& v) -> Vector { return jac.vjp(jac.jvp(v)); }, s2};
  }

  const Vector residual = data.flat_targets() - mean_function(mean, jac);
  const Vector rhs = jac.vjp(residual);
  const CgResult solve = solve_or_throw(gram, rhs, options);

  NtkPosterior post;
  post.space = InferenceSpace::parameter;
  post.mean_kind = mean;
  post.noise_variance = s2;
  post.network_fingerprint = net.fingerprint();
  post.channels = channels;
  post.mean_cache = solve.x;
  post.cg_iterations = solve.iterations;
  post.cg_residual = solve.residual_norm;

  const Index rank = options.rank > 0 ? std::min(options.rank, p) : std::min<Index>(p, 256);
  LanczosOptions lopts;
  lopts.restart_on_breakdown = true;
  const LanczosFactors f = lanczos_factorize(gram, probe_for(rhs), rank, lopts);
  post.variance_root = lowrank_inverse_root(f);
  post.lanczos_rank = f.rank;
  return post;
}

NtkPosterior fit_posterior(const MlpNetwork& net, const TaskDataset& data,
                           MeanFunctionKind mean, std::optional<InferenceSpace> space,
                           const GpOptions& options) {
  const auto channels = resolve_channels(net, options.channels);
  const InferenceSpace chosen =
      space.value_or(default_space(net, data.size() * static_cast<Index>(channels.size())));
  return chosen == InferenceSpace::function ? fit_function_space(net, data, mean, options)
                                            : fit_parameter_space(net, data, mean, options);
}

Prediction predict(const NtkPosterior& posterior, const MlpNetwork& net, const Matrix& inputs) {
  if (net.fingerprint() != posterior.network_fingerprint) {
    throw ConsistencyError("predict: network does not match the fitted posterior (stale cache)");
  }
  if (posterior.mean_cache.size() != net.parameter_count() ||
      posterior.variance_root.rows() != net.parameter_count()) {
    throw ConsistencyError("predict: posterior cache shape does not match network");
  }
  const Index o = static_cast<Index>(posterior.channels.size());
  const Index m = inputs.rows();
  Prediction out;
  out.mean = Matrix::Zero(m, o);
  out.variance = Matrix::Zero(m, o);
  if (m == 0) return out;

  const JacobianOperator jac(net, inputs, posterior.channels);
  const Vector mean = jac.jvp(posterior.mean_cache) + mean_function(posterior.mean_kind, jac);
  out.mean = to_rows(mean, o);

  double min_raw = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < m; ++i) {
    const Matrix block = jac.datum_block(i);  // p x o
    const Matrix projected = posterior.variance_root.transpose() * block;
    for (Index c = 0; c < o; ++c) {
      double v = 0.0;
      if (posterior.space == InferenceSpace::function) {
        v = block.col(c).squaredNorm() - projected.col(c).squaredNorm();
      } else {
        v = posterior.noise_variance * projected.col(c).squaredNorm();
      }
      min_raw = std::min(min_raw, v);
      if (v < 0.0) {
        v = 0.0;
        ++out.clamped;
      }
      out.variance(i, c) = v;
    }
  }
  out.min_raw_variance = min_raw;
  return out;
}

Matrix prior_variance(const MlpNetwork& net, const Matrix& inputs,
                      const std::vector<Index>& channels) {
  const auto ch = resolve_channels(net, channels);
  const JacobianOperator jac(net, inputs, ch);
  return to_rows(jac.column_sq_norms(), static_cast<Index>(ch.size()));
}

double log_marginal_likelihood(const MlpNetwork& net, const TaskDataset& data,
                               MeanFunctionKind mean, const LmlOptions& options) {
  const auto channels = resolve_channels(net, options.channels);
  check_targets(data, static_cast<Index>(channels.size()));
  const JacobianOperator jac(net, data.inputs, channels);
  const Index n_out = jac.output_count();
  const Index p = jac.parameter_count();
  const double s2 = data.noise_variance;
  const Vector r = data.flat_targets() - mean_function(mean, jac);
  const double log_2pi = std::log(2.0 * std::numbers::pi);

  double quad = 0.0;
  double logdet = 0.0;
  const Index small = std::min(n_out, p);
  const auto dense_entries = static_cast<std::size_t>(n_out) * static_cast<std::size_t>(p);

  if (small <= options.dense_max_dim && dense_entries <= options.dense_cap) {
    const Matrix j = jac.dense(options.dense_cap);
    if (n_out <= p) {
      Matrix k = Matrix::Zero(n_out, n_out);
      k.selfadjointView<Eigen::Lower>().rankUpdate(j.transpose());
      k.diagonal().array() += s2;
      const Eigen::LLT<Matrix> llt(k.selfadjointView<Eigen::Lower>());
      if (llt.info() != Eigen::Success) throw NumericBreakdown("log_marginal_likelihood: Cholesky failed");
      quad = r.dot(llt.solve(r));
      logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    } else {
      // (J^T J + s I)^{-1} = (I - J^T (J J^T + s I)^{-1} J) / s
      Matrix g = Matrix::Zero(p, p);
      g.selfadjointView<Eigen::Lower>().rankUpdate(j);
      g.diagonal().array() += s2;
      const Eigen::LLT<Matrix> llt(g.selfadjointView<Eigen::Lower>());
      if (llt.info() != Eigen::Success) throw NumericBreakdown("log_marginal_likelihood: Cholesky failed");
      const Vector jr = j * r;
      quad = (r.squaredNorm() - jr.dot(llt.solve(jr))) / s2;
      logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum() +
               static_cast<double>(n_out - p) * std::log(s2);
    }
  } else {
    const SymmetricLinearOperator gram{
        n_out, [&jac](const Vector& c) -> Vector { return jac.jvp(jac.vjp(c)); }, s2};
    const CgResult solve = cg_solve(gram, r, options.cg);
    if (!solve.converged && solve.residual_norm > 1e-4 * r.norm()) {
      throw FitError("log_marginal_likelihood: CG did not converge", solve.residual_norm);
    }
    quad = r.dot(solve.x);
    logdet = lanczos_logdet(gram, options.slq_rank, options.slq_probes, options.seed);
  }
  return -0.5 * (quad + logdet + static_cast<double>(n_out) * log_2pi);
}

}  // namespace fntk
