#include "fntk/fisher.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

#include "fntk/errors.hpp"
#include "fntk/random.hpp"

namespace fntk {

LikelihoodKind LikelihoodKind::gaussian(double noise_variance) {
  LikelihoodKind k;
  k.family = Family::gaussian;
  k.noise_variance = noise_variance;
  k.validate();
  return k;
}

LikelihoodKind LikelihoodKind::categorical(Index num_classes) {
  LikelihoodKind k;
  k.family = Family::categorical;
  k.num_classes = num_classes;
  k.validate();
  return k;
}

void LikelihoodKind::validate() const {
  if (family == Family::gaussian) {
    if (!(noise_variance > 0.0) || !std::isfinite(noise_variance)) {
      throw ContractViolation("gaussian likelihood needs a positive finite noise variance");
    }
  } else if (num_classes < 2) {
    throw ContractViolation("categorical likelihood needs at least 2 classes");
  }
}

void FvpConfig::validate() const {
  if (!(epsilon >= 1e-8 && epsilon <= 1e-1)) {
    throw ContractViolation("finite-difference epsilon must lie in [1e-8, 1e-1], got " +
                            std::to_string(epsilon));
  }
}

Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

Matrix softmax(const Matrix& logits) { return log_softmax(logits).array().exp().matrix(); }

namespace {

void check_pair(const LikelihoodKind& like, const Matrix& a, const Matrix& b) {
  like.validate();
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractViolation("KL divergence: output shapes differ");
  }
  if (!a.allFinite() || !b.allFinite()) {
    throw ContractViolation("KL divergence: non-finite outputs");
  }
  if (like.family == LikelihoodKind::Family::categorical && a.cols() != like.num_classes) {
    throw ContractViolation("KL divergence: expected " + std::to_string(like.num_classes) +
                            " logits per datum, got " + std::to_string(a.cols()));
  }
}

Vector flatten(const Matrix& m) {
  Vector out(m.size());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index c = 0; c < m.cols(); ++c) out[i * m.cols() + c] = m(i, c);
  return out;
}

Matrix unflatten(const Vector& v, Index cols) {
  Matrix out(v.size() / cols, cols);
  for (Index i = 0; i < out.rows(); ++i)
    for (Index c = 0; c < cols; ++c) out(i, c) = v[i * cols + c];
  return out;
}

std::vector<Index> view_channels(const MlpNetwork& net, const LikelihoodKind& like) {
  like.validate();
  const auto& a = net.architecture();
  if (like.family == LikelihoodKind::Family::gaussian) return a.mean_channels();
  if (a.heteroscedastic || a.output_dim != like.num_classes) {
    throw ContractViolation("categorical likelihood needs a plain network with " +
                            std::to_string(like.num_classes) + " outputs");
  }
  std::vector<Index> ch(static_cast<std::size_t>(a.output_dim));
  for (Index c = 0; c < a.output_dim; ++c) ch[static_cast<std::size_t>(c)] = c;
  return ch;
}

// H applied per datum to an n x o block of tangents, evaluated at `outputs`.
Matrix apply_hessian(const LikelihoodKind& like, const Matrix& outputs, const Matrix& u) {
  if (like.family == LikelihoodKind::Family::gaussian) return u / like.noise_variance;
  const Matrix p = softmax(outputs);
  Matrix out(u.rows(), u.cols());
  for (Index i = 0; i < u.rows(); ++i) {
    const double pu = p.row(i).dot(u.row(i));
    out.row(i) = p.row(i).array() * (u.row(i).array() - pu);
  }
  return out;
}

void check_vector(const ModelView& model, const Vector& v, const char* what) {
  if (v.size() != model.parameter_count) {
    throw ContractViolation(std::string(what) + ": vector has length " +
                            std::to_string(v.size()) + ", model has " +
                            std::to_string(model.parameter_count) + " parameters");
  }
}

Vector finite_or_throw(Vector r, const char* what) {
  if (!r.allFinite()) throw NumericBreakdown(std::string(what) + ": non-finite result");
  return r;
}

Vector fd_from_base(const ModelView& model, const Matrix& base, const Vector& v,
                    const LikelihoodKind& like, double eps) {
  const Vector shifted = model.theta + eps * v;
  const Matrix out = model.outputs(shifted);
  if (!out.allFinite()) throw NumericBreakdown("fd_fvp: non-finite outputs at theta + eps v");
  const Matrix g = kl_gradient_second(like, base, out);
  return finite_or_throw(model.vjp(shifted, g) / (eps * static_cast<double>(model.num_data)),
                         "fd_fvp");
}

}  // namespace

double kl_divergence(const LikelihoodKind& like, const Matrix& outputs_p, const Matrix& outputs_q) {
  check_pair(like, outputs_p, outputs_q);
  if (like.family == LikelihoodKind::Family::gaussian) {
    return (outputs_p - outputs_q).squaredNorm() / (2.0 * like.noise_variance);
  }
  const Matrix lp = log_softmax(outputs_p), lq = log_softmax(outputs_q);
  const double kl = (lp.array().exp() * (lp - lq).array()).sum();
  return std::max(kl, 0.0);
}

Matrix kl_gradient_second(const LikelihoodKind& like, const Matrix& outputs_p,
                          const Matrix& outputs_q) {
  check_pair(like, outputs_p, outputs_q);
  if (like.family == LikelihoodKind::Family::gaussian) {
    return (outputs_q - outputs_p) / like.noise_variance;
  }
  return softmax(outputs_q) - softmax(outputs_p);
}

ModelView network_view(const MlpNetwork& net, const Matrix& inputs, const LikelihoodKind& like) {
  const auto ch = view_channels(net, like);
  if (inputs.rows() == 0) throw ContractViolation("Fisher products need at least one datum");
  ModelView m;
  m.parameter_count = net.parameter_count();
  m.num_data = inputs.rows();
  m.channels = static_cast<Index>(ch.size());
  m.theta = net.theta();
  const Index o = m.channels;
  m.outputs = [net, inputs, ch](const Vector& theta) {
    const Matrix full = net.with_parameters(theta).forward(inputs);
    Matrix out(full.rows(), static_cast<Index>(ch.size()));
    for (std::size_t c = 0; c < ch.size(); ++c) out.col(static_cast<Index>(c)) = full.col(ch[c]);
    return out;
  };
  m.vjp = [net, inputs, ch](const Vector& theta, const Matrix& cot) {
    return JacobianOperator(net.with_parameters(theta), inputs, ch).vjp(flatten(cot));
  };
  m.jvp = [net, inputs, ch, o](const Vector& theta, const Vector& tangent) {
    return unflatten(JacobianOperator(net.with_parameters(theta), inputs, ch).jvp(tangent), o);
  };
  return m;
}

Vector exact_fvp(const ModelView& model, const Vector& v, const LikelihoodKind& like) {
  check_vector(model, v, "exact_fvp");
  like.validate();
  const Matrix u = model.jvp(model.theta, v);
  const Matrix out = model.outputs(model.theta);
  const Matrix hu = apply_hessian(like, out, u);
  return finite_or_throw(model.vjp(model.theta, hu) / static_cast<double>(model.num_data),
                         "exact_fvp");
}

Vector exact_fvp(const MlpNetwork& net, const Matrix& inputs, const Vector& v,
                 const LikelihoodKind& like) {
  return exact_fvp(network_view(net, inputs, like), v, like);
}

Vector fd_fvp(const ModelView& model, const Vector& v, const LikelihoodKind& like,
              const FvpConfig& cfg) {
  cfg.validate();
  check_vector(model, v, "fd_fvp");
  return fd_from_base(model, model.outputs(model.theta), v, like, cfg.epsilon);
}

Vector fd_fvp(const MlpNetwork& net, const Matrix& inputs, const Vector& v,
              const LikelihoodKind& like, const FvpConfig& cfg) {
  return fd_fvp(network_view(net, inputs, like), v, like, cfg);
}

std::vector<FvpSweepRow> fvp_error_sweep(const ModelView& model, const LikelihoodKind& like,
                                         const std::vector<double>& epsilons,
                                         std::size_t num_probes, std::uint64_t seed) {
  if (epsilons.empty()) throw ContractViolation("fvp_error_sweep: empty epsilon grid");
  if (num_probes == 0) throw ContractViolation("fvp_error_sweep: need at least one probe");
  for (double e : epsilons) FvpConfig{e}.validate();

  Rng rng = Rng::stream(seed, "probes");
  std::vector<Vector> probes, exact;
  for (std::size_t k = 0; k < num_probes; ++k) {
    probes.push_back(rng.unit_vector(model.parameter_count));
    exact.push_back(exact_fvp(model, probes.back(), like));
  }
  const Matrix base = model.outputs(model.theta);

  std::vector<FvpSweepRow> rows;
  for (double eps : epsilons) {
    FvpSweepRow row{eps, 0.0, 0.0, num_probes, seed};
    for (std::size_t k = 0; k < num_probes; ++k) {
      const Vector fd = fd_from_base(model, base, probes[k], like, eps);
      const double denom = exact[k].norm();
      const double diff = (exact[k] - fd).norm();
      double err = 0.0;
      if (denom > 0.0) {
        err = diff / denom;
      } else if (diff > 0.0) {
        err = std::numeric_limits<double>::infinity();
      }
      row.mean_rel_err += err / static_cast<double>(num_probes);
      row.max_rel_err = std::max(row.max_rel_err, err);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<FvpSweepRow>& rows) {
  std::string out = "epsilon,mean_rel_err,max_rel_err,probes,seed\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%zu,%llu\n", r.epsilon, r.mean_rel_err,
                  r.max_rel_err, r.probes, static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

FisherOperator fisher_operator(const MlpNetwork& net, const Matrix& inputs,
                               const LikelihoodKind& like, const FisherOperatorOptions& options) {
  const auto ch = view_channels(net, like);
  if (inputs.rows() == 0) throw ContractViolation("fisher_operator: no data");
  const double n = static_cast<double>(inputs.rows());
  FisherOperator result;
  if (options.scale > 0.0) {
    result.scale = options.scale;
  } else {
    result.scale = like.family == LikelihoodKind::Family::gaussian ? n * like.noise_variance : n;
  }
  const double a = result.scale;
  const Index p = net.parameter_count();
  const Index o = static_cast<Index>(ch.size());

  if (options.backend == FisherBackend::exact) {
    auto jac = std::make_shared<JacobianOperator>(net, inputs, ch);
    const Matrix out = unflatten(jac->selected_outputs(), o);
    result.op.dimension = p;
    result.op.apply = [jac, out, like, a, n, o](const Vector& v) {
      const Matrix hu = apply_hessian(like, out, unflatten(jac->jvp(v), o));
      return Vector(jac->vjp(flatten(hu)) * (a / n));
    };
    return result;
  }

  options.fvp.validate();
  auto model = std::make_shared<ModelView>(network_view(net, inputs, like));
  const Matrix base = model->outputs(model->theta);
  const double eps = options.fvp.epsilon;
  result.op.dimension = p;
  result.op.apply = [model, base, like, eps, a](const Vector& v) {
    if (v.norm() == 0.0) return Vector(Vector::Zero(v.size()));
    return Vector(fd_from_base(*model, base, v, like, eps) * a);
  };

  Rng rng = Rng::stream(options.seed, "probes");
  const Vector u = rng.unit_vector(p), w = rng.unit_vector(p);
  const Vector fu = result.op(u), fw = result.op(w);
  const double denom = std::max(fu.norm(), fw.norm());
  result.symmetry_defect = denom > 0.0 ? std::abs(u.dot(fw) - w.dot(fu)) / denom : 0.0;
  result.symmetry_warning = result.symmetry_defect > 1e-6;
  return result;
}

}  // namespace fntk
