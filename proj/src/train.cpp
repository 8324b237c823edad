#include <cmath>
#include <numbers>
#include <numeric>

#include "fntk/errors.hpp"
#include "fntk/net.hpp"
#include "fntk/random.hpp"

namespace fntk {

std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd-momentum";
}

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::heteroscedastic_gaussian: return "heteroscedastic-gaussian";
    case LossKind::categorical_ce: return "categorical-ce";
  }
  return "?";
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd-momentum") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw ContractViolation("unknown optimizer '" + std::string(s) + "'");
}

LossKind parse_loss(std::string_view s) {
  if (s == "mse") return LossKind::mse;
  if (s == "heteroscedastic-gaussian") return LossKind::heteroscedastic_gaussian;
  if (s == "categorical-ce") return LossKind::categorical_ce;
  throw ContractViolation("unknown loss '" + std::string(s) + "'");
}

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double heteroscedastic_scale(double raw) { return 1e-5 + softplus(raw); }

double mean_squared_error(const Matrix& predictions, const Matrix& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw ContractViolation("mean_squared_error: shape mismatch");
  }
  if (predictions.size() == 0) return 0.0;
  return (predictions - targets).squaredNorm() / static_cast<double>(predictions.size());
}

double loss_value(LossKind loss, const Matrix& outputs, const Matrix& targets,
                  Matrix* grad_outputs) {
  const Index n = outputs.rows();
  if (targets.rows() != n) throw ContractViolation("loss: row count mismatch");
  if (n == 0) {
    if (grad_outputs) *grad_outputs = Matrix::Zero(0, outputs.cols());
    return 0.0;
  }
  if (grad_outputs) *grad_outputs = Matrix::Zero(n, outputs.cols());

  switch (loss) {
    case LossKind::mse: {
      if (targets.cols() != outputs.cols()) throw ContractViolation("mse: channel mismatch");
      const Matrix diff = outputs - targets;
      const double count = static_cast<double>(diff.size());
      if (grad_outputs) *grad_outputs = (2.0 / count) * diff;
      return diff.squaredNorm() / count;
    }
    case LossKind::heteroscedastic_gaussian: {
      const Index o = targets.cols();
      if (outputs.cols() != 2 * o) {
        throw ContractViolation("heteroscedastic loss needs (mean, scale) output pairs");
      }
      const double count = static_cast<double>(n * o);
      const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
      double total = 0.0;
      for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < o; ++c) {
          const double mu = outputs(i, 2 * c);
          const double raw = outputs(i, 2 * c + 1);
          const double s = heteroscedastic_scale(raw);
          const double r = targets(i, c) - mu;
          total += std::log(s) + r * r / (2.0 * s * s) + half_log_2pi;
          if (grad_outputs) {
            (*grad_outputs)(i, 2 * c) = -r / (s * s) / count;
            const double ds = 1.0 / s - r * r / (s * s * s);
            (*grad_outputs)(i, 2 * c + 1) = ds * sigmoid(raw) / count;
          }
        }
      }
      return total / count;
    }
    case LossKind::categorical_ce: {
      if (targets.cols() != 1) throw ContractViolation("categorical loss expects label column");
      const Index classes = outputs.cols();
      double total = 0.0;
      for (Index i = 0; i < n; ++i) {
        const double label_d = targets(i, 0);
        const auto label = static_cast<Index>(label_d);
        if (label < 0 || label >= classes || static_cast<double>(label) != label_d) {
          throw ContractViolation("categorical loss: invalid class label");
        }
        const auto row = outputs.row(i);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(label);
        if (grad_outputs) {
          (*grad_outputs).row(i) = (row.array() - lse).exp() / static_cast<double>(n);
          (*grad_outputs)(i, label) -= 1.0 / static_cast<double>(n);
        }
      }
      return total / static_cast<double>(n);
    }
  }
  return 0.0;
}

TrainResult train(const MlpNetwork& net, const TaskDataset& data, const OptimizerConfig& cfg) {
  data.validate();
  if (cfg.batch_size == 0) throw ContractViolation("train: batch size must be positive");
  if (!(cfg.learning_rate >= 0.0)) throw ContractViolation("train: learning rate must be >= 0");

  const MlpArchitecture& arch = net.architecture();
  const Index p = net.parameter_count();
  Vector theta = net.theta();

  // Update mask for last-layer-only training.
  Index first_trainable = 0;
  if (cfg.last_layer_only) first_trainable = arch.layers().back().weight_offset;

  Vector velocity = Vector::Zero(p);
  Vector adam_m = Vector::Zero(p);
  Vector adam_v = Vector::Zero(p);
  std::size_t step = 0;

  Rng rng = Rng::stream(cfg.seed, "training");
  const auto n = static_cast<std::size_t>(data.size());
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});

  TrainResult result{net, {}};
  result.loss_trace.reserve(cfg.epochs);
  double lr = cfg.learning_rate;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_decay_every > 0 && epoch > 0 && epoch % cfg.lr_decay_every == 0) {
      lr *= cfg.lr_decay_factor;
    }
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
      const TaskDataset batch = data.subset(rows);
      const MlpNetwork current(arch, ParameterVector(arch, theta));
      const JacobianOperator jac(current, batch.inputs);
      Matrix grad_out;
      const double batch_loss = loss_value(cfg.loss, jac.outputs(), batch.targets, &grad_out);
      if (!std::isfinite(batch_loss) || !grad_out.allFinite()) {
        throw TrainingDivergence("training diverged (non-finite loss) at epoch " +
                                     std::to_string(epoch),
                                 epoch);
      }
      epoch_loss += batch_loss * static_cast<double>(stop - start);
      const RowMatrix g_rm = grad_out;
      const Vector grad = jac.vjp(Eigen::Map<const Vector>(g_rm.data(), g_rm.size()));
      ++step;

      if (cfg.optimizer == OptimizerKind::sgd_momentum) {
        for (Index k = first_trainable; k < p; ++k) {
          velocity[k] = cfg.momentum * velocity[k] + grad[k];
          theta[k] -= lr * velocity[k];
        }
      } else {
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (Index k = first_trainable; k < p; ++k) {
          adam_m[k] = cfg.beta1 * adam_m[k] + (1.0 - cfg.beta1) * grad[k];
          adam_v[k] = cfg.beta2 * adam_v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
          const double mhat = adam_m[k] / bc1;
          const double vhat = adam_v[k] / bc2;
          theta[k] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
        }
      }
    }
    epoch_loss /= static_cast<double>(n);
    if (!theta.allFinite() || !std::isfinite(epoch_loss)) {
      throw TrainingDivergence("training diverged at epoch " + std::to_string(epoch), epoch);
    }
    result.loss_trace.push_back(epoch_loss);
  }
  result.network = net.with_parameters(std::move(theta));
  return result;
}

}  // namespace fntk
