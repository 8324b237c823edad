#pragma once

// Fully connected networks with exact Jacobian products.
//
// Parameter layout is layer-major; within a layer the weight matrix
// (fan_out x fan_in, row-major) comes first, then the bias. Network outputs
// are flattened datum-major: index i * o + c is datum i, channel c.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fntk/linalg.hpp"

namespace fntk {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { tanh, relu, identity };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view s);

struct LayerShape {
  Index fan_in = 0;
  Index fan_out = 0;
  Index weight_offset = 0;
  Index bias_offset = 0;  // == weight_offset + fan_in * fan_out; unused without bias
};

struct MlpArchitecture {
  Index input_dim = 1;
  std::vector<Index> hidden_widths;
  Index output_dim = 1;
  Activation activation = Activation::tanh;
  // Doubles the output layer to carry (mean, raw scale) pairs per channel.
  bool heteroscedastic = false;
  bool use_bias = true;

  void validate() const;
  Index network_outputs() const { return heteroscedastic ? 2 * output_dim : output_dim; }
  Index parameter_count() const;
  std::vector<LayerShape> layers() const;
  // Channels carrying the predictive mean: all outputs, or the even slots of
  // a heteroscedastic net.
  std::vector<Index> mean_channels() const;
  std::uint64_t fingerprint() const;

  bool operator==(const MlpArchitecture&) const = default;
};

// Flattened network weights bound to an architecture.
class ParameterVector {
 public:
  ParameterVector() = default;
  ParameterVector(const MlpArchitecture& arch, Vector values);

  const Vector& values() const noexcept { return values_; }
  Index size() const noexcept { return values_.size(); }
  std::uint64_t fingerprint() const;

 private:
  Vector values_;
};

class MlpNetwork {
 public:
  MlpNetwork(MlpArchitecture arch, ParameterVector params);

  // Weights ~ Uniform(+-1/sqrt(fan_in)), biases 0.
  static MlpNetwork initialize(const MlpArchitecture& arch, std::uint64_t seed);

  const MlpArchitecture& architecture() const noexcept { return arch_; }
  const ParameterVector& parameters() const noexcept { return params_; }
  const Vector& theta() const noexcept { return params_.values(); }
  Index parameter_count() const noexcept { return params_.size(); }

  MlpNetwork with_parameters(Vector values) const;

  // n x network_outputs().
  Matrix forward(const Matrix& inputs) const;
  // Hidden-layer activations of the last hidden layer (n x width).
  Matrix features(const Matrix& inputs) const;

  // Combined architecture + parameter fingerprint.
  std::uint64_t fingerprint() const;

 private:
  MlpArchitecture arch_;
  ParameterVector params_;
};

struct TaskDataset {
  Matrix inputs;    // n x d
  Matrix targets;   // n x o (class labels in one column for classification)
  double noise_variance = 1.0;

  Index size() const noexcept { return inputs.rows(); }
  void validate(bool allow_empty = false) const;
  TaskDataset subset(const std::vector<Index>& rows) const;
  // Targets flattened datum-major.
  Vector flat_targets() const;
};

inline constexpr std::size_t kDefaultDenseCap = 100'000'000;

// J_theta(X): the p x (n * o) Jacobian of the selected output channels,
// represented implicitly. Construction runs one forward pass and caches
// the activations; every product afterwards is pure.
class JacobianOperator {
 public:
  JacobianOperator(const MlpNetwork& net, const Matrix& inputs,
                   std::vector<Index> channels = {});

  const MlpNetwork& network() const noexcept { return net_; }
  Index parameter_count() const noexcept { return net_.parameter_count(); }
  Index num_data() const noexcept { return inputs_rows_; }
  Index channels_per_datum() const noexcept { return static_cast<Index>(channels_.size()); }
  Index output_count() const noexcept { return num_data() * channels_per_datum(); }
  const std::vector<Index>& channels() const noexcept { return channels_; }

  // Network outputs on the bound inputs, all channels (n x network_outputs).
  const Matrix& outputs() const noexcept { return activations_.back(); }
  // Selected channels flattened datum-major.
  Vector selected_outputs() const;

  // J u: gradient of <f(X), u> with respect to theta.
  Vector vjp(const Vector& u) const;
  // J^T v: exact directional derivative of f(X) along v.
  Vector jvp(const Vector& v) const;
  // p x o block of Jacobian columns for datum i.
  Matrix datum_block(Index i) const;
  // Full p x (n * o) matrix; refuses to exceed `cap` entries.
  Matrix dense(std::size_t cap = kDefaultDenseCap) const;
  // Squared column norms, diag(J^T J).
  Vector column_sq_norms() const;

 private:
  MlpNetwork net_;
  std::vector<LayerShape> layers_;
  std::vector<Index> channels_;
  Index inputs_rows_ = 0;
  std::vector<Matrix> pre_;          // pre-activations per layer
  std::vector<Matrix> activations_;  // activations_[0] = X, back() = outputs
};

Matrix dense_jacobian(const JacobianOperator& jac, std::size_t cap = kDefaultDenseCap);

// Training ----------------------------------------------------------------

enum class OptimizerKind { sgd_momentum, adam };
enum class LossKind { mse, heteroscedastic_gaussian, categorical_ce };

std::string_view to_string(OptimizerKind k);
std::string_view to_string(LossKind k);
OptimizerKind parse_optimizer(std::string_view s);
LossKind parse_loss(std::string_view s);

struct OptimizerConfig {
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  LossKind loss = LossKind::mse;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  // Multiply the learning rate by lr_decay_factor every lr_decay_every epochs
  // (0 disables).
  std::size_t lr_decay_every = 0;
  double lr_decay_factor = 0.1;
  // Only the final layer's weights and bias move.
  bool last_layer_only = false;
  std::uint64_t seed = 0;
};

struct TrainResult {
  MlpNetwork network;
  std::vector<double> loss_trace;  // mean training loss per epoch
};

TrainResult train(const MlpNetwork& net, const TaskDataset& data, const OptimizerConfig& cfg);

// Mean loss of the network on a dataset, and its gradient with respect to
// the network outputs (n x network_outputs), scaled for the mean.
double loss_value(LossKind loss, const Matrix& outputs, const Matrix& targets,
                  Matrix* grad_outputs = nullptr);

double mean_squared_error(const Matrix& predictions, const Matrix& targets);

// 1e-5 + softplus(raw): the heteroscedastic head's standard deviation.
double heteroscedastic_scale(double raw);

// Checkpoints -------------------------------------------------------------

inline constexpr int kCheckpointLayoutVersion = 1;

std::string checkpoint_to_json(const MlpNetwork& net, const std::string& provenance_json = "");
MlpNetwork checkpoint_from_json(const std::string& text);
void save_checkpoint(const MlpNetwork& net, const std::string& path,
                     const std::string& provenance_json = "");
MlpNetwork load_checkpoint(const std::string& path);

}  // namespace fntk
