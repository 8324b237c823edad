#include "fntk/net.hpp"

#include <cmath>
#include <string>

#include "fntk/errors.hpp"
#include "fntk/hash.hpp"
#include "fntk/random.hpp"

namespace fntk {

namespace {

void apply_activation(Activation act, Matrix& z) {
  switch (act) {
    case Activation::tanh: z = z.array().tanh(); break;
    case Activation::relu: z = z.array().max(0.0); break;
    case Activation::identity: break;
  }
}

// Derivative in terms of pre-activation z and activation a. ReLU'(0) = 0.
double activation_derivative(Activation act, double z, double a) {
  switch (act) {
    case Activation::tanh: return 1.0 - a * a;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

Matrix activation_derivative(Activation act, const Matrix& z, const Matrix& a) {
  switch (act) {
    case Activation::tanh: return (1.0 - a.array().square()).matrix();
    case Activation::relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::identity: return Matrix::Ones(z.rows(), z.cols());
  }
  return Matrix::Ones(z.rows(), z.cols());
}

void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw ContractViolation(std::string(what) + ": non-finite entries");
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ContractViolation("unknown activation '" + std::string(s) + "'");
}

// Architecture ------------------------------------------------------------

void MlpArchitecture::validate() const {
  if (input_dim < 1 || output_dim < 1) {
    throw ContractViolation("architecture: input and output dimensions must be positive");
  }
  for (Index w : hidden_widths) {
    if (w < 1) throw ContractViolation("architecture: hidden widths must be positive");
  }
}

std::vector<LayerShape> MlpArchitecture::layers() const {
  std::vector<LayerShape> out;
  Index fan_in = input_dim;
  Index offset = 0;
  auto push = [&](Index fan_out) {
    LayerShape l;
    l.fan_in = fan_in;
    l.fan_out = fan_out;
    l.weight_offset = offset;
    l.bias_offset = offset + fan_in * fan_out;
    offset = l.bias_offset + (use_bias ? fan_out : 0);
    out.push_back(l);
    fan_in = fan_out;
  };
  for (Index w : hidden_widths) push(w);
  push(network_outputs());
  return out;
}

Index MlpArchitecture::parameter_count() const {
  Index p = 0;
  Index fan_in = input_dim;
  auto add = [&](Index fan_out) {
    p += (fan_in + (use_bias ? 1 : 0)) * fan_out;
    fan_in = fan_out;
  };
  for (Index w : hidden_widths) add(w);
  add(network_outputs());
  return p;
}

std::vector<Index> MlpArchitecture::mean_channels() const {
  std::vector<Index> ch;
  for (Index c = 0; c < output_dim; ++c) ch.push_back(heteroscedastic ? 2 * c : c);
  return ch;
}

std::uint64_t MlpArchitecture::fingerprint() const {
  Fnv1a h;
  h.update(static_cast<std::uint64_t>(input_dim));
  h.update(static_cast<std::uint64_t>(hidden_widths.size()));
  for (Index w : hidden_widths) h.update(static_cast<std::uint64_t>(w));
  h.update(static_cast<std::uint64_t>(output_dim));
  h.update(to_string(activation));
  h.update(static_cast<std::uint64_t>(heteroscedastic));
  h.update(static_cast<std::uint64_t>(use_bias));
  return h.digest();
}

// Parameters --------------------------------------------------------------

ParameterVector::ParameterVector(const MlpArchitecture& arch, Vector values)
    : values_(std::move(values)) {
  if (values_.size() != arch.parameter_count()) {
    throw ContractViolation("parameter vector has length " + std::to_string(values_.size()) +
                            ", architecture requires " +
                            std::to_string(arch.parameter_count()));
  }
  require_finite(values_, "parameter vector");
}

std::uint64_t ParameterVector::fingerprint() const {
  Fnv1a h;
  h.update(std::span<const double>(values_.data(), static_cast<std::size_t>(values_.size())));
  return h.digest();
}

// Network -----------------------------------------------------------------

MlpNetwork::MlpNetwork(MlpArchitecture arch, ParameterVector params)
    : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  if (params_.size() != arch_.parameter_count()) {
    throw ContractViolation("network parameters do not match architecture");
  }
}

MlpNetwork MlpNetwork::initialize(const MlpArchitecture& arch, std::uint64_t seed) {
  arch.validate();
  Vector theta = Vector::Zero(arch.parameter_count());
  Rng rng(seed);
  for (const LayerShape& l : arch.layers()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in));
    for (Index k = 0; k < l.fan_in * l.fan_out; ++k) {
      theta[l.weight_offset + k] = rng.uniform(-bound, bound);
    }
  }
  return MlpNetwork(arch, ParameterVector(arch, std::move(theta)));
}

MlpNetwork MlpNetwork::with_parameters(Vector values) const {
  return MlpNetwork(arch_, ParameterVector(arch_, std::move(values)));
}

namespace {

// Runs the forward pass, optionally recording every layer.
Matrix forward_impl(const MlpArchitecture& arch, const Vector& theta, const Matrix& inputs,
                    std::vector<Matrix>* pre, std::vector<Matrix>* acts,
                    Index stop_before_layer = -1) {
  if (inputs.cols() != arch.input_dim) {
    throw ContractViolation("forward: inputs have " + std::to_string(inputs.cols()) +
                            " columns, network expects " + std::to_string(arch.input_dim));
  }
  const auto layers = arch.layers();
  Matrix a = inputs;
  if (acts) acts->push_back(a);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (static_cast<Index>(l) == stop_before_layer) return a;
    const LayerShape& s = layers[l];
    Eigen::Map<const RowMatrix> w(theta.data() + s.weight_offset, s.fan_out, s.fan_in);
    Matrix z = a * w.transpose();
    if (arch.use_bias) {
      Eigen::Map<const Vector> b(theta.data() + s.bias_offset, s.fan_out);
      z.rowwise() += b.transpose();
    }
    if (pre) pre->push_back(z);
    if (l + 1 < layers.size()) apply_activation(arch.activation, z);
    a = std::move(z);
    if (acts) acts->push_back(a);
  }
  return a;
}

}  // namespace

Matrix MlpNetwork::forward(const Matrix& inputs) const {
  return forward_impl(arch_, theta(), inputs, nullptr, nullptr);
}

Matrix MlpNetwork::features(const Matrix& inputs) const {
  return forward_impl(arch_, theta(), inputs, nullptr, nullptr,
                      static_cast<Index>(arch_.hidden_widths.size()));
}

std::uint64_t MlpNetwork::fingerprint() const {
  Fnv1a h;
  h.update(arch_.fingerprint());
  h.update(params_.fingerprint());
  return h.digest();
}

// Dataset -----------------------------------------------------------------

void TaskDataset::validate(bool allow_empty) const {
  if (!allow_empty && inputs.rows() < 1) throw ContractViolation("dataset: need at least one datum");
  if (inputs.rows() != targets.rows()) {
    throw ContractViolation("dataset: inputs and targets have different row counts");
  }
  if (inputs.hasNaN() || targets.hasNaN()) throw ContractViolation("dataset: NaN entries");
  if (!(noise_variance > 0.0)) throw ContractViolation("dataset: noise variance must be > 0");
}

TaskDataset TaskDataset::subset(const std::vector<Index>& rows) const {
  TaskDataset out;
  out.inputs.resize(static_cast<Index>(rows.size()), inputs.cols());
  out.targets.resize(static_cast<Index>(rows.size()), targets.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.inputs.row(static_cast<Index>(k)) = inputs.row(rows[k]);
    out.targets.row(static_cast<Index>(k)) = targets.row(rows[k]);
  }
  out.noise_variance = noise_variance;
  return out;
}

Vector TaskDataset::flat_targets() const {
  const RowMatrix rm = targets;
  return Eigen::Map<const Vector>(rm.data(), rm.size());
}

// Jacobian operator -------------------------------------------------------

JacobianOperator::JacobianOperator(const MlpNetwork& net, const Matrix& inputs,
                                   std::vector<Index> channels)
    : net_(net), layers_(net.architecture().layers()), channels_(std::move(channels)) {
  const Index outs = net_.architecture().network_outputs();
  if (channels_.empty()) {
    for (Index c = 0; c < outs; ++c) channels_.push_back(c);
  }
  for (Index c : channels_) {
    if (c < 0 || c >= outs) throw ContractViolation("Jacobian: channel index out of range");
  }
  inputs_rows_ = inputs.rows();
  forward_impl(net_.architecture(), net_.theta(), inputs, &pre_, &activations_);
}

Vector JacobianOperator::selected_outputs() const {
  const Index o = channels_per_datum();
  Vector out(num_data() * o);
  for (Index i = 0; i < num_data(); ++i)
    for (Index k = 0; k < o; ++k) out[i * o + k] = outputs()(i, channels_[k]);
  return out;
}

Vector JacobianOperator::vjp(const Vector& u) const {
  if (u.size() != output_count()) {
    throw ContractViolation("vjp: cotangent has length " + std::to_string(u.size()) +
                            ", expected " + std::to_string(output_count()));
  }
  require_finite(u, "vjp");
  const MlpArchitecture& arch = net_.architecture();
  const Vector& theta = net_.theta();
  const Index n = num_data();
  const Index o = channels_per_datum();

  Matrix g = Matrix::Zero(n, arch.network_outputs());
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < o; ++k) g(i, channels_[k]) += u[i * o + k];

  Vector grad = Vector::Zero(net_.parameter_count());
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const LayerShape& s = layers_[l];
    const Matrix& a_prev = activations_[l];
    Eigen::Map<RowMatrix> gw(grad.data() + s.weight_offset, s.fan_out, s.fan_in);
    gw.noalias() = g.transpose() * a_prev;
    if (arch.use_bias) {
      Eigen::Map<Vector>(grad.data() + s.bias_offset, s.fan_out) = g.colwise().sum().transpose();
    }
    if (l > 0) {
      Eigen::Map<const RowMatrix> w(theta.data() + s.weight_offset, s.fan_out, s.fan_in);
      Matrix back = g * w;
      g = back.cwiseProduct(activation_derivative(arch.activation, pre_[l - 1], a_prev));
    }
  }
  return grad;
}

Vector JacobianOperator::jvp(const Vector& v) const {
  if (v.size() != parameter_count()) {
    throw ContractViolation("jvp: tangent has length " + std::to_string(v.size()) +
                            ", expected " + std::to_string(parameter_count()));
  }
  require_finite(v, "jvp");
  const MlpArchitecture& arch = net_.architecture();
  const Vector& theta = net_.theta();
  const Index n = num_data();

  Matrix da = Matrix::Zero(n, arch.input_dim);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerShape& s = layers_[l];
    Eigen::Map<const RowMatrix> w(theta.data() + s.weight_offset, s.fan_out, s.fan_in);
    Eigen::Map<const RowMatrix> dw(v.data() + s.weight_offset, s.fan_out, s.fan_in);
    Matrix dz = activations_[l] * dw.transpose();
    if (l > 0) dz.noalias() += da * w.transpose();
    if (arch.use_bias) {
      Eigen::Map<const Vector> db(v.data() + s.bias_offset, s.fan_out);
      dz.rowwise() += db.transpose();
    }
    if (l + 1 < layers_.size()) {
      da = dz.cwiseProduct(activation_derivative(arch.activation, pre_[l], activations_[l + 1]));
    } else {
      da = std::move(dz);
    }
  }
  const Index o = channels_per_datum();
  Vector out(n * o);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < o; ++k) out[i * o + k] = da(i, channels_[k]);
  return out;
}

Matrix JacobianOperator::datum_block(Index i) const {
  if (i < 0 || i >= num_data()) throw ContractViolation("datum_block: index out of range");
  const MlpArchitecture& arch = net_.architecture();
  const Vector& theta = net_.theta();
  const Index o = channels_per_datum();
  Matrix block = Matrix::Zero(net_.parameter_count(), o);

  for (Index k = 0; k < o; ++k) {
    Vector g = Vector::Zero(arch.network_outputs());
    g[channels_[k]] = 1.0;
    auto col = block.col(k);
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const LayerShape& s = layers_[l];
      const auto a_prev = activations_[l].row(i);
      for (Index r = 0; r < s.fan_out; ++r) {
        if (g[r] == 0.0) continue;
        col.segment(s.weight_offset + r * s.fan_in, s.fan_in) = g[r] * a_prev.transpose();
      }
      if (arch.use_bias) col.segment(s.bias_offset, s.fan_out) = g;
      if (l > 0) {
        Eigen::Map<const RowMatrix> w(theta.data() + s.weight_offset, s.fan_out, s.fan_in);
        Vector back = w.transpose() * g;
        for (Index r = 0; r < back.size(); ++r) {
          back[r] *= activation_derivative(arch.activation, pre_[l - 1](i, r),
                                           activations_[l](i, r));
        }
        g = std::move(back);
      }
    }
  }
  return block;
}

Matrix JacobianOperator::dense(std::size_t cap) const {
  const auto entries = static_cast<std::size_t>(parameter_count()) *
                       static_cast<std::size_t>(output_count());
  if (entries > cap) {
    throw ResourceError("dense Jacobian needs " + std::to_string(entries) +
                        " entries, above the cap of " + std::to_string(cap) +
                        "; use the matrix-free (jvp/vjp) path");
  }
  const Index o = channels_per_datum();
  Matrix j(parameter_count(), output_count());
  for (Index i = 0; i < num_data(); ++i) j.middleCols(i * o, o) = datum_block(i);
  return j;
}

Vector JacobianOperator::column_sq_norms() const {
  const Index o = channels_per_datum();
  Vector out(output_count());
  for (Index i = 0; i < num_data(); ++i) {
    out.segment(i * o, o) = datum_block(i).colwise().squaredNorm().transpose();
  }
  return out;
}

Matrix dense_jacobian(const JacobianOperator& jac, std::size_t cap) { return jac.dense(cap); }

}  // namespace fntk
