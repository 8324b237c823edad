#include "fntk/adapt.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "fntk/errors.hpp"
#include "fntk/random.hpp"

namespace fntk {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Matrix mean_outputs(const MlpNetwork& net, const Matrix& inputs) {
  const Matrix out = net.forward(inputs);
  const auto ch = net.architecture().mean_channels();
  Matrix m(out.rows(), static_cast<Index>(ch.size()));
  for (std::size_t c = 0; c < ch.size(); ++c) m.col(static_cast<Index>(c)) = out.col(ch[c]);
  return m;
}

// Predicted variance of a heteroscedastic net (scale squared per channel).
Matrix hetero_variance(const MlpNetwork& net, const Matrix& inputs) {
  const Matrix out = net.forward(inputs);
  const Index o = net.architecture().output_dim;
  Matrix v(out.rows(), o);
  for (Index i = 0; i < out.rows(); ++i)
    for (Index c = 0; c < o; ++c) {
      const double s = heteroscedastic_scale(out(i, 2 * c + 1));
      v(i, c) = s * s;
    }
  return v;
}

Metrics network_metrics(const MlpNetwork& net, const TaskDataset& eval, double noise_variance) {
  Metrics m;
  if (eval.size() == 0) return m;
  const Matrix mean = mean_outputs(net, eval.inputs);
  m.mse = mean_squared_error(mean, eval.targets);
  const Matrix var = net.architecture().heteroscedastic
                         ? hetero_variance(net, eval.inputs)
                         : Matrix::Constant(mean.rows(), mean.cols(), noise_variance);
  m.nll = gaussian_nll(mean, var, eval.targets);
  return m;
}

}  // namespace

void SinusoidTaskSpec::validate() const {
  if (!(amplitude_lo > 0.0 && amplitude_lo <= amplitude_hi)) {
    throw ContractViolation("sinusoid: amplitude range must be positive and ordered");
  }
  if (!(frequency_lo <= frequency_hi && phase_lo <= phase_hi && x_lo < x_hi)) {
    throw ContractViolation("sinusoid: ranges must be ordered");
  }
  if (!(noise_scale >= 0.0)) throw ContractViolation("sinusoid: noise scale must be >= 0");
  if (points < 0) throw ContractViolation("sinusoid: point count must be >= 0");
}

SinusoidTask make_sinusoid_task(const SinusoidTaskSpec& spec, double amplitude, double frequency,
                                double phase, Rng& rng) {
  SinusoidTask t{amplitude, frequency, phase, {}};
  t.data.inputs.resize(spec.points, 1);
  t.data.targets.resize(spec.points, 1);
  const double noise_sd = spec.noise_free ? 0.0 : std::sqrt(spec.noise_scale * amplitude);
  for (Index i = 0; i < spec.points; ++i) {
    const double x = rng.uniform(spec.x_lo, spec.x_hi);
    t.data.inputs(i, 0) = x;
    t.data.targets(i, 0) = amplitude * std::sin(frequency * x + phase) + noise_sd * rng.normal();
  }
  t.data.noise_variance = spec.noise_free ? 1e-8 : spec.noise_scale * amplitude;
  return t;
}

std::vector<SinusoidTask> sample_sinusoid_tasks(const SinusoidTaskSpec& spec,
                                                std::size_t num_tasks) {
  spec.validate();
  if (num_tasks == 0) throw ContractViolation("sample_sinusoid_tasks: need at least one task");
  Rng rng = Rng::stream(spec.seed, "tasks");
  std::vector<SinusoidTask> tasks;
  tasks.reserve(num_tasks);
  for (std::size_t k = 0; k < num_tasks; ++k) {
    const double a = rng.uniform(spec.amplitude_lo, spec.amplitude_hi);
    const double w = rng.uniform(spec.frequency_lo, spec.frequency_hi);
    const double b = rng.uniform(spec.phase_lo, spec.phase_hi);
    tasks.push_back(make_sinusoid_task(spec, a, w, b, rng));
  }
  return tasks;
}

AdaptTask split_task(const TaskDataset& data, Index context_size, Rng& rng) {
  if (context_size < 0 || context_size > data.size()) {
    throw ContractViolation("split_task: context size " + std::to_string(context_size) +
                            " outside 0.." + std::to_string(data.size()));
  }
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order.begin(), order.end());
  const auto cut = order.begin() + context_size;
  AdaptTask t{data.subset({order.begin(), cut}), data.subset({cut, order.end()})};
  t.context.noise_variance = t.eval.noise_variance = data.noise_variance;
  return t;
}

double gaussian_nll(const Matrix& mean, const Matrix& variance, const Matrix& targets) {
  if (mean.rows() != targets.rows() || mean.cols() != targets.cols() ||
      variance.rows() != mean.rows() || variance.cols() != mean.cols()) {
    throw ContractViolation("gaussian_nll: shape mismatch");
  }
  if (mean.size() == 0) return 0.0;
  double total = 0.0;
  for (Index i = 0; i < mean.rows(); ++i)
    for (Index c = 0; c < mean.cols(); ++c) {
      const double v = variance(i, c);
      const double r = targets(i, c) - mean(i, c);
      total += 0.5 * (std::log(2.0 * std::numbers::pi * v) + r * r / v);
    }
  return total / static_cast<double>(mean.size());
}

std::string_view to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::ok: return "ok";
    case TaskStatus::no_eval: return "no-eval";
    case TaskStatus::failed: return "failed";
  }
  return "?";
}

AdaptationRun run_adaptation(const MlpNetwork& source, const std::vector<AdaptTask>& tasks,
                             const AdaptConfig& cfg) {
  AdaptationRun run;
  run.source_fingerprint = source.fingerprint();
  Index id = 0;
  for (const auto& task : tasks) {
    TaskOutcome out;
    out.task_id = id++;
    out.context_size = task.context.size();
    if (task.context.size() == 0) {
      throw ContractViolation("run_adaptation: task " + std::to_string(out.task_id) +
                              " has an empty context set");
    }
    const auto start = Clock::now();
    try {
      TaskDataset ctx = task.context;
      if (cfg.noise_variance) ctx.noise_variance = *cfg.noise_variance;
      NtkPosterior post = fit_posterior(source, ctx, cfg.mean, cfg.space, cfg.gp);
      if (task.eval.size() == 0) {
        out.status = TaskStatus::no_eval;
      } else {
        const Prediction pred = predict(post, source, task.eval.inputs);
        out.metrics.mse = mean_squared_error(pred.mean, task.eval.targets);
        const Matrix var = pred.variance.array() + ctx.noise_variance;
        out.metrics.nll = gaussian_nll(pred.mean, var, task.eval.targets);
      }
      if (cfg.keep_posteriors) out.posterior = std::move(post);
    } catch (const ContractViolation&) {
      throw;
    } catch (const Error& e) {
      out.status = TaskStatus::failed;
      out.message = e.what();
    }
    out.metrics.wall_ms = elapsed_ms(start);
    run.tasks.push_back(std::move(out));
  }
  return run;
}

Metrics baseline_no_retrain(const MlpNetwork& source, const TaskDataset& eval,
                            double noise_variance) {
  const auto start = Clock::now();
  Metrics m = network_metrics(source, eval, noise_variance);
  m.wall_ms = elapsed_ms(start);
  return m;
}

LastLayerResult baseline_last_layer(const MlpNetwork& source, const TaskDataset& context,
                                    const TaskDataset& eval, OptimizerConfig cfg,
                                    double noise_variance) {
  const auto start = Clock::now();
  cfg.last_layer_only = true;
  MlpNetwork net = source;
  if (context.size() > 0) net = train(source, context, cfg).network;
  LastLayerResult r{net, network_metrics(net, eval, noise_variance)};
  r.metrics.wall_ms = elapsed_ms(start);
  return r;
}

std::string results_to_csv(const std::vector<ResultRow>& rows, bool timings) {
  std::string out = "task_id,method,context_size,mse,nll,wall_ms\n";
  char buf[64];
  auto num = [&](const std::optional<double>& v) {
    if (!v) return std::string();
    std::snprintf(buf, sizeof(buf), "%.17g", *v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    out += std::to_string(r.task_id) + ',' + r.method + ',' + std::to_string(r.context_size) +
           ',' + num(r.mse) + ',' + num(r.nll) + ',';
    if (timings) out += num(r.wall_ms);
    out += '\n';
  }
  return out;
}

OptimizerConfig SinusoidExperimentConfig::default_source_training() {
  OptimizerConfig c;
  c.optimizer = OptimizerKind::sgd_momentum;
  c.loss = LossKind::mse;
  c.learning_rate = 1e-3;
  c.momentum = 0.9;
  c.batch_size = 3;
  c.epochs = 2500;
  return c;
}

SinusoidExperimentData sinusoid_experiment_data(const SinusoidExperimentConfig& cfg) {
  if (cfg.num_tasks == 0) throw ContractViolation("sinusoid experiment: need target tasks");
  if (cfg.context_points < 1 || cfg.eval_points < 0) {
    throw ContractViolation("sinusoid experiment: need at least one context point");
  }
  // Task 0 is the source; the rest are targets.
  SinusoidTaskSpec spec = cfg.tasks;
  spec.seed = cfg.seed;
  spec.validate();
  Rng rng = Rng::stream(cfg.seed, "tasks");
  auto draw = [&](Index points) {
    SinusoidTaskSpec s = spec;
    s.points = points;
    const double a = rng.uniform(s.amplitude_lo, s.amplitude_hi);
    const double w = rng.uniform(s.frequency_lo, s.frequency_hi);
    const double b = rng.uniform(s.phase_lo, s.phase_hi);
    return make_sinusoid_task(s, a, w, b, rng);
  };
  SinusoidExperimentData out{draw(cfg.source_points), {}};
  for (std::size_t k = 0; k < cfg.num_tasks; ++k) {
    const SinusoidTask t = draw(cfg.context_points + cfg.eval_points);
    out.targets.push_back(split_task(t.data, cfg.context_points, rng));
  }
  return out;
}

MlpArchitecture SinusoidExperimentConfig::architecture() const {
  MlpArchitecture arch;
  arch.input_dim = 1;
  arch.hidden_widths = hidden_widths;
  arch.output_dim = 1;
  arch.activation = activation;
  return arch;
}

SinusoidExperimentResult run_sinusoid_experiment(const SinusoidExperimentConfig& cfg) {
  SinusoidExperimentData data = sinusoid_experiment_data(cfg);
  OptimizerConfig train_cfg = cfg.source_training;
  train_cfg.seed = cfg.seed;
  const MlpNetwork init = MlpNetwork::initialize(cfg.architecture(), cfg.seed);
  SinusoidExperimentResult res{train(init, data.source.data, train_cfg).network, 0.0, {}, 0, 0, 0};
  res.source_train_mse =
      mean_squared_error(res.source.forward(data.source.data.inputs), data.source.data.targets);
  const double noise = cfg.adapt.noise_variance.value_or(std::max(res.source_train_mse, 1e-8));

  std::vector<AdaptTask>& tasks = data.targets;
  for (auto& at : tasks) at.context.noise_variance = at.eval.noise_variance = noise;
  AdaptConfig acfg = cfg.adapt;
  acfg.noise_variance = noise;
  const AdaptationRun run = run_adaptation(res.source, tasks, acfg);

  OptimizerConfig ll = train_cfg;
  ll.epochs = cfg.last_layer_epochs.value_or(train_cfg.epochs);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const auto& outcome = run.tasks[k];
    const auto id = static_cast<Index>(k);
    const Metrics none = baseline_no_retrain(res.source, tasks[k].eval, noise);
    const LastLayerResult last =
        baseline_last_layer(res.source, tasks[k].context, tasks[k].eval, ll, noise);
    res.rows.push_back({id, "finite_ntk", cfg.context_points, outcome.metrics.mse,
                        outcome.metrics.nll, outcome.metrics.wall_ms});
    res.rows.push_back({id, "no_retrain", cfg.context_points, none.mse, none.nll, none.wall_ms});
    res.rows.push_back({id, "last_layer", cfg.context_points, last.metrics.mse, last.metrics.nll,
                        last.metrics.wall_ms});
    if (outcome.status == TaskStatus::ok && outcome.metrics.mse && none.mse && last.metrics.mse) {
      ++res.tasks_evaluated;
      if (*outcome.metrics.mse < *none.mse) ++res.ntk_beats_no_retrain;
      if (*outcome.metrics.mse < *last.metrics.mse) ++res.ntk_beats_last_layer;
    }
  }
  return res;
}

double hetero_source_surface(double x0, double x1) {
  return std::sin(1.5 * x0) * std::cos(x1) + 0.3 * x0;
}

double hetero_target_surface(double x0, double x1) {
  return hetero_source_surface(x0, x1) + 0.6 * std::sin(x0 + 0.5 * x1) + 0.3;
}

OptimizerConfig HeteroBenchConfig::default_source_training() {
  OptimizerConfig c;
  c.optimizer = OptimizerKind::adam;
  c.loss = LossKind::heteroscedastic_gaussian;
  c.learning_rate = 3e-3;
  c.batch_size = 32;
  c.epochs = 300;
  return c;
}

namespace {

TaskDataset surface_sample(Index n, bool target, Rng& rng) {
  TaskDataset d;
  d.inputs.resize(n, 2);
  d.targets.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    const double x0 = rng.uniform(-2.0, 2.0), x1 = rng.uniform(-2.0, 2.0);
    const double f = target ? hetero_target_surface(x0, x1) : hetero_source_surface(x0, x1);
    const double sd = 0.05 + 0.05 * std::abs(x0);
    d.inputs(i, 0) = x0;
    d.inputs(i, 1) = x1;
    d.targets(i, 0) = f + sd * rng.normal();
  }
  return d;
}

}  // namespace

std::vector<ResultRow> heteroscedastic_adaptation_benchmark(const HeteroBenchConfig& cfg) {
  for (Index c : cfg.context_sizes) {
    if (c < 0 || c > cfg.pool_points) {
      throw ContractViolation("heteroscedastic benchmark: context size " + std::to_string(c) +
                              " outside 0.." + std::to_string(cfg.pool_points));
    }
  }
  Rng rng = Rng::stream(cfg.seed, "tasks");
  const TaskDataset source_data = surface_sample(cfg.source_points, false, rng);
  const TaskDataset pool = surface_sample(cfg.pool_points, true, rng);
  const TaskDataset eval = surface_sample(cfg.eval_points, true, rng);

  MlpArchitecture arch;
  arch.input_dim = 2;
  arch.hidden_widths = cfg.hidden_widths;
  arch.output_dim = 1;
  arch.activation = Activation::tanh;
  arch.heteroscedastic = true;
  OptimizerConfig tc = cfg.source_training;
  tc.loss = LossKind::heteroscedastic_gaussian;
  tc.seed = cfg.seed;
  const MlpNetwork source = train(MlpNetwork::initialize(arch, cfg.seed), source_data, tc).network;
  const double noise = hetero_variance(source, source_data.inputs).mean();

  OptimizerConfig ll = tc;
  ll.epochs = cfg.last_layer_epochs;

  std::vector<ResultRow> rows;
  const Metrics none = baseline_no_retrain(source, eval, noise);
  for (Index c : cfg.context_sizes) {
    std::vector<Index> idx(static_cast<std::size_t>(c));
    std::iota(idx.begin(), idx.end(), Index{0});
    TaskDataset ctx = pool.subset(idx);
    ctx.noise_variance = noise;

    rows.push_back({0, "no_retrain", c, none.mse, none.nll, none.wall_ms});
    const LastLayerResult last = baseline_last_layer(source, ctx, eval, ll, noise);
    rows.push_back({0, "last_layer", c, last.metrics.mse, last.metrics.nll, last.metrics.wall_ms});

    if (c == 0) {
      // No data: the posterior is the prior, whose mean is the network output.
      const auto start = Clock::now();
      const Matrix mean = mean_outputs(source, eval.inputs);
      const Matrix var = prior_variance(source, eval.inputs).array() + noise;
      rows.push_back({0, "finite_ntk", c, mean_squared_error(mean, eval.targets),
                      gaussian_nll(mean, var, eval.targets), elapsed_ms(start)});
      continue;
    }
    AdaptConfig acfg;
    acfg.mean = MeanFunctionKind::network_output;
    acfg.gp = cfg.gp;
    const AdaptationRun run = run_adaptation(source, {AdaptTask{ctx, eval}}, acfg);
    const TaskOutcome& out = run.tasks.front();
    rows.push_back({0, "finite_ntk", c, out.metrics.mse, out.metrics.nll, out.metrics.wall_ms});
  }
  return rows;
}

}  // namespace fntk
