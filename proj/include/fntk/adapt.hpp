#pragma once

// Fast adaptation: train once on a source task, then condition a finite-NTK
// GP on each target task's context points. No gradient steps are taken on the
// network during adaptation.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fntk/net.hpp"
#include "fntk/ntk_gp.hpp"

namespace fntk {

class Rng;

// y = A sin(w x + b) + e, e ~ N(0, noise_scale * A) (variance).
struct SinusoidTaskSpec {
  double amplitude_lo = 0.1;
  double amplitude_hi = 5.0;
  double frequency_lo = 0.0;
  double frequency_hi = 6.283185307179586;
  double phase_lo = 0.0;
  double phase_hi = 3.141592653589793;
  double x_lo = -5.0;
  double x_hi = 5.0;
  double noise_scale = 0.01;
  bool noise_free = false;
  Index points = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SinusoidTask {
  double amplitude = 0.0;
  double frequency = 0.0;
  double phase = 0.0;
  TaskDataset data;
};

SinusoidTask make_sinusoid_task(const SinusoidTaskSpec& spec, double amplitude, double frequency,
                                double phase, Rng& rng);
std::vector<SinusoidTask> sample_sinusoid_tasks(const SinusoidTaskSpec& spec, std::size_t num_tasks);

struct AdaptTask {
  TaskDataset context;
  TaskDataset eval;
};

// First `context_size` points of a seeded permutation become the context, the
// rest the evaluation set.
AdaptTask split_task(const TaskDataset& data, Index context_size, Rng& rng);

// Mean Gaussian negative log likelihood per target entry.
double gaussian_nll(const Matrix& mean, const Matrix& variance, const Matrix& targets);

struct Metrics {
  std::optional<double> mse;
  std::optional<double> nll;
  double wall_ms = 0.0;
};

struct AdaptConfig {
  MeanFunctionKind mean = MeanFunctionKind::zero;
  std::optional<InferenceSpace> space;
  // Overrides each context set's noise_variance.
  std::optional<double> noise_variance;
  GpOptions gp;
  bool keep_posteriors = false;
};

enum class TaskStatus { ok, no_eval, failed };
std::string_view to_string(TaskStatus s);

struct TaskOutcome {
  Index task_id = 0;
  TaskStatus status = TaskStatus::ok;
  std::string message;
  Index context_size = 0;
  Metrics metrics;
  std::optional<NtkPosterior> posterior;
};

struct AdaptationRun {
  std::uint64_t source_fingerprint = 0;
  std::vector<TaskOutcome> tasks;
};

AdaptationRun run_adaptation(const MlpNetwork& source, const std::vector<AdaptTask>& tasks,
                             const AdaptConfig& cfg = {});

// Homoscedastic nets use `noise_variance` for the NLL; heteroscedastic nets
// use their own predicted variance.
Metrics baseline_no_retrain(const MlpNetwork& source, const TaskDataset& eval,
                            double noise_variance);

struct LastLayerResult {
  MlpNetwork network;
  Metrics metrics;
};

LastLayerResult baseline_last_layer(const MlpNetwork& source, const TaskDataset& context,
                                    const TaskDataset& eval, OptimizerConfig cfg,
                                    double noise_variance);

struct ResultRow {
  Index task_id = 0;
  std::string method;
  Index context_size = 0;
  std::optional<double> mse;
  std::optional<double> nll;
  double wall_ms = 0.0;
};

// `task_id,method,context_size,mse,nll,wall_ms`; wall_ms is left empty unless
// `timings` is set so that reruns are byte-identical.
std::string results_to_csv(const std::vector<ResultRow>& rows, bool timings = false);

struct SinusoidExperimentConfig {
  std::uint64_t seed = 0;
  SinusoidTaskSpec tasks;
  Index source_points = 100;
  std::size_t num_tasks = 20;
  Index context_points = 10;
  Index eval_points = 100;
  std::vector<Index> hidden_widths{40, 40};
  Activation activation = Activation::tanh;
  OptimizerConfig source_training = default_source_training();
  // Fixed budget: defaults to the source epochs.
  std::optional<std::size_t> last_layer_epochs;
  AdaptConfig adapt;

  static OptimizerConfig default_source_training();
  MlpArchitecture architecture() const;
};

struct SinusoidExperimentData {
  SinusoidTask source;
  std::vector<AdaptTask> targets;
};

// The source task and the split target tasks, all drawn from the "tasks"
// stream of cfg.seed.
SinusoidExperimentData sinusoid_experiment_data(const SinusoidExperimentConfig& cfg);

struct SinusoidExperimentResult {
  MlpNetwork source;
  double source_train_mse = 0.0;
  std::vector<ResultRow> rows;
  std::size_t tasks_evaluated = 0;
  std::size_t ntk_beats_no_retrain = 0;
  std::size_t ntk_beats_last_layer = 0;
};

SinusoidExperimentResult run_sinusoid_experiment(const SinusoidExperimentConfig& cfg);

struct HeteroBenchConfig {
  std::uint64_t seed = 0;
  Index source_points = 400;
  Index pool_points = 160;
  Index eval_points = 200;
  std::vector<Index> context_sizes{0, 5, 10, 20, 40, 80};
  std::vector<Index> hidden_widths{32, 32};
  OptimizerConfig source_training = default_source_training();
  std::size_t last_layer_epochs = 100;
  GpOptions gp;

  static OptimizerConfig default_source_training();
};

// Synthetic smooth 2-D field and a shifted copy of it; the GP noise variance
// is the source network's mean predicted variance on its training inputs.
std::vector<ResultRow> heteroscedastic_adaptation_benchmark(const HeteroBenchConfig& cfg);

// Noise-free source and target surfaces, exposed for tests.
double hetero_source_surface(double x0, double x1);
double hetero_target_surface(double x0, double x1);

}  // namespace fntk
