#pragma once

// Versioned experiment config. Parsing is strict: unknown keys, wrong types
// and a missing or unsupported version are input errors. Every block has
// defaults, and the fully resolved document is what gets hashed and echoed
// into outputs.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fntk/adapt.hpp"
#include "fntk/analysis.hpp"
#include "fntk/glm.hpp"
#include "fntk/net.hpp"
#include "fntk/ntk_gp.hpp"

namespace fntk::cli {

inline constexpr int kConfigVersion = 1;

struct GpBlock {
  std::optional<InferenceSpace> space;  // absent = pick per task
  MeanFunctionKind mean = MeanFunctionKind::zero;
  std::optional<double> noise_variance;  // absent = source training MSE
  Index rank = 0;
  double cg_tol = 1e-8;
  std::size_t cg_max_iter = 0;
  double fit_residual_tol = 1e-4;
  bool baselines = true;
  std::optional<std::size_t> last_layer_epochs;

  GpOptions options() const;
};

struct FvpBlock {
  std::vector<double> epsilons{1e-8, 1e-6, 1e-4, 1e-2};
  std::size_t probes = 16;
  std::string likelihood = "gaussian";
  double noise_variance = 1.0;
  Index num_inputs = 32;
  std::string inputs;  // CSV; empty = draw num_inputs points
};

struct TaskFiles {
  std::string context;
  std::string eval;
};

struct TaskBlock {
  std::string generator = "sinusoid";  // or "files"
  SinusoidTaskSpec sinusoid;
  Index source_points = 100;
  std::size_t num_tasks = 20;
  Index context_points = 10;
  Index eval_points = 100;
  std::string train;  // files: training CSV
  std::vector<TaskFiles> files;
};

struct SimilarityBlock {
  std::vector<SimilarityGroup> groups = SimilarityStudyConfig{}.groups;
  std::size_t models_per_group = 5;
  std::vector<Index> hidden_widths{16, 16};
  Index train_points = 200;
  Index eval_points = 100;
  std::size_t epochs = 100;
  double learning_rate = 1e-2;
  std::size_t batch_size = 32;
  std::size_t realign_epochs = 50;
};

struct GlmBlock {
  ApproxKind approx = ApproxKind::map;
  double prior_variance = 1.0;
  bool include_network_output = false;
  double learning_rate = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  Index laplace_rank = 64;
  FisherSource fisher_source = FisherSource::training;
  PredictMode predict_mode = PredictMode::mean;
  std::string train;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  MlpArchitecture architecture = default_architecture();
  OptimizerConfig optimizer = SinusoidExperimentConfig::default_source_training();
  GpBlock gp;
  FvpBlock fvp;
  TaskBlock tasks;
  SimilarityBlock similarity;
  GlmBlock glm;
  // Directory relative paths are resolved against; not part of the document.
  std::string base_dir;

  static MlpArchitecture default_architecture();
};

// Relative paths inside the document are resolved against `base_dir`.
ExperimentConfig parse_config(std::string_view text, const std::string& base_dir = "");
ExperimentConfig load_config(const std::string& path);

std::string resolve_path(const ExperimentConfig& cfg, const std::string& path);

nlohmann::json config_to_json(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

SinusoidExperimentConfig sinusoid_experiment(const ExperimentConfig& cfg);
SimilarityStudyConfig similarity_study(const ExperimentConfig& cfg);
GlmFitConfig glm_fit(const ExperimentConfig& cfg);

}  // namespace fntk::cli
