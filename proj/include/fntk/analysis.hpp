#pragma once

// Jacobian similarity and spectra across trained models.
//
//   sim(A, B) = tr(A^T B B^T A) / (|A A^T|_F |B B^T|_F)
//
// A and B are p x m Jacobians of two models on the same m evaluation outputs.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fntk/net.hpp"

namespace fntk {

class Rng;

double jacobian_similarity(const Matrix& a, const Matrix& b);
double jacobian_similarity(const JacobianOperator& a, const JacobianOperator& b,
                           std::size_t cap = kDefaultDenseCap);

enum class SpectrumMethod { automatic, dense, lanczos };

struct SpectrumOptions {
  SpectrumMethod method = SpectrumMethod::automatic;
  std::size_t dense_cap = kDefaultDenseCap;
  // Automatic picks dense while min(p, n*o) stays below this.
  Index dense_max_dim = 2000;
  // 0 picks min(dim, max(2k, k + 20)).
  Index lanczos_rank = 0;
  std::uint64_t seed = 0;
};

// Top-k singular values of J, descending. The Lanczos path works on the
// smaller of J^T J and J J^T.
Vector jacobian_spectrum(const JacobianOperator& jac, Index k, const SpectrumOptions& options = {});

struct SimilarityGroup {
  std::string name;
  int distribution = 0;  // 0 = reference, 1 = shifted
  int split = 0;         // independent draws of the same distribution
};

struct SimilarityStudyConfig {
  std::uint64_t seed = 0;
  std::vector<SimilarityGroup> groups{{"reference_a", 0, 0}, {"reference_b", 0, 1},
                                      {"shifted", 1, 0}};
  std::size_t models_per_group = 5;
  std::vector<Index> hidden_widths{16, 16};
  Activation activation = Activation::tanh;
  Index train_points = 200;
  Index eval_points = 100;
  OptimizerConfig training = default_training();
  // Heads of models trained on another distribution are refit on the first
  // group's training set for this many epochs before comparison.
  std::size_t realign_epochs = 50;
  std::size_t dense_cap = kDefaultDenseCap;

  void validate() const;
  static OptimizerConfig default_training();
};

struct PairStats {
  std::size_t count = 0;
  double mean = 0.0;
  // Only with two or more pairs.
  std::optional<double> stddev;
  std::optional<double> min;
  std::optional<double> max;
};

struct SimilarityReport {
  std::vector<std::string> model_ids;
  std::vector<std::string> model_groups;
  std::vector<int> model_distributions;
  std::vector<std::uint64_t> model_seeds;
  Matrix similarity;
  std::string dataset_id;
  Index eval_points = 0;
  Index channels = 0;
  std::uint64_t seed = 0;
  // Pairs inside one group; pairs across groups of the same distribution;
  // pairs across distributions.
  std::optional<PairStats> within_group;
  std::optional<PairStats> same_distribution;
  std::optional<PairStats> cross_distribution;
};

// Two-class toy distributions on N(0, I_2) inputs.
int similarity_label(int distribution, double x0, double x1);
TaskDataset similarity_dataset(int distribution, Index n, Rng& rng);

SimilarityReport task_similarity_study(const SimilarityStudyConfig& cfg);
std::optional<PairStats> pair_stats(const std::vector<double>& values);

std::string report_to_json(const SimilarityReport& report);
// `model_a,model_b,similarity`, upper triangle including the diagonal.
std::string report_to_csv(const SimilarityReport& report);

}  // namespace fntk
