#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fntk::cli {

inline constexpr const char* kToolVersion = FNTK_VERSION;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format;  // empty = the command's default
  int threads = 1;
  bool timings = false;
};

struct TrainOptions {
  std::string data;  // overrides tasks.train
};

struct AdaptOptions {
  std::string checkpoint;
  std::string posterior_dir;
};

struct PredictOptions {
  std::string checkpoint;
  std::string posterior;
  std::string inputs;
};

struct FvpBenchOptions {
  std::string checkpoint;
  std::string inputs;  // overrides fvp.inputs
};

struct SimilarityOptions {
  std::vector<std::string> checkpoints;
  std::string inputs;
};

struct GlmFitOptions {
  std::string checkpoint;
  std::string data;  // overrides glm.train
};

struct GlmPredictOptions {
  std::string checkpoint;
  std::string posterior;
  std::string inputs;
};

void cmd_train(const CommonOptions& common, const TrainOptions& opts);
void cmd_adapt(const CommonOptions& common, const AdaptOptions& opts);
void cmd_predict(const CommonOptions& common, const PredictOptions& opts);
void cmd_fvp_bench(const CommonOptions& common, const FvpBenchOptions& opts);
void cmd_similarity(const CommonOptions& common, const SimilarityOptions& opts);
void cmd_glm_fit(const CommonOptions& common, const GlmFitOptions& opts);
void cmd_glm_predict(const CommonOptions& common, const GlmPredictOptions& opts);
void cmd_sinusoid_exp(const CommonOptions& common);

}  // namespace fntk::cli
