#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "commands.hpp"
#include "fntk/errors.hpp"

namespace {

enum ExitCode { kOk = 0, kInput = 2, kConsistency = 3, kNumeric = 4 };

void init_logging() {
  auto logger = spdlog::stderr_color_mt("fntk");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("FNTK_LOG_LEVEL")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off") {
      spdlog::warn("FNTK_LOG_LEVEL='{}' not recognized; keeping 'info'", env);
    } else {
      spdlog::set_level(level);
    }
  }
}

void add_common(CLI::App* cmd, fntk::cli::CommonOptions& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)");
  cmd->add_option("--seed", c.seed, "Override the config seed");
  cmd->add_option("--out", c.out, "Output file");
  cmd->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"csv", "json"}));
  cmd->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  using namespace fntk::cli;

  CLI::App app{"Finite neural tangent kernel GPs for fast adaptation"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  CommonOptions common;
  TrainOptions train_opts;
  AdaptOptions adapt_opts;
  PredictOptions predict_opts;
  FvpBenchOptions fvp_opts;
  SimilarityOptions sim_opts;
  GlmFitOptions glm_fit_opts;
  GlmPredictOptions glm_predict_opts;

  auto* train = app.add_subcommand("train", "Train a source network and write a checkpoint");
  add_common(train, common);
  train->add_option("--data", train_opts.data, "Training CSV (overrides tasks.train)");

  auto* adapt = app.add_subcommand("adapt", "Adapt a checkpoint to target tasks");
  add_common(adapt, common);
  adapt->add_option("--checkpoint", adapt_opts.checkpoint)->required();
  adapt->add_option("--posterior-dir", adapt_opts.posterior_dir, "Write per-task posterior caches");
  adapt->add_flag("--timings", common.timings, "Fill the wall_ms column");

  auto* predict = app.add_subcommand("predict", "Predict from a cached posterior");
  add_common(predict, common);
  predict->add_option("--checkpoint", predict_opts.checkpoint)->required();
  predict->add_option("--posterior", predict_opts.posterior)->required();
  predict->add_option("--inputs", predict_opts.inputs)->required();

  auto* fvp = app.add_subcommand("fvp-bench", "Finite-difference Fisher-vector product error sweep");
  add_common(fvp, common);
  fvp->add_option("--checkpoint", fvp_opts.checkpoint)->required();
  fvp->add_option("--inputs", fvp_opts.inputs, "Input CSV (overrides fvp.inputs)");

  auto* sim = app.add_subcommand("similarity", "Jacobian similarity study or pairwise comparison");
  add_common(sim, common);
  sim->add_option("--checkpoint", sim_opts.checkpoints, "Compare these checkpoints pairwise");
  sim->add_option("--inputs", sim_opts.inputs, "Shared evaluation CSV for pairwise mode");

  auto* glm_fit = app.add_subcommand("glm-fit", "Fit a linearized classifier posterior");
  add_common(glm_fit, common);
  glm_fit->add_option("--checkpoint", glm_fit_opts.checkpoint)->required();
  glm_fit->add_option("--data", glm_fit_opts.data, "Labelled CSV (overrides glm.train)");

  auto* glm_predict = app.add_subcommand("glm-predict", "Class probabilities from a GLM posterior");
  add_common(glm_predict, common);
  glm_predict->add_option("--checkpoint", glm_predict_opts.checkpoint)->required();
  glm_predict->add_option("--posterior", glm_predict_opts.posterior)->required();
  glm_predict->add_option("--inputs", glm_predict_opts.inputs)->required();

  auto* sinusoid = app.add_subcommand("sinusoid-exp", "Run the sinusoid few-shot protocol end to end");
  add_common(sinusoid, common);
  sinusoid->add_flag("--timings", common.timings, "Fill the wall_ms column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }

  try {
    if (*train) cmd_train(common, train_opts);
    if (*adapt) cmd_adapt(common, adapt_opts);
    if (*predict) cmd_predict(common, predict_opts);
    if (*fvp) cmd_fvp_bench(common, fvp_opts);
    if (*sim) cmd_similarity(common, sim_opts);
    if (*glm_fit) cmd_glm_fit(common, glm_fit_opts);
    if (*glm_predict) cmd_glm_predict(common, glm_predict_opts);
    if (*sinusoid) cmd_sinusoid_exp(common);
  } catch (const fntk::ConsistencyError& e) {
    spdlog::error("{}", e.what());
    return kConsistency;
  } catch (const fntk::InputError& e) {
    spdlog::error("{}", e.what());
    return kInput;
  } catch (const fntk::ContractViolation& e) {
    spdlog::error("{}", e.what());
    return kInput;
  } catch (const fntk::Error& e) {
    spdlog::error("{}", e.what());
    return kNumeric;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("{}", e.what());
    return kInput;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kInput;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInput;
  }
  return kOk;
}
