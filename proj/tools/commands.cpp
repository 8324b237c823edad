#include "commands.hpp"

#include <filesystem>

#include <Eigen/Core>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "config.hpp"
#include "fntk/adapt.hpp"
#include "fntk/analysis.hpp"
#include "fntk/errors.hpp"
#include "fntk/fisher.hpp"
#include "fntk/glm.hpp"
#include "fntk/hash.hpp"
#include "fntk/io.hpp"
#include "fntk/ntk_gp.hpp"
#include "fntk/random.hpp"

namespace fntk::cli {

using nlohmann::json;

namespace {

struct Context {
  ExperimentConfig cfg;
  json resolved;
  std::uint64_t hash = 0;

  std::string path(const std::string& p) const { return resolve_path(cfg, p); }

  json provenance() const {
    return {{"tool", "fntk"}, {"version", kToolVersion}, {"config_hash", to_hex(hash)},
            {"config", resolved}};
  }
  std::string csv_preamble() const {
    return "# fntk " + std::string(kToolVersion) + " config_hash=" + to_hex(hash) + "\n# config " +
           resolved.dump() + "\n";
  }
  std::string short_provenance() const {
    return json{{"tool", "fntk"}, {"version", kToolVersion}, {"config_hash", to_hex(hash)}}.dump();
  }
};

Context setup(const CommonOptions& common) {
  if (common.threads < 1) throw ContractViolation("--threads must be >= 1");
  Eigen::setNbThreads(common.threads);
  Context ctx;
  if (!common.config.empty()) ctx.cfg = load_config(common.config);
  if (common.seed) ctx.cfg.seed = *common.seed;
  ctx.resolved = config_to_json(ctx.cfg);
  ctx.hash = config_hash(ctx.cfg);
  spdlog::debug("config hash {}", to_hex(ctx.hash));
  return ctx;
}

std::string output_format(const CommonOptions& common, const char* fallback) {
  const std::string f = common.format.empty() ? fallback : common.format;
  if (f != "csv" && f != "json") throw ContractViolation("--format must be csv or json");
  return f;
}

void require(const std::string& value, const char* what) {
  if (value.empty()) throw ContractViolation(std::string("missing required ") + what);
}

void write_output(const CommonOptions& common, const std::string& content) {
  require(common.out, "--out");
  write_file_atomic(common.out, content);
  spdlog::info("wrote {}", common.out);
}

std::string write_json(const json& j) { return j.dump(2) + "\n"; }

json opt_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json matrix_rows(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Index c = 0; c < m.cols(); ++c) r.push_back(m(i, c));
    rows.push_back(r);
  }
  return rows;
}

json matrix_blob(const Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_blob(const json& j) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw InputError("matrix block has inconsistent shape");
  }
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

Vector vector_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json results_json(const Context& ctx, const std::vector<ResultRow>& rows, bool timings) {
  json out = {{"provenance", ctx.provenance()}, {"rows", json::array()}};
  for (const auto& r : rows) {
    out["rows"].push_back({{"task_id", r.task_id},
                           {"method", r.method},
                           {"context_size", r.context_size},
                           {"mse", opt_number(r.mse)},
                           {"nll", opt_number(r.nll)},
                           {"wall_ms", timings ? json(r.wall_ms) : json(nullptr)}});
  }
  return out;
}

// The checkpoint's recorded training MSE, when it was written by `train`.
std::optional<double> recorded_train_mse(const std::string& checkpoint_path) {
  const json j = json::parse(read_file(checkpoint_path), nullptr, false);
  if (j.is_discarded() || !j.contains("provenance")) return std::nullopt;
  const json& p = j["provenance"];
  if (!p.is_object() || !p.contains("train_mse") || !p["train_mse"].is_number()) return std::nullopt;
  return p["train_mse"].get<double>();
}

void check_architecture(const MlpNetwork& net, const MlpArchitecture& expected, const std::string& what) {
  if (!(net.architecture() == expected)) {
    throw ConsistencyError(what + ": checkpoint architecture (fingerprint " +
                           to_hex(net.architecture().fingerprint()) +
                           ") does not match the configured architecture (fingerprint " +
                           to_hex(expected.fingerprint()) + ")");
  }
}

Matrix mean_channels(const MlpNetwork& net, const Matrix& inputs) {
  const Matrix out = net.forward(inputs);
  const auto ch = net.architecture().mean_channels();
  Matrix m(out.rows(), static_cast<Index>(ch.size()));
  for (std::size_t c = 0; c < ch.size(); ++c) m.col(static_cast<Index>(c)) = out.col(ch[c]);
  return m;
}

}  // namespace

void cmd_train(const CommonOptions& common, const TrainOptions& opts) {
  const Context ctx = setup(common);
  const ExperimentConfig& cfg = ctx.cfg;
  require(common.out, "--out");
  TaskDataset data;
  const std::string file = !opts.data.empty() ? opts.data : ctx.path(cfg.tasks.train);
  if (!file.empty()) {
    data = load_dataset(file);
  } else if (cfg.tasks.generator == "sinusoid") {
    data = sinusoid_experiment_data(sinusoid_experiment(cfg)).source.data;
  } else {
    throw ContractViolation("train: tasks.generator is 'files' but no training CSV was given");
  }
  OptimizerConfig oc = cfg.optimizer;
  oc.seed = cfg.seed;
  spdlog::info("training {} parameters on {} points for {} epochs",
               cfg.architecture.parameter_count(), data.size(), oc.epochs);
  const TrainResult res = train(MlpNetwork::initialize(cfg.architecture, cfg.seed), data, oc);
  const Matrix pred = mean_channels(res.network, data.inputs);
  double train_mse = 0.0;
  if (oc.loss != LossKind::categorical_ce) train_mse = mean_squared_error(pred, data.targets);
  spdlog::info("final loss {:.6g}", res.loss_trace.empty() ? 0.0 : res.loss_trace.back());

  json prov = ctx.provenance();
  if (oc.loss != LossKind::categorical_ce) prov["train_mse"] = train_mse;
  save_checkpoint(res.network, common.out, prov.dump());

  std::string trace = ctx.csv_preamble() + "epoch,loss\n";
  for (std::size_t e = 0; e < res.loss_trace.size(); ++e) {
    trace += std::to_string(e + 1) + ',' + format_double(res.loss_trace[e]) + '\n';
  }
  write_file_atomic(common.out + ".trace.csv", trace);
  spdlog::info("wrote {} and its training trace", common.out);
}

void cmd_adapt(const CommonOptions& common, const AdaptOptions& opts) {
  const Context ctx = setup(common);
  const ExperimentConfig& cfg = ctx.cfg;
  const std::string format = output_format(common, "csv");
  require(opts.checkpoint, "--checkpoint");
  require(common.out, "--out");
  const MlpNetwork net = load_checkpoint(opts.checkpoint);
  check_architecture(net, cfg.architecture, "adapt");

  double noise;
  if (cfg.gp.noise_variance) {
    noise = *cfg.gp.noise_variance;
  } else if (const auto mse = recorded_train_mse(opts.checkpoint)) {
    noise = std::max(*mse, 1e-8);
  } else {
    throw InputError("adapt: checkpoint records no training MSE; set gp.noise_variance");
  }
  spdlog::info("adapting with noise variance {:.6g}", noise);

  std::vector<AdaptTask> tasks;
  if (cfg.tasks.generator == "sinusoid") {
    tasks = sinusoid_experiment_data(sinusoid_experiment(cfg)).targets;
  } else {
    if (cfg.tasks.files.empty()) throw ContractViolation("adapt: tasks.files is empty");
    for (const auto& f : cfg.tasks.files) {
      AdaptTask t;
      t.context = load_dataset(ctx.path(f.context));
      if (f.eval.empty()) {
        t.eval.inputs.resize(0, t.context.inputs.cols());
        t.eval.targets.resize(0, t.context.targets.cols());
      } else {
        t.eval = load_dataset(ctx.path(f.eval));
      }
      tasks.push_back(std::move(t));
    }
  }
  for (auto& t : tasks) t.context.noise_variance = t.eval.noise_variance = noise;

  AdaptConfig acfg;
  acfg.mean = cfg.gp.mean;
  acfg.space = cfg.gp.space;
  acfg.noise_variance = noise;
  acfg.gp = cfg.gp.options();
  acfg.keep_posteriors = !opts.posterior_dir.empty();
  AdaptationRun run = run_adaptation(net, tasks, acfg);

  if (!opts.posterior_dir.empty()) {
    std::filesystem::create_directories(opts.posterior_dir);
    for (auto& t : run.tasks) {
      if (!t.posterior) continue;
      t.posterior->provenance = ctx.short_provenance();
      save_posterior(*t.posterior, (std::filesystem::path(opts.posterior_dir) /
                                    ("task_" + std::to_string(t.task_id) + ".post"))
                                       .string());
    }
  }

  OptimizerConfig ll = cfg.optimizer;
  ll.seed = cfg.seed;
  ll.epochs = cfg.gp.last_layer_epochs.value_or(cfg.optimizer.epochs);
  std::vector<ResultRow> rows;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const TaskOutcome& o = run.tasks[k];
    if (o.status == TaskStatus::failed) spdlog::warn("task {} failed: {}", o.task_id, o.message);
    rows.push_back({o.task_id, "finite_ntk", o.context_size, o.metrics.mse, o.metrics.nll,
                    o.metrics.wall_ms});
    if (!cfg.gp.baselines) continue;
    const Metrics none = baseline_no_retrain(net, tasks[k].eval, noise);
    rows.push_back({o.task_id, "no_retrain", o.context_size, none.mse, none.nll, none.wall_ms});
    const LastLayerResult last = baseline_last_layer(net, tasks[k].context, tasks[k].eval, ll, noise);
    rows.push_back({o.task_id, "last_layer", o.context_size, last.metrics.mse, last.metrics.nll,
                    last.metrics.wall_ms});
  }
  write_output(common, format == "csv" ? ctx.csv_preamble() + results_to_csv(rows, common.timings)
                                       : write_json(results_json(ctx, rows, common.timings)));
}

void cmd_predict(const CommonOptions& common, const PredictOptions& opts) {
  const Context ctx = setup(common);
  const std::string format = output_format(common, "csv");
  require(opts.checkpoint, "--checkpoint");
  require(opts.posterior, "--posterior");
  require(opts.inputs, "--inputs");
  require(common.out, "--out");
  const MlpNetwork net = load_checkpoint(opts.checkpoint);
  const NtkPosterior post = load_posterior(opts.posterior);
  const Matrix x = inputs_from_csv(read_file(opts.inputs), net.architecture().input_dim);
  const Prediction p = predict(post, net, x);
  if (p.clamped > 0) {
    spdlog::warn("{} predictive variances were negative (min {:.3g}) and clamped to 0", p.clamped,
                 p.min_raw_variance);
  }
  const Index o = static_cast<Index>(post.channels.size());
  if (format == "json") {
    write_output(common, write_json({{"provenance", ctx.provenance()},
                                     {"mean", matrix_rows(p.mean)},
                                     {"variance", matrix_rows(p.variance)}}));
    return;
  }
  std::string csv = ctx.csv_preamble();
  for (Index c = 0; c < o; ++c) csv += (c ? ",mean_" : "mean_") + std::to_string(c);
  for (Index c = 0; c < o; ++c) csv += ",variance_" + std::to_string(c);
  csv += '\n';
  for (Index i = 0; i < p.mean.rows(); ++i) {
    for (Index c = 0; c < o; ++c) csv += (c ? "," : "") + format_double(p.mean(i, c));
    for (Index c = 0; c < o; ++c) csv += ',' + format_double(p.variance(i, c));
    csv += '\n';
  }
  write_output(common, csv);
}

void cmd_fvp_bench(const CommonOptions& common, const FvpBenchOptions& opts) {
  const Context ctx = setup(common);
  const ExperimentConfig& cfg = ctx.cfg;
  const std::string format = output_format(common, "csv");
  require(opts.checkpoint, "--checkpoint");
  require(common.out, "--out");
  const MlpNetwork net = load_checkpoint(opts.checkpoint);
  const Index d = net.architecture().input_dim;

  Matrix x;
  const std::string file = !opts.inputs.empty() ? opts.inputs : ctx.path(cfg.fvp.inputs);
  if (!file.empty()) {
    x = inputs_from_csv(read_file(file), d);
  } else {
    Rng rng = Rng::stream(cfg.seed, "tasks");
    x.resize(cfg.fvp.num_inputs, d);
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < d; ++j) x(i, j) = rng.uniform(cfg.tasks.sinusoid.x_lo, cfg.tasks.sinusoid.x_hi);
  }
  if (x.rows() == 0) throw ContractViolation("fvp-bench: no inputs");
  const LikelihoodKind like = cfg.fvp.likelihood == "categorical"
                                  ? LikelihoodKind::categorical(net.architecture().output_dim)
                                  : LikelihoodKind::gaussian(cfg.fvp.noise_variance);
  const auto rows =
      fvp_error_sweep(network_view(net, x, like), like, cfg.fvp.epsilons, cfg.fvp.probes, cfg.seed);
  for (const auto& r : rows) spdlog::info("eps {:.0e}: mean rel err {:.3g}", r.epsilon, r.mean_rel_err);
  if (format == "csv") {
    write_output(common, ctx.csv_preamble() + sweep_to_csv(rows));
    return;
  }
  json out = {{"provenance", ctx.provenance()}, {"rows", json::array()}};
  for (const auto& r : rows) {
    out["rows"].push_back({{"epsilon", r.epsilon},
                           {"mean_rel_err", r.mean_rel_err},
                           {"max_rel_err", r.max_rel_err},
                           {"probes", r.probes},
                           {"seed", r.seed}});
  }
  write_output(common, write_json(out));
}

void cmd_similarity(const CommonOptions& common, const SimilarityOptions& opts) {
  const Context ctx = setup(common);
  const std::string format = output_format(common, "json");
  require(common.out, "--out");
  SimilarityReport report;
  if (opts.checkpoints.empty()) {
    report = task_similarity_study(similarity_study(ctx.cfg));
    if (report.same_distribution && report.cross_distribution) {
      spdlog::info("same-distribution mean {:.4f}, cross-distribution mean {:.4f}",
                   report.same_distribution->mean, report.cross_distribution->mean);
    }
  } else {
    require(opts.inputs, "--inputs (shared evaluation CSV)");
    std::vector<MlpNetwork> nets;
    for (const auto& p : opts.checkpoints) nets.push_back(load_checkpoint(p));
    for (const auto& n : nets) {
      const MlpArchitecture& a = n.architecture();
      const MlpArchitecture& b = nets.front().architecture();
      if (a.input_dim != b.input_dim || a.hidden_widths != b.hidden_widths ||
          a.network_outputs() != b.network_outputs() || a.use_bias != b.use_bias) {
        throw ConsistencyError("similarity: checkpoints have different architectures and no projection");
      }
    }
    const Matrix x = inputs_from_csv(read_file(opts.inputs), nets.front().architecture().input_dim);
    if (x.rows() == 0) throw ContractViolation("similarity: evaluation CSV has no rows");
    std::vector<Matrix> jac;
    for (const auto& n : nets) jac.push_back(JacobianOperator(n, x).dense());
    const auto count = static_cast<Index>(nets.size());
    report.similarity.resize(count, count);
    std::vector<double> pairs;
    for (Index i = 0; i < count; ++i) {
      report.similarity(i, i) = jacobian_similarity(jac[i], jac[i]);
      for (Index j = i + 1; j < count; ++j) {
        const double s = jacobian_similarity(jac[i], jac[j]);
        report.similarity(i, j) = report.similarity(j, i) = s;
        pairs.push_back(s);
      }
    }
    for (std::size_t i = 0; i < nets.size(); ++i) {
      report.model_ids.push_back(opts.checkpoints[i]);
      report.model_groups.push_back("supplied");
      report.model_distributions.push_back(0);
      report.model_seeds.push_back(nets[i].fingerprint());
    }
    report.within_group = pair_stats(pairs);
    report.dataset_id = "file:" + opts.inputs;
    report.eval_points = x.rows();
    report.channels = static_cast<Index>(nets.front().architecture().mean_channels().size());
    report.seed = ctx.cfg.seed;
  }
  if (format == "csv") {
    write_output(common, ctx.csv_preamble() + report_to_csv(report));
    return;
  }
  json j = json::parse(report_to_json(report));
  j["provenance"] = ctx.provenance();
  write_output(common, write_json(j));
}

void cmd_glm_fit(const CommonOptions& common, const GlmFitOptions& opts) {
  const Context ctx = setup(common);
  const ExperimentConfig& cfg = ctx.cfg;
  require(opts.checkpoint, "--checkpoint");
  require(common.out, "--out");
  if (!common.format.empty() && common.format != "json") {
    throw ContractViolation("glm-fit writes JSON only");
  }
  const MlpNetwork net = load_checkpoint(opts.checkpoint);
  const std::string file = !opts.data.empty() ? opts.data : ctx.path(cfg.glm.train);
  require(file, "--data or glm.train");
  const TaskDataset data = load_dataset(file);
  const LinearizedGlm model(net, cfg.glm.include_network_output, cfg.glm.prior_variance);
  const GlmFitConfig fc = glm_fit(cfg);

  GaussianPosteriorApprox approx;
  switch (cfg.glm.approx) {
    case ApproxKind::map: {
      const MapResult m = fit_map(model, data, fc);
      approx.kind = ApproxKind::map;
      approx.mean = m.model.coefficients;
      approx.prior_variance = model.prior_variance;
      approx.train_size = data.size();
      approx.loss_trace = m.loss_trace;
      break;
    }
    case ApproxKind::laplace:
      approx = fit_laplace(model, data, fc);
      break;
    case ApproxKind::meanfield:
      approx = fit_svi(model, data, fc);
      break;
  }
  if (!approx.loss_trace.empty()) spdlog::info("final objective {:.6g}", approx.loss_trace.back());
  const json out = {{"format", "fntk-glm-posterior"},
                    {"version", 1},
                    {"provenance", ctx.provenance()},
                    {"network_fingerprint", to_hex(net.fingerprint())},
                    {"kind", to_string(approx.kind)},
                    {"include_network_output", model.include_network_output},
                    {"prior_variance", approx.prior_variance},
                    {"fisher_source", to_string(approx.fisher_source)},
                    {"train_size", approx.train_size},
                    {"laplace_rank", approx.laplace_rank},
                    {"mean", vector_json(approx.mean)},
                    {"raw_scale", vector_json(approx.raw_scale)},
                    {"root", matrix_blob(approx.root)},
                    {"basis", matrix_blob(approx.basis)},
                    {"loss_trace", approx.loss_trace},
                    {"elbo_trace", approx.elbo_trace}};
  write_output(common, write_json(out));
}

void cmd_glm_predict(const CommonOptions& common, const GlmPredictOptions& opts) {
  const Context ctx = setup(common);
  const std::string format = output_format(common, "csv");
  require(opts.checkpoint, "--checkpoint");
  require(opts.posterior, "--posterior");
  require(opts.inputs, "--inputs");
  require(common.out, "--out");
  const MlpNetwork net = load_checkpoint(opts.checkpoint);

  json j;
  try {
    j = json::parse(read_file(opts.posterior));
  } catch (const json::parse_error& e) {
    throw InputError("glm posterior: parse error at byte " + std::to_string(e.byte));
  }
  GaussianPosteriorApprox approx;
  LinearizedGlm model(net);
  try {
    if (j.at("format").get<std::string>() != "fntk-glm-posterior" || j.at("version").get<int>() != 1) {
      throw InputError("glm posterior: unexpected format or version");
    }
    if (from_hex(j.at("network_fingerprint").get<std::string>()) != net.fingerprint()) {
      throw ConsistencyError("glm posterior was fitted with a different network");
    }
    approx.kind = parse_approx_kind(j.at("kind").get<std::string>());
    approx.prior_variance = j.at("prior_variance").get<double>();
    approx.fisher_source = parse_fisher_source(j.at("fisher_source").get<std::string>());
    approx.train_size = j.at("train_size").get<Index>();
    approx.laplace_rank = j.at("laplace_rank").get<Index>();
    approx.mean = vector_from(j.at("mean"));
    approx.raw_scale = vector_from(j.at("raw_scale"));
    approx.root = matrix_from_blob(j.at("root"));
    approx.basis = matrix_from_blob(j.at("basis"));
    model.include_network_output = j.at("include_network_output").get<bool>();
    model.prior_variance = approx.prior_variance;
  } catch (const json::exception& e) {
    throw InputError(std::string("glm posterior: ") + e.what());
  }
  if (approx.mean.size() != net.parameter_count()) {
    throw ConsistencyError("glm posterior: coefficient count does not match the network");
  }
  model.coefficients = approx.mean;

  const Matrix x = inputs_from_csv(read_file(opts.inputs), net.architecture().input_dim);
  Rng rng = Rng::stream(ctx.cfg.seed, "sampling");
  const ClassPrediction pred = predict_class(model, approx, x, ctx.cfg.glm.predict_mode, rng.next_u64());
  if (format == "csv") {
    write_output(common, ctx.csv_preamble() + class_predictions_to_csv(pred));
    return;
  }
  write_output(common, write_json({{"provenance", ctx.provenance()},
                                   {"labels", pred.labels},
                                   {"probabilities", matrix_rows(pred.probabilities)}}));
}

void cmd_sinusoid_exp(const CommonOptions& common) {
  const Context ctx = setup(common);
  const std::string format = output_format(common, "csv");
  require(common.out, "--out");
  const SinusoidExperimentResult res = run_sinusoid_experiment(sinusoid_experiment(ctx.cfg));
  spdlog::info("source training MSE {:.4g}; finite NTK beats no-retrain on {}/{} tasks and "
               "last-layer on {}/{}",
               res.source_train_mse, res.ntk_beats_no_retrain, res.tasks_evaluated,
               res.ntk_beats_last_layer, res.tasks_evaluated);
  if (format == "csv") {
    write_output(common, ctx.csv_preamble() + results_to_csv(res.rows, common.timings));
    return;
  }
  json out = results_json(ctx, res.rows, common.timings);
  out["summary"] = {{"source_train_mse", res.source_train_mse},
                    {"tasks_evaluated", res.tasks_evaluated},
                    {"ntk_beats_no_retrain", res.ntk_beats_no_retrain},
                    {"ntk_beats_last_layer", res.ntk_beats_last_layer}};
  write_output(common, write_json(out));
}

}  // namespace fntk::cli
