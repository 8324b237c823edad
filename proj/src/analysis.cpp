#include "fntk/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <Eigen/SVD>
#include <json.hpp>

#include "fntk/errors.hpp"
#include "fntk/hash.hpp"
#include "fntk/io.hpp"
#include "fntk/linalg.hpp"
#include "fntk/random.hpp"

namespace fntk {

double jacobian_similarity(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractViolation("jacobian_similarity: shapes " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + " differ");
  }
  if (!a.allFinite() || !b.allFinite()) {
    throw ContractViolation("jacobian_similarity: non-finite entries");
  }
  if (a.cwiseAbs().maxCoeff() == 0.0 || b.cwiseAbs().maxCoeff() == 0.0) {
    throw UndefinedSimilarity("jacobian_similarity: all-zero Jacobian");
  }
  // Work with whichever Gram is smaller: <A A^T, B B^T>_F = |A^T B|_F^2.
  double num, na, nb;
  if (a.rows() <= a.cols()) {
    const Matrix ga = a * a.transpose();
    const Matrix gb = b * b.transpose();
    num = (ga.array() * gb.array()).sum();
    na = ga.norm();
    nb = gb.norm();
  } else {
    num = (a.transpose() * b).squaredNorm();
    na = (a.transpose() * a).norm();
    nb = (b.transpose() * b).norm();
  }
  return std::clamp(num / (na * nb), 0.0, 1.0);
}

double jacobian_similarity(const JacobianOperator& a, const JacobianOperator& b,
                           std::size_t cap) {
  return jacobian_similarity(a.dense(cap), b.dense(cap));
}

Vector jacobian_spectrum(const JacobianOperator& jac, Index k, const SpectrumOptions& options) {
  const Index p = jac.parameter_count();
  const Index m = jac.output_count();
  const Index dim = std::min(p, m);
  if (k < 1 || k > dim) {
    throw ContractViolation("jacobian_spectrum: k = " + std::to_string(k) + " outside 1.." +
                            std::to_string(dim));
  }
  bool dense = options.method == SpectrumMethod::dense;
  if (options.method == SpectrumMethod::automatic) {
    dense = dim <= options.dense_max_dim &&
            static_cast<double>(p) * static_cast<double>(m) <= static_cast<double>(options.dense_cap);
  }
  if (dense) {
    const Matrix j = jac.dense(options.dense_cap);
    Eigen::BDCSVD<Matrix> svd(j);
    return svd.singularValues().head(k);
  }

  SymmetricLinearOperator gram;
  gram.dimension = dim;
  if (m <= p) {
    gram.apply = [&jac](const Vector& v) { return jac.jvp(jac.vjp(v)); };
  } else {
    gram.apply = [&jac](const Vector& v) { return jac.vjp(jac.jvp(v)); };
  }
  const Index rank =
      options.lanczos_rank > 0 ? std::min(options.lanczos_rank, dim) : std::min(dim, std::max(2 * k, k + 20));
  if (rank < k) throw ContractViolation("jacobian_spectrum: Lanczos rank below k");
  Rng rng = Rng::stream(options.seed, "probes");
  LanczosOptions lo;
  lo.restart_on_breakdown = true;
  const LanczosFactors f = lanczos_factorize(gram, rng.normal_vector(dim), rank, lo);
  const Vector ritz = ritz_values(f);
  if (ritz.size() < k) throw NumericBreakdown("jacobian_spectrum: Krylov space too small");
  Vector s(k);
  for (Index i = 0; i < k; ++i) s(i) = std::sqrt(std::max(0.0, ritz(ritz.size() - 1 - i)));
  return s;
}

OptimizerConfig SimilarityStudyConfig::default_training() {
  OptimizerConfig c;
  c.optimizer = OptimizerKind::adam;
  c.loss = LossKind::categorical_ce;
  c.learning_rate = 1e-2;
  c.batch_size = 32;
  c.epochs = 100;
  return c;
}

void SimilarityStudyConfig::validate() const {
  if (groups.empty()) throw ContractViolation("similarity study: no groups");
  if (models_per_group < 1) throw ContractViolation("similarity study: need one model per group");
  if (groups.size() * models_per_group < 2) {
    throw ContractViolation("similarity study: need at least two models");
  }
  for (const auto& g : groups) {
    if (g.distribution != 0 && g.distribution != 1) {
      throw ContractViolation("similarity study: distribution must be 0 or 1");
    }
    if (g.split < 0) throw ContractViolation("similarity study: negative split");
  }
  if (train_points < 1 || eval_points < 1) {
    throw ContractViolation("similarity study: need training and evaluation points");
  }
}

int similarity_label(int distribution, double x0, double x1) {
  if (distribution == 0) return x1 > 0.8 * std::sin(2.0 * x0) ? 1 : 0;
  return x0 * x0 + x1 * x1 > 1.4 ? 1 : 0;
}

TaskDataset similarity_dataset(int distribution, Index n, Rng& rng) {
  TaskDataset d;
  d.inputs.resize(n, 2);
  d.targets.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    const double x0 = rng.normal(), x1 = rng.normal();
    d.inputs(i, 0) = x0;
    d.inputs(i, 1) = x1;
    d.targets(i, 0) = similarity_label(distribution, x0, x1);
  }
  return d;
}

std::optional<PairStats> pair_stats(const std::vector<double>& values) {
  if (values.empty()) return std::nullopt;
  PairStats s;
  s.count = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.count);
  if (s.count >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.count - 1));
    s.min = *std::min_element(values.begin(), values.end());
    s.max = *std::max_element(values.begin(), values.end());
  }
  return s;
}

SimilarityReport task_similarity_study(const SimilarityStudyConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::stream(cfg.seed, "tasks");
  const int ref = cfg.groups.front().distribution;
  const TaskDataset eval = similarity_dataset(ref, cfg.eval_points, rng);
  std::map<std::pair<int, int>, TaskDataset> sets;
  for (const auto& g : cfg.groups) {
    const auto key = std::make_pair(g.distribution, g.split);
    if (!sets.count(key)) sets.emplace(key, similarity_dataset(g.distribution, cfg.train_points, rng));
  }
  const TaskDataset& ref_train = sets.at({ref, cfg.groups.front().split});

  MlpArchitecture arch;
  arch.input_dim = 2;
  arch.hidden_widths = cfg.hidden_widths;
  arch.output_dim = 2;
  arch.activation = cfg.activation;

  SimilarityReport report;
  report.dataset_id = "toy2d-seed" + std::to_string(cfg.seed);
  report.eval_points = cfg.eval_points;
  report.channels = arch.output_dim;
  report.seed = cfg.seed;

  std::vector<Matrix> jacobians;
  for (const auto& g : cfg.groups) {
    const TaskDataset& data = sets.at({g.distribution, g.split});
    for (std::size_t k = 0; k < cfg.models_per_group; ++k) {
      const std::uint64_t model_seed = splitmix64(cfg.seed * 1'000'003ULL + k);
      OptimizerConfig tc = cfg.training;
      tc.loss = LossKind::categorical_ce;
      tc.seed = model_seed;
      MlpNetwork net = train(MlpNetwork::initialize(arch, model_seed), data, tc).network;
      if (g.distribution != ref && cfg.realign_epochs > 0) {
        OptimizerConfig head = tc;
        head.last_layer_only = true;
        head.epochs = cfg.realign_epochs;
        net = train(net, ref_train, head).network;
      }
      jacobians.push_back(JacobianOperator(net, eval.inputs).dense(cfg.dense_cap));
      report.model_ids.push_back(g.name + "/" + std::to_string(k));
      report.model_groups.push_back(g.name);
      report.model_distributions.push_back(g.distribution);
      report.model_seeds.push_back(model_seed);
    }
  }

  const auto count = static_cast<Index>(jacobians.size());
  report.similarity.resize(count, count);
  std::vector<double> within, same, cross;
  for (Index i = 0; i < count; ++i) {
    report.similarity(i, i) = jacobian_similarity(jacobians[i], jacobians[i]);
    for (Index j = i + 1; j < count; ++j) {
      const double s = jacobian_similarity(jacobians[i], jacobians[j]);
      report.similarity(i, j) = report.similarity(j, i) = s;
      const auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
      if (report.model_groups[ui] == report.model_groups[uj]) {
        within.push_back(s);
      } else if (report.model_distributions[ui] == report.model_distributions[uj]) {
        same.push_back(s);
      } else {
        cross.push_back(s);
      }
    }
  }
  report.within_group = pair_stats(within);
  report.same_distribution = pair_stats(same);
  report.cross_distribution = pair_stats(cross);
  return report;
}

namespace {

nlohmann::json stats_json(const std::optional<PairStats>& s) {
  if (!s) return nullptr;
  nlohmann::json j = {{"count", s->count}, {"mean", s->mean}};
  if (s->stddev) {
    j["std"] = *s->stddev;
    j["min"] = *s->min;
    j["max"] = *s->max;
  }
  return j;
}

}  // namespace

std::string report_to_json(const SimilarityReport& report) {
  nlohmann::json j;
  j["format"] = "fntk-similarity-report";
  j["version"] = 1;
  j["dataset_id"] = report.dataset_id;
  j["eval_points"] = report.eval_points;
  j["channels"] = report.channels;
  j["seed"] = report.seed;
  j["models"] = nlohmann::json::array();
  for (std::size_t i = 0; i < report.model_ids.size(); ++i) {
    j["models"].push_back({{"id", report.model_ids[i]},
                           {"group", report.model_groups[i]},
                           {"distribution", report.model_distributions[i]},
                           {"seed", to_hex(report.model_seeds[i])}});
  }
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < report.similarity.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Index c = 0; c < report.similarity.cols(); ++c) r.push_back(report.similarity(i, c));
    rows.push_back(r);
  }
  j["similarity"] = rows;
  j["summary"] = {{"within_group", stats_json(report.within_group)},
                  {"same_distribution", stats_json(report.same_distribution)},
                  {"cross_distribution", stats_json(report.cross_distribution)}};
  return j.dump(2) + "\n";
}

std::string report_to_csv(const SimilarityReport& report) {
  std::string out = "model_a,model_b,similarity\n";
  for (Index i = 0; i < report.similarity.rows(); ++i)
    for (Index c = i; c < report.similarity.cols(); ++c) {
      out += report.model_ids[static_cast<std::size_t>(i)] + ',' +
             report.model_ids[static_cast<std::size_t>(c)] + ',' +
             format_double(report.similarity(i, c)) + '\n';
    }
  return out;
}

}  // namespace fntk
