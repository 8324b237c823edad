#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "fntk/adapt.hpp"
#include "fntk/errors.hpp"
#include "fntk/random.hpp"
#include "test_util.hpp"

using namespace fntk;

namespace {

MlpArchitecture tanh_arch(std::vector<Index> widths) {
  MlpArchitecture a;
  a.input_dim = 1;
  a.hidden_widths = std::move(widths);
  a.output_dim = 1;
  a.activation = Activation::tanh;
  return a;
}

SinusoidTask one_task(std::uint64_t seed, Index points, double a = 1.5, double w = 1.0,
                      double b = 0.3) {
  SinusoidTaskSpec spec;
  spec.points = points;
  Rng rng(seed);
  return make_sinusoid_task(spec, a, w, b, rng);
}

MlpNetwork quick_source(const TaskDataset& data, std::uint64_t seed) {
  OptimizerConfig c;
  c.optimizer = OptimizerKind::adam;
  c.learning_rate = 1e-2;
  c.batch_size = 16;
  c.epochs = 200;
  c.seed = seed;
  return train(MlpNetwork::initialize(tanh_arch({16, 16}), seed), data, c).network;
}

bool same_metrics(const AdaptationRun& a, const AdaptationRun& b) {
  if (a.tasks.size() != b.tasks.size()) return false;
  for (std::size_t k = 0; k < a.tasks.size(); ++k) {
    if (a.tasks[k].status != b.tasks[k].status) return false;
    if (a.tasks[k].metrics.mse != b.tasks[k].metrics.mse) return false;
    if (a.tasks[k].metrics.nll != b.tasks[k].metrics.nll) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("noise-free sinusoid passes through zero") {
  SinusoidTaskSpec spec;
  spec.noise_free = true;
  spec.points = 1;
  spec.x_lo = 0.0;
  spec.x_hi = 1e-300;
  Rng rng(1);
  const SinusoidTask t = make_sinusoid_task(spec, 1.0, 1.0, 0.0, rng);
  CHECK(t.data.inputs(0, 0) == doctest::Approx(0.0));
  CHECK(std::abs(t.data.targets(0, 0)) < 1e-12);
}

TEST_CASE("sampled sinusoid tasks respect their supports and amplitude bound") {
  SinusoidTaskSpec spec;
  spec.seed = 7;
  spec.points = 50;
  const auto tasks = sample_sinusoid_tasks(spec, 100);
  REQUIRE(tasks.size() == 100);
  for (const auto& t : tasks) {
    CHECK(t.amplitude >= 0.1);
    CHECK(t.amplitude <= 5.0);
    CHECK(t.frequency >= 0.0);
    CHECK(t.frequency <= 2.0 * 3.141592653589793);
    const double bound = t.amplitude + 5.0 * std::sqrt(0.01 * t.amplitude);
    CHECK(t.data.targets.cwiseAbs().maxCoeff() <= bound);
    CHECK(t.data.inputs.minCoeff() >= -5.0);
    CHECK(t.data.inputs.maxCoeff() < 5.0);
    // Residual variance around the clean curve matches 0.01 A.
  }
  double z2 = 0.0;
  Index count = 0;
  for (const auto& t : tasks)
    for (Index i = 0; i < t.data.size(); ++i) {
      const double clean = t.amplitude * std::sin(t.frequency * t.data.inputs(i, 0) + t.phase);
      const double r = t.data.targets(i, 0) - clean;
      z2 += r * r / (0.01 * t.amplitude);
      ++count;
    }
  CHECK(z2 / static_cast<double>(count) == doctest::Approx(1.0).epsilon(0.05));

  const auto again = sample_sinusoid_tasks(spec, 100);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    CHECK(tasks[k].data.inputs == again[k].data.inputs);
    CHECK(tasks[k].data.targets == again[k].data.targets);
  }
  spec.seed = 8;
  CHECK(sample_sinusoid_tasks(spec, 1)[0].data.targets != tasks[0].data.targets);
  CHECK_THROWS_AS(sample_sinusoid_tasks(spec, 0), ContractViolation);
}

TEST_CASE("split_task partitions indices") {
  TaskDataset d;
  d.inputs.resize(30, 1);
  d.targets.resize(30, 1);
  for (Index i = 0; i < 30; ++i) d.inputs(i, 0) = d.targets(i, 0) = static_cast<double>(i);
  d.noise_variance = 0.25;
  Rng rng(3);
  const AdaptTask t = split_task(d, 12, rng);
  CHECK(t.context.size() == 12);
  CHECK(t.eval.size() == 18);
  CHECK(t.context.noise_variance == 0.25);
  std::set<double> seen;
  for (Index i = 0; i < 12; ++i) seen.insert(t.context.inputs(i, 0));
  for (Index i = 0; i < 18; ++i) CHECK(seen.insert(t.eval.inputs(i, 0)).second);
  CHECK(seen.size() == 30);
  CHECK(t.context.inputs == t.context.targets);

  Rng bad(0);
  CHECK_THROWS_AS(split_task(d, 31, bad), ContractViolation);
  CHECK_THROWS_AS(split_task(d, -1, bad), ContractViolation);
}

TEST_CASE("gaussian_nll matches the closed form") {
  Matrix m(2, 1), v(2, 1), y(2, 1);
  m << 0.0, 1.0;
  v << 1.0, 4.0;
  y << 1.0, 1.0;
  const double want = 0.5 * ((std::log(2 * M_PI) + 1.0) + (std::log(2 * M_PI * 4.0))) / 2.0;
  CHECK(gaussian_nll(m, v, y) == doctest::Approx(want).epsilon(1e-14));
  CHECK_THROWS_AS(gaussian_nll(m, v, Matrix(3, 1)), ContractViolation);
}

TEST_CASE("adaptation on the source task cannot do worse than the source") {
  const SinusoidTask t = one_task(11, 40);
  const MlpNetwork src = quick_source(t.data, 11);
  const double source_mse = mean_squared_error(src.forward(t.data.inputs), t.data.targets);
  TaskDataset ctx = t.data;
  ctx.noise_variance = std::max(source_mse, 1e-8);
  for (auto mean : {MeanFunctionKind::network_output, MeanFunctionKind::linearized_nn}) {
    AdaptConfig cfg;
    cfg.mean = mean;
    const auto run = run_adaptation(src, {AdaptTask{ctx, t.data}}, cfg);
    REQUIRE(run.tasks[0].status == TaskStatus::ok);
    CHECK(*run.tasks[0].metrics.mse <= source_mse + 1e-6);
  }
}

TEST_CASE("run_adaptation statuses, determinism and source immutability") {
  const SinusoidTask src_task = one_task(5, 40);
  const MlpNetwork src = quick_source(src_task.data, 5);
  const std::uint64_t fp = src.fingerprint();

  std::vector<AdaptTask> tasks;
  Rng rng(9);
  for (int k = 0; k < 3; ++k) {
    const SinusoidTask t = one_task(20 + k, 30, 1.0 + k, 0.5 + 0.4 * k, 0.1 * k);
    tasks.push_back(split_task(t.data, 8, rng));
  }
  TaskDataset no_eval_ctx = tasks[0].context;
  TaskDataset empty_eval = tasks[0].eval.subset({});
  tasks.push_back({no_eval_ctx, empty_eval});

  AdaptConfig cfg;
  cfg.noise_variance = 0.05;
  cfg.keep_posteriors = true;
  const auto a = run_adaptation(src, tasks, cfg);
  const auto b = run_adaptation(src, tasks, cfg);
  CHECK(same_metrics(a, b));
  CHECK(a.source_fingerprint == fp);
  CHECK(src.fingerprint() == fp);
  REQUIRE(a.tasks.size() == 4);
  for (int k = 0; k < 3; ++k) {
    CHECK(a.tasks[k].status == TaskStatus::ok);
    CHECK(a.tasks[k].context_size == 8);
    REQUIRE(a.tasks[k].posterior.has_value());
    CHECK(a.tasks[k].posterior->network_fingerprint == fp);
  }
  CHECK(a.tasks[3].status == TaskStatus::no_eval);
  CHECK_FALSE(a.tasks[3].metrics.mse.has_value());
  CHECK_FALSE(a.tasks[3].metrics.nll.has_value());
  CHECK(to_string(TaskStatus::no_eval) == "no-eval");

  std::vector<AdaptTask> bad{{tasks[0].context.subset({}), tasks[0].eval}};
  CHECK_THROWS_AS(run_adaptation(src, bad, cfg), ContractViolation);
}

TEST_CASE("context interpolation at tiny noise") {
  const MlpNetwork net = MlpNetwork::initialize(tanh_arch({40, 40}), 2);
  TaskDataset ctx;
  ctx.inputs.resize(6, 1);
  ctx.targets.resize(6, 1);
  for (Index i = 0; i < 6; ++i) {
    ctx.inputs(i, 0) = -4.0 + 1.6 * static_cast<double>(i);
    ctx.targets(i, 0) = 2.0 * std::sin(1.3 * ctx.inputs(i, 0) + 0.4);
  }
  ctx.noise_variance = 1e-8;
  const Matrix k = kernel_matrix(net, ctx.inputs, ctx.inputs);
  REQUIRE(Eigen::SelfAdjointEigenSolver<Matrix>(k).eigenvalues()(0) > 1e-4);

  AdaptConfig cfg;
  cfg.keep_posteriors = true;
  for (auto mean : {MeanFunctionKind::zero, MeanFunctionKind::network_output}) {
    cfg.mean = mean;
    const auto run = run_adaptation(net, {AdaptTask{ctx, ctx}}, cfg);
    REQUIRE(run.tasks[0].status == TaskStatus::ok);
    const Prediction p = predict(*run.tasks[0].posterior, net, ctx.inputs);
    CHECK((p.mean - ctx.targets).cwiseAbs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("no-retrain baseline") {
  const SinusoidTask t = one_task(4, 30);
  const MlpNetwork src = quick_source(t.data, 4);
  const Metrics m = baseline_no_retrain(src, t.data, 0.1);
  CHECK(*m.mse == mean_squared_error(src.forward(t.data.inputs), t.data.targets));
  CHECK(*m.nll == doctest::Approx(gaussian_nll(src.forward(t.data.inputs),
                                               Matrix::Constant(30, 1, 0.1), t.data.targets)));

  const MlpArchitecture arch = tanh_arch({5});
  const MlpNetwork zero = MlpNetwork::initialize(arch, 0).with_parameters(
      Vector::Zero(arch.parameter_count()));
  TaskDataset z;
  z.inputs = Matrix::Random(7, 1);
  z.targets = Matrix::Zero(7, 1);
  CHECK(*baseline_no_retrain(zero, z, 1.0).mse == 0.0);
  CHECK_FALSE(baseline_no_retrain(zero, z.subset({}), 1.0).mse.has_value());
}

TEST_CASE("last-layer baseline freezes features") {
  const SinusoidTask t = one_task(6, 50);
  const MlpNetwork src = quick_source(t.data, 6);
  OptimizerConfig c;
  c.epochs = 200;
  c.batch_size = 5;
  const LastLayerResult r = baseline_last_layer(src, t.data, t.data, c, 0.1);

  Matrix probe(3, 1);
  probe << -4.0, 0.1, 3.3;
  CHECK(r.network.features(probe) == src.features(probe));
  const Index head = src.architecture().layers().back().weight_offset;
  CHECK(r.network.theta().head(head) == src.theta().head(head));
  CHECK(r.network.theta() != src.theta());
  CHECK(*r.metrics.mse <= *baseline_no_retrain(src, t.data, 0.1).mse + 1e-8);
}

TEST_CASE("last-layer baseline matches least squares on frozen features") {
  Rng rng(6);
  TaskDataset d;
  d.inputs.resize(100, 3);
  d.targets.resize(100, 1);
  for (Index i = 0; i < 100; ++i) {
    for (Index j = 0; j < 3; ++j) d.inputs(i, j) = rng.normal();
    d.targets(i, 0) = std::sin(d.inputs(i, 0)) + 0.5 * d.inputs(i, 1) * d.inputs(i, 2) +
                      0.1 * rng.normal();
  }
  MlpArchitecture arch = tanh_arch({6});
  arch.input_dim = 3;
  const MlpNetwork src = MlpNetwork::initialize(arch, 6);

  const Matrix f = src.features(d.inputs);
  Matrix design(f.rows(), f.cols() + 1);
  design << f, Matrix::Ones(f.rows(), 1);
  const Vector sv = Eigen::JacobiSVD<Matrix>(design).singularValues();
  REQUIRE(sv(0) / sv(sv.size() - 1) < 1e3);
  const Vector ls = design.colPivHouseholderQr().solve(d.targets.col(0));

  OptimizerConfig c;
  c.optimizer = OptimizerKind::adam;
  c.learning_rate = 1e-2;
  c.batch_size = 100;
  c.epochs = 20000;
  const LastLayerResult r = baseline_last_layer(src, d, d, c, 0.1);
  CHECK(testing::rel_err(Vector(r.network.theta().tail(f.cols() + 1)), ls) < 1e-3);
}

TEST_CASE("results csv layout") {
  std::vector<ResultRow> rows{{0, "finite_ntk", 10, 0.5, std::nullopt, 12.0},
                              {1, "no_retrain", 10, 0.25, 1.5, 3.0}};
  CHECK(results_to_csv(rows) ==
        "task_id,method,context_size,mse,nll,wall_ms\n0,finite_ntk,10,0.5,,\n"
        "1,no_retrain,10,0.25,1.5,\n");
  CHECK(results_to_csv(rows, true).find(",12\n") != std::string::npos);
}

TEST_CASE("small sinusoid experiment is well formed and deterministic") {
  SinusoidExperimentConfig cfg;
  cfg.seed = 1;
  cfg.num_tasks = 3;
  cfg.source_training.epochs = 50;
  cfg.last_layer_epochs = 20;
  const auto a = run_sinusoid_experiment(cfg);
  const auto b = run_sinusoid_experiment(cfg);
  REQUIRE(a.rows.size() == 9);
  for (const char* m : {"finite_ntk", "no_retrain", "last_layer"}) {
    CHECK(std::count_if(a.rows.begin(), a.rows.end(),
                        [&](const ResultRow& r) { return r.method == m; }) == 3);
  }
  CHECK(results_to_csv(a.rows) == results_to_csv(b.rows));
  CHECK(a.tasks_evaluated == 3);
  CHECK(a.source_train_mse > 0.0);

  cfg.context_points = 0;
  CHECK_THROWS_AS(run_sinusoid_experiment(cfg), ContractViolation);
}

TEST_CASE("heteroscedastic benchmark") {
  CHECK(hetero_target_surface(0.0, 0.0) == doctest::Approx(0.3));
  CHECK(hetero_source_surface(0.0, 1.0) == 0.0);

  std::size_t steps = 0, monotone = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    HeteroBenchConfig cfg;
    cfg.seed = seed;
    const auto rows = heteroscedastic_adaptation_benchmark(cfg);
    std::vector<double> ntk, none;
    for (const auto& r : rows) {
      if (r.method == "finite_ntk") ntk.push_back(*r.mse);
      if (r.method == "no_retrain") none.push_back(*r.mse);
    }
    REQUIRE(ntk.size() == cfg.context_sizes.size());
    CHECK(ntk[0] == doctest::Approx(none[0]).epsilon(1e-12));
    for (std::size_t k = 1; k < ntk.size(); ++k) {
      ++steps;
      if (ntk[k] <= ntk[k - 1]) ++monotone;
    }
    if (seed == 0) CHECK(results_to_csv(rows) == results_to_csv(heteroscedastic_adaptation_benchmark(cfg)));
  }
  MESSAGE("non-increasing steps: " << monotone << "/" << steps);
  CHECK(static_cast<double>(monotone) >= 0.8 * static_cast<double>(steps));

  HeteroBenchConfig bad;
  bad.context_sizes = {0, 500};
  CHECK_THROWS_AS(heteroscedastic_adaptation_benchmark(bad), ContractViolation);
}
