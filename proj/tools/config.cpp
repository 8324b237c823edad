#include "config.hpp"

#include <filesystem>
#include <set>

#include "fntk/errors.hpp"
#include "fntk/fisher.hpp"
#include "fntk/hash.hpp"
#include "fntk/io.hpp"

namespace fntk::cli {

using nlohmann::json;

namespace {

// One JSON object of the config. Keys are consumed as they are read; finish()
// rejects anything left over.
class Block {
 public:
  Block(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InputError("config: '" + where() + "' must be an object");
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (const json* v = find(key)) out = convert<T>(*v, name(key));
  }

  template <class T>
  T convert(const json& v, const std::string& at) const {
    bool ok;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_same_v<T, std::string>) {
      ok = v.is_string();
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else if constexpr (std::is_unsigned_v<T>) {
      ok = v.is_number_unsigned();
    } else if constexpr (std::is_integral_v<T>) {
      ok = v.is_number_integer();
    } else {
      ok = v.is_array();
      if (ok) {
        T out;
        for (const auto& e : v) out.push_back(convert<typename T::value_type>(e, at + "[]"));
        return out;
      }
    }
    if (!ok) throw InputError("config: '" + at + "' has the wrong type");
    return v.get<T>();
  }

  void range(const std::string& key, double& lo, double& hi) {
    if (const json* v = find(key)) {
      const auto r = convert<std::vector<double>>(*v, name(key));
      if (r.size() != 2) throw InputError("config: '" + name(key) + "' must be [lo, hi]");
      lo = r[0];
      hi = r[1];
    }
  }

  template <class F>
  void parsed(const std::string& key, F&& apply) {
    if (const json* v = find(key)) {
      const auto s = convert<std::string>(*v, name(key));
      try {
        apply(s);
      } catch (const ContractViolation& e) {
        throw InputError("config: '" + name(key) + "': " + e.what());
      }
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw InputError("config: unknown key '" + name(it.key()) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_architecture(Block& b, MlpArchitecture& a) {
  b.get("input_dim", a.input_dim);
  b.get("hidden_widths", a.hidden_widths);
  b.get("output_dim", a.output_dim);
  b.parsed("activation", [&](const std::string& s) { a.activation = parse_activation(s); });
  b.get("heteroscedastic", a.heteroscedastic);
  b.get("use_bias", a.use_bias);
  b.finish();
}

void read_optimizer(Block& b, OptimizerConfig& o) {
  b.parsed("optimizer", [&](const std::string& s) { o.optimizer = parse_optimizer(s); });
  b.parsed("loss", [&](const std::string& s) { o.loss = parse_loss(s); });
  b.get("learning_rate", o.learning_rate);
  b.get("momentum", o.momentum);
  b.get("beta1", o.beta1);
  b.get("beta2", o.beta2);
  b.get("adam_epsilon", o.adam_epsilon);
  b.get("epochs", o.epochs);
  b.get("batch_size", o.batch_size);
  b.get("lr_decay_every", o.lr_decay_every);
  b.get("lr_decay_factor", o.lr_decay_factor);
  b.finish();
}

void read_gp(Block& b, GpBlock& g) {
  b.parsed("space", [&](const std::string& s) {
    if (s == "auto") {
      g.space.reset();
    } else {
      g.space = parse_space(s);
    }
  });
  b.parsed("mean", [&](const std::string& s) { g.mean = parse_mean_kind(s); });
  if (const json* v = b.find("noise_variance")) {
    if (v->is_string()) {
      if (v->get<std::string>() != "source_mse") {
        throw InputError("config: 'gp.noise_variance' must be a number or \"source_mse\"");
      }
      g.noise_variance.reset();
    } else {
      g.noise_variance = b.convert<double>(*v, "gp.noise_variance");
    }
  }
  b.get("rank", g.rank);
  b.get("cg_tol", g.cg_tol);
  b.get("cg_max_iter", g.cg_max_iter);
  b.get("fit_residual_tol", g.fit_residual_tol);
  b.get("baselines", g.baselines);
  if (const json* v = b.find("last_layer_epochs")) {
    if (v->is_null()) {
      g.last_layer_epochs.reset();
    } else {
      g.last_layer_epochs = b.convert<std::size_t>(*v, "gp.last_layer_epochs");
    }
  }
  b.finish();
}

void read_fvp(Block& b, FvpBlock& f) {
  b.get("epsilons", f.epsilons);
  b.get("probes", f.probes);
  b.get("likelihood", f.likelihood);
  b.get("noise_variance", f.noise_variance);
  b.get("num_inputs", f.num_inputs);
  b.get("inputs", f.inputs);
  b.finish();
}

void read_tasks(Block& b, TaskBlock& t) {
  b.get("generator", t.generator);
  SinusoidTaskSpec& s = t.sinusoid;
  b.range("amplitude", s.amplitude_lo, s.amplitude_hi);
  b.range("frequency", s.frequency_lo, s.frequency_hi);
  b.range("phase", s.phase_lo, s.phase_hi);
  b.range("x_range", s.x_lo, s.x_hi);
  b.get("noise_scale", s.noise_scale);
  b.get("noise_free", s.noise_free);
  b.get("source_points", t.source_points);
  b.get("num_tasks", t.num_tasks);
  b.get("context_points", t.context_points);
  b.get("eval_points", t.eval_points);
  b.get("train", t.train);
  if (const json* v = b.find("files")) {
    if (!v->is_array()) throw InputError("config: 'tasks.files' must be an array");
    t.files.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      Block f((*v)[i], "tasks.files[" + std::to_string(i) + "]");
      TaskFiles tf;
      f.get("context", tf.context);
      f.get("eval", tf.eval);
      f.finish();
      if (tf.context.empty()) {
        throw InputError("config: '" + f.name("context") + "' is required");
      }
      t.files.push_back(tf);
    }
  }
  b.finish();
}

void read_similarity(Block& b, SimilarityBlock& s) {
  if (const json* v = b.find("groups")) {
    if (!v->is_array()) throw InputError("config: 'similarity.groups' must be an array");
    s.groups.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      Block g((*v)[i], "similarity.groups[" + std::to_string(i) + "]");
      SimilarityGroup grp;
      g.get("name", grp.name);
      g.get("distribution", grp.distribution);
      g.get("split", grp.split);
      g.finish();
      s.groups.push_back(grp);
    }
  }
  b.get("models_per_group", s.models_per_group);
  b.get("hidden_widths", s.hidden_widths);
  b.get("train_points", s.train_points);
  b.get("eval_points", s.eval_points);
  b.get("epochs", s.epochs);
  b.get("learning_rate", s.learning_rate);
  b.get("batch_size", s.batch_size);
  b.get("realign_epochs", s.realign_epochs);
  b.finish();
}

std::string_view predict_mode_name(PredictMode m) {
  return m == PredictMode::mean ? "mean" : "single_sample";
}

void read_glm(Block& b, GlmBlock& g) {
  b.parsed("approx", [&](const std::string& s) { g.approx = parse_approx_kind(s); });
  b.get("prior_variance", g.prior_variance);
  b.get("include_network_output", g.include_network_output);
  b.get("learning_rate", g.learning_rate);
  b.get("epochs", g.epochs);
  b.get("batch_size", g.batch_size);
  b.get("laplace_rank", g.laplace_rank);
  b.parsed("fisher_source", [&](const std::string& s) { g.fisher_source = parse_fisher_source(s); });
  b.parsed("predict_mode", [&](const std::string& s) {
    if (s == "mean") {
      g.predict_mode = PredictMode::mean;
    } else if (s == "single_sample") {
      g.predict_mode = PredictMode::single_sample;
    } else {
      throw ContractViolation("unknown predict mode '" + s + "'");
    }
  });
  b.get("train", g.train);
  b.finish();
}

void validate(const ExperimentConfig& c) {
  c.architecture.validate();
  const OptimizerConfig& o = c.optimizer;
  if (!(o.learning_rate > 0.0) || o.epochs < 1 || o.batch_size < 1) {
    throw ContractViolation("config: optimizer needs learning_rate > 0, epochs >= 1, batch_size >= 1");
  }
  if (c.gp.noise_variance && !(*c.gp.noise_variance > 0.0)) {
    throw ContractViolation("config: gp.noise_variance must be positive");
  }
  if (c.gp.rank < 0) throw ContractViolation("config: gp.rank must be >= 0");
  if (c.fvp.epsilons.empty()) throw ContractViolation("config: fvp.epsilons is empty");
  for (double e : c.fvp.epsilons) FvpConfig{e}.validate();
  if (c.fvp.probes < 1) throw ContractViolation("config: fvp.probes must be >= 1");
  if (c.fvp.likelihood != "gaussian" && c.fvp.likelihood != "categorical") {
    throw ContractViolation("config: fvp.likelihood must be gaussian or categorical");
  }
  if (c.fvp.num_inputs < 1) throw ContractViolation("config: fvp.num_inputs must be >= 1");
  if (c.tasks.generator != "sinusoid" && c.tasks.generator != "files") {
    throw ContractViolation("config: tasks.generator must be sinusoid or files");
  }
  c.tasks.sinusoid.validate();
  if (!(c.glm.prior_variance > 0.0)) throw ContractViolation("config: glm.prior_variance must be positive");
}

json range_json(double lo, double hi) { return json::array({lo, hi}); }

}  // namespace

GpOptions GpBlock::options() const {
  GpOptions o;
  o.rank = rank;
  o.cg.tol = cg_tol;
  o.cg.max_iter = cg_max_iter;
  o.fit_residual_tol = fit_residual_tol;
  return o;
}

MlpArchitecture ExperimentConfig::default_architecture() {
  MlpArchitecture a;
  a.input_dim = 1;
  a.hidden_widths = {40, 40};
  a.output_dim = 1;
  a.activation = Activation::tanh;
  return a;
}

ExperimentConfig parse_config(std::string_view text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError("config: parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  ExperimentConfig c;
  c.base_dir = base_dir;
  Block root(j, "");
  const json* version = root.find("version");
  if (!version) throw InputError("config: missing 'version'");
  c.version = root.convert<int>(*version, "version");
  if (c.version != kConfigVersion) {
    throw InputError("config: unsupported version " + std::to_string(c.version));
  }
  root.get("seed", c.seed);
  if (const json* v = root.find("architecture")) {
    Block b(*v, "architecture");
    read_architecture(b, c.architecture);
  }
  if (const json* v = root.find("optimizer")) {
    Block b(*v, "optimizer");
    read_optimizer(b, c.optimizer);
  }
  if (const json* v = root.find("gp")) {
    Block b(*v, "gp");
    read_gp(b, c.gp);
  }
  if (const json* v = root.find("fvp")) {
    Block b(*v, "fvp");
    read_fvp(b, c.fvp);
  }
  if (const json* v = root.find("tasks")) {
    Block b(*v, "tasks");
    read_tasks(b, c.tasks);
  }
  if (const json* v = root.find("similarity")) {
    Block b(*v, "similarity");
    read_similarity(b, c.similarity);
  }
  if (const json* v = root.find("glm")) {
    Block b(*v, "glm");
    read_glm(b, c.glm);
  }
  root.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  const std::string dir = std::filesystem::path(path).parent_path().string();
  return parse_config(read_file(path), dir);
}

std::string resolve_path(const ExperimentConfig& cfg, const std::string& path) {
  if (path.empty() || cfg.base_dir.empty() || std::filesystem::path(path).is_absolute()) return path;
  return (std::filesystem::path(cfg.base_dir) / path).string();
}

json config_to_json(const ExperimentConfig& c) {
  const MlpArchitecture& a = c.architecture;
  const OptimizerConfig& o = c.optimizer;
  const SinusoidTaskSpec& s = c.tasks.sinusoid;
  json files = json::array();
  for (const auto& f : c.tasks.files) files.push_back({{"context", f.context}, {"eval", f.eval}});
  json groups = json::array();
  for (const auto& g : c.similarity.groups) {
    groups.push_back({{"name", g.name}, {"distribution", g.distribution}, {"split", g.split}});
  }
  json gp_noise = c.gp.noise_variance ? json(*c.gp.noise_variance) : json("source_mse");
  json ll_epochs = c.gp.last_layer_epochs ? json(*c.gp.last_layer_epochs) : json(nullptr);
  return {
      {"version", c.version},
      {"seed", c.seed},
      {"architecture",
       {{"input_dim", a.input_dim},
        {"hidden_widths", a.hidden_widths},
        {"output_dim", a.output_dim},
        {"activation", to_string(a.activation)},
        {"heteroscedastic", a.heteroscedastic},
        {"use_bias", a.use_bias}}},
      {"optimizer",
       {{"optimizer", to_string(o.optimizer)},
        {"loss", to_string(o.loss)},
        {"learning_rate", o.learning_rate},
        {"momentum", o.momentum},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"adam_epsilon", o.adam_epsilon},
        {"epochs", o.epochs},
        {"batch_size", o.batch_size},
        {"lr_decay_every", o.lr_decay_every},
        {"lr_decay_factor", o.lr_decay_factor}}},
      {"gp",
       {{"space", c.gp.space ? std::string(to_string(*c.gp.space)) : "auto"},
        {"mean", to_string(c.gp.mean)},
        {"noise_variance", gp_noise},
        {"rank", c.gp.rank},
        {"cg_tol", c.gp.cg_tol},
        {"cg_max_iter", c.gp.cg_max_iter},
        {"fit_residual_tol", c.gp.fit_residual_tol},
        {"baselines", c.gp.baselines},
        {"last_layer_epochs", ll_epochs}}},
      {"fvp",
       {{"epsilons", c.fvp.epsilons},
        {"probes", c.fvp.probes},
        {"likelihood", c.fvp.likelihood},
        {"noise_variance", c.fvp.noise_variance},
        {"num_inputs", c.fvp.num_inputs},
        {"inputs", c.fvp.inputs}}},
      {"tasks",
       {{"generator", c.tasks.generator},
        {"amplitude", range_json(s.amplitude_lo, s.amplitude_hi)},
        {"frequency", range_json(s.frequency_lo, s.frequency_hi)},
        {"phase", range_json(s.phase_lo, s.phase_hi)},
        {"x_range", range_json(s.x_lo, s.x_hi)},
        {"noise_scale", s.noise_scale},
        {"noise_free", s.noise_free},
        {"source_points", c.tasks.source_points},
        {"num_tasks", c.tasks.num_tasks},
        {"context_points", c.tasks.context_points},
        {"eval_points", c.tasks.eval_points},
        {"train", c.tasks.train},
        {"files", files}}},
      {"similarity",
       {{"groups", groups},
        {"models_per_group", c.similarity.models_per_group},
        {"hidden_widths", c.similarity.hidden_widths},
        {"train_points", c.similarity.train_points},
        {"eval_points", c.similarity.eval_points},
        {"epochs", c.similarity.epochs},
        {"learning_rate", c.similarity.learning_rate},
        {"batch_size", c.similarity.batch_size},
        {"realign_epochs", c.similarity.realign_epochs}}},
      {"glm",
       {{"approx", to_string(c.glm.approx)},
        {"prior_variance", c.glm.prior_variance},
        {"include_network_output", c.glm.include_network_output},
        {"learning_rate", c.glm.learning_rate},
        {"epochs", c.glm.epochs},
        {"batch_size", c.glm.batch_size},
        {"laplace_rank", c.glm.laplace_rank},
        {"fisher_source", to_string(c.glm.fisher_source)},
        {"predict_mode", predict_mode_name(c.glm.predict_mode)},
        {"train", c.glm.train}}},
  };
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(config_to_json(cfg).dump()); }

SinusoidExperimentConfig sinusoid_experiment(const ExperimentConfig& c) {
  const MlpArchitecture& a = c.architecture;
  if (a.input_dim != 1 || a.output_dim != 1 || a.heteroscedastic) {
    throw ContractViolation("sinusoid experiment: architecture must be 1-input, 1-output, homoscedastic");
  }
  SinusoidExperimentConfig s;
  s.seed = c.seed;
  s.tasks = c.tasks.sinusoid;
  s.source_points = c.tasks.source_points;
  s.num_tasks = c.tasks.num_tasks;
  s.context_points = c.tasks.context_points;
  s.eval_points = c.tasks.eval_points;
  s.hidden_widths = a.hidden_widths;
  s.activation = a.activation;
  s.source_training = c.optimizer;
  s.last_layer_epochs = c.gp.last_layer_epochs;
  s.adapt.mean = c.gp.mean;
  s.adapt.space = c.gp.space;
  s.adapt.noise_variance = c.gp.noise_variance;
  s.adapt.gp = c.gp.options();
  if (!(s.architecture() == a)) {
    throw ContractViolation("sinusoid experiment: architecture must use biases");
  }
  return s;
}

SimilarityStudyConfig similarity_study(const ExperimentConfig& c) {
  SimilarityStudyConfig s;
  s.seed = c.seed;
  s.groups = c.similarity.groups;
  s.models_per_group = c.similarity.models_per_group;
  s.hidden_widths = c.similarity.hidden_widths;
  s.activation = c.architecture.activation;
  s.train_points = c.similarity.train_points;
  s.eval_points = c.similarity.eval_points;
  s.training.epochs = c.similarity.epochs;
  s.training.learning_rate = c.similarity.learning_rate;
  s.training.batch_size = c.similarity.batch_size;
  s.realign_epochs = c.similarity.realign_epochs;
  return s;
}

GlmFitConfig glm_fit(const ExperimentConfig& c) {
  GlmFitConfig g;
  g.learning_rate = c.glm.learning_rate;
  g.epochs = c.glm.epochs;
  g.batch_size = c.glm.batch_size;
  g.seed = c.seed;
  g.laplace_rank = c.glm.laplace_rank;
  g.fisher_source = c.glm.fisher_source;
  return g;
}

}  // namespace fntk::cli
