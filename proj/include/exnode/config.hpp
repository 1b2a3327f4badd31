#pragma once

// Run configuration: strict JSON with sections task, output, model, solver,
// data and optim. Unknown keys are rejected; every default that gets applied is
// written into the resolved copy stored with the run.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "exnode/classifier.hpp"
#include "exnode/layers.hpp"
#include "exnode/ode.hpp"
#include "exnode/set_cnf.hpp"
#include "exnode/synth.hpp"
#include "exnode/tvae.hpp"

namespace exnode::config {

using Json = nlohmann::json;
using ConfigError = ode::ConfigError;

/// Strict view of one JSON object. Reads record resolved values into `out`.
class Reader {
 public:
  Reader(const Json& j, std::string path, Json* out) : j_(j), path_(std::move(path)), out_(out) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
    if (!out_->is_object()) *out_ = Json::object();
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, const T& def) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      (*out_)[key] = def;
      return def;
    }
    T v = convert<T>(j_.at(key), where(key));
    (*out_)[key] = v;
    return v;
  }

  template <class T>
  T need(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where(key) + " is required");
    seen_.insert(key);
    T v = convert<T>(j_.at(key), where(key));
    (*out_)[key] = v;
    return v;
  }

  Reader child(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where(key) + " is required");
    seen_.insert(key);
    return Reader(j_.at(key), where(key), &(*out_)[key]);
  }

  /// Child object that may be absent; absent reads as {}.
  Reader optional_child(const std::string& key) {
    seen_.insert(key);
    static const Json empty = Json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, where(key), &(*out_)[key]);
  }

  /// Stores a resolved value computed by the caller.
  void record(const std::string& key, Json v) {
    seen_.insert(key);
    (*out_)[key] = std::move(v);
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where(k) + ": unknown key");
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  template <class T>
  static T convert(const Json& v, const std::string& w) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(w + ": expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(w + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (v.get<long long>() < 0) throw ConfigError(w + ": must not be negative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(w + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(w + ": expected a string");
    } else {
      if (!v.is_array()) throw ConfigError(w + ": expected an array");
      try {
        return v.get<T>();
      } catch (const Json::exception&) {
        throw ConfigError(w + ": array has entries of the wrong type");
      }
    }
    return v.get<T>();
  }

  const Json& j_;
  std::string path_;
  Json* out_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

// ---- shared sections -------------------------------------------------------------

inline ode::SolverConfig parse_solver(Reader r, const ode::SolverConfig& def) {
  ode::SolverConfig c;
  const std::string method = r.get<std::string>("method", ode::method_name(def.method));
  require(method == "rk4" || method == "dopri5",
          r.where("method") + ": unknown solver method '" + method + "' (expected rk4 or dopri5)");
  c.method = ode::parse_method(method);
  if (c.method == ode::Method::Rk4) {
    c.steps = r.get<int>("steps", def.method == ode::Method::Rk4 ? def.steps : 8);
  } else {
    c.rtol = r.get<double>("rtol", def.rtol);
    c.atol = r.get<double>("atol", def.atol);
    c.max_steps = r.get<long>("max_steps", def.max_steps);
  }
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(r.where("") + ": " + e.what());
  }
  return c;
}

inline nn::LayerSpec parse_layer(Reader r, std::size_t def_out) {
  nn::LayerSpec s;
  const std::string kind = r.get<std::string>("kind", "deepset");
  if (kind == "deepset")
    s.kind = nn::LayerSpec::Kind::DeepSet;
  else if (kind == "attention")
    s.kind = nn::LayerSpec::Kind::Attention;
  else if (kind == "concatsquash")
    s.kind = nn::LayerSpec::Kind::ConcatSquash;
  else
    throw ConfigError(r.where("kind") + ": unknown layer kind '" + kind + "' (expected deepset, attention or concatsquash)");
  s.out = r.get<std::size_t>("out", def_out);
  require(s.out > 0, r.where("out") + ": must be positive");
  const std::string pool = r.get<std::string>("pool", "mean");
  require(pool == "mean" || pool == "max", r.where("pool") + ": expected mean or max");
  s.pool = pool == "mean" ? nn::Pool::Mean : nn::Pool::Max;
  const std::string act = r.get<std::string>("act", "tanh");
  require(act == "tanh" || act == "identity", r.where("act") + ": expected tanh or identity");
  s.act = act == "tanh" ? nn::Activation::Tanh : nn::Activation::Identity;
  if (s.kind == nn::LayerSpec::Kind::Attention) {
    s.hidden = r.get<std::size_t>("hidden", s.out);
    s.heads = r.get<std::size_t>("heads", 1);
    require(s.heads > 0 && s.hidden % s.heads == 0, r.where("heads") + ": must divide hidden");
  }
  r.finish();
  return s;
}

inline std::vector<nn::LayerSpec> parse_layers(Reader& parent, const std::string& key,
                                               const std::vector<nn::LayerSpec>& def) {
  if (!parent.has(key)) {
    Json arr = Json::array();
    std::vector<nn::LayerSpec> out;
    for (std::size_t i = 0; i < def.size(); ++i) {
      Json raw{{"kind", def[i].kind == nn::LayerSpec::Kind::DeepSet     ? "deepset"
                        : def[i].kind == nn::LayerSpec::Kind::Attention ? "attention"
                                                                        : "concatsquash"},
               {"out", def[i].out}};
      Json res;
      out.push_back(parse_layer(Reader(raw, parent.where(key) + "[" + std::to_string(i) + "]", &res), def[i].out));
      arr.push_back(res);
    }
    parent.record(key, arr);
    return out;
  }
  const Json& raw = parent.raw(key);
  if (!raw.is_array() || raw.empty()) throw ConfigError(parent.where(key) + ": expected a non-empty array of layers");
  std::vector<nn::LayerSpec> out;
  Json arr = Json::array();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    Json res;
    out.push_back(parse_layer(Reader(raw[i], parent.where(key) + "[" + std::to_string(i) + "]", &res), 16));
    arr.push_back(res);
  }
  parent.record(key, arr);
  return out;
}

struct OptimCommon {
  AdamConfig adam;
  StepSchedule schedule;
  std::size_t batch = 16;
  int epochs = 10;
  std::uint64_t seed = 0;
  int seeds = 1;
};

inline OptimCommon parse_optim_common(Reader& r, const OptimCommon& def) {
  OptimCommon o;
  o.adam.lr = r.get<double>("lr", def.adam.lr);
  require(o.adam.lr >= 0, r.where("lr") + ": must not be negative");
  o.adam.clip_norm = r.get<double>("clip_norm", def.adam.clip_norm);
  o.batch = r.get<std::size_t>("batch", def.batch);
  require(o.batch > 0, r.where("batch") + ": must be positive");
  o.epochs = r.get<int>("epochs", def.epochs);
  require(o.epochs >= 0, r.where("epochs") + ": must not be negative");
  o.seed = r.get<std::uint64_t>("seed", def.seed);
  o.seeds = r.get<int>("seeds", def.seeds);
  require(o.seeds >= 1, r.where("seeds") + ": must be at least 1");
  Reader s = r.optional_child("schedule");
  o.schedule.factor = s.get<double>("factor", def.schedule.factor);
  o.schedule.every = s.get<int>("every", def.schedule.every);
  require(o.schedule.factor > 0, s.where("factor") + ": must be positive");
  s.finish();
  return o;
}

/// Data from generator keys or from files ("train_path", ...), never both.
struct DataFiles {
  std::map<std::string, std::string> paths;  // split -> path
};

inline DataFiles parse_paths(Reader& r, const std::vector<std::string>& splits, const std::filesystem::path& base) {
  DataFiles f;
  for (const auto& s : splits) {
    const std::string key = s + "_path";
    if (!r.has(key)) continue;
    std::filesystem::path p = r.need<std::string>(key);
    if (p.is_relative() && !base.empty()) p = base / p;
    f.paths[s] = p.string();
  }
  return f;
}

// ---- task sections ---------------------------------------------------------------

struct ClassifyConfig {
  classify::ClassifierSpec spec;
  std::vector<synth::Family> families;
  std::size_t n = 64, train = 2000, val = 500;
  double noise = 0.05;
  std::uint64_t data_seed = 1;
  DataFiles files;
  classify::ClassifierHyper hyper;
};

struct CnfConfig {
  std::vector<nn::LayerSpec> layers;
  nn::TimeMode time = nn::TimeMode::Concat;
  std::size_t dim = 2;
  synth::Mixture mixture;
  std::string mixture_kind;
  std::size_t n = 64, train = 256, val = 32, test = 256;
  std::uint64_t data_seed = 1;
  DataFiles files;
  cnf::CnfHyper hyper;
};

struct TvaeConfig {
  tvae::TvaeSpec spec;
  synth::RotatingSpec rotating;
  std::size_t train = 64, val = 16;
  std::uint64_t data_seed = 1;
  DataFiles files;
  tvae::TvaeHyper hyper;
  std::size_t sample_n = 0;  // points per sampled set; 0 means the data's first-step n
};

struct RunConfig {
  std::string task;
  std::string output;
  std::optional<ClassifyConfig> classify;
  std::optional<CnfConfig> cnf;
  std::optional<TvaeConfig> tvae;
  int seeds = 1;
  std::uint64_t seed = 0;
  Json resolved;
};

inline ClassifyConfig parse_classify(Reader& root, const std::filesystem::path& base) {
  ClassifyConfig c;
  Reader m = root.child("model");
  c.spec.in = m.get<std::size_t>("in", 2);
  c.spec.hidden = m.get<std::size_t>("hidden", 16);
  c.spec.affine_phi = m.get<bool>("affine_phi", false);
  c.spec.dynamics = parse_layers(m, "layers", c.spec.dynamics);
  m.finish();
  c.spec.solver = parse_solver(root.optional_child("solver"), ode::SolverConfig::rk4(8));

  Reader d = root.child("data");
  c.files = parse_paths(d, {"train", "val"}, base);
  if (c.files.paths.empty()) {
    for (const auto& f : d.get<std::vector<std::string>>("families", {"ring", "cross", "gaussian-blobs"})) {
      try {
        c.families.push_back(synth::parse_family(f));
      } catch (const synth::DataError& e) {
        throw ConfigError(d.where("families") + ": " + e.what());
      }
    }
    require(c.families.size() >= 2, d.where("families") + ": need at least two families");
    c.n = d.get<std::size_t>("n", 64);
    require(c.n >= 4, d.where("n") + ": must be at least 4");
    c.train = d.get<std::size_t>("train", 2000);
    c.val = d.get<std::size_t>("val", 500);
    require(c.train > 0, d.where("train") + ": must be positive");
    c.noise = d.get<double>("noise", 0.05);
    c.data_seed = d.get<std::uint64_t>("seed", 1);
    c.spec.classes = c.families.size();
  } else {
    require(c.files.paths.count("train") == 1, d.where("train_path") + " is required with file data");
    c.spec.classes = d.need<std::size_t>("classes");
    require(c.spec.classes >= 2, d.where("classes") + ": need at least two classes");
  }
  d.finish();

  Reader o = root.child("optim");
  OptimCommon def;
  def.adam.lr = 3e-3;
  def.batch = 32;
  def.epochs = 50;
  OptimCommon oc = parse_optim_common(o, def);
  c.hyper.adam = oc.adam;
  c.hyper.schedule = oc.schedule;
  c.hyper.batch = oc.batch;
  c.hyper.epochs = oc.epochs;
  c.hyper.seed = oc.seed;
  c.hyper.patience = o.get<int>("patience", 10);
  c.hyper.target_accuracy = o.get<double>("target_accuracy", 0.0);
  require(c.hyper.target_accuracy >= 0 && c.hyper.target_accuracy <= 1, o.where("target_accuracy") + ": must lie in [0, 1]");
  o.finish();
  return c;
}

inline synth::Mixture parse_mixture(Reader r, std::string& kind) {
  kind = r.get<std::string>("kind", "four_modes");
  synth::Mixture mx;
  if (kind == "four_modes") {
    const double spread = r.get<double>("spread", 1.0), sd = r.get<double>("std", 0.4);
    require(spread > 0 && sd > 0, r.where("") + ": spread and std must be positive");
    mx = synth::Mixture::four_modes(spread, sd);
  } else if (kind == "standard_normal") {
    const std::size_t dim = r.get<std::size_t>("dim", 2);
    require(dim > 0, r.where("dim") + ": must be positive");
    mx = synth::Mixture::standard_normal(dim);
  } else if (kind == "custom") {
    mx.weights = r.need<std::vector<double>>("weights");
    mx.means = r.need<std::vector<std::vector<double>>>("means");
    mx.stds = r.need<std::vector<double>>("stds");
  } else {
    throw ConfigError(r.where("kind") + ": unknown mixture '" + kind + "' (expected four_modes, standard_normal or custom)");
  }
  try {
    mx.validate();
  } catch (const synth::DataError& e) {
    throw ConfigError(r.where("") + ": " + e.what());
  }
  r.finish();
  return mx;
}

inline cnf::TraceConfig parse_trace(Reader r, const cnf::TraceConfig& def) {
  cnf::TraceConfig t = def;
  const std::string mode = r.get<std::string>("mode", def.mode == cnf::TraceMode::Exact ? "exact" : "hutchinson");
  require(mode == "exact" || mode == "hutchinson", r.where("mode") + ": expected exact or hutchinson");
  t.mode = mode == "exact" ? cnf::TraceMode::Exact : cnf::TraceMode::Hutchinson;
  if (t.mode == cnf::TraceMode::Hutchinson) {
    t.probes = r.get<int>("probes", def.probes);
    require(t.probes >= 1, r.where("probes") + ": must be at least 1");
    const std::string p = r.get<std::string>("probe", "rademacher");
    require(p == "rademacher" || p == "gaussian", r.where("probe") + ": expected rademacher or gaussian");
    t.probe = p == "rademacher" ? cnf::Probe::Rademacher : cnf::Probe::Gaussian;
  }
  r.finish();
  return t;
}

inline CnfConfig parse_cnf(Reader& root, const std::filesystem::path& base) {
  CnfConfig c;
  Reader m = root.child("model");
  c.layers = parse_layers(m, "layers", {{nn::LayerSpec::Kind::DeepSet, 32}, {nn::LayerSpec::Kind::DeepSet, 32},
                                        {nn::LayerSpec::Kind::DeepSet, 2}});
  const std::string time = m.get<std::string>("time", "concat");
  require(time == "concat" || time == "none", m.where("time") + ": expected concat or none");
  c.time = time == "concat" ? nn::TimeMode::Concat : nn::TimeMode::None;
  c.hyper.trace = parse_trace(m.optional_child("trace"), cnf::TraceConfig::hutchinson(1));
  c.hyper.adjoint = m.get<bool>("adjoint", false);
  m.finish();

  Reader s = root.optional_child("solver");
  c.hyper.eval_solver = parse_solver(s.optional_child("eval"), ode::SolverConfig::dopri5(1e-5, 1e-5));
  c.hyper.solver = parse_solver(s, ode::SolverConfig::rk4(4));  // finishes `s`

  Reader d = root.child("data");
  c.files = parse_paths(d, {"train", "val", "test"}, base);
  if (c.files.paths.empty()) {
    c.mixture = parse_mixture(d.optional_child("mixture"), c.mixture_kind);
    c.dim = c.mixture.means.front().size();
    c.n = d.get<std::size_t>("n", 64);
    c.train = d.get<std::size_t>("train", 256);
    c.val = d.get<std::size_t>("val", 32);
    c.test = d.get<std::size_t>("test", 256);
    require(c.n > 0 && c.train > 0, d.where("") + ": n and train must be positive");
    c.data_seed = d.get<std::uint64_t>("seed", 1);
  } else {
    require(c.files.paths.count("train") == 1, d.where("train_path") + " is required with file data");
    c.dim = d.get<std::size_t>("dim", 2);
  }
  d.finish();

  Reader o = root.child("optim");
  OptimCommon def;
  def.adam.lr = 1e-2;
  def.batch = 8;
  def.epochs = 12;
  OptimCommon oc = parse_optim_common(o, def);
  c.hyper.adam = oc.adam;
  c.hyper.schedule = oc.schedule;
  c.hyper.batch = oc.batch;
  c.hyper.epochs = oc.epochs;
  c.hyper.seed = oc.seed;
  c.hyper.val_limit = o.get<std::size_t>("val_limit", 0);
  c.hyper.divergence_nats = o.get<double>("divergence_nats", 10.0);
  o.finish();
  return c;
}

inline TvaeConfig parse_tvae(Reader& root, const std::filesystem::path& base) {
  TvaeConfig c;
  Reader m = root.child("model");
  auto& sp = c.spec;
  sp.embed = m.get<std::size_t>("embed", 16);
  sp.hidden = m.get<std::size_t>("hidden", 16);
  sp.latent = m.get<std::size_t>("latent", 4);
  sp.latent_hidden = m.get<std::size_t>("latent_hidden", 16);
  sp.decoder = m.get<std::vector<std::size_t>>("decoder", {32, 32});
  require(sp.embed > 0 && sp.hidden > 0 && sp.latent > 0 && sp.latent_hidden > 0, m.where("") + ": widths must be positive");
  sp.latent_solver = parse_solver(m.optional_child("latent_solver"), ode::SolverConfig::rk4(4));
  c.hyper.elbo.trace = parse_trace(m.optional_child("trace"), cnf::TraceConfig::hutchinson(1));
  m.finish();
  sp.decoder_solver = parse_solver(root.optional_child("solver"), ode::SolverConfig::rk4(4));

  Reader d = root.child("data");
  c.files = parse_paths(d, {"train", "val"}, base);
  if (c.files.paths.empty()) {
    Reader r = d.optional_child("rotating");
    c.rotating.omega = r.get<double>("omega", c.rotating.omega);
    c.rotating.times = r.get<std::vector<double>>("times", c.rotating.times);
    c.rotating.n = r.get<std::size_t>("n", 32);
    c.rotating.noise = r.get<double>("noise", 0.05);
    require(!c.rotating.times.empty(), r.where("times") + ": must not be empty");
    for (std::size_t i = 1; i < c.rotating.times.size(); ++i)
      require(c.rotating.times[i] > c.rotating.times[i - 1], r.where("times") + ": must be strictly increasing");
    require(c.rotating.n >= 1 && c.rotating.noise >= 0, r.where("") + ": n must be positive and noise non-negative");
    r.finish();
    c.train = d.get<std::size_t>("train", 64);
    c.val = d.get<std::size_t>("val", 16);
    require(c.train > 0, d.where("train") + ": must be positive");
    c.data_seed = d.get<std::uint64_t>("seed", 1);
    sp.t0 = c.rotating.times.front();
  } else {
    require(c.files.paths.count("train") == 1, d.where("train_path") + " is required with file data");
    sp.t0 = d.get<double>("t0", 0.0);
  }
  d.finish();

  Reader o = root.child("optim");
  OptimCommon def;
  def.adam.lr = 3e-3;
  def.batch = 16;
  def.epochs = 100;
  OptimCommon oc = parse_optim_common(o, def);
  c.hyper.adam = oc.adam;
  c.hyper.schedule = oc.schedule;
  c.hyper.batch = oc.batch;
  c.hyper.epochs = oc.epochs;
  c.hyper.seed = oc.seed;
  c.hyper.elbo.kl_weight = o.get<double>("kl_weight", 1.0);
  require(c.hyper.elbo.kl_weight >= 0, o.where("kl_weight") + ": must not be negative");
  c.hyper.kl_anneal_epochs = o.get<int>("kl_anneal_epochs", 0);
  c.hyper.divergence_nats = o.get<double>("divergence_nats", 10.0);
  o.finish();
  return c;
}

/// Parses and validates a run config. Relative data paths resolve against `base`.
inline RunConfig parse_run_config(const Json& j, const std::filesystem::path& base = {}) {
  RunConfig rc;
  Reader root(j, "", &rc.resolved);
  rc.task = root.need<std::string>("task");
  rc.output = root.get<std::string>("output", "runs/" + rc.task);
  if (rc.task == "classify") {
    rc.classify = parse_classify(root, base);
    rc.seed = rc.classify->hyper.seed;
  } else if (rc.task == "cnf") {
    rc.cnf = parse_cnf(root, base);
    rc.seed = rc.cnf->hyper.seed;
  } else if (rc.task == "tvae") {
    rc.tvae = parse_tvae(root, base);
    rc.seed = rc.tvae->hyper.seed;
  } else {
    throw ConfigError("task: unknown task '" + rc.task + "' (expected classify, cnf or tvae)");
  }
  rc.seeds = rc.resolved["optim"]["seeds"].get<int>();
  root.finish();
  return rc;
}

inline Json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  try {
    return Json::parse(is);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": malformed JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config(load_json(path), std::filesystem::path(path).parent_path());
}

}  // namespace exnode::config
