#pragma once

// Commands behind the `exnode` binary. Each returns a process exit code:
// 0 ok, 1 failed check or unexpected error, 2 config/flag/data error,
// 3 training divergence.

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "exnode/checkpoint.hpp"
#include "exnode/checks.hpp"
#include "exnode/classifier.hpp"
#include "exnode/config.hpp"
#include "exnode/io.hpp"
#include "exnode/set_cnf.hpp"
#include "exnode/synth.hpp"
#include "exnode/tvae.hpp"

namespace exnode::cli {

namespace fs = std::filesystem;
using Json = nlohmann::json;
using config::ConfigError;

enum Exit : int { kOk = 0, kFail = 1, kUsage = 2, kDiverged = 3 };

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Context {
  int threads = 1;
  std::ostream* log = &std::cerr;  // progress lines; results go to files and stdout
  std::ostream* out = &std::cout;
};

/// --threads wins over EXNODE_THREADS; default 1.
inline int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("EXNODE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw UsageError("EXNODE_THREADS must be a positive integer");
    return static_cast<int>(v);
  }
  return 1;
}

/// Git blob id: SHA-1 of "blob <size>\0<content>".
inline std::string content_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("SHA-1 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

/// Runs f(0..count-1) on up to `threads` workers; results must be written by index.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& f) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw Error("cannot write " + p.string());
  os << s;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// ---- datasets ----------------------------------------------------------------------

struct ClassData {
  LabeledSets train, val;
  bool has_val = false;
};

inline ClassData load_class_data(const config::ClassifyConfig& c) {
  ClassData d;
  if (!c.files.paths.empty()) {
    d.train = io::to_labeled(io::read_sets(c.files.paths.at("train")));
    if (c.files.paths.count("val")) {
      d.val = io::to_labeled(io::read_sets(c.files.paths.at("val")));
      d.has_val = true;
    }
  } else {
    d.train = synth::gen_class_sets(c.families, c.train, c.n, c.data_seed, c.noise);
    if (c.val > 0) {
      d.val = synth::gen_class_sets(c.families, c.val, c.n, c.data_seed + 1, c.noise);
      d.has_val = true;
    }
  }
  return d;
}

struct CnfData {
  SetBatch train, val, test;
  bool has_val = false, has_test = false;
  double analytic_ppll = std::nan("");
};

inline CnfData load_cnf_data(const config::CnfConfig& c) {
  CnfData d;
  if (!c.files.paths.empty()) {
    d.train = io::to_batch(io::read_sets(c.files.paths.at("train")));
    if (c.files.paths.count("val")) d.val = io::to_batch(io::read_sets(c.files.paths.at("val"))), d.has_val = true;
    if (c.files.paths.count("test")) d.test = io::to_batch(io::read_sets(c.files.paths.at("test"))), d.has_test = true;
    return d;
  }
  d.train = synth::gen_density_sets(c.mixture, c.train, c.n, c.data_seed).sets;
  if (c.val > 0) d.val = synth::gen_density_sets(c.mixture, c.val, c.n, c.data_seed + 1).sets, d.has_val = true;
  if (c.test > 0) {
    auto te = synth::gen_density_sets(c.mixture, c.test, c.n, c.data_seed + 2);
    d.test = te.sets;
    d.analytic_ppll = te.analytic_ppll;  // exact generator density of the test sets
    d.has_test = true;
  }
  return d;
}

struct TvaeData {
  std::vector<synth::TemporalSeries> train, val;
};

inline TvaeData load_tvae_data(const config::TvaeConfig& c) {
  TvaeData d;
  if (!c.files.paths.empty()) {
    d.train = io::read_series(c.files.paths.at("train"));
    if (c.files.paths.count("val")) d.val = io::read_series(c.files.paths.at("val"));
    return d;
  }
  d.train = synth::gen_rotating_series(c.rotating, c.train, c.data_seed);
  if (c.val > 0) d.val = synth::gen_rotating_series(c.rotating, c.val, c.data_seed + 1);
  return d;
}

// ---- models --------------------------------------------------------------------------

inline cnf::SetFlow make_flow(const config::CnfConfig& c, Rng& rng) {
  cnf::SetFlow flow;
  flow.dim = c.dim;
  flow.net = nn::build_net("cnf", c.dim, c.layers, c.dim, c.time);
  flow.net.init(flow.params, rng, true);
  return flow;
}

/// Copies checkpoint parameters into a freshly built model of the same layout.
inline void load_params(ParamStore& dst, const ParamStore& src) {
  if (dst.size() != src.size()) throw CheckpointError("checkpoint parameters do not match the configured model");
  for (auto& [name, arr] : dst) {
    if (!src.contains(name)) throw CheckpointError("checkpoint is missing parameter '" + name + "'");
    if (src.at(name).shape() != arr.shape())
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " + to_string(src.at(name).shape()) +
                            ", model expects " + to_string(arr.shape()));
    arr = src.at(name);
  }
}

// ---- evaluation -----------------------------------------------------------------------

inline Json eval_classifier(const classify::ClassifierModel& m, const LabeledSets& d, int threads) {
  const std::size_t B = d.sets.batch(), C = m.spec.classes, chunk = 64;
  if (d.sets.d() != m.spec.in) throw ShapeError("data has d=" + std::to_string(d.sets.d()) + ", model expects " + std::to_string(m.spec.in));
  for (int l : d.labels)
    if (l < 0 || static_cast<std::size_t>(l) >= C) throw synth::DataError("label " + std::to_string(l) + " outside the model's classes");
  const std::size_t nb = (B + chunk - 1) / chunk;
  std::vector<DenseArray> logits(nb);
  std::vector<std::size_t> order(B);
  for (std::size_t i = 0; i < B; ++i) order[i] = i;
  parallel_for(nb, threads, [&](std::size_t k) {
    const std::size_t s = k * chunk, e = std::min(B, s + chunk);
    logits[k] = classify::classify_forward(m, cnf::gather(d.sets, order, s, e));
  });
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::vector<long>> conf(C, std::vector<long>(C, 0));
  for (std::size_t k = 0; k < nb; ++k) {
    const DenseArray p = classify::softmax_rows(logits[k]);
    for (std::size_t r = 0; r < logits[k].dim(0); ++r) {
      const std::size_t i = k * chunk + r;
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logits[k][r * C + c] > logits[k][r * C + best]) best = c;
      const auto label = static_cast<std::size_t>(d.labels[i]);
      loss -= std::log(std::max(p[r * C + label], 1e-300));
      correct += best == label;
      ++conf[label][best];
    }
  }
  return {{"count", B}, {"loss", loss / static_cast<double>(B)},
          {"accuracy", static_cast<double>(correct) / static_cast<double>(B)}, {"confusion", conf}};
}

/// PPLL = total log p / total points. Batch k uses rng.split(k), so results do
/// not depend on the thread count.
inline Json eval_cnf(const cnf::SetFlow& flow, const std::vector<SetBatch>& groups, const ode::SolverConfig& solver,
                     std::uint64_t seed, int threads, std::size_t batch = 8) {
  struct Job {
    std::size_t group, begin, end;
  };
  std::vector<Job> jobs;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].d() != flow.dim)
      throw ShapeError("data has d=" + std::to_string(groups[gi].d()) + ", model expects " + std::to_string(flow.dim));
    for (std::size_t s = 0; s < groups[gi].batch(); s += batch) jobs.push_back({gi, s, std::min(groups[gi].batch(), s + batch)});
  }
  std::vector<double> total(jobs.size(), 0.0);
  Rng root(seed);
  parallel_for(jobs.size(), threads, [&](std::size_t k) {
    const Job& j = jobs[k];
    const SetBatch& g = groups[j.group];
    std::vector<std::size_t> idx(g.batch());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng = root.split(k);
    auto r = cnf::log_likelihood(flow.dynamics(), cnf::gather(g, idx, j.begin, j.end), solver,
                                 cnf::TraceConfig::for_evaluation(g.n(), g.d()), &rng);
    for (double v : r.log_p.values()) total[k] += v;
  });
  double logp = 0.0;
  std::size_t points = 0, sets = 0;
  for (double v : total) logp += v;
  for (const auto& g : groups) points += g.batch() * g.n(), sets += g.batch();
  return {{"count", sets}, {"points", points}, {"log_likelihood", logp}, {"ppll", logp / static_cast<double>(points)}};
}

/// Per-series ELBO with series i drawing from rng.split(i); "ppll" is the
/// reconstruction log-likelihood per point.
inline Json eval_tvae(const tvae::TvaeModel& m, const std::vector<synth::TemporalSeries>& data, std::uint64_t seed,
                      int threads) {
  std::vector<std::array<double, 3>> parts(data.size());
  Rng root(seed);
  tvae::ElboConfig cfg;
  parallel_for(data.size(), threads, [&](std::size_t i) {
    tvae::check_series(data[i], m.spec.dim);
    ad::Graph g;
    Rng rng = root.split(i);
    auto t = tvae::elbo(g, m, tvae::stack_series(data[i], m.spec.dim), rng, cfg);
    parts[i] = {g.value(t.elbo).item(), g.value(t.recon).item(), g.value(t.kl).item()};
  });
  double e = 0, r = 0, k = 0;
  std::size_t points = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    e += parts[i][0], r += parts[i][1], k += parts[i][2];
    for (const auto& x : data[i].sets) points += x.dim(0);
  }
  const double n = static_cast<double>(data.size());
  return {{"count", data.size()}, {"points", points}, {"elbo", e / n}, {"recon", r / n}, {"kl", k / n},
          {"ppll", r / static_cast<double>(points)}};
}

// ---- training runs ------------------------------------------------------------------

struct RunResult {
  Json metrics;
};

inline Json manifest(const config::RunConfig& rc, const Json& files) {
  return {{"task", rc.task}, {"data", rc.resolved.at("data")}, {"files", files}};
}

inline RunResult run_classify(const config::RunConfig& rc, std::uint64_t seed, const fs::path& dir, Context& ctx) {
  config::ClassifyConfig c = *rc.classify;
  c.hyper.seed = seed;
  ClassData data = load_class_data(c);
  Rng rng(seed);
  auto model = classify::ClassifierModel::create(c.spec, rng);
  std::ofstream csv(dir / "metrics.csv");
  csv << "epoch,split,loss,accuracy\n";
  auto rep = classify::train_classifier(model, data.train, data.has_val ? &data.val : nullptr, c.hyper,
                                        [&](const classify::ClassifierEpoch& e) {
                                          csv << e.epoch << ",train," << fmt(e.train_loss) << ',' << fmt(e.train_acc) << '\n';
                                          if (data.has_val) csv << e.epoch << ",val," << fmt(e.val_loss) << ',' << fmt(e.val_acc) << '\n';
                                          csv.flush();
                                          *ctx.log << "epoch " << e.epoch << " train loss " << fmt(e.train_loss)
                                                   << " val acc " << fmt(e.val_acc) << '\n';
                                        });
  Json metrics = {{"epochs", rep.epochs.size()}, {"best_epoch", rep.best_epoch}, {"stopped_early", rep.stopped_early},
                  {"reached_target", rep.reached_target}};
  if (data.has_val) {
    Json ev = eval_classifier(model, data.val, ctx.threads);
    metrics["val_accuracy"] = ev["accuracy"];
    metrics["val_loss"] = ev["loss"];
    metrics["confusion"] = ev["confusion"];
    // Predictions must not change when every validation set is shuffled.
    Rng prng(seed ^ 0x9e37);
    std::vector<std::vector<std::size_t>> perms;
    for (std::size_t b = 0; b < data.val.sets.batch(); ++b) perms.push_back(prng.permutation(data.val.sets.n()));
    LabeledSets shuffled{data.val.sets.permuted(perms), data.val.labels};
    metrics["val_accuracy_shuffled"] = eval_classifier(model, shuffled, ctx.threads)["accuracy"];
    io::write_sets((dir / "val.jsonl").string(), data.val.sets, &data.val.labels);
  }
  save_checkpoint((dir / "checkpoint.json").string(), {"classify", rc.resolved, model.params});
  write_text(dir / "dataset.json", manifest(rc, {{"val", data.has_val ? "val.jsonl" : ""}}).dump(2) + "\n");
  return {metrics};
}

inline RunResult run_cnf(const config::RunConfig& rc, std::uint64_t seed, const fs::path& dir, Context& ctx) {
  config::CnfConfig c = *rc.cnf;
  c.hyper.seed = seed;
  CnfData data = load_cnf_data(c);
  Rng rng(seed);
  auto flow = make_flow(c, rng);
  std::ofstream csv(dir / "metrics.csv");
  csv << "epoch,split,ppll\n";
  auto rep = cnf::train_cnf(flow, data.train, data.has_val ? &data.val : nullptr, c.hyper, [&](const cnf::CnfEpoch& e) {
    csv << e.epoch << ",train," << fmt(e.train_ppll) << '\n';
    if (data.has_val) csv << e.epoch << ",val," << fmt(e.val_ppll) << '\n';
    csv.flush();
    *ctx.log << "epoch " << e.epoch << " train ppll " << fmt(e.train_ppll) << " val ppll " << fmt(e.val_ppll) << '\n';
  });
  Json metrics = {{"epochs", rep.epochs.size()}};
  if (rep.best_epoch >= 0) metrics["best_val_ppll"] = rep.best_val_ppll;
  if (data.has_test) {
    Json ev = eval_cnf(flow, {data.test}, c.hyper.eval_solver, seed ^ 0x7e57, ctx.threads);
    metrics["test_ppll"] = ev["ppll"];
    csv << (rep.epochs.empty() ? 0 : rep.epochs.back().epoch) << ",test," << fmt(ev["ppll"].get<double>()) << '\n';
    io::write_sets((dir / "test.jsonl").string(), data.test);
    if (std::isfinite(data.analytic_ppll)) {
      metrics["analytic_ppll"] = data.analytic_ppll;
      if (flow.dim <= 2) metrics["gaussian_baseline_ppll"] = synth::gaussian_baseline_ppll(data.train, data.test);
    }
  }
  save_checkpoint((dir / "checkpoint.json").string(), {"cnf", rc.resolved, flow.params});
  write_text(dir / "dataset.json", manifest(rc, {{"test", data.has_test ? "test.jsonl" : ""}}).dump(2) + "\n");
  return {metrics};
}

inline RunResult run_tvae(const config::RunConfig& rc, std::uint64_t seed, const fs::path& dir, Context& ctx) {
  config::TvaeConfig c = *rc.tvae;
  c.hyper.seed = seed;
  TvaeData data = load_tvae_data(c);
  Rng rng(seed);
  auto model = tvae::TvaeModel::create(c.spec, rng);
  std::ofstream csv(dir / "metrics.csv");
  csv << "epoch,split,elbo,recon,kl\n";
  auto rep = tvae::train_tvae(model, data.train, c.hyper, [&](const tvae::TvaeEpoch& e) {
    csv << e.epoch << ",train," << fmt(e.elbo) << ',' << fmt(e.recon) << ',' << fmt(e.kl) << '\n';
    csv.flush();
    *ctx.log << "epoch " << e.epoch << " elbo " << fmt(e.elbo) << " kl " << fmt(e.kl) << '\n';
  });
  double kl_min = std::numeric_limits<double>::infinity();
  for (const auto& e : rep.epochs) kl_min = std::min(kl_min, e.kl_min);
  Json metrics = {{"epochs", rep.epochs.size()}};
  if (!rep.epochs.empty()) {
    metrics["train_elbo"] = rep.epochs.back().elbo;
    metrics["kl_min"] = kl_min;
  }
  if (!data.val.empty()) {
    Json ev = eval_tvae(model, data.val, seed ^ 0x7e57, ctx.threads);
    metrics["val_elbo"] = ev["elbo"];
    metrics["val_ppll"] = ev["ppll"];
    csv << (rep.epochs.empty() ? 0 : rep.epochs.back().epoch) << ",val," << fmt(ev["elbo"].get<double>()) << ','
        << fmt(ev["recon"].get<double>()) << ',' << fmt(ev["kl"].get<double>()) << '\n';
    io::write_series((dir / "val.jsonl").string(), data.val);
  }
  save_checkpoint((dir / "checkpoint.json").string(), {"tvae", rc.resolved, model.params});
  write_text(dir / "dataset.json", manifest(rc, {{"val", data.val.empty() ? "" : "val.jsonl"}}).dump(2) + "\n");
  return {metrics};
}

/// Mean and sample standard deviation of every numeric metric across runs.
inline Json summarize(const std::vector<std::uint64_t>& seeds, const std::vector<Json>& metrics) {
  Json out = {{"seeds", seeds}, {"runs", seeds.size()}, {"metrics", Json::object()}};
  for (const auto& [key, v] : metrics.front().items()) {
    if (!v.is_number() || v.is_boolean()) continue;
    std::vector<double> vals;
    for (const auto& m : metrics)
      if (m.contains(key) && m[key].is_number()) vals.push_back(m[key].get<double>());
    double mean = 0, var = 0;
    for (double x : vals) mean += x;
    mean /= static_cast<double>(vals.size());
    for (double x : vals) var += (x - mean) * (x - mean);
    const double sd = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
    out["metrics"][key] = {{"mean", mean}, {"std", sd}, {"values", vals}};
  }
  return out;
}

// ---- error mapping --------------------------------------------------------------------

inline int guarded(const std::function<int()>& body, std::ostream& err = std::cerr) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "exnode: config error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    err << "exnode: " << e.what() << '\n';
    return kUsage;
  } catch (const synth::DataError& e) {
    err << "exnode: data error: " << e.what() << '\n';
    return kUsage;
  } catch (const CheckpointError& e) {
    err << "exnode: checkpoint error: " << e.what() << '\n';
    return kUsage;
  } catch (const ShapeError& e) {
    err << "exnode: shape error: " << e.what() << '\n';
    return kUsage;
  } catch (const DivergenceError& e) {
    err << "exnode: training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const ode::SolverError& e) {
    err << "exnode: training diverged: solver failure: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    err << "exnode: error: " << e.what() << '\n';
    return kFail;
  }
}

// ---- commands ---------------------------------------------------------------------------

struct TrainOptions {
  std::string config;
  std::string out;  // overrides the config's output
  int seeds = 0;    // overrides optim.seeds when > 0
};

inline int cmd_train(const TrainOptions& opt, Context& ctx) {
  return guarded([&] {
    config::RunConfig rc = config::load_run_config(opt.config);
    const fs::path root = opt.out.empty() ? fs::path(rc.output) : fs::path(opt.out);
    const int nseeds = opt.seeds > 0 ? opt.seeds : rc.seeds;
    fs::create_directories(root);
    std::vector<std::uint64_t> seeds;
    std::vector<Json> metrics;
    for (int k = 0; k < nseeds; ++k) {
      const std::uint64_t seed = rc.seed + static_cast<std::uint64_t>(k);
      const fs::path dir = nseeds == 1 ? root : root / ("seed-" + std::to_string(seed));
      fs::create_directories(dir);
      config::RunConfig run = rc;
      run.resolved["optim"]["seed"] = seed;
      run.resolved["optim"]["seeds"] = 1;
      run.resolved["output"] = dir.string();
      *ctx.log << "exnode train: task " << rc.task << ", seed " << seed << " -> " << dir.string() << '\n';
      const auto t0 = std::chrono::steady_clock::now();
      RunResult res = rc.task == "classify" ? run_classify(run, seed, dir, ctx)
                      : rc.task == "cnf"    ? run_cnf(run, seed, dir, ctx)
                                            : run_tvae(run, seed, dir, ctx);
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      Json hashed = run.resolved;
      hashed.erase("output");  // same experiment in another directory hashes the same
      const std::string canon = hashed.dump();
      Json runj = {{"task", rc.task}, {"seed", seed}, {"config", run.resolved}, {"hash", content_hash(canon)},
                   {"metrics", res.metrics}, {"wall_seconds", wall}};
      write_text(dir / "run.json", runj.dump(2) + "\n");
      seeds.push_back(seed);
      metrics.push_back(res.metrics);
    }
    if (nseeds > 1) {
      Json summary = summarize(seeds, metrics);
      write_text(root / "summary.json", summary.dump(2) + "\n");
      for (const auto& [key, s] : summary["metrics"].items())
        *ctx.out << key << ": " << fmt(s["mean"].get<double>()) << " +- " << fmt(s["std"].get<double>()) << '\n';
    } else {
      *ctx.out << metrics.front().dump() << '\n';
    }
    return static_cast<int>(kOk);
  });
}

struct EvalOptions {
  std::string checkpoint;
  std::string data;   // JSON-lines file or dataset.json manifest
  std::string split;  // manifest split; defaults to the held-out one
  std::string out;    // optional metrics file
  std::uint64_t seed = 0;
};

struct LoadedModel {
  Checkpoint ck;
  config::RunConfig rc;
};

inline LoadedModel load_model(const std::string& path) {
  LoadedModel lm{load_checkpoint(path), {}};
  try {
    lm.rc = config::parse_run_config(lm.ck.config);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
  if (lm.rc.task != lm.ck.task) throw CheckpointError("checkpoint task does not match its config");
  return lm;
}

/// Resolves --data to a JSON-lines path, regenerating from a manifest if needed.
inline std::string resolve_data(const EvalOptions& opt, const std::string& task) {
  if (fs::path(opt.data).filename() != "dataset.json") return opt.data;
  Json man = config::load_json(opt.data);
  if (man.value("task", "") != task)
    throw CheckpointError("dataset manifest is for task '" + man.value("task", "") + "', checkpoint is '" + task + "'");
  const Json files = man.value("files", Json::object());
  std::string split = opt.split;
  if (split.empty())
    for (const auto& [k, v] : files.items())
      if (v.is_string() && !v.get<std::string>().empty()) split = k;
  if (split.empty() || !files.contains(split) || files[split].get<std::string>().empty())
    throw UsageError("manifest has no split '" + split + "'");
  const fs::path p = fs::path(opt.data).parent_path() / files[split].get<std::string>();
  if (!fs::exists(p)) throw synth::DataError("manifest file " + p.string() + " is missing");
  return p.string();
}

inline int cmd_eval(const EvalOptions& opt, Context& ctx) {
  return guarded([&] {
    LoadedModel lm = load_model(opt.checkpoint);
    const std::string path = resolve_data(opt, lm.rc.task);
    Rng rng(0);
    Json metrics;
    if (lm.rc.task == "classify") {
      auto m = classify::ClassifierModel::create(lm.rc.classify->spec, rng);
      load_params(m.params, lm.ck.params);
      auto recs = io::read_sets(path);
      for (const auto& r : recs)
        if (r.t) throw CheckpointError("classify checkpoint given temporal data");
      metrics = eval_classifier(m, io::to_labeled(recs), ctx.threads);
    } else if (lm.rc.task == "cnf") {
      auto flow = make_flow(*lm.rc.cnf, rng);
      load_params(flow.params, lm.ck.params);
      auto recs = io::read_sets(path);
      metrics = eval_cnf(flow, io::group_by_shape(recs).batches, lm.rc.cnf->hyper.eval_solver, opt.seed, ctx.threads);
    } else {
      auto m = tvae::TvaeModel::create(lm.rc.tvae->spec, rng);
      load_params(m.params, lm.ck.params);
      std::vector<synth::TemporalSeries> series;
      try {
        series = io::read_series(path);
      } catch (const synth::DataError& e) {
        throw CheckpointError(std::string("tvae checkpoint needs series data: ") + e.what());
      }
      metrics = eval_tvae(m, series, opt.seed, ctx.threads);
    }
    metrics["task"] = lm.rc.task;
    if (!opt.out.empty()) write_text(opt.out, metrics.dump(2) + "\n");
    *ctx.out << metrics.dump() << '\n';
    return static_cast<int>(kOk);
  });
}

struct SampleOptions {
  std::string checkpoint;
  std::string out;
  long n = 0;      // points per set; 0 = training cardinality
  long count = 1;  // sets (cnf) or series (tvae)
  std::string times;  // tvae only: comma-separated
  std::uint64_t seed = 0;
};

inline std::vector<double> parse_times(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || !std::isfinite(v)) throw UsageError("--times: '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--times needs at least one value");
  return out;
}

inline int cmd_sample(const SampleOptions& opt, Context& ctx) {
  return guarded([&] {
    if (opt.count < 1) throw UsageError("--count must be at least 1");
    if (opt.n < 0) throw UsageError("--n must be positive");
    if (opt.out.empty()) throw UsageError("--out is required");
    LoadedModel lm = load_model(opt.checkpoint);
    Rng init(0);
    Rng rng(opt.seed);
    std::ofstream os(opt.out);
    if (!os) throw UsageError("cannot write " + opt.out);
    if (lm.rc.task == "classify") throw UsageError("sample is not defined for classify checkpoints");
    if (lm.rc.task == "cnf") {
      if (!opt.times.empty()) throw UsageError("--times applies to tvae checkpoints only");
      const auto& c = *lm.rc.cnf;
      auto flow = make_flow(c, init);
      load_params(flow.params, lm.ck.params);
      const std::size_t n = opt.n > 0 ? static_cast<std::size_t>(opt.n) : c.n;
      for (long k = 0; k < opt.count; ++k) {
        Rng r = rng.split(static_cast<std::uint64_t>(k));
        SetBatch s = cnf::sample(flow.dynamics(), n, c.dim, 1, r, c.hyper.eval_solver);
        if (!s.values().all_finite()) throw ode::NonFiniteDynamics("sampled set " + std::to_string(k) + " is not finite");
        os << io::set_line(s.values().data(), n, c.dim) << '\n';
      }
    } else {
      const auto& c = *lm.rc.tvae;
      auto m = tvae::TvaeModel::create(c.spec, init);
      load_params(m.params, lm.ck.params);
      const std::vector<double> times = opt.times.empty() ? c.rotating.times : parse_times(opt.times);
      const std::size_t n = opt.n > 0 ? static_cast<std::size_t>(opt.n) : c.rotating.n;
      for (long k = 0; k < opt.count; ++k) {
        Rng r = rng.split(static_cast<std::uint64_t>(k));
        os << io::series_line(tvae::sample_series(m, times, n, r)) << '\n';
      }
    }
    os.close();
    *ctx.log << "wrote " << opt.count << (lm.rc.task == "cnf" ? " sets" : " series") << " to " << opt.out << '\n';
    return static_cast<int>(kOk);
  });
}

struct CheckCliOptions {
  std::string suite;  // a suite name or "all"
  bool sabotage = false;
  std::uint64_t seed = 0;
  std::string out;
};

inline int cmd_check(const CheckCliOptions& opt, Context& ctx) {
  return guarded([&] {
    std::vector<std::string> suites;
    if (opt.suite == "all") {
      suites = checks::suite_names();
    } else {
      const auto& names = checks::suite_names();
      if (std::find(names.begin(), names.end(), opt.suite) == names.end())
        throw UsageError("unknown suite '" + opt.suite + "' (expected equivariance, invariance, invertibility, gradients, trace or all)");
      suites = {opt.suite};
    }
    checks::CheckOptions co;
    co.seed = opt.seed;
    co.sabotage = opt.sabotage;
    Json report = {{"passed", true}, {"suites", Json::array()}};
    for (const auto& s : suites) {
      auto r = checks::run_suite(s, co);
      for (const auto& c : r.checks)
        *ctx.log << (c.passed ? "PASS " : "FAIL ") << s << '/' << c.name << "  value " << fmt(c.value) << " bound "
                 << fmt(c.threshold) << '\n';
      report["suites"].push_back(r.to_json());
      if (!r.passed()) report["passed"] = false;
    }
    if (!opt.out.empty()) write_text(opt.out, report.dump(2) + "\n");
    *ctx.out << report.dump() << '\n';
    return report["passed"].get<bool>() ? static_cast<int>(kOk) : static_cast<int>(kFail);
  });
}

}  // namespace exnode::cli
