#pragma once

// Continuous normalizing flow over sets. The set state z (B, n, d) and a per-set
// log-density accumulator evolve as one augmented ODE:
//   dz/dt = f(z, t),   dD/dt = Tr(df/dz)
// and log p(x) = sum_i log N(z_i(1); 0, I) + D(1) with z(0) = x, D(0) = 0.
// The trace is over the flattened (n*d) state of each set.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "exnode/autodiff.hpp"
#include "exnode/layers.hpp"
#include "exnode/ode.hpp"
#include "exnode/optim.hpp"
#include "exnode/rng.hpp"

namespace exnode::cnf {

class TraceBudgetExceeded : public Error {
 public:
  using Error::Error;
};

using exnode::DivergenceError;

enum class TraceMode { Exact, Hutchinson };
enum class Probe { Rademacher, Gaussian };

struct TraceConfig {
  TraceMode mode = TraceMode::Hutchinson;
  Probe probe = Probe::Rademacher;
  int probes = 1;
  std::size_t exact_budget = 4096;  // largest n*d for exact traces
  std::size_t chunk = 32;           // probes per graph in numeric evaluation

  static TraceConfig exact() {
    TraceConfig c;
    c.mode = TraceMode::Exact;
    return c;
  }
  static TraceConfig hutchinson(int probes, Probe p = Probe::Rademacher) {
    TraceConfig c;
    c.mode = TraceMode::Hutchinson;
    c.probes = probes;
    c.probe = p;
    return c;
  }
  /// Exact when n*d <= 256, otherwise 100 Rademacher probes.
  static TraceConfig for_evaluation(std::size_t n, std::size_t d) {
    return n * d <= 256 ? exact() : hutchinson(100);
  }
};

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Per-set sum of standard-normal log densities, (B, n, d) -> (B).
inline DenseArray base_log_density(const DenseArray& z) {
  const std::size_t B = z.dim(0), w = z.size() / B;
  DenseArray out(Shape{B});
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < w; ++i) s += z[b * w + i] * z[b * w + i];
    out[b] = -0.5 * s - 0.5 * static_cast<double>(w) * kLog2Pi;
  }
  return out;
}

inline ad::Var base_log_density(ad::Graph& g, ad::Var z) {
  const Shape s = g.shape(z);
  const std::size_t w = s[1] * s[2];
  ad::Var sq = g.reshape(g.mul(z, z), {s[0], w});
  return g.add_scalar(g.scale(g.sum(sq, 1), -0.5), -0.5 * static_cast<double>(w) * kLog2Pi);
}

/// Probe tensors of shape `shape`: basis vectors for exact traces (the same
/// entry in every set, valid because sets in a batch do not interact), or random
/// probes for Hutchinson.
inline std::vector<DenseArray> make_probes(const Shape& shape, const TraceConfig& cfg, Rng* rng) {
  const std::size_t B = shape[0], w = numel(shape) / B;
  std::vector<DenseArray> out;
  if (cfg.mode == TraceMode::Exact) {
    if (w > cfg.exact_budget)
      throw TraceBudgetExceeded("exact trace needs " + std::to_string(w) + " passes, budget is " +
                                std::to_string(cfg.exact_budget));
    for (std::size_t k = 0; k < w; ++k) {
      DenseArray e(shape, 0.0);
      for (std::size_t b = 0; b < B; ++b) e[b * w + k] = 1.0;
      out.push_back(std::move(e));
    }
    return out;
  }
  if (!rng) throw Error("hutchinson trace requires a random generator");
  if (cfg.probes < 1) throw Error("hutchinson trace requires at least one probe");
  for (int k = 0; k < cfg.probes; ++k)
    out.push_back(cfg.probe == Probe::Rademacher ? rng->rademacher_array(shape) : rng->normal_array(shape));
  return out;
}

/// sum_k v_k^T (df/dz) v_k per set, from one Jacobian-vector product per probe.
/// `dz` must be the output of the dynamics applied to `z` in `g`.
inline ad::Var trace_from_probes(ad::Graph& g, ad::Var dz, ad::Var z, const std::vector<DenseArray>& probes,
                                 double weight) {
  const Shape s = g.shape(z);
  const std::size_t w = s[1] * s[2];
  ad::Var acc{};
  for (const DenseArray& v : probes) {
    ad::Var vv = g.constant(v);
    ad::Var jv = g.jvp(dz, {{z, vv}});
    ad::Var q = g.sum(g.reshape(g.mul(vv, jv), {s[0], w}), 1);
    acc = acc.valid() ? g.add(acc, q) : q;
  }
  return weight == 1.0 ? acc : g.scale(acc, weight);
}

inline double probe_weight(const TraceConfig& cfg, std::size_t nprobes) {
  return cfg.mode == TraceMode::Exact ? 1.0 : 1.0 / static_cast<double>(nprobes);
}

/// Numeric dynamics and per-set trace; probes are processed cfg.chunk at a time,
/// one graph per chunk.
inline std::pair<DenseArray, DenseArray> field_and_trace(const ode::GraphField& f, const DenseArray& z, double t,
                                                         const std::vector<DenseArray>& probes, double weight,
                                                         std::size_t chunk) {
  DenseArray dz;
  DenseArray tr(Shape{z.dim(0)}, 0.0);
  for (std::size_t start = 0; start < probes.size(); start += chunk) {
    const std::size_t stop = std::min(probes.size(), start + chunk);
    std::vector<DenseArray> part(probes.begin() + static_cast<std::ptrdiff_t>(start),
                                 probes.begin() + static_cast<std::ptrdiff_t>(stop));
    ad::Graph g;
    ad::Var zv = g.input("z", z);
    ad::Var out = f(g, zv, t);
    if (start == 0) dz = g.value(out);
    tr += g.value(trace_from_probes(g, out, zv, part, weight));
  }
  return {std::move(dz), std::move(tr)};
}

inline DenseArray trace_numeric(const ode::GraphField& f, const DenseArray& z, double t,
                                const std::vector<DenseArray>& probes, double weight, std::size_t chunk) {
  return field_and_trace(f, z, t, probes, weight, chunk).second;
}

/// Exact Tr(df/dz) per set, one basis direction at a time.
inline DenseArray trace_exact(const ode::GraphField& f, const SetBatch& s, double t, std::size_t budget = 4096) {
  TraceConfig cfg = TraceConfig::exact();
  cfg.exact_budget = budget;
  return trace_numeric(f, s.values(), t, make_probes(s.values().shape(), cfg, nullptr), 1.0, cfg.chunk);
}

/// Hutchinson estimate: mean over probes of v^T (df/dz) v.
inline DenseArray trace_hutchinson(const ode::GraphField& f, const SetBatch& s, double t, const TraceConfig& cfg,
                                   Rng& rng) {
  if (cfg.mode != TraceMode::Hutchinson) throw Error("trace_hutchinson called with exact trace config");
  auto probes = make_probes(s.values().shape(), cfg, &rng);
  return trace_numeric(f, s.values(), t, probes, probe_weight(cfg, probes.size()), cfg.chunk);
}

// ---- augmented flow state --------------------------------------------------

/// Flat state [z (B*n*d), D (B)].
inline DenseArray pack_state(const DenseArray& z, const DenseArray& delta) {
  DenseArray s(Shape{z.size() + delta.size()});
  std::copy_n(z.data(), z.size(), s.data());
  std::copy_n(delta.data(), delta.size(), s.data() + z.size());
  return s;
}

struct FlowState {
  SetBatch z;
  DenseArray delta_logp;
};

inline FlowState unpack_state(const DenseArray& s, const Shape& zshape) {
  const std::size_t nz = numel(zshape), B = zshape[0];
  DenseArray z(zshape), d(Shape{B});
  std::copy_n(s.data(), nz, z.data());
  std::copy_n(s.data() + nz, B, d.data());
  return {SetBatch(std::move(z)), std::move(d)};
}

/// Augmented field over the flat state, for graph or numeric integration.
inline ode::GraphField augmented_field(ode::GraphField f, Shape zshape, std::vector<DenseArray> probes, double weight) {
  return [f = std::move(f), zshape, probes = std::move(probes), weight](ad::Graph& g, ad::Var y, double t) {
    const std::size_t nz = numel(zshape);
    ad::Var z = g.reshape(g.slice(y, 0, 0, nz), zshape);
    ad::Var dz = f(g, z, t);
    ad::Var tr = trace_from_probes(g, dz, z, probes, weight);
    return g.concat({g.reshape(dz, {nz}), tr}, 0);
  };
}

struct LikelihoodResult {
  DenseArray log_p;  // (B)
  double ppll = 0.0;  // mean over sets of log p / n
  SetBatch z1;
  long nfe = 0;
};

/// log p(x) for every set, integrating z and the trace jointly over [0, 1].
inline LikelihoodResult log_likelihood(const ode::GraphField& f, const SetBatch& sets, const ode::SolverConfig& solver,
                                       const TraceConfig& trace, Rng* rng = nullptr, double t0 = 0.0,
                                       double t1 = 1.0) {
  const Shape zs = sets.values().shape();
  auto probes = make_probes(zs, trace, rng);
  const double w = probe_weight(trace, probes.size());
  // Large probe sets are integrated chunk by chunk inside each field evaluation.
  const std::size_t chunk = trace.chunk;
  ode::VectorField aug = [&](const DenseArray& y, double t) {
    FlowState st = unpack_state(y, zs);
    auto [dz, tr] = field_and_trace(f, st.z.values(), t, probes, w, chunk);
    return pack_state(dz, tr);
  };
  auto res = ode::integrate(aug, pack_state(sets.values(), DenseArray(Shape{zs[0]}, 0.0)), t0, t1, solver);
  FlowState end = unpack_state(res.y1, zs);
  LikelihoodResult out;
  out.log_p = base_log_density(end.z.values());
  out.log_p += end.delta_logp;
  for (std::size_t b = 0; b < zs[0]; ++b) {
    if (!std::isfinite(out.log_p[b])) throw ode::NonFiniteDynamics("non-finite log-likelihood for set " + std::to_string(b));
    out.ppll += out.log_p[b] / static_cast<double>(zs[1]);
  }
  out.ppll /= static_cast<double>(zs[0]);
  out.z1 = std::move(end.z);
  out.nfe = res.nfe;
  return out;
}

/// Differentiable log p(x) per set (B), integrating inside `g`.
inline ad::Var log_likelihood_graph(ad::Graph& g, const ode::GraphField& f, ad::Var x, const ode::SolverConfig& solver,
                                    const std::vector<DenseArray>& probes, double weight, double t0 = 0.0,
                                    double t1 = 1.0) {
  const Shape zs = g.shape(x);
  const std::size_t nz = numel(zs);
  ad::Var y0 = g.concat({g.reshape(x, {nz}), g.constant(DenseArray(Shape{zs[0]}, 0.0))}, 0);
  ad::Var y1 = ode::integrate_graph(g, augmented_field(f, zs, probes, weight), y0, t0, t1, solver);
  ad::Var z1 = g.reshape(g.slice(y1, 0, 0, nz), zs);
  ad::Var delta = g.slice(y1, 0, nz, nz + zs[0]);
  return g.add(base_log_density(g, z1), delta);
}

/// Draws n*d standard normals per set and integrates t1 -> t0.
inline SetBatch sample(const ode::GraphField& f, std::size_t n, std::size_t d, std::size_t count, Rng& rng,
                       const ode::SolverConfig& solver, double t0 = 0.0, double t1 = 1.0) {
  DenseArray z = rng.normal_array({count, n, d});
  return SetBatch(ode::integrate(f, z, t1, t0, solver).y1);
}

// ---- model and training -----------------------------------------------------

/// Unconditional set flow: an equivariant net as dz/dt and its parameters.
struct SetFlow {
  nn::EquivariantNet net;
  ParamStore params;
  std::size_t dim = 2;

  ode::GraphField dynamics() const { return net.dynamics(params); }
};

struct CnfHyper {
  int epochs = 10;
  std::size_t batch = 16;
  AdamConfig adam{};
  StepSchedule schedule{0.5, 100};
  ode::SolverConfig solver = ode::SolverConfig::rk4(8);
  ode::SolverConfig eval_solver = ode::SolverConfig::dopri5(1e-5, 1e-5);
  TraceConfig trace = TraceConfig::hutchinson(1);
  bool adjoint = false;  // adjoint gradients instead of backprop through the solver
  std::uint64_t seed = 0;
  double divergence_nats = 10.0;
  std::size_t val_limit = 0;  // evaluate at most this many validation sets (0 = all)
};

struct CnfEpoch {
  int epoch = 0;
  double lr = 0.0;
  double train_ppll = 0.0;
  double val_ppll = std::nan("");
};

struct CnfReport {
  std::vector<CnfEpoch> epochs;
  double best_val_ppll = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
};

inline SetBatch gather(const SetBatch& all, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  const std::size_t w = all.n() * all.d();
  std::vector<double> data;
  data.reserve((end - begin) * w);
  for (std::size_t k = begin; k < end; ++k) {
    const double* src = all.values().data() + idx[k] * w;
    data.insert(data.end(), src, src + w);
  }
  return SetBatch(end - begin, all.n(), all.d(), std::move(data));
}

/// Mean PPLL over `sets`, evaluated in batches with evaluation-time trace settings.
inline double evaluate_ppll(const SetFlow& flow, const SetBatch& sets, const ode::SolverConfig& solver,
                            std::optional<TraceConfig> trace, Rng& rng, std::size_t batch = 8) {
  const TraceConfig tc = trace ? *trace : TraceConfig::for_evaluation(sets.n(), sets.d());
  std::vector<std::size_t> idx(sets.batch());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  double total = 0.0;
  for (std::size_t s = 0; s < idx.size(); s += batch) {
    const std::size_t e = std::min(idx.size(), s + batch);
    auto r = log_likelihood(flow.dynamics(), gather(sets, idx, s, e), solver, tc, &rng);
    total += r.ppll * static_cast<double>(e - s);
  }
  return total / static_cast<double>(idx.size());
}

/// Loss gradient for one minibatch: -mean_b log p_b / n.
inline std::pair<double, std::map<std::string, DenseArray>> cnf_minibatch_grad(const SetFlow& flow, const SetBatch& x,
                                                                               const CnfHyper& hp, Rng& rng) {
  const Shape zs = x.values().shape();
  auto probes = make_probes(zs, hp.trace, &rng);
  const double w = probe_weight(hp.trace, probes.size());
  const double scale = 1.0 / static_cast<double>(zs[0] * zs[1]);
  if (!hp.adjoint) {
    ad::Graph g;
    ad::Var xv = g.input("x", x.values());
    ad::Var logp = log_likelihood_graph(g, flow.dynamics(), xv, hp.solver, probes, w);
    ad::Var loss = g.scale(g.sum_all(logp), -scale);
    auto grads = g.param_grads(g.backward(loss));
    return {-g.value(loss).item(), std::move(grads)};
  }
  auto aug = augmented_field(flow.dynamics(), zs, probes, w);
  const DenseArray y0 = pack_state(x.values(), DenseArray(Shape{zs[0]}, 0.0));
  // dL/dy1 for L = -scale * sum_b [log N(z1_b) + D_b]: dL/dz1 = scale * z1, dL/dD = -scale.
  ode::OdeResult fwd = ode::integrate(aug, y0, 0.0, 1.0, hp.solver);
  FlowState end = unpack_state(fwd.y1, zs);
  DenseArray gz = end.z.values();
  gz *= scale;
  DenseArray gd(Shape{zs[0]}, -scale);
  auto adj = ode::adjoint_grad(aug, flow.params, y0, 0.0, 1.0, hp.solver, pack_state(gz, gd));
  DenseArray lp = base_log_density(end.z.values());
  lp += end.delta_logp;
  double ppll = 0.0;
  for (double v : lp.values()) ppll += v;
  return {ppll * scale, std::move(adj.grad_params)};
}

/// Maximises mean log-likelihood with Adam; reports PPLL per epoch.
inline CnfReport train_cnf(SetFlow& flow, const SetBatch& train, const SetBatch* val, const CnfHyper& hp,
                           const std::function<void(const CnfEpoch&)>& on_epoch = {}) {
  Rng rng(hp.seed);
  Adam opt(hp.adam);
  CnfReport rep;
  double prev = std::nan("");
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    CnfEpoch ep;
    ep.epoch = epoch;
    ep.lr = hp.schedule.at(hp.adam.lr, epoch);
    opt.set_lr(ep.lr);
    Rng erng = rng.split(static_cast<std::uint64_t>(epoch));
    auto order = erng.permutation(train.batch());
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < order.size(); s += hp.batch) {
      const std::size_t e = std::min(order.size(), s + hp.batch);
      Rng brng = erng.split(1000 + s);
      auto [ppll, grads] = cnf_minibatch_grad(flow, gather(train, order, s, e), hp, brng);
      if (!std::isfinite(ppll))
        throw DivergenceError("non-finite training likelihood at epoch " + std::to_string(epoch) +
                              " (lr " + std::to_string(ep.lr) + ")");
      opt.step(flow.params, grads);
      sum += ppll * static_cast<double>(e - s);
      count += e - s;
    }
    ep.train_ppll = sum / static_cast<double>(count);
    double watch = ep.train_ppll;
    if (val) {
      Rng vrng(hp.seed ^ 0x5eed);
      SetBatch vs = *val;
      if (hp.val_limit && hp.val_limit < val->batch()) {
        std::vector<std::size_t> idx(val->batch());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        vs = gather(*val, idx, 0, hp.val_limit);
      }
      ep.val_ppll = evaluate_ppll(flow, vs, hp.eval_solver, std::nullopt, vrng);
      watch = ep.val_ppll;
      if (ep.val_ppll > rep.best_val_ppll) {
        rep.best_val_ppll = ep.val_ppll;
        rep.best_epoch = epoch;
      }
    }
    if (std::isfinite(prev) && prev - watch > hp.divergence_nats)
      throw DivergenceError("PPLL dropped by " + std::to_string(prev - watch) + " nats at epoch " +
                            std::to_string(epoch) + " (lr " + std::to_string(ep.lr) + ")");
    prev = watch;
    rep.epochs.push_back(ep);
    if (on_epoch) on_epoch(ep);
  }
  return rep;
}

}  // namespace exnode::cnf
