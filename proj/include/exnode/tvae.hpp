#pragma once

// Continuous-time VAE over temporal sets. The encoder embeds every set with a
// per-element MLP and max pool, then runs a GRU from the last time step back to
// the first (Δt appended to each input) to get q(z_t0 | X). A latent ODE carries
// z_t0 to any time, and a conditional set CNF with condition (z_t, t) scores or
// samples the set at that time. Flow time s in [0, 1] is separate from physical t.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "exnode/autodiff.hpp"
#include "exnode/layers.hpp"
#include "exnode/ode.hpp"
#include "exnode/optim.hpp"
#include "exnode/set_cnf.hpp"
#include "exnode/synth.hpp"

namespace exnode::tvae {

using synth::TemporalSeries;

struct TvaeSpec {
  std::size_t dim = 2;
  std::size_t embed = 32;         // per-set embedding width
  std::size_t hidden = 32;        // GRU state width
  std::size_t latent = 8;
  std::size_t latent_hidden = 32;
  std::vector<std::size_t> decoder{32, 32};  // concatsquash widths before the output layer
  double t0 = 0.0;                            // time of the encoded latent
  ode::SolverConfig latent_solver = ode::SolverConfig::rk4(4);
  ode::SolverConfig decoder_solver = ode::SolverConfig::rk4(4);

  std::size_t cond() const { return latent + 1; }
};

struct TvaeModel {
  TvaeSpec spec;
  nn::EquivariantNet decoder;
  ParamStore params;

  static TvaeModel create(const TvaeSpec& spec, Rng& rng) {
    if (spec.latent == 0 || spec.dim == 0) throw ShapeError("temporal model needs positive latent and data width");
    TvaeModel m;
    m.spec = spec;
    const std::size_t E = spec.embed, H = spec.hidden, L = spec.latent;
    nn::init_linear(m.params, "enc.phi.0", spec.dim, E, rng);
    nn::init_linear(m.params, "enc.phi.1", E, E, rng);
    for (const char* gate : {"z", "r", "h"}) {
      nn::init_linear(m.params, std::string("enc.gru.x") + gate, E + 1, H, rng);
      nn::init_linear(m.params, std::string("enc.gru.h") + gate, H, H, rng, false, false);
    }
    nn::init_linear(m.params, "enc.mean", H, L, rng);
    nn::init_linear(m.params, "enc.logstd", H, L, rng);
    nn::init_linear(m.params, "lat.0", L, spec.latent_hidden, rng);
    nn::init_linear(m.params, "lat.1", spec.latent_hidden, spec.latent_hidden, rng);
    nn::init_linear(m.params, "lat.2", spec.latent_hidden, L, rng, true);
    std::vector<nn::LayerSpec> layers;
    for (std::size_t w : spec.decoder) layers.push_back({nn::LayerSpec::Kind::ConcatSquash, w});
    layers.push_back({nn::LayerSpec::Kind::ConcatSquash, spec.dim, 0, 1, nn::Pool::Mean, nn::Activation::Identity});
    m.decoder = nn::build_net("dec", spec.dim, layers, spec.dim, nn::TimeMode::None, spec.cond());
    m.decoder.init(m.params, rng, true);
    return m;
  }

  /// dz/dt of the latent state (B, L); autonomous.
  ode::GraphField latent_dynamics() const {
    return [this](ad::Graph& g, ad::Var z, double) {
      ad::Var h = g.tanh(nn::linear(g, params, "lat.0", z));
      h = g.tanh(nn::linear(g, params, "lat.1", h));
      return nn::linear(g, params, "lat.2", h);
    };
  }

  /// Decoder flow dynamics with a condition node living in the solver's graph.
  ode::GraphField decoder_dynamics(ad::Var cond) const {
    return [this, cond](ad::Graph& g, ad::Var y, double s) { return decoder.forward(g, params, y, s, cond); };
  }
};

// ---- batching ---------------------------------------------------------------

/// Series stacked step by step: sets[i] is (B, n_i, d).
struct SeriesBatch {
  std::vector<double> times;
  std::vector<DenseArray> sets;

  std::size_t batch() const { return sets.front().dim(0); }
};

inline void check_series(const TemporalSeries& s, std::size_t dim) {
  if (s.times.empty() || s.sets.size() != s.times.size()) throw ShapeError("series needs one set per time, non-empty");
  for (std::size_t i = 0; i < s.times.size(); ++i) {
    if (i > 0 && !(s.times[i] > s.times[i - 1])) throw ShapeError("series times must be strictly increasing");
    const Shape& sh = s.sets[i].shape();
    if (sh.size() != 2 || sh[0] == 0 || sh[1] != dim)
      throw ShapeError("set at time index " + std::to_string(i) + " must be (n, " + std::to_string(dim) + "), got " +
                       to_string(sh));
  }
}

/// Stacks series that share their time grid and per-step cardinalities.
inline SeriesBatch stack_series(const std::vector<const TemporalSeries*>& items, std::size_t dim) {
  if (items.empty()) throw ShapeError("empty series batch");
  const TemporalSeries& first = *items.front();
  check_series(first, dim);
  SeriesBatch b;
  b.times = first.times;
  for (std::size_t i = 0; i < first.times.size(); ++i) {
    const std::size_t n = first.sets[i].dim(0);
    DenseArray x(Shape{items.size(), n, dim});
    for (std::size_t k = 0; k < items.size(); ++k) {
      const TemporalSeries& s = *items[k];
      if (k > 0) check_series(s, dim);
      if (s.times != first.times || s.sets[i].dim(0) != n)
        throw ShapeError("series in one batch must share times and per-step set sizes");
      std::copy_n(s.sets[i].data(), n * dim, x.data() + k * n * dim);
    }
    b.sets.push_back(std::move(x));
  }
  return b;
}

inline SeriesBatch stack_series(const TemporalSeries& s, std::size_t dim) { return stack_series({&s}, dim); }

// ---- encoder ----------------------------------------------------------------

struct PosteriorParams {
  DenseArray mean;  // (B, L)
  DenseArray std;   // (B, L), positive
};

/// Invariant per-set embedding, (B, n, d) -> (B, E).
inline ad::Var set_embedding(ad::Graph& g, const TvaeModel& m, ad::Var x) {
  ad::Var h = g.tanh(nn::linear(g, m.params, "enc.phi.0", x));
  h = g.tanh(nn::linear(g, m.params, "enc.phi.1", h));
  return g.max(h, 1, false);
}

inline ad::Var gru_cell(ad::Graph& g, const ParamStore& ps, ad::Var x, ad::Var h) {
  auto pre = [&](const char* gate, ad::Var hin) {
    return g.add(nn::linear(g, ps, std::string("enc.gru.x") + gate, x),
                 nn::linear(g, ps, std::string("enc.gru.h") + gate, hin, false));
  };
  ad::Var z = g.sigmoid(pre("z", h));
  ad::Var r = g.sigmoid(pre("r", h));
  ad::Var cand = g.tanh(pre("h", g.mul(r, h)));
  return g.add(h, g.mul(z, g.sub(cand, h)));
}

/// Mean and log-std of q(z_t0 | X), each (B, L).
inline std::pair<ad::Var, ad::Var> encode(ad::Graph& g, const TvaeModel& m, const SeriesBatch& s,
                                          const std::vector<ad::Var>& xs) {
  const std::size_t B = s.batch(), N = s.times.size();
  ad::Var h = g.constant(DenseArray(Shape{B, m.spec.hidden}, 0.0));
  for (std::size_t k = N; k-- > 0;) {
    const double dt = k + 1 < N ? s.times[k + 1] - s.times[k] : 0.0;
    ad::Var in = g.concat({set_embedding(g, m, xs[k]), g.constant(DenseArray(Shape{B, 1}, dt))}, 1);
    h = gru_cell(g, m.params, in, h);
  }
  return {nn::linear(g, m.params, "enc.mean", h), nn::linear(g, m.params, "enc.logstd", h)};
}

inline PosteriorParams encode_series(const TvaeModel& m, const SeriesBatch& s) {
  ad::Graph g;
  std::vector<ad::Var> xs;
  for (const DenseArray& x : s.sets) xs.push_back(g.constant(x));
  auto [mu, logstd] = encode(g, m, s, xs);
  PosteriorParams p{g.value(mu), g.value(logstd)};
  for (double& v : p.std.values()) v = std::exp(v);
  return p;
}

inline PosteriorParams encode_series(const TvaeModel& m, const TemporalSeries& s) {
  return encode_series(m, stack_series(s, m.spec.dim));
}

// ---- latent trajectory --------------------------------------------------------

/// States at each requested time, integrating from t0 and then between
/// consecutive requests (any order).
inline std::vector<ad::Var> latent_transition(ad::Graph& g, const ode::GraphField& f, ad::Var z0, double t0,
                                              const std::vector<double>& times, const ode::SolverConfig& solver) {
  std::vector<ad::Var> out;
  ad::Var z = z0;
  double t = t0;
  for (double ti : times) {
    z = ode::integrate_graph(g, f, z, t, ti, solver);
    t = ti;
    out.push_back(z);
  }
  return out;
}

inline std::vector<DenseArray> latent_transition(const ode::GraphField& f, const DenseArray& z0, double t0,
                                                 const std::vector<double>& times, const ode::SolverConfig& solver) {
  std::vector<DenseArray> out;
  DenseArray z = z0;
  double t = t0;
  const ode::VectorField vf = ode::numeric(f);
  for (double ti : times) {
    if (ti != t) z = ode::integrate(vf, z, t, ti, solver).y1;
    t = ti;
    out.push_back(z);
  }
  return out;
}

inline std::vector<DenseArray> latent_transition(const TvaeModel& m, const DenseArray& z0,
                                                 const std::vector<double>& times) {
  return latent_transition(m.latent_dynamics(), z0, m.spec.t0, times, m.spec.latent_solver);
}

/// Decoder condition (z_t, t), (B, L + 1).
inline ad::Var condition(ad::Graph& g, ad::Var z, double t) {
  const std::size_t B = g.shape(z)[0];
  return g.concat({z, g.constant(DenseArray(Shape{B, 1}, t))}, 1);
}

inline DenseArray condition(const DenseArray& z, double t) {
  const std::size_t B = z.dim(0), L = z.dim(1);
  DenseArray c(Shape{B, L + 1});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(z.data() + b * L, L, c.data() + b * (L + 1));
    c[b * (L + 1) + L] = t;
  }
  return c;
}

// ---- decoder ------------------------------------------------------------------

/// log p(x_t | z_t) per set (B), with the trace settings of `trace`.
inline DenseArray decode_loglik(const TvaeModel& m, const SetBatch& x, const DenseArray& z_t, double t,
                                const cnf::TraceConfig& trace, Rng* rng = nullptr,
                                std::optional<ode::SolverConfig> solver = std::nullopt) {
  if (z_t.shape() != Shape{x.batch(), m.spec.latent}) throw ShapeError("latent state must be (B, latent)");
  auto f = m.decoder.dynamics(m.params, condition(z_t, t));
  return cnf::log_likelihood(f, x, solver ? *solver : m.spec.decoder_solver, trace, rng).log_p;
}

// ---- ELBO ---------------------------------------------------------------------

/// KL(N(mu, sigma^2) || N(0, I)) per row, from mean and log-std (B, L).
inline ad::Var kl_standard_normal(ad::Graph& g, ad::Var mu, ad::Var logstd) {
  ad::Var var = g.exp(g.scale(logstd, 2.0));
  ad::Var t = g.sub(g.scale(g.add(var, g.mul(mu, mu)), 0.5), logstd);
  return g.add_scalar(g.sum(t, 1), -0.5 * static_cast<double>(g.shape(mu)[1]));
}

inline double kl_standard_normal(const DenseArray& mean, const DenseArray& std) {
  double kl = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i)
    kl += 0.5 * (std[i] * std[i] + mean[i] * mean[i]) - std::log(std[i]) - 0.5;
  return kl;
}

struct ElboTerms {
  ad::Var elbo, recon, kl;  // scalars: means over the batch of per-series sums
};

struct ElboConfig {
  double kl_weight = 1.0;
  cnf::TraceConfig trace = cnf::TraceConfig::hutchinson(1);
};

/// Single-sample reparameterised ELBO. All randomness (posterior noise, trace
/// probes) is drawn from `rng`, so a fixed seed gives a deterministic objective.
inline ElboTerms elbo(ad::Graph& g, const TvaeModel& m, const SeriesBatch& s, Rng& rng, const ElboConfig& cfg = {}) {
  const std::size_t B = s.batch(), N = s.times.size();
  std::vector<ad::Var> xs;
  for (std::size_t k = 0; k < N; ++k) xs.push_back(g.input("x" + std::to_string(k), s.sets[k]));
  auto [mu, logstd] = encode(g, m, s, xs);
  ad::Var eps = g.constant(rng.normal_array({B, m.spec.latent}));
  ad::Var z0 = g.add(mu, g.mul(g.exp(logstd), eps));
  auto zs = latent_transition(g, m.latent_dynamics(), z0, m.spec.t0, s.times, m.spec.latent_solver);
  const double invB = 1.0 / static_cast<double>(B);
  ad::Var recon{};
  for (std::size_t k = 0; k < N; ++k) {
    ad::Var c = condition(g, zs[k], s.times[k]);
    auto probes = cnf::make_probes(s.sets[k].shape(), cfg.trace, &rng);
    ad::Var lp = cnf::log_likelihood_graph(g, m.decoder_dynamics(c), xs[k], m.spec.decoder_solver, probes,
                                           cnf::probe_weight(cfg.trace, probes.size()));
    ad::Var term = g.scale(g.sum_all(lp), invB);
    if (!std::isfinite(g.value(term).item()))
      throw DivergenceError("non-finite reconstruction term at time index " + std::to_string(k));
    recon = recon.valid() ? g.add(recon, term) : term;
  }
  ad::Var kl = g.scale(g.sum_all(kl_standard_normal(g, mu, logstd)), invB);
  if (!std::isfinite(g.value(kl).item())) throw DivergenceError("non-finite KL term");
  ad::Var e = cfg.kl_weight == 0.0 ? recon : g.sub(recon, g.scale(kl, cfg.kl_weight));
  return {e, recon, kl};
}

// ---- sampling -------------------------------------------------------------------

/// One sampled series: latent z_t0 from the prior (or `z0`), n base points per
/// time, each decoded from s = 1 back to s = 0 under condition (z_t, t).
inline TemporalSeries sample_series(const TvaeModel& m, const std::vector<double>& times, std::size_t n, Rng& rng,
                                    std::optional<DenseArray> z0 = std::nullopt) {
  if (times.empty()) throw ShapeError("sampling needs at least one time");
  DenseArray z = z0 ? *z0 : rng.normal_array({1, m.spec.latent});
  if (z.shape() != Shape{1, m.spec.latent}) throw ShapeError("z0 must be (1, latent)");
  auto traj = latent_transition(m, z, times);
  TemporalSeries out;
  out.times = times;
  for (std::size_t k = 0; k < times.size(); ++k) {
    DenseArray y = rng.normal_array({1, n, m.spec.dim});
    auto f = m.decoder.dynamics(m.params, condition(traj[k], times[k]));
    DenseArray x = ode::integrate(f, y, 1.0, 0.0, m.spec.decoder_solver).y1;
    if (!x.all_finite()) throw ode::NonFiniteDynamics("sampled set at time " + std::to_string(times[k]) + " is not finite");
    out.sets.push_back(x.reshaped({n, m.spec.dim}));
  }
  return out;
}

// ---- training -------------------------------------------------------------------

struct TvaeHyper {
  int epochs = 20;
  std::size_t batch = 16;
  AdamConfig adam{};
  StepSchedule schedule{0.5, 1000};
  ElboConfig elbo{};
  int kl_anneal_epochs = 0;  // linear warm-up of the KL weight; 0 keeps it fixed
  std::uint64_t seed = 0;
  double divergence_nats = 10.0;  // per-point ELBO drop that aborts training
};

struct TvaeEpoch {
  int epoch = 0;
  double lr = 0.0;
  double kl_weight = 1.0;
  double elbo = 0.0, recon = 0.0, kl = 0.0;  // per-series means
  double kl_min = 0.0;                       // smallest batch KL seen this epoch
};

struct TvaeReport {
  std::vector<TvaeEpoch> epochs;
};

inline double kl_weight_at(const TvaeHyper& hp, int epoch) {
  if (hp.kl_anneal_epochs <= 0) return hp.elbo.kl_weight;
  return hp.elbo.kl_weight * std::min(1.0, static_cast<double>(epoch + 1) / hp.kl_anneal_epochs);
}

/// Maximises the ELBO with Adam over shuffled minibatches of series.
inline TvaeReport train_tvae(TvaeModel& m, const std::vector<TemporalSeries>& data, const TvaeHyper& hp,
                             const std::function<void(const TvaeEpoch&)>& on_epoch = {}) {
  if (data.empty()) throw ShapeError("no training series");
  for (const auto& s : data) check_series(s, m.spec.dim);
  std::size_t points = 0;
  for (const auto& x : data.front().sets) points += x.dim(0);
  Rng rng(hp.seed);
  Adam opt(hp.adam);
  TvaeReport rep;
  double prev = std::nan("");
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    TvaeEpoch ep;
    ep.epoch = epoch;
    ep.lr = hp.schedule.at(hp.adam.lr, epoch);
    ep.kl_weight = kl_weight_at(hp, epoch);
    ep.kl_min = std::numeric_limits<double>::infinity();
    opt.set_lr(ep.lr);
    ElboConfig ec = hp.elbo;
    ec.kl_weight = ep.kl_weight;
    Rng erng = rng.split(static_cast<std::uint64_t>(epoch));
    auto order = erng.permutation(data.size());
    double se = 0, sr = 0, sk = 0;
    for (std::size_t s = 0; s < order.size(); s += hp.batch) {
      const std::size_t e = std::min(order.size(), s + hp.batch);
      std::vector<const TemporalSeries*> items;
      for (std::size_t k = s; k < e; ++k) items.push_back(&data[order[k]]);
      SeriesBatch b = stack_series(items, m.spec.dim);
      Rng brng = erng.split(1000 + s);
      ad::Graph g;
      ElboTerms t = elbo(g, m, b, brng, ec);
      auto grads = g.param_grads(g.backward(g.neg(t.elbo)));
      opt.step(m.params, grads);
      const double w = static_cast<double>(e - s);
      se += g.value(t.elbo).item() * w;
      sr += g.value(t.recon).item() * w;
      const double kl = g.value(t.kl).item();
      sk += kl * w;
      ep.kl_min = std::min(ep.kl_min, kl);
    }
    const double cnt = static_cast<double>(data.size());
    ep.elbo = se / cnt;
    ep.recon = sr / cnt;
    ep.kl = sk / cnt;
    const double per_point = ep.elbo / static_cast<double>(points);
    if (!std::isfinite(per_point))
      throw DivergenceError("non-finite ELBO at epoch " + std::to_string(epoch) + " (lr " + std::to_string(ep.lr) + ")");
    if (std::isfinite(prev) && prev - per_point > hp.divergence_nats)
      throw DivergenceError("ELBO dropped by " + std::to_string(prev - per_point) + " nats per point at epoch " +
                            std::to_string(epoch) + " (lr " + std::to_string(ep.lr) + ")");
    prev = per_point;
    rep.epochs.push_back(ep);
    if (on_epoch) on_epoch(ep);
  }
  return rep;
}

}  // namespace exnode::tvae
