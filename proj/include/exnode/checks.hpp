#pragma once

// Property batteries run by `exnode check` and the acceptance binary. Each check
// reports a measured value against a threshold on fresh random models.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "exnode/autodiff.hpp"
#include "exnode/classifier.hpp"
#include "exnode/layers.hpp"
#include "exnode/ode.hpp"
#include "exnode/set_cnf.hpp"
#include "exnode/tvae.hpp"

namespace exnode::checks {

using Kind = nn::LayerSpec::Kind;

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured quantity
  double threshold = 0.0;  // passing bound
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  bool sabotage = false;
  std::vector<CheckResult> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : checks)
      arr.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"threshold", c.threshold},
                     {"detail", c.detail}});
    return {{"suite", suite}, {"sabotage", sabotage}, {"passed", passed()}, {"checks", arr}};
  }
};

struct CheckOptions {
  std::uint64_t seed = 0;
  bool sabotage = false;  // adds element-index features to every net (breaks equivariance)
  int models = 20;        // random models per flavor
  int perms = 50;         // permutations per model
  int primitive_seeds = 20;
  int probes = 10000;
};

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::DeepSet: return "deepset";
    case Kind::Attention: return "attention";
    case Kind::ConcatSquash: return "concatsquash";
  }
  return "?";
}

inline constexpr Kind kFlavors[] = {Kind::DeepSet, Kind::Attention, Kind::ConcatSquash};

/// Random two- or three-layer net of one flavor with live (non-zero) output layer.
inline nn::EquivariantNet random_net(Rng& rng, Kind kind, ParamStore& ps, std::size_t d = 2,
                                     nn::Pool pool = nn::Pool::Mean, bool sabotage = false) {
  std::vector<nn::LayerSpec> specs;
  const std::size_t depth = 2 + rng.below(2);
  for (std::size_t i = 0; i < depth; ++i) {
    nn::LayerSpec s;
    s.kind = kind;
    s.out = 4 + rng.below(5);
    s.hidden = 4;
    s.heads = 1 + rng.below(2);
    s.pool = pool;
    s.act = i + 1 < depth ? nn::Activation::Tanh : nn::Activation::Identity;
    if (kind == Kind::Attention && s.out % s.heads) s.heads = 1;
    specs.push_back(s);
  }
  auto net = nn::build_net("f", d, specs, d, nn::TimeMode::Concat);
  net.init(ps, rng, false);
  net.index_features = sabotage;
  return net;
}

inline std::vector<std::vector<std::size_t>> random_perms(Rng& rng, std::size_t batch, std::size_t n) {
  std::vector<std::vector<std::size_t>> p;
  for (std::size_t b = 0; b < batch; ++b) p.push_back(rng.permutation(n));
  return p;
}

inline CheckResult bound(std::string name, double value, double threshold, std::string detail = "") {
  return {std::move(name), std::isfinite(value) && value <= threshold, value, threshold, std::move(detail)};
}

// ---- equivariance --------------------------------------------------------------

/// rk4 solutions commute with permutations of set elements.
inline SuiteReport equivariance(const CheckOptions& opt) {
  SuiteReport rep{"equivariance", opt.sabotage, {}};
  Rng rng(opt.seed);
  for (Kind kind : kFlavors) {
    double worst = 0.0;
    for (int m = 0; m < opt.models; ++m) {
      ParamStore ps;
      const nn::Pool pool = m % 2 ? nn::Pool::Max : nn::Pool::Mean;
      auto net = random_net(rng, kind, ps, 2, pool, opt.sabotage);
      const DenseArray x = rng.normal_array({2, 6, 2});
      auto solve = [&](const DenseArray& v) { return ode::integrate(net.dynamics(ps), v, 0, 1, ode::SolverConfig::rk4(8)).y1; };
      const DenseArray y = solve(x);
      for (int k = 0; k < opt.perms; ++k) {
        auto p = random_perms(rng, 2, 6);
        worst = std::max(worst, max_abs_diff(solve(permute_sets(x, p)), permute_sets(y, p)));
      }
    }
    rep.checks.push_back(bound(std::string("ode_solution_") + kind_name(kind), worst, 1e-9,
                               std::to_string(opt.models) + " nets x " + std::to_string(opt.perms) + " permutations"));
  }
  return rep;
}

// ---- invariance ----------------------------------------------------------------

/// Exchangeable CNF likelihood, classifier and encoder invariance, and the 1D
/// linear-flow likelihood against the discrete change of variables.
inline SuiteReport invariance(const CheckOptions& opt) {
  SuiteReport rep{"invariance", opt.sabotage, {}};
  Rng rng(opt.seed + 1);
  const int perms = std::max(1, opt.perms / 5);
  double worst = 0.0;
  for (int m = 0; m < opt.models; ++m) {
    cnf::SetFlow flow;
    flow.net = random_net(rng, kFlavors[m % 3], flow.params, 2, nn::Pool::Mean, opt.sabotage);
    SetBatch x(rng.normal_array({2, 5, 2}));
    auto base = cnf::log_likelihood(flow.dynamics(), x, ode::SolverConfig::rk4(8), cnf::TraceConfig::exact());
    for (int k = 0; k < perms; ++k) {
      auto r = cnf::log_likelihood(flow.dynamics(), x.permuted(random_perms(rng, 2, 5)), ode::SolverConfig::rk4(8),
                                   cnf::TraceConfig::exact());
      worst = std::max(worst, max_abs_diff(r.log_p, base.log_p));
    }
  }
  rep.checks.push_back(bound("cnf_log_likelihood", worst, 1e-9,
                             std::to_string(opt.models) + " models x " + std::to_string(perms) + " permutations"));

  // dz/dt = a z maps x to x e^a with log|det| = a per coordinate.
  double gap = 0.0;
  for (double a : {-0.7, 0.3, 1.1}) {
    ode::GraphField f = [a](ad::Graph& g, ad::Var z, double) { return g.scale(z, a); };
    SetBatch x(rng.normal_array({3, 4, 1}));
    auto r = cnf::log_likelihood(f, x, ode::SolverConfig::dopri5(1e-9, 1e-9), cnf::TraceConfig::exact());
    for (std::size_t b = 0; b < 3; ++b) {
      double expect = 0.0;
      for (std::size_t i = 0; i < 4; ++i) {
        const double y = x.at(b, i, 0) * std::exp(a);
        expect += -0.5 * y * y - 0.5 * cnf::kLog2Pi + a;
      }
      gap = std::max(gap, std::abs(r.log_p[b] - expect));
    }
  }
  rep.checks.push_back(bound("cnf_1d_change_of_variables", gap, 1e-5));

  worst = 0.0;
  for (int m = 0; m < std::max(1, opt.models / 4); ++m) {
    classify::ClassifierSpec spec;
    spec.hidden = 8;
    spec.dynamics = {{Kind::DeepSet, 8}, {Kind::DeepSet, 8}};
    spec.solver = ode::SolverConfig::rk4(4);
    auto model = classify::ClassifierModel::create(spec, rng);
    ParamStore fresh;
    model.net.init(fresh, rng, false);
    for (const auto& name : fresh.names()) model.params.at(name) = fresh.at(name);
    model.net.index_features = opt.sabotage;
    SetBatch x(rng.normal_array({2, 7, 2}));
    DenseArray base = classify::classify_forward(model, x);
    for (int k = 0; k < perms; ++k)
      worst = std::max(worst, max_abs_diff(classify::classify_forward(model, x.permuted(random_perms(rng, 2, 7))), base));
  }
  rep.checks.push_back(bound("classifier_logits", worst, 1e-9));

  worst = 0.0;
  {
    tvae::TvaeSpec spec;
    spec.embed = 8;
    spec.hidden = 8;
    spec.latent = 3;
    spec.decoder = {8};
    auto model = tvae::TvaeModel::create(spec, rng);
    synth::RotatingSpec rs;
    rs.n = 9;
    rs.noise = 0.05;
    auto s = synth::gen_rotating_series(rs, 1, opt.seed)[0];
    auto base = tvae::encode_series(model, s);
    for (int k = 0; k < perms; ++k) {
      tvae::TemporalSeries p = s;
      for (auto& x : p.sets) x = permute_sets(x.reshaped({1, x.dim(0), x.dim(1)}), {rng.permutation(x.dim(0))}).reshaped(x.shape());
      auto r = tvae::encode_series(model, p);
      worst = std::max({worst, max_abs_diff(r.mean, base.mean), max_abs_diff(r.std, base.std)});
    }
  }
  rep.checks.push_back(bound("tvae_encoder_posterior", worst, 1e-9));
  return rep;
}

// ---- invertibility ---------------------------------------------------------------

inline double roundtrip_gap(const ode::GraphField& f, const DenseArray& x, const ode::SolverConfig& cfg) {
  return ode::roundtrip(ode::numeric(f), x, 0.0, 1.0, cfg).max_abs_error;
}

/// Forward-then-backward integration at dopri5 tol 1e-5 recovers the input.
/// `extra` adds named fields (for example trained models).
inline SuiteReport invertibility(const CheckOptions& opt,
                                 const std::vector<std::pair<std::string, ode::GraphField>>& extra = {}) {
  SuiteReport rep{"invertibility", opt.sabotage, {}};
  Rng rng(opt.seed + 2);
  const auto cfg = ode::SolverConfig::dopri5(1e-5, 1e-5);
  for (Kind kind : kFlavors) {
    double worst = 0.0;
    for (int m = 0; m < std::max(1, opt.models / 4); ++m) {
      ParamStore ps;
      auto net = random_net(rng, kind, ps, 2, nn::Pool::Mean, opt.sabotage);
      worst = std::max(worst, roundtrip_gap(net.dynamics(ps), rng.normal_array({2, 16, 2}), cfg));
    }
    rep.checks.push_back(bound(std::string("roundtrip_random_") + kind_name(kind), worst, 1e-4));
  }
  {
    // A briefly trained flow: the check must not depend on the random init.
    cnf::SetFlow flow;
    flow.net = nn::build_net("cnf", 2, {{Kind::DeepSet, 16}, {Kind::DeepSet, 16}}, 2, nn::TimeMode::Concat);
    flow.net.init(flow.params, rng, true);
    auto data = synth::gen_density_sets(synth::Mixture::four_modes(1.0, 0.4), 32, 16, opt.seed + 3);
    cnf::CnfHyper hp;
    hp.epochs = 3;
    hp.batch = 8;
    hp.adam.lr = 0.01;
    hp.solver = ode::SolverConfig::rk4(4);
    hp.seed = opt.seed;
    cnf::train_cnf(flow, data.sets, nullptr, hp);
    rep.checks.push_back(bound("roundtrip_trained_cnf", roundtrip_gap(flow.dynamics(), data.sets.values(), cfg), 1e-4));
  }
  for (const auto& [name, f] : extra)
    rep.checks.push_back(bound("roundtrip_" + name, roundtrip_gap(f, rng.normal_array({4, 64, 2}), cfg), 1e-4));
  return rep;
}

// ---- gradients -------------------------------------------------------------------

struct Primitive {
  const char* name;
  std::vector<Shape> shapes;
  std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)> f;
  bool positive = false;  // inputs moved into [0.5, 2.5] (log, div)
};

inline std::vector<Primitive> primitives() {
  using G = ad::Graph;
  using V = std::vector<ad::Var>;
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](G& g, const V& v) { return g.matmul(v[0], v[1]); }},
      {"matvec", {{3, 4}, {4}}, [](G& g, const V& v) { return g.matmul(v[0], v[1]); }},
      {"bmm", {{2, 3, 4}, {2, 4, 2}}, [](G& g, const V& v) { return g.bmm(v[0], v[1]); }},
      {"transpose", {{2, 3, 4}}, [](G& g, const V& v) { return g.transpose(v[0]); }},
      {"add", {{2, 3}, {2, 3}}, [](G& g, const V& v) { return g.add(v[0], v[1]); }},
      {"add_bcast", {{2, 3, 4}, {4}}, [](G& g, const V& v) { return g.add(v[0], v[1]); }},
      {"add_scalar_arr", {{2, 3}, {}}, [](G& g, const V& v) { return g.add(v[0], v[1]); }},
      {"sub", {{3}, {2, 3}}, [](G& g, const V& v) { return g.sub(v[0], v[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](G& g, const V& v) { return g.mul(v[0], v[1]); }},
      {"mul_bcast", {{2, 3, 2}, {3, 2}}, [](G& g, const V& v) { return g.mul(v[0], v[1]); }},
      {"div", {{2, 3}, {2, 3}}, [](G& g, const V& v) { return g.div(v[0], v[1]); }, true},
      {"tanh", {{2, 3}}, [](G& g, const V& v) { return g.tanh(v[0]); }},
      {"sigmoid", {{2, 3}}, [](G& g, const V& v) { return g.sigmoid(v[0]); }},
      {"exp", {{2, 3}}, [](G& g, const V& v) { return g.exp(v[0]); }},
      {"log", {{2, 3}}, [](G& g, const V& v) { return g.log(v[0]); }, true},
      {"softmax", {{2, 4}}, [](G& g, const V& v) { return g.softmax(v[0]); }},
      {"softmax_axis0", {{3, 2}}, [](G& g, const V& v) { return g.softmax(v[0], 0); }},
      {"sum", {{2, 3, 4}}, [](G& g, const V& v) { return g.sum(v[0], 1); }},
      {"mean", {{2, 3, 4}}, [](G& g, const V& v) { return g.mean(v[0], 1, true); }},
      {"max", {{2, 5, 3}}, [](G& g, const V& v) { return g.max(v[0], 1); }},
      {"concat", {{2, 3}, {2, 2}}, [](G& g, const V& v) { return g.concat({v[0], v[1]}, 1); }},
      {"slice", {{2, 5}}, [](G& g, const V& v) { return g.slice(v[0], 1, 1, 4); }},
      {"broadcast", {{2, 1, 3}}, [](G& g, const V& v) { return g.broadcast(v[0], 1, 4); }},
      {"reshape", {{2, 6}}, [](G& g, const V& v) { return g.reshape(v[0], {3, 4}); }},
      {"scale", {{4}}, [](G& g, const V& v) { return g.scale(v[0], -1.7); }},
      {"relu", {{2, 3}}, [](G& g, const V& v) { return g.relu(v[0]); }},
  };
}

/// Worst relative error of sum(w * prim(x)) against finite differences, with
/// random inputs and weights from `seed`.
inline double primitive_error(const Primitive& p, std::uint64_t seed, std::optional<ad::Op> fault = std::nullopt) {
  Rng rng(seed);
  ParamStore ps;
  for (std::size_t i = 0; i < p.shapes.size(); ++i) {
    DenseArray a = rng.uniform_array(p.shapes[i], -2, 2);
    if (p.positive)
      for (double& v : a.values()) v = std::abs(v) + 0.5;
    ps.add("x" + std::to_string(i), a);
  }
  DenseArray w;
  auto build = [&](ad::Graph& g) {
    std::vector<ad::Var> in;
    for (std::size_t i = 0; i < p.shapes.size(); ++i) in.push_back(g.param(ps, "x" + std::to_string(i)));
    ad::Var y = p.f(g, in);
    if (w.shape() != g.shape(y)) {
      Rng wr(seed ^ 0xabcdef);
      w = wr.uniform_array(g.shape(y), -1, 1);
    }
    return g.sum_all(g.mul(y, g.constant(w)));
  };
  ad::GradCheckOptions o;
  o.fault = fault;
  return ad::grad_check(build, ps, o).max_rel_error;
}

/// Largest relative error between adjoint (dopri5 1e-9) and backprop through
/// rk4(64) gradients of L = sum(y1 * w), over parameters and y0.
inline double adjoint_gap(const ode::GraphField& f, ParamStore& ps, const DenseArray& y0, Rng& rng) {
  DenseArray lg = rng.uniform_array(y0.shape(), -1, 1);
  auto adj = ode::adjoint_grad(f, ps, y0, 0.0, 1.0, ode::SolverConfig::dopri5(1e-9, 1e-9), lg);
  auto bp = ode::backprop_grad(f, ps, y0, 0.0, 1.0, ode::SolverConfig::rk4(64), lg);
  double worst = 0.0;
  for (const auto& [name, g] : bp.grad_params)
    for (std::size_t i = 0; i < g.size(); ++i)
      worst = std::max(worst, ad::relative_error(g[i], adj.grad_params.at(name)[i]));
  for (std::size_t i = 0; i < y0.size(); ++i) worst = std::max(worst, ad::relative_error(bp.grad_y0[i], adj.grad_y0[i]));
  return worst;
}

/// Finite differences for every primitive, then adjoint against backprop on
/// equivariant dynamics. Sabotage corrupts the tanh gradient rule.
inline SuiteReport gradients(const CheckOptions& opt) {
  SuiteReport rep{"gradients", opt.sabotage, {}};
  const std::optional<ad::Op> fault = opt.sabotage ? std::optional<ad::Op>(ad::Op::Tanh) : std::nullopt;
  for (const auto& p : primitives()) {
    double worst = 0.0;
    for (int s = 0; s < opt.primitive_seeds; ++s)
      worst = std::max(worst, primitive_error(p, opt.seed + static_cast<std::uint64_t>(s), fault));
    rep.checks.push_back(bound(std::string("fd_") + p.name, worst, 1e-4));
  }
  Rng rng(opt.seed + 4);
  for (Kind kind : kFlavors) {
    double worst = 0.0;
    for (int m = 0; m < 3; ++m) {
      ParamStore ps;
      auto net = random_net(rng, kind, ps, 2, nn::Pool::Mean, opt.sabotage);
      auto f = net.dynamics(ps);
      ode::GraphField field = f;
      if (fault) {
        // Route the fault through the solver's graphs as well.
        field = [f](ad::Graph& g, ad::Var y, double t) {
          g.inject_gradient_fault(ad::Op::Tanh);
          return f(g, y, t);
        };
      }
      worst = std::max(worst, adjoint_gap(field, ps, rng.normal_array({1, 6, 2}), rng));
    }
    rep.checks.push_back(bound(std::string("adjoint_vs_backprop_") + kind_name(kind), worst, 1e-3));
  }
  return rep;
}

// ---- trace -----------------------------------------------------------------------

/// Hutchinson: exact on diagonal Jacobians with one Rademacher probe; within 3
/// standard errors of the exact trace at `probes` single-probe samples.
inline SuiteReport trace(const CheckOptions& opt) {
  SuiteReport rep{"trace", opt.sabotage, {}};
  Rng rng(opt.seed + 5);
  {
    const DenseArray a = rng.normal_array({1, 5, 2});
    ode::GraphField f = [a](ad::Graph& g, ad::Var z, double) { return g.mul(g.tanh(z), g.constant(a)); };
    SetBatch x(rng.normal_array({1, 5, 2}));
    const double exact = cnf::trace_exact(f, x, 0.0)[0];
    double worst = 0.0;
    for (int k = 0; k < 20; ++k)
      worst = std::max(worst, std::abs(cnf::trace_hutchinson(f, x, 0.0, cnf::TraceConfig::hutchinson(1), rng)[0] - exact));
    rep.checks.push_back(bound("diagonal_single_rademacher", worst, 1e-12));
  }
  for (cnf::Probe probe : {cnf::Probe::Rademacher, cnf::Probe::Gaussian}) {
    const Shape s{1, 4, 2};
    const DenseArray A = rng.normal_array({8, 8});
    ode::GraphField f = [A, s](ad::Graph& g, ad::Var z, double) {
      return g.reshape(g.matmul(g.reshape(z, {1, 8}), g.constant(A)), s);
    };
    SetBatch x(rng.normal_array(s));
    const double exact = cnf::trace_exact(f, x, 0.0)[0];
    // All probes in one call, then per-probe estimates from the same draws.
    std::vector<DenseArray> probes;
    for (int k = 0; k < opt.probes; ++k)
      probes.push_back(probe == cnf::Probe::Rademacher ? rng.rademacher_array(s) : rng.normal_array(s));
    double mean = 0.0, sq = 0.0;
    for (std::size_t start = 0; start < probes.size(); start += 256) {
      ad::Graph g;
      ad::Var z = g.input("z", x.values());
      ad::Var dz = f(g, z, 0.0);
      for (std::size_t k = start; k < std::min(probes.size(), start + 256); ++k) {
        const double v = g.value(cnf::trace_from_probes(g, dz, z, {probes[k]}, 1.0))[0];
        mean += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(opt.probes);
    mean /= n;
    const double se = std::sqrt(std::max(0.0, sq / n - mean * mean) / (n - 1));
    const double z = std::abs(mean - exact) / se;
    rep.checks.push_back(bound(std::string("monte_carlo_") + (probe == cnf::Probe::Rademacher ? "rademacher" : "gaussian"),
                               z, 3.0, "|mean - exact| in standard errors over " + std::to_string(opt.probes) + " probes"));
  }
  return rep;
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"equivariance", "invariance", "invertibility", "gradients", "trace"};
  return names;
}

/// Throws std::invalid_argument for unknown suites.
inline SuiteReport run_suite(const std::string& name, const CheckOptions& opt) {
  if (name == "equivariance") return equivariance(opt);
  if (name == "invariance") return invariance(opt);
  if (name == "invertibility") return invertibility(opt);
  if (name == "gradients") return gradients(opt);
  if (name == "trace") return trace(opt);
  throw std::invalid_argument("unknown suite '" + name + "' (expected equivariance, invariance, invertibility, gradients or trace)");
}

}  // namespace exnode::checks
