#pragma once

// Explicit ODE integration: fixed-step RK4 and adaptive Dormand-Prince 5(4),
// over plain arrays or over graph nodes (backprop through the solver), plus
// adjoint-method gradients that re-solve the state backwards in time.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <map>
#include <sstream>
#include <string>
#include <utility>

#include "exnode/autodiff.hpp"

namespace exnode::ode {

class SolverError : public Error {
 public:
  using Error::Error;
};

class MaxStepsExceeded : public SolverError {
 public:
  using SolverError::SolverError;
};

class NonFiniteDynamics : public SolverError {
 public:
  using SolverError::SolverError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Method { Rk4, Dopri5 };

inline const char* method_name(Method m) { return m == Method::Rk4 ? "rk4" : "dopri5"; }

inline Method parse_method(const std::string& s) {
  if (s == "rk4") return Method::Rk4;
  if (s == "dopri5") return Method::Dopri5;
  throw ConfigError("solver.method: unknown solver method '" + s + "' (expected rk4 or dopri5)");
}

struct SolverConfig {
  Method method = Method::Rk4;
  int steps = 8;         // rk4
  double rtol = 1e-5;    // dopri5
  double atol = 1e-5;    // dopri5
  long max_steps = 100000;

  void validate() const {
    if (steps < 1) throw ConfigError("solver.steps must be >= 1");
    if (!(atol > 0 && atol < 1)) throw ConfigError("solver.atol must lie in (0, 1)");
    if (!(rtol > 0 && rtol < 1)) throw ConfigError("solver.rtol must lie in (0, 1)");
    if (max_steps < 1) throw ConfigError("solver.max_steps must be >= 1");
  }

  static SolverConfig rk4(int steps) {
    SolverConfig c;
    c.method = Method::Rk4;
    c.steps = steps;
    return c;
  }
  static SolverConfig dopri5(double rtol, double atol) {
    SolverConfig c;
    c.method = Method::Dopri5;
    c.rtol = rtol;
    c.atol = atol;
    return c;
  }
};

struct OdeResult {
  DenseArray y1;
  long nfe = 0;
  long accepted = 0;
  long rejected = 0;
};

/// dy/dt = f(y, t) on plain arrays.
using VectorField = std::function<DenseArray(const DenseArray& y, double t)>;

/// dy/dt = f(y, t) expressed in graph ops; parameters are pulled into the graph by f.
using GraphField = std::function<ad::Var(ad::Graph& g, ad::Var y, double t)>;

/// Evaluates a GraphField on a fresh graph per call.
inline VectorField numeric(GraphField f) {
  return [f = std::move(f)](const DenseArray& y, double t) {
    ad::Graph g;
    return g.value(f(g, g.input("y", y), t));
  };
}

namespace detail {

// Dormand-Prince 5(4) tableau.
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// b - b*, the embedded 4th-order error weights (k7 = f(y_new) by FSAL).
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                        e6 = 22.0 / 525, e7 = -1.0 / 40;

inline constexpr double kSafety = 0.9, kMinFactor = 0.2, kMaxFactor = 10.0;
inline constexpr double kBeta = 0.04, kAlpha = 0.2 - 0.75 * kBeta;

inline void check_finite(const DenseArray& v, double t) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << "non-finite dynamics output at t=" << t << ", entry " << i << " = " << v[i];
      throw NonFiniteDynamics(os.str());
    }
}

struct ArrayBackend {
  const VectorField& f;
  long nfe = 0;

  DenseArray eval(const DenseArray& y, double t) {
    ++nfe;
    DenseArray d = f(y, t);
    if (d.shape() != y.shape())
      throw ShapeError("dynamics output shape " + to_string(d.shape()) + " differs from state " + to_string(y.shape()));
    check_finite(d, t);
    return d;
  }
  DenseArray lincomb(const DenseArray& y, double h, std::initializer_list<std::pair<double, const DenseArray*>> ks) {
    DenseArray out = y;
    for (auto [c, k] : ks)
      if (c != 0.0) out.axpy(h * c, *k);
    return out;
  }
  const DenseArray& value(const DenseArray& y) const { return y; }
};

struct GraphBackend {
  ad::Graph& g;
  const GraphField& f;
  long nfe = 0;

  ad::Var eval(ad::Var y, double t) {
    ++nfe;
    ad::Var d = f(g, y, t);
    if (g.shape(d) != g.shape(y))
      throw ShapeError("dynamics output shape " + to_string(g.shape(d)) + " differs from state " + to_string(g.shape(y)));
    check_finite(g.value(d), t);
    return d;
  }
  ad::Var lincomb(ad::Var y, double h, std::initializer_list<std::pair<double, const ad::Var*>> ks) {
    ad::Var acc = y;
    for (auto [c, k] : ks)
      if (c != 0.0) acc = g.add(acc, g.scale(*k, h * c));
    return acc;
  }
  const DenseArray& value(ad::Var y) const { return g.value(y); }
};

template <class Backend, class Y>
Y rk4(Backend& be, Y y, double t0, double t1, int steps) {
  const double h = (t1 - t0) / steps;
  for (int s = 0; s < steps; ++s) {
    const double t = t0 + s * h;
    Y k1 = be.eval(y, t);
    Y k2 = be.eval(be.lincomb(y, h, {{0.5, &k1}}), t + 0.5 * h);
    Y k3 = be.eval(be.lincomb(y, h, {{0.5, &k2}}), t + 0.5 * h);
    Y k4 = be.eval(be.lincomb(y, h, {{1.0, &k3}}), t + h);
    y = be.lincomb(y, h, {{1.0 / 6, &k1}, {1.0 / 3, &k2}, {1.0 / 3, &k3}, {1.0 / 6, &k4}});
  }
  return y;
}

inline double error_norm(const DenseArray& err, const DenseArray& y0, const DenseArray& y1, double rtol, double atol) {
  double sq = 0.0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    const double sc = atol + rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    const double r = err[i] / sc;
    sq += r * r;
  }
  return std::sqrt(sq / static_cast<double>(std::max<std::size_t>(err.size(), 1)));
}

template <class Backend, class Y>
Y dopri5(Backend& be, Y y, double t0, double t1, const SolverConfig& cfg, OdeResult& stats) {
  const double span = t1 - t0;
  const double dir = span > 0 ? 1.0 : -1.0;
  double h = span / 100.0;
  double t = t0;
  double prev_err = 1e-4;
  bool last_rejected = false;
  Y k1 = be.eval(y, t);
  long attempts = 0;
  while (dir * (t1 - t) > 0) {
    if (attempts >= cfg.max_steps) {
      std::ostringstream os;
      os << "dopri5 exceeded max_steps=" << cfg.max_steps << " at t=" << t << " (target " << t1 << ")";
      throw MaxStepsExceeded(os.str());
    }
    ++attempts;
    if (dir * (t + h - t1) > 0) h = t1 - t;
    Y k2 = be.eval(be.lincomb(y, h, {{a21, &k1}}), t + c2 * h);
    Y k3 = be.eval(be.lincomb(y, h, {{a31, &k1}, {a32, &k2}}), t + c3 * h);
    Y k4 = be.eval(be.lincomb(y, h, {{a41, &k1}, {a42, &k2}, {a43, &k3}}), t + c4 * h);
    Y k5 = be.eval(be.lincomb(y, h, {{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}), t + c5 * h);
    Y k6 = be.eval(be.lincomb(y, h, {{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}), t + h);
    Y ynew = be.lincomb(y, h, {{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
    Y k7 = be.eval(ynew, t + h);

    const DenseArray& v1 = be.value(k1);
    const DenseArray& v3 = be.value(k3);
    const DenseArray& v4 = be.value(k4);
    const DenseArray& v5 = be.value(k5);
    const DenseArray& v6 = be.value(k6);
    const DenseArray& v7 = be.value(k7);
    DenseArray err(v1.shape());
    for (std::size_t i = 0; i < err.size(); ++i)
      err[i] = h * (e1 * v1[i] + e3 * v3[i] + e4 * v4[i] + e5 * v5[i] + e6 * v6[i] + e7 * v7[i]);
    const double en = error_norm(err, be.value(y), be.value(ynew), cfg.rtol, cfg.atol);

    if (en <= 1.0) {
      t += h;
      if (dir * (t1 - t) <= std::abs(span) * 1e-14) t = t1;
      y = ynew;
      k1 = k7;
      ++stats.accepted;
      double factor = en == 0.0 ? kMaxFactor
                                : kSafety * std::pow(en, -kAlpha) * std::pow(prev_err, kBeta);
      factor = std::clamp(factor, kMinFactor, kMaxFactor);
      if (last_rejected) factor = std::min(factor, 1.0);
      h *= factor;
      prev_err = std::max(en, 1e-4);
      last_rejected = false;
    } else {
      ++stats.rejected;
      const double factor = std::max(kMinFactor, kSafety * std::pow(en, -kAlpha));
      h *= factor;
      last_rejected = true;
    }
  }
  return y;
}

}  // namespace detail

/// Solves y(t0) = y0 forward (t1 > t0) or backward (t1 < t0) in time.
inline OdeResult integrate(const VectorField& f, const DenseArray& y0, double t0, double t1,
                           const SolverConfig& cfg) {
  cfg.validate();
  detail::check_finite(y0, t0);
  OdeResult res;
  detail::ArrayBackend be{f};
  if (t0 == t1) {
    res.y1 = y0;
    return res;
  }
  if (cfg.method == Method::Rk4) {
    res.y1 = detail::rk4(be, y0, t0, t1, cfg.steps);
    res.accepted = cfg.steps;
  } else {
    res.y1 = detail::dopri5(be, y0, t0, t1, cfg, res);
  }
  res.nfe = be.nfe;
  return res;
}

inline OdeResult integrate(const GraphField& f, const DenseArray& y0, double t0, double t1, const SolverConfig& cfg) {
  return integrate(numeric(f), y0, t0, t1, cfg);
}

/// Integrates inside `g` so the result can be differentiated by backward().
/// Step-size decisions of dopri5 are taken on values and are not differentiated.
inline ad::Var integrate_graph(ad::Graph& g, const GraphField& f, ad::Var y0, double t0, double t1,
                               const SolverConfig& cfg, OdeResult* stats = nullptr) {
  cfg.validate();
  if (t0 == t1) return y0;
  detail::GraphBackend be{g, f};
  OdeResult local;
  OdeResult& st = stats ? *stats : local;
  ad::Var y1 = cfg.method == Method::Rk4 ? detail::rk4(be, y0, t0, t1, cfg.steps)
                                         : detail::dopri5(be, y0, t0, t1, cfg, st);
  st.nfe += be.nfe;
  return y1;
}

struct RoundTrip {
  DenseArray y1;
  DenseArray y0_recovered;
  double max_abs_error = 0.0;
};

/// t0 -> t1 -> t0; the error measures how well the solve inverts itself.
inline RoundTrip roundtrip(const VectorField& f, const DenseArray& y0, double t0, double t1, const SolverConfig& cfg) {
  RoundTrip r;
  r.y1 = integrate(f, y0, t0, t1, cfg).y1;
  r.y0_recovered = integrate(f, r.y1, t1, t0, cfg).y1;
  r.max_abs_error = max_abs_diff(y0, r.y0_recovered);
  return r;
}

struct GradResult {
  DenseArray y1;
  DenseArray grad_y0;
  std::map<std::string, DenseArray> grad_params;
  long nfe = 0;
};

/// dL/dy0 and dL/dtheta given dL/dy1, by solving the augmented adjoint system
///   y' = f,  a' = -a^T df/dy,  g' = -a^T df/dtheta
/// backwards from t1 to t0 with a(t1) = dL/dy1, g(t1) = 0. No forward trajectory is stored.
inline GradResult adjoint_grad(const GraphField& f, const ParamStore& params, const DenseArray& y0, double t0,
                               double t1, const SolverConfig& cfg, const DenseArray& loss_grad_y1) {
  if (loss_grad_y1.shape() != y0.shape())
    throw ShapeError("adjoint: loss gradient shape " + to_string(loss_grad_y1.shape()) + " differs from state " +
                     to_string(y0.shape()));
  GradResult out;
  OdeResult fwd = integrate(f, y0, t0, t1, cfg);
  out.y1 = fwd.y1;
  out.nfe = fwd.nfe;

  // Parameters reached by f, in name order.
  std::vector<std::pair<std::string, Shape>> used;
  {
    ad::Graph g;
    f(g, g.input("y", y0), t0);
    for (const auto& [name, id] : g.param_nodes())
      if (params.contains(name)) used.emplace_back(name, params.at(name).shape());
  }
  const std::size_t N = y0.size();
  std::size_t P = 0;
  for (const auto& [name, s] : used) P += numel(s);

  auto aug = [&](const DenseArray& s, double t) {
    DenseArray y(y0.shape()), a(y0.shape());
    std::copy_n(s.data(), N, y.data());
    std::copy_n(s.data() + N, N, a.data());
    ad::Graph g;
    ad::Var yv = g.input("y", y);
    ad::Var dy = f(g, yv, t);
    ad::GradMap gm = g.backward(dy, a);
    DenseArray d(Shape{2 * N + P});
    const DenseArray& dyv = g.value(dy);
    std::copy_n(dyv.data(), N, d.data());
    const DenseArray ga = gm.at(yv);
    for (std::size_t i = 0; i < N; ++i) d[N + i] = -ga[i];
    std::size_t off = 2 * N;
    const auto& pn = g.param_nodes();
    for (const auto& [name, shp] : used) {
      const std::size_t n = numel(shp);
      auto it = pn.find(name);
      if (it != pn.end()) {
        const DenseArray gp = gm.at(ad::Var{it->second});
        for (std::size_t i = 0; i < n; ++i) d[off + i] = -gp[i];
      }
      off += n;
    }
    return d;
  };

  DenseArray s1(Shape{2 * N + P}, 0.0);
  std::copy_n(fwd.y1.data(), N, s1.data());
  std::copy_n(loss_grad_y1.data(), N, s1.data() + N);
  OdeResult back = integrate(VectorField(aug), s1, t1, t0, cfg);
  out.nfe += back.nfe;
  out.grad_y0 = DenseArray(y0.shape());
  std::copy_n(back.y1.data() + N, N, out.grad_y0.data());
  std::size_t off = 2 * N;
  for (const auto& [name, shp] : used) {
    DenseArray gp(shp);
    std::copy_n(back.y1.data() + off, gp.size(), gp.data());
    off += gp.size();
    out.grad_params.emplace(name, std::move(gp));
  }
  for (const auto& [name, arr] : params)
    if (!out.grad_params.count(name)) out.grad_params.emplace(name, DenseArray(arr.shape(), 0.0));
  return out;
}

/// Same quantities by differentiating the discretised solve (discretise-then-optimise).
inline GradResult backprop_grad(const GraphField& f, const ParamStore& params, const DenseArray& y0, double t0,
                                double t1, const SolverConfig& cfg, const DenseArray& loss_grad_y1) {
  ad::Graph g;
  ad::Var yv = g.input("y0", y0);
  OdeResult st;
  ad::Var y1 = integrate_graph(g, f, yv, t0, t1, cfg, &st);
  ad::GradMap gm = g.backward(y1, loss_grad_y1);
  GradResult out;
  out.y1 = g.value(y1);
  out.grad_y0 = gm.at(yv);
  out.grad_params = g.param_grads(gm);
  for (const auto& [name, arr] : params)
    if (!out.grad_params.count(name)) out.grad_params.emplace(name, DenseArray(arr.shape(), 0.0));
  out.nfe = st.nfe;
  return out;
}

}  // namespace exnode::ode
