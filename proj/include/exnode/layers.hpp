#pragma once

// Permutation-equivariant, time-conditioned layers over set batches (B, n, d).
// Every layer treats axis 1 symmetrically: per-element affine maps plus
// interactions through pooling or attention, so f(pi(x)) = pi(f(x)).

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "exnode/autodiff.hpp"
#include "exnode/ode.hpp"
#include "exnode/param_store.hpp"
#include "exnode/rng.hpp"

namespace exnode {

/// Batch of sets, values shaped (batch, n, d).
class SetBatch {
 public:
  SetBatch() = default;
  explicit SetBatch(DenseArray values) : values_(std::move(values)) {
    if (values_.rank() != 3) throw ShapeError("SetBatch needs shape (batch, n, d), got " + to_string(values_.shape()));
  }
  SetBatch(std::size_t batch, std::size_t n, std::size_t d, std::vector<double> data)
      : SetBatch(DenseArray(Shape{batch, n, d}, std::move(data))) {}

  std::size_t batch() const { return values_.dim(0); }
  std::size_t n() const { return values_.dim(1); }
  std::size_t d() const { return values_.dim(2); }
  const DenseArray& values() const { return values_; }
  DenseArray& values() { return values_; }

  double at(std::size_t b, std::size_t i, std::size_t k) const { return values_[(b * n() + i) * d() + k]; }

  /// One set of the batch as a batch of one.
  SetBatch item(std::size_t b) const {
    const std::size_t w = n() * d();
    std::vector<double> v(values_.data() + b * w, values_.data() + (b + 1) * w);
    return SetBatch(1, n(), d(), std::move(v));
  }

  /// Reorders the elements of set b by perm: out[b][i] = in[b][perm[i]].
  SetBatch permuted(const std::vector<std::vector<std::size_t>>& perms) const {
    SetBatch out = *this;
    for (std::size_t b = 0; b < batch(); ++b) {
      const auto& p = perms.at(perms.size() == 1 ? 0 : b);
      for (std::size_t i = 0; i < n(); ++i)
        for (std::size_t k = 0; k < d(); ++k) out.values_[(b * n() + i) * d() + k] = at(b, p[i], k);
    }
    return out;
  }

  static SetBatch stack(const std::vector<SetBatch>& sets) {
    if (sets.empty()) throw ShapeError("stack of zero set batches");
    std::vector<double> data;
    std::size_t total = 0;
    for (const auto& s : sets) {
      if (s.n() != sets[0].n() || s.d() != sets[0].d()) throw ShapeError("stack: sets differ in n or d");
      data.insert(data.end(), s.values().values().begin(), s.values().values().end());
      total += s.batch();
    }
    return SetBatch(total, sets[0].n(), sets[0].d(), std::move(data));
  }

 private:
  DenseArray values_{Shape{1, 1, 1}};
};

/// Sets with integer class ids in [0, C).
struct LabeledSets {
  SetBatch sets;
  std::vector<int> labels;
};

/// Applies one permutation per batch entry to a (B, n, d) array.
inline DenseArray permute_sets(const DenseArray& x, const std::vector<std::vector<std::size_t>>& perms) {
  return SetBatch(x).permuted(perms).values();
}

namespace nn {

enum class Activation { Identity, Tanh };
enum class Pool { Mean, Max };
enum class TimeMode { None, Concat };

inline ad::Var activate(ad::Graph& g, ad::Var x, Activation a) {
  return a == Activation::Tanh ? g.tanh(x) : x;
}

/// x W + b over the last axis; parameters `prefix.W` (in, out) and `prefix.b` (out).
inline ad::Var linear(ad::Graph& g, const ParamStore& ps, const std::string& prefix, ad::Var x, bool bias = true) {
  ad::Var y = g.matmul(x, g.param(ps, prefix + ".W"));
  return bias ? g.add(y, g.param(ps, prefix + ".b")) : y;
}

inline void init_linear(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                        bool zero = false, bool bias = true) {
  if (zero) {
    ps.add_zeros(prefix + ".W", {in, out});
    if (bias) ps.add_zeros(prefix + ".b", {out});
    return;
  }
  ps.add_uniform(prefix + ".W", {in, out}, in, rng);
  if (bias) ps.add_uniform(prefix + ".b", {out}, in, rng);
}

/// Normalises the last axis, then applies gain `prefix.g` and shift `prefix.s`.
/// Acts on each element independently, so it keeps equivariance and does not couple
/// examples in a batch.
inline ad::Var layer_norm(ad::Graph& g, const ParamStore& ps, const std::string& prefix, ad::Var x,
                          double eps = 1e-5) {
  const std::size_t w = g.shape(x).back();
  ad::Var mu = g.broadcast(g.mean(x, -1, true), -1, w);
  ad::Var c = g.sub(x, mu);
  ad::Var var = g.mean(g.mul(c, c), -1, true);
  ad::Var inv = g.broadcast(g.exp(g.scale(g.log(g.add_scalar(var, eps)), -0.5)), -1, w);
  return g.add(g.mul(g.mul(c, inv), g.param(ps, prefix + ".g")), g.param(ps, prefix + ".s"));
}

inline void init_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t w) {
  ps.add(prefix + ".g", DenseArray(Shape{w}, 1.0));
  ps.add_zeros(prefix + ".s", {w});
}

/// act(lambda^T x_i + gamma^T pool(x) + b)
struct DeepSetLayer {
  std::string prefix;
  std::size_t in = 0, out = 0;
  Pool pool = Pool::Mean;
  Activation act = Activation::Tanh;

  void init(ParamStore& ps, Rng& rng, bool zero = false) const {
    if (zero) {
      ps.add_zeros(prefix + ".lambda", {in, out});
      ps.add_zeros(prefix + ".gamma", {in, out});
      ps.add_zeros(prefix + ".b", {out});
      return;
    }
    ps.add_uniform(prefix + ".lambda", {in, out}, in, rng);
    ps.add_uniform(prefix + ".gamma", {in, out}, in, rng);
    ps.add_uniform(prefix + ".b", {out}, in, rng);
  }

  ad::Var forward(ad::Graph& g, const ParamStore& ps, ad::Var x) const {
    const Shape s = g.shape(x);
    if (s.size() != 3 || s[2] != in)
      throw ShapeError(prefix + ": deepset layer expects (B, n, " + std::to_string(in) + "), got " + to_string(s));
    ad::Var local = g.matmul(x, g.param(ps, prefix + ".lambda"));
    ad::Var pooled = pool == Pool::Mean ? g.mean(x, 1, true) : g.max(x, 1, true);
    ad::Var global = g.broadcast(g.matmul(pooled, g.param(ps, prefix + ".gamma")), 1, s[1]);
    return activate(g, g.add(g.add(local, global), g.param(ps, prefix + ".b")), act);
  }
};

/// Scaled dot-product self-attention across the elements of each set.
struct SetAttentionLayer {
  std::string prefix;
  std::size_t in = 0, hidden = 0, out = 0;
  std::size_t heads = 1;
  Activation act = Activation::Identity;

  void init(ParamStore& ps, Rng& rng, bool zero = false) const {
    if (hidden % heads != 0) throw ShapeError(prefix + ": hidden width must be divisible by head count");
    ps.add_uniform(prefix + ".Wq", {in, hidden}, in, rng);
    ps.add_uniform(prefix + ".Wk", {in, hidden}, in, rng);
    ps.add_uniform(prefix + ".Wv", {in, hidden}, in, rng);
    if (zero)
      ps.add_zeros(prefix + ".Wo", {hidden, out});
    else
      ps.add_uniform(prefix + ".Wo", {hidden, out}, hidden, rng);
  }

  ad::Var forward(ad::Graph& g, const ParamStore& ps, ad::Var x) const {
    const Shape s = g.shape(x);
    if (s.size() != 3 || s[2] != in)
      throw ShapeError(prefix + ": attention layer expects (B, n, " + std::to_string(in) + "), got " + to_string(s));
    ad::Var q = g.matmul(x, g.param(ps, prefix + ".Wq"));
    ad::Var k = g.matmul(x, g.param(ps, prefix + ".Wk"));
    ad::Var v = g.matmul(x, g.param(ps, prefix + ".Wv"));
    const std::size_t dh = hidden / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      ad::Var qh = heads == 1 ? q : g.slice(q, 2, h * dh, (h + 1) * dh);
      ad::Var kh = heads == 1 ? k : g.slice(k, 2, h * dh, (h + 1) * dh);
      ad::Var vh = heads == 1 ? v : g.slice(v, 2, h * dh, (h + 1) * dh);
      ad::Var att = g.softmax(g.scale(g.bmm(qh, g.transpose(kh)), scale), -1);
      outs.push_back(g.bmm(att, vh));
    }
    ad::Var o = heads == 1 ? outs[0] : g.concat(outs, 2);
    return activate(g, g.matmul(o, g.param(ps, prefix + ".Wo")), act);
  }
};

/// (Wx x + bx) * sigmoid(Wtt t + Wtz c + bt) + (Wbt t + Wbz c + bb), with gate and
/// bias shared by all elements of a set.
struct ConcatSquashLayer {
  std::string prefix;
  std::size_t in = 0, out = 0;
  std::size_t cond = 0;  // width of the conditioning vector, 0 for none
  Activation act = Activation::Identity;

  void init(ParamStore& ps, Rng& rng, bool zero = false) const {
    init_linear(ps, prefix + ".x", in, out, rng, zero);
    ps.add_uniform(prefix + ".Wtt", {1, out}, 1 + cond, rng);
    ps.add_uniform(prefix + ".bt", {out}, 1 + cond, rng);
    if (zero) {
      ps.add_zeros(prefix + ".Wbt", {1, out});
      ps.add_zeros(prefix + ".bb", {out});
    } else {
      ps.add_uniform(prefix + ".Wbt", {1, out}, 1 + cond, rng);
      ps.add_uniform(prefix + ".bb", {out}, 1 + cond, rng);
    }
    if (cond > 0) {
      ps.add_uniform(prefix + ".Wtz", {cond, out}, 1 + cond, rng);
      if (zero)
        ps.add_zeros(prefix + ".Wbz", {cond, out});
      else
        ps.add_uniform(prefix + ".Wbz", {cond, out}, 1 + cond, rng);
    }
  }

  /// `c` is (B, cond) or invalid when cond == 0.
  ad::Var forward(ad::Graph& g, const ParamStore& ps, ad::Var x, double t, ad::Var c) const {
    const Shape s = g.shape(x);
    if (s.size() != 3 || s[2] != in)
      throw ShapeError(prefix + ": concatsquash layer expects (B, n, " + std::to_string(in) + "), got " + to_string(s));
    const std::size_t B = s[0], n = s[1];
    ad::Var tv = g.constant(DenseArray(Shape{B, 1}, t));
    ad::Var gate_pre = g.add(g.matmul(tv, g.param(ps, prefix + ".Wtt")), g.param(ps, prefix + ".bt"));
    ad::Var bias = g.add(g.matmul(tv, g.param(ps, prefix + ".Wbt")), g.param(ps, prefix + ".bb"));
    if (cond > 0) {
      if (!c.valid() || g.shape(c) != Shape{B, cond})
        throw ShapeError(prefix + ": condition must be (" + std::to_string(B) + ", " + std::to_string(cond) + ")");
      gate_pre = g.add(gate_pre, g.matmul(c, g.param(ps, prefix + ".Wtz")));
      bias = g.add(bias, g.matmul(c, g.param(ps, prefix + ".Wbz")));
    }
    ad::Var gate = g.broadcast(g.reshape(g.sigmoid(gate_pre), {B, 1, out}), 1, n);
    ad::Var biasb = g.broadcast(g.reshape(bias, {B, 1, out}), 1, n);
    ad::Var h = linear(g, ps, prefix + ".x", x);
    return activate(g, g.add(g.mul(h, gate), biasb), act);
  }
};

using Layer = std::variant<DeepSetLayer, SetAttentionLayer, ConcatSquashLayer>;

inline std::size_t layer_in(const Layer& l) {
  return std::visit([](const auto& x) { return x.in; }, l);
}
inline std::size_t layer_out(const Layer& l) {
  return std::visit([](const auto& x) { return x.out; }, l);
}

/// Stack of equivariant layers; used as dz/dt = f(z, t [, cond]).
struct EquivariantNet {
  std::vector<Layer> layers;
  TimeMode time = TimeMode::Concat;  // t appended to every element before the first layer
  std::size_t cond = 0;
  bool index_features = false;  // deliberately breaks equivariance (negative-control hook)

  std::size_t in_dim() const { return layer_in(layers.front()) - (time == TimeMode::Concat ? 1 : 0); }
  std::size_t out_dim() const { return layer_out(layers.back()); }

  /// Uniform fan-in init; the final layer optionally starts at zero output.
  void init(ParamStore& ps, Rng& rng, bool zero_last = true) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const bool z = zero_last && i + 1 == layers.size();
      std::visit([&](const auto& l) { l.init(ps, rng, z); }, layers[i]);
    }
  }

  ad::Var forward(ad::Graph& g, const ParamStore& ps, ad::Var x, double t, ad::Var c = {}) const {
    const Shape s = g.shape(x);
    if (s.size() != 3 || s[2] != in_dim())
      throw ShapeError("equivariant net expects (B, n, " + std::to_string(in_dim()) + "), got " + to_string(s));
    ad::Var h = x;
    if (time == TimeMode::Concat) h = g.concat({h, g.constant(DenseArray(Shape{s[0], s[1], 1}, t))}, 2);
    for (const Layer& l : layers) {
      if (const auto* d = std::get_if<DeepSetLayer>(&l))
        h = d->forward(g, ps, h);
      else if (const auto* a = std::get_if<SetAttentionLayer>(&l))
        h = a->forward(g, ps, h);
      else
        h = std::get<ConcatSquashLayer>(l).forward(g, ps, h, t, c);
    }
    if (index_features) {
      const Shape so = g.shape(h);
      DenseArray idx(so);
      for (std::size_t b = 0; b < so[0]; ++b)
        for (std::size_t i = 0; i < so[1]; ++i)
          for (std::size_t k = 0; k < so[2]; ++k) idx[(b * so[1] + i) * so[2] + k] = 0.1 * static_cast<double>(i + 1);
      h = g.add(h, g.constant(std::move(idx)));
    }
    return h;
  }

  /// ODE dynamics over a (B, n, d) state. `cond` is a node of the graph the solver
  /// builds in (graph integration) or is rebound per call from `cond_value`.
  ode::GraphField dynamics(const ParamStore& ps, std::optional<DenseArray> cond_value = std::nullopt) const {
    return [this, &ps, cond_value](ad::Graph& g, ad::Var y, double t) {
      ad::Var c{};
      if (cond_value) c = g.input("cond", *cond_value);
      return forward(g, ps, y, t, c);
    };
  }
};

// ---- builders ---------------------------------------------------------------

struct LayerSpec {
  enum class Kind { DeepSet, Attention, ConcatSquash } kind = Kind::DeepSet;
  std::size_t out = 0;
  std::size_t hidden = 0;  // attention width; defaults to out
  std::size_t heads = 1;
  Pool pool = Pool::Mean;
  Activation act = Activation::Tanh;
};

/// Builds a net mapping width `dim` to `out_dim` (the last spec's out is overridden).
inline EquivariantNet build_net(const std::string& prefix, std::size_t dim, std::vector<LayerSpec> specs,
                                std::size_t out_dim, TimeMode time, std::size_t cond = 0) {
  if (specs.empty()) throw ShapeError("equivariant net needs at least one layer");
  EquivariantNet net;
  net.time = time;
  net.cond = cond;
  specs.back().out = out_dim;
  std::size_t in = dim + (time == TimeMode::Concat ? 1 : 0);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& sp = specs[i];
    const std::string p = prefix + "." + std::to_string(i);
    switch (sp.kind) {
      case LayerSpec::Kind::DeepSet: net.layers.push_back(DeepSetLayer{p, in, sp.out, sp.pool, sp.act}); break;
      case LayerSpec::Kind::Attention:
        net.layers.push_back(SetAttentionLayer{p, in, sp.hidden ? sp.hidden : sp.out, sp.out, sp.heads, sp.act});
        break;
      case LayerSpec::Kind::ConcatSquash: net.layers.push_back(ConcatSquashLayer{p, in, sp.out, cond, sp.act}); break;
    }
    in = sp.out;
  }
  return net;
}

}  // namespace nn
}  // namespace exnode
