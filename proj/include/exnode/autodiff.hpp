#pragma once

// Reverse-mode differentiation over dense arrays.
//
// A Graph is a define-by-run tape: every op evaluates immediately and appends a
// node holding its output. backward() walks the tape in reverse; jvp() appends
// forward-mode tangent nodes built from the same primitives, so tangents stay
// differentiable by an ordinary backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "exnode/array.hpp"
#include "exnode/param_store.hpp"

namespace exnode::ad {

class UnboundInputError : public Error {
 public:
  using Error::Error;
};

class GraphStateError : public Error {
 public:
  using Error::Error;
};

enum class Op {
  Leaf,
  MatMul,
  BatchMatMul,
  TransposeLast,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  AddScalar,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Relu,
  Softmax,
  Sum,
  Mean,
  Max,
  SumAll,
  Concat,
  Slice,
  Broadcast,
  Reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::BatchMatMul: return "bmm";
    case Op::TransposeLast: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Relu: return "relu";
    case Op::Softmax: return "softmax";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Max: return "max";
    case Op::SumAll: return "sum_all";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Broadcast: return "broadcast";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

using Inputs = std::map<std::string, DenseArray>;

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit out{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

class Graph;

/// Gradients keyed by node id. Missing entries read as zeros of the node's shape.
class GradMap {
 public:
  GradMap() = default;
  GradMap(const Graph* g, std::vector<DenseArray> grads, std::vector<bool> has)
      : graph_(g), grads_(std::move(grads)), has_(std::move(has)) {}

  bool has(Var v) const { return v.id < has_.size() && has_[v.id]; }
  DenseArray at(Var v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  const Graph* graph_ = nullptr;
  std::vector<DenseArray> grads_;
  std::vector<bool> has_;
};

class Graph {
 public:
  Graph() = default;
  explicit Graph(Inputs bound) : bound_(std::move(bound)) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves ----------------------------------------------------------

  Var constant(DenseArray v) { return push(Op::Leaf, {}, std::move(v)); }
  Var scalar(double c) { return constant(DenseArray::scalar(c)); }

  Var input(const std::string& name, DenseArray v) {
    auto it = inputs_.find(name);
    if (it != inputs_.end()) return Var{it->second};
    Var out = constant(std::move(v));
    inputs_.emplace(name, out.id);
    return out;
  }

  /// Input bound at construction time.
  Var input(const std::string& name) {
    auto it = inputs_.find(name);
    if (it != inputs_.end()) return Var{it->second};
    auto b = bound_.find(name);
    if (b == bound_.end()) throw UnboundInputError("input '" + name + "' is not bound");
    return input(name, b->second);
  }

  /// Trainable parameter; each name maps to exactly one node per graph.
  Var param(const ParamStore& store, const std::string& name) {
    auto it = params_.find(name);
    if (it != params_.end()) return Var{it->second};
    Var out = constant(store.at(name));
    params_.emplace(name, out.id);
    return out;
  }

  const std::map<std::string, std::size_t>& param_nodes() const { return params_; }
  const std::map<std::string, std::size_t>& input_nodes() const { return inputs_; }

  // ---- linear algebra ---------------------------------------------------

  /// (..., k) x (k, m) -> (..., m), or (m, k) x (k) -> (m).
  Var matmul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sb.size() == 1 && sa.size() == 2) {
      if (sa[1] != sb[0]) shape_fail(Op::MatMul, sa, sb);
      DenseArray out(Shape{sa[0]});
      const double* A = value(a).data();
      const double* x = value(b).data();
      for (std::size_t i = 0; i < sa[0]; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < sa[1]; ++k) acc += A[i * sa[1] + k] * x[k];
        out[i] = acc;
      }
      return push(Op::MatMul, {a.id, b.id}, std::move(out));
    }
    if (sb.size() != 2 || sa.empty() || sa.back() != sb[0]) shape_fail(Op::MatMul, sa, sb);
    const std::size_t k = sb[0], m = sb[1], rows = numel(sa) / k;
    Shape so = sa;
    so.back() = m;
    DenseArray out(so);
    gemm(value(a).data(), value(b).data(), out.data(), rows, k, m);
    return push(Op::MatMul, {a.id, b.id}, std::move(out));
  }

  /// (B, n, k) x (B, k, m) -> (B, n, m)
  Var bmm(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) shape_fail(Op::BatchMatMul, sa, sb);
    const std::size_t B = sa[0], n = sa[1], k = sa[2], m = sb[2];
    DenseArray out(Shape{B, n, m});
    for (std::size_t bi = 0; bi < B; ++bi)
      gemm(value(a).data() + bi * n * k, value(b).data() + bi * k * m, out.data() + bi * n * m, n, k, m);
    return push(Op::BatchMatMul, {a.id, b.id}, std::move(out));
  }

  /// Swaps the last two axes.
  Var transpose(Var a) {
    const Shape& sa = shape(a);
    if (sa.size() < 2) shape_fail(Op::TransposeLast, sa, {});
    Shape so = sa;
    std::swap(so[so.size() - 1], so[so.size() - 2]);
    DenseArray out(so);
    transpose_into(value(a), out);
    return push(Op::TransposeLast, {a.id}, std::move(out));
  }

  // ---- elementwise ------------------------------------------------------

  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
  Var div(Var a, Var b) { return binary(Op::Div, a, b); }

  Var scale(Var a, double c) {
    DenseArray out = value(a);
    out *= c;
    return push(Op::Scale, {a.id}, std::move(out), 0, 0, 0, c);
  }
  Var neg(Var a) { return scale(a, -1.0); }

  Var add_scalar(Var a, double c) {
    DenseArray out = value(a);
    for (double& v : out.values()) v += c;
    return push(Op::AddScalar, {a.id}, std::move(out), 0, 0, 0, c);
  }

  Var tanh(Var a) { return unary(Op::Tanh, a, [](double x) { return std::tanh(x); }); }
  Var sigmoid(Var a) {
    return unary(Op::Sigmoid, a, [](double x) {
      return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
  }
  Var exp(Var a) { return unary(Op::Exp, a, [](double x) { return std::exp(x); }); }
  Var log(Var a) { return unary(Op::Log, a, [](double x) { return std::log(x); }); }
  Var relu(Var a) { return unary(Op::Relu, a, [](double x) { return x > 0 ? x : 0.0; }); }

  Var softmax(Var a, int axis = -1) {
    const std::size_t ax = detail::norm_axis(axis, rank(a));
    const auto sp = detail::split_at(shape(a), ax);
    DenseArray out = value(a);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        double* base = out.data() + o * sp.len * sp.inner + i;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, base[l * sp.inner]);
        double s = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) s += (base[l * sp.inner] = std::exp(base[l * sp.inner] - m));
        for (std::size_t l = 0; l < sp.len; ++l) base[l * sp.inner] /= s;
      }
    return push(Op::Softmax, {a.id}, std::move(out), static_cast<int>(ax));
  }

  // ---- reductions -------------------------------------------------------

  Var sum(Var a, int axis, bool keepdim = false) { return reduce(Op::Sum, a, axis, keepdim); }
  Var mean(Var a, int axis, bool keepdim = false) { return reduce(Op::Mean, a, axis, keepdim); }
  /// Gradient routes to the first maximal index on ties.
  Var max(Var a, int axis, bool keepdim = false) { return reduce(Op::Max, a, axis, keepdim); }

  Var sum_all(Var a) {
    double s = 0.0;
    for (double v : value(a).values()) s += v;
    return push(Op::SumAll, {a.id}, DenseArray::scalar(s));
  }

  // ---- structure --------------------------------------------------------

  Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero arrays");
    const Shape& s0 = shape(parts[0]);
    const std::size_t ax = detail::norm_axis(axis, s0.size());
    Shape so = s0;
    so[ax] = 0;
    std::vector<std::size_t> ids;
    for (Var p : parts) {
      const Shape& sp = shape(p);
      bool ok = sp.size() == s0.size();
      for (std::size_t i = 0; ok && i < sp.size(); ++i)
        if (i != ax && sp[i] != s0[i]) ok = false;
      if (!ok) shape_fail(Op::Concat, s0, sp);
      so[ax] += sp[ax];
      ids.push_back(p.id);
    }
    DenseArray out(so);
    const auto spo = detail::split_at(so, ax);
    std::size_t off = 0;
    for (Var p : parts) {
      const auto sp = detail::split_at(shape(p), ax);
      const double* src = value(p).data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy(src + o * sp.len * sp.inner, src + (o + 1) * sp.len * sp.inner,
                  out.data() + o * spo.len * spo.inner + off * spo.inner);
      off += sp.len;
    }
    return push(Op::Concat, std::move(ids), std::move(out), static_cast<int>(ax));
  }

  /// Elements [begin, end) along axis.
  Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = detail::norm_axis(axis, rank(a));
    const Shape& sa = shape(a);
    if (begin >= end || end > sa[ax]) throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " + to_string(sa));
    Shape so = sa;
    so[ax] = end - begin;
    DenseArray out(so);
    const auto sp = detail::split_at(sa, ax);
    const std::size_t w = (end - begin) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(value(a).data() + o * sp.len * sp.inner + begin * sp.inner, w, out.data() + o * w);
    return push(Op::Slice, {a.id}, std::move(out), static_cast<int>(ax), begin, end);
  }

  /// Repeats a size-1 axis `count` times.
  Var broadcast(Var a, int axis, std::size_t count) {
    const std::size_t ax = detail::norm_axis(axis, rank(a));
    const Shape& sa = shape(a);
    if (sa[ax] != 1) throw ShapeError("broadcast: axis " + std::to_string(ax) + " of " + to_string(sa) + " is not 1");
    Shape so = sa;
    so[ax] = count;
    DenseArray out(so);
    const auto sp = detail::split_at(so, ax);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < count; ++l)
        std::copy_n(value(a).data() + o * sp.inner, sp.inner, out.data() + (o * count + l) * sp.inner);
    return push(Op::Broadcast, {a.id}, std::move(out), static_cast<int>(ax), count);
  }

  Var reshape(Var a, Shape s) {
    if (numel(s) != value(a).size()) shape_fail(Op::Reshape, shape(a), s);
    return push(Op::Reshape, {a.id}, value(a).reshaped(std::move(s)));
  }

  // ---- access -------------------------------------------------------------

  const DenseArray& value(Var v) const {
    if (v.id >= nodes_.size()) throw GraphStateError("unknown node id " + std::to_string(v.id));
    return nodes_[v.id].value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  std::size_t rank(Var v) const { return shape(v).size(); }
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }

  /// Test hook: the gradient rule of `op` is scaled by 1.5.
  void inject_gradient_fault(std::optional<Op> op) { fault_ = op; }

  // ---- reverse mode -----------------------------------------------------

  GradMap backward(Var out, const DenseArray& seed) const {
    if (!out.valid() || out.id >= nodes_.size())
      throw GraphStateError("backward called before forward: output node does not exist");
    if (seed.shape() != shape(out))
      throw ShapeError("backward seed shape " + to_string(seed.shape()) + " differs from output " + to_string(shape(out)));
    std::vector<DenseArray> g(out.id + 1);
    std::vector<bool> has(out.id + 1, false);
    g[out.id] = seed;
    has[out.id] = true;
    auto acc = [&](std::size_t id, DenseArray&& d, Op from) {
      if (fault_ && *fault_ == from) d *= 1.5;
      if (has[id]) {
        g[id] += d;
      } else {
        g[id] = std::move(d);
        has[id] = true;
      }
    };
    for (std::size_t id = out.id + 1; id-- > 0;) {
      if (!has[id]) continue;
      const Node& n = nodes_[id];
      if (n.op == Op::Leaf) continue;
      backprop_node(n, g[id], acc);
    }
    return GradMap(this, std::move(g), std::move(has));
  }

  GradMap backward(Var out) const {
    if (!out.valid() || out.id >= nodes_.size())
      throw GraphStateError("backward called before forward: output node does not exist");
    return backward(out, DenseArray(shape(out), 1.0));
  }

  /// Parameter gradients by name; zeros for parameters the output does not touch.
  std::map<std::string, DenseArray> param_grads(const GradMap& gm) const {
    std::map<std::string, DenseArray> out;
    for (const auto& [name, id] : params_) out.emplace(name, gm.at(Var{id}));
    return out;
  }

  // ---- forward mode -----------------------------------------------------

  /// Tangent of `out` given tangents for some earlier nodes. The result is an
  /// ordinary node, differentiable by backward().
  Var jvp(Var out, const std::vector<std::pair<Var, Var>>& seeds) {
    std::vector<std::size_t> tan(out.id + 1, Var::npos);
    std::size_t start = out.id + 1;
    for (auto [x, t] : seeds) {
      if (shape(x) != shape(t)) throw ShapeError("jvp tangent shape mismatch for node " + std::to_string(x.id));
      if (x.id <= out.id) {
        tan[x.id] = t.id;
        start = std::min(start, x.id);
      }
    }
    for (std::size_t id = start; id <= out.id; ++id) {
      if (tan[id] != Var::npos) continue;
      const Op op = nodes_[id].op;
      if (op == Op::Leaf) continue;
      const std::vector<std::size_t> in = nodes_[id].in;
      bool any = false;
      for (std::size_t i : in) any = any || tan[i] != Var::npos;
      if (!any) continue;
      tan[id] = tangent_rule(id, op, in, tan).id;
    }
    if (tan[out.id] == Var::npos) return constant(DenseArray(shape(out), 0.0));
    return Var{tan[out.id]};
  }

 private:
  struct Node {
    Op op;
    std::vector<std::size_t> in;
    DenseArray value;
    int axis = 0;
    std::size_t p0 = 0, p1 = 0;
    double c = 0.0;
    bool keep = false;
  };

  Var push(Op op, std::vector<std::size_t> in, DenseArray v, int axis = 0, std::size_t p0 = 0,
           std::size_t p1 = 0, double c = 0.0, bool keep = false) {
    nodes_.push_back(Node{op, std::move(in), std::move(v), axis, p0, p1, c, keep});
    return Var{nodes_.size() - 1};
  }

  [[noreturn]] void shape_fail(Op op, const Shape& a, const Shape& b) const {
    throw ShapeError("node " + std::to_string(nodes_.size()) + " (" + op_name(op) + "): shape mismatch " +
                     to_string(a) + " vs " + to_string(b));
  }

  static void gemm(const double* A, const double* B, double* C, std::size_t rows, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < rows; ++i) {
      double* c = C + i * m;
      for (std::size_t j = 0; j < m; ++j) c[j] = 0.0;
      for (std::size_t l = 0; l < k; ++l) {
        const double av = A[i * k + l];
        const double* b = B + l * m;
        for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
      }
    }
  }

  static void transpose_into(const DenseArray& a, DenseArray& out) {
    const Shape& s = a.shape();
    const std::size_t r = s[s.size() - 2], c = s[s.size() - 1], batch = a.size() / (r * c);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = a[b * r * c + i * c + j];
  }

  template <class F>
  Var unary(Op op, Var a, F f) {
    DenseArray out = value(a);
    for (double& v : out.values()) v = f(v);
    return push(op, {a.id}, std::move(out));
  }

  // Broadcast rule: equal shapes, a scalar operand, or one shape a suffix of the other.
  Shape binary_shape(Op op, const Shape& sa, const Shape& sb) const {
    if (sa == sb) return sa;
    if (numel(sb) == 1 && numel(sa) >= 1 && sb.size() <= sa.size()) return sa;
    if (numel(sa) == 1 && sa.size() <= sb.size()) return sb;
    if (detail::is_suffix(sb, sa)) return sa;
    if (detail::is_suffix(sa, sb)) return sb;
    shape_fail(op, sa, sb);
  }

  Var binary(Op op, Var a, Var b) {
    const Shape so = binary_shape(op, shape(a), shape(b));
    DenseArray out(so);
    const DenseArray& A = value(a);
    const DenseArray& B = value(b);
    const std::size_t na = A.size(), nb = B.size(), n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = A[na == n ? i : i % na], y = B[nb == n ? i : i % nb];
      switch (op) {
        case Op::Add: out[i] = x + y; break;
        case Op::Sub: out[i] = x - y; break;
        case Op::Mul: out[i] = x * y; break;
        default: out[i] = x / y; break;
      }
    }
    return push(op, {a.id, b.id}, std::move(out));
  }

  Var reduce(Op op, Var a, int axis, bool keepdim) {
    const std::size_t ax = detail::norm_axis(axis, rank(a));
    const Shape& sa = shape(a);
    const auto sp = detail::split_at(sa, ax);
    Shape so = sa;
    if (keepdim)
      so[ax] = 1;
    else
      so.erase(so.begin() + static_cast<std::ptrdiff_t>(ax));
    DenseArray out(so);
    const double* src = value(a).data();
    std::vector<double> buf;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double* base = src + o * sp.len * sp.inner + i;
        double r = base[0];
        if (op == Op::Max) {
          for (std::size_t l = 1; l < sp.len; ++l) r = std::max(r, base[l * sp.inner]);
        } else if (sp.inner == 1) {
          r = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) r += base[l];
          if (op == Op::Mean) r /= static_cast<double>(sp.len);
        } else {
          // Over a non-trailing (element) axis: summing in sorted order makes the
          // result independent of element order, so pooling is exactly invariant.
          buf.resize(sp.len);
          for (std::size_t l = 0; l < sp.len; ++l) buf[l] = base[l * sp.inner];
          std::sort(buf.begin(), buf.end());
          r = 0.0;
          for (double v : buf) r += v;
          if (op == Op::Mean) r /= static_cast<double>(sp.len);
        }
        out[o * sp.inner + i] = r;
      }
    return push(op, {a.id}, std::move(out), static_cast<int>(ax), 0, 0, 0.0, keepdim);
  }

  // One-hot (first maximal index) mask of shape(a) along axis.
  DenseArray argmax_mask(std::size_t a, std::size_t ax) const {
    const DenseArray& x = nodes_[a].value;
    const auto sp = detail::split_at(x.shape(), ax);
    DenseArray mask(x.shape(), 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        std::size_t best = 0;
        for (std::size_t l = 1; l < sp.len; ++l)
          if (x[base + l * sp.inner] > x[base + best * sp.inner]) best = l;
        mask[base + best * sp.inner] = 1.0;
      }
    return mask;
  }

  // Sums a gradient of the broadcast output shape back to an operand of size `n`.
  static DenseArray unbroadcast(const DenseArray& g, const Shape& target) {
    if (g.shape() == target) return g;
    DenseArray r(target, 0.0);
    const std::size_t n = r.size();
    for (std::size_t i = 0; i < g.size(); ++i) r[i % n] += g[i];
    return r;
  }

  template <class Acc>
  void backprop_node(const Node& n, const DenseArray& g, Acc& acc) const {
    const DenseArray& y = n.value;
    switch (n.op) {
      case Op::Leaf: return;
      case Op::MatMul: {
        const DenseArray& A = nodes_[n.in[0]].value;
        const DenseArray& B = nodes_[n.in[1]].value;
        if (B.rank() == 1) {  // (m,k) x (k)
          const std::size_t m = A.dim(0), k = A.dim(1);
          DenseArray gA(A.shape()), gB(B.shape());
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              gA[i * k + l] = g[i] * B[l];
              gB[l] += g[i] * A[i * k + l];
            }
          acc(n.in[0], std::move(gA), n.op);
          acc(n.in[1], std::move(gB), n.op);
          return;
        }
        const std::size_t k = B.dim(0), m = B.dim(1), rows = A.size() / k;
        // gA = g B^T and gB = A^T g, both as row updates so the inner loops vectorise.
        DenseArray Bt(Shape{m, k}), gA(A.shape()), gB(B.shape(), 0.0);
        transpose_into(B, Bt);
        gemm(g.data(), Bt.data(), gA.data(), rows, m, k);
        for (std::size_t i = 0; i < rows; ++i) {
          const double* gi = g.data() + i * m;
          const double* ai = A.data() + i * k;
          for (std::size_t l = 0; l < k; ++l) {
            const double av = ai[l];
            double* gbl = gB.data() + l * m;
            for (std::size_t j = 0; j < m; ++j) gbl[j] += av * gi[j];
          }
        }
        acc(n.in[0], std::move(gA), n.op);
        acc(n.in[1], std::move(gB), n.op);
        return;
      }
      case Op::BatchMatMul: {
        const DenseArray& A = nodes_[n.in[0]].value;
        const DenseArray& B = nodes_[n.in[1]].value;
        const std::size_t Bn = A.dim(0), rows = A.dim(1), k = A.dim(2), m = B.dim(2);
        DenseArray gA(A.shape(), 0.0), gB(B.shape(), 0.0);
        for (std::size_t b = 0; b < Bn; ++b)
          for (std::size_t i = 0; i < rows; ++i) {
            const double* gi = g.data() + (b * rows + i) * m;
            const double* ai = A.data() + (b * rows + i) * k;
            double* gai = gA.data() + (b * rows + i) * k;
            for (std::size_t l = 0; l < k; ++l) {
              const double* bl = B.data() + (b * k + l) * m;
              double* gbl = gB.data() + (b * k + l) * m;
              double s = 0.0;
              for (std::size_t j = 0; j < m; ++j) {
                s += gi[j] * bl[j];
                gbl[j] += ai[l] * gi[j];
              }
              gai[l] = s;
            }
          }
        acc(n.in[0], std::move(gA), n.op);
        acc(n.in[1], std::move(gB), n.op);
        return;
      }
      case Op::TransposeLast: {
        DenseArray gA(nodes_[n.in[0]].value.shape());
        transpose_into(g, gA);
        acc(n.in[0], std::move(gA), n.op);
        return;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const DenseArray& A = nodes_[n.in[0]].value;
        const DenseArray& B = nodes_[n.in[1]].value;
        const std::size_t N = g.size(), na = A.size(), nb = B.size();
        DenseArray gA(y.shape()), gB(y.shape());
        for (std::size_t i = 0; i < N; ++i) {
          const double a = A[i % na], b = B[i % nb];
          switch (n.op) {
            case Op::Add: gA[i] = g[i]; gB[i] = g[i]; break;
            case Op::Sub: gA[i] = g[i]; gB[i] = -g[i]; break;
            case Op::Mul: gA[i] = g[i] * b; gB[i] = g[i] * a; break;
            default: gA[i] = g[i] / b; gB[i] = -g[i] * a / (b * b); break;
          }
        }
        acc(n.in[0], unbroadcast(gA, A.shape()), n.op);
        acc(n.in[1], unbroadcast(gB, B.shape()), n.op);
        return;
      }
      case Op::Scale: {
        DenseArray d = g;
        d *= n.c;
        acc(n.in[0], std::move(d), n.op);
        return;
      }
      case Op::AddScalar:
      case Op::Reshape: {
        acc(n.in[0], g.reshaped(nodes_[n.in[0]].value.shape()), n.op);
        return;
      }
      case Op::Tanh:
      case Op::Sigmoid:
      case Op::Exp:
      case Op::Log:
      case Op::Relu: {
        const DenseArray& x = nodes_[n.in[0]].value;
        DenseArray d(x.shape());
        for (std::size_t i = 0; i < d.size(); ++i) {
          double dy;
          switch (n.op) {
            case Op::Tanh: dy = 1.0 - y[i] * y[i]; break;
            case Op::Sigmoid: dy = y[i] * (1.0 - y[i]); break;
            case Op::Exp: dy = y[i]; break;
            case Op::Log: dy = 1.0 / x[i]; break;
            default: dy = x[i] > 0 ? 1.0 : 0.0; break;
          }
          d[i] = g[i] * dy;
        }
        acc(n.in[0], std::move(d), n.op);
        return;
      }
      case Op::Softmax: {
        const auto sp = detail::split_at(y.shape(), static_cast<std::size_t>(n.axis));
        DenseArray d(y.shape());
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t j = base + l * sp.inner;
              d[j] = y[j] * (g[j] - dot);
            }
          }
        acc(n.in[0], std::move(d), n.op);
        return;
      }
      case Op::Sum:
      case Op::Mean:
      case Op::Max: {
        const std::size_t ax = static_cast<std::size_t>(n.axis);
        const DenseArray& x = nodes_[n.in[0]].value;
        const auto sp = detail::split_at(x.shape(), ax);
        DenseArray d(x.shape(), 0.0);
        DenseArray mask;
        if (n.op == Op::Max) mask = argmax_mask(n.in[0], ax);
        const double w = n.op == Op::Mean ? 1.0 / static_cast<double>(sp.len) : 1.0;
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const double gv = g[o * sp.inner + i] * w;
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t j = o * sp.len * sp.inner + l * sp.inner + i;
              d[j] = n.op == Op::Max ? gv * mask[j] : gv;
            }
          }
        acc(n.in[0], std::move(d), n.op);
        return;
      }
      case Op::SumAll: {
        acc(n.in[0], DenseArray(nodes_[n.in[0]].value.shape(), g.item()), n.op);
        return;
      }
      case Op::Concat: {
        const std::size_t ax = static_cast<std::size_t>(n.axis);
        const auto spo = detail::split_at(y.shape(), ax);
        std::size_t off = 0;
        for (std::size_t id : n.in) {
          const Shape& s = nodes_[id].value.shape();
          const auto sp = detail::split_at(s, ax);
          DenseArray d(s);
          for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(g.data() + o * spo.len * spo.inner + off * spo.inner, sp.len * sp.inner,
                        d.data() + o * sp.len * sp.inner);
          off += sp.len;
          acc(id, std::move(d), n.op);
        }
        return;
      }
      case Op::Slice: {
        const Shape& s = nodes_[n.in[0]].value.shape();
        const auto sp = detail::split_at(s, static_cast<std::size_t>(n.axis));
        DenseArray d(s, 0.0);
        const std::size_t w = (n.p1 - n.p0) * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
          std::copy_n(g.data() + o * w, w, d.data() + o * sp.len * sp.inner + n.p0 * sp.inner);
        acc(n.in[0], std::move(d), n.op);
        return;
      }
      case Op::Broadcast: {
        const Shape& s = nodes_[n.in[0]].value.shape();
        const auto sp = detail::split_at(y.shape(), static_cast<std::size_t>(n.axis));
        DenseArray d(s, 0.0);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) d[o * sp.inner + i] += g[(o * sp.len + l) * sp.inner + i];
        acc(n.in[0], std::move(d), n.op);
        return;
      }
    }
  }

  Var zeros_like(std::size_t id) { return constant(DenseArray(nodes_[id].value.shape(), 0.0)); }

  Var tangent_rule(std::size_t id, Op op, const std::vector<std::size_t>& in, const std::vector<std::size_t>& tan) {
    auto T = [&](std::size_t k) -> Var {
      const std::size_t src = in[k];
      return tan[src] != Var::npos ? Var{tan[src]} : Var{};
    };
    auto X = [&](std::size_t k) { return Var{in[k]}; };
    const Var y{id};
    const int axis = nodes_[id].axis;
    const std::size_t p0 = nodes_[id].p0, p1 = nodes_[id].p1;
    const double c = nodes_[id].c;
    const bool keep = nodes_[id].keep;
    // Tangent of a binary op, widened to the output shape when only a broadcast operand moves.
    auto widen = [&](Var t) {
      if (shape(t) == shape(y)) return t;
      return add(zeros_like(id), t);
    };
    switch (op) {
      case Op::Leaf: return Var{};
      case Op::MatMul:
      case Op::BatchMatMul: {
        auto mm = [&](Var a, Var b) { return op == Op::MatMul ? matmul(a, b) : bmm(a, b); };
        Var ta = T(0), tb = T(1);
        if (ta.valid() && tb.valid()) return add(mm(ta, X(1)), mm(X(0), tb));
        return ta.valid() ? mm(ta, X(1)) : mm(X(0), tb);
      }
      case Op::TransposeLast: return transpose(T(0));
      case Op::Add:
      case Op::Sub: {
        Var ta = T(0), tb = T(1);
        if (ta.valid() && tb.valid()) return op == Op::Add ? add(ta, tb) : sub(ta, tb);
        if (ta.valid()) return widen(ta);
        return widen(op == Op::Add ? tb : neg(tb));
      }
      case Op::Mul: {
        Var ta = T(0), tb = T(1);
        Var r1 = ta.valid() ? mul(ta, X(1)) : Var{};
        Var r2 = tb.valid() ? mul(X(0), tb) : Var{};
        if (r1.valid() && r2.valid()) return add(r1, r2);
        return widen(r1.valid() ? r1 : r2);
      }
      case Op::Div: {
        Var ta = T(0), tb = T(1);
        Var r1 = ta.valid() ? div(ta, X(1)) : Var{};
        Var r2 = tb.valid() ? neg(div(mul(y, tb), X(1))) : Var{};
        if (r1.valid() && r2.valid()) return add(r1, r2);
        return widen(r1.valid() ? r1 : r2);
      }
      case Op::Scale: return scale(T(0), c);
      case Op::AddScalar: return T(0);
      case Op::Tanh: return mul(T(0), add_scalar(neg(mul(y, y)), 1.0));
      case Op::Sigmoid: return mul(T(0), mul(y, add_scalar(neg(y), 1.0)));
      case Op::Exp: return mul(T(0), y);
      case Op::Log: return div(T(0), X(0));
      case Op::Relu: {
        DenseArray mask(nodes_[in[0]].value.shape());
        const DenseArray& x = nodes_[in[0]].value;
        for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > 0 ? 1.0 : 0.0;
        return mul(T(0), constant(std::move(mask)));
      }
      case Op::Softmax: {
        Var t = T(0);
        Var s = sum(mul(y, t), axis, true);
        Var sb = broadcast(s, axis, shape(y)[static_cast<std::size_t>(axis)]);
        return mul(y, sub(t, sb));
      }
      case Op::Sum: return sum(T(0), axis, keep);
      case Op::Mean: return mean(T(0), axis, keep);
      case Op::Max: {
        Var mask = constant(argmax_mask(in[0], static_cast<std::size_t>(axis)));
        return sum(mul(mask, T(0)), axis, keep);
      }
      case Op::SumAll: return sum_all(T(0));
      case Op::Concat: {
        std::vector<Var> parts;
        for (std::size_t k = 0; k < in.size(); ++k) parts.push_back(T(k).valid() ? T(k) : zeros_like(in[k]));
        return concat(parts, axis);
      }
      case Op::Slice: return slice(T(0), axis, p0, p1);
      case Op::Broadcast: return broadcast(T(0), axis, p0);
      case Op::Reshape: return reshape(T(0), shape(y));
    }
    return Var{};
  }

  std::vector<Node> nodes_;
  Inputs bound_;
  std::map<std::string, std::size_t> inputs_;
  std::map<std::string, std::size_t> params_;
  std::optional<Op> fault_;
};

inline DenseArray GradMap::at(Var v) const {
  if (has(v)) return grads_[v.id];
  return DenseArray(graph_->shape(v), 0.0);
}

// ---- gradient checking ----------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool ok = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
  std::string first_failure;
};

/// |a - b| / max(|a|, |b|, floor); the floor keeps vanishing gradients from
/// turning round-off into large relative errors.
inline double relative_error(double a, double b, double floor = 1e-5) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  double floor = 1e-5;
  std::optional<Op> fault;
};

/// Compares backward() against central finite differences for every entry of
/// every parameter in `params`. `build` must return a scalar node.
inline GradCheckReport grad_check(const std::function<Var(Graph&)>& build, ParamStore& params,
                                  const GradCheckOptions& opt = {}) {
  std::map<std::string, DenseArray> analytic;
  {
    Graph g;
    g.inject_gradient_fault(opt.fault);
    Var out = build(g);
    if (g.value(out).size() != 1) throw ShapeError("grad_check needs a scalar output, got " + to_string(g.shape(out)));
    GradMap gm = g.backward(out, DenseArray(g.shape(out), 1.0));
    analytic = g.param_grads(gm);
  }
  auto eval = [&] {
    Graph g;
    return g.value(build(g)).item();
  };
  GradCheckReport rep;
  for (auto& [name, arr] : params) {
    GradCheckEntry e{name};
    auto it = analytic.find(name);
    const DenseArray an = it != analytic.end() ? it->second : DenseArray(arr.shape(), 0.0);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const double orig = arr[i];
      arr[i] = orig + opt.step;
      const double fp = eval();
      arr[i] = orig - opt.step;
      const double fm = eval();
      arr[i] = orig;
      const double fd = (fp - fm) / (2.0 * opt.step);
      const double r = relative_error(an[i], fd, opt.floor);
      if (r > e.max_rel_error) {
        e.max_rel_error = r;
        e.worst_index = i;
      }
    }
    e.ok = e.max_rel_error <= opt.tolerance;
    if (!e.ok && rep.passed) {
      rep.passed = false;
      rep.first_failure = name;
    }
    rep.max_rel_error = std::max(rep.max_rel_error, e.max_rel_error);
    rep.entries.push_back(e);
  }
  return rep;
}

}  // namespace exnode::ad
