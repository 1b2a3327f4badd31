#pragma once

// Set classifier: per-element feature expansion, equivariant ODE solve, max pool
// over elements, then a small FC head producing class logits.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "exnode/autodiff.hpp"
#include "exnode/layers.hpp"
#include "exnode/ode.hpp"
#include "exnode/optim.hpp"

namespace exnode::classify {

struct ClassifierSpec {
  std::size_t in = 2;
  std::size_t hidden = 16;
  std::size_t classes = 3;
  bool affine_phi = false;  // single affine map instead of two FC+LN+tanh blocks
  std::vector<nn::LayerSpec> dynamics{{nn::LayerSpec::Kind::DeepSet, 16}, {nn::LayerSpec::Kind::DeepSet, 16}};
  ode::SolverConfig solver = ode::SolverConfig::rk4(8);
};

struct ClassifierModel {
  ClassifierSpec spec;
  nn::EquivariantNet net;
  ParamStore params;

  static ClassifierModel create(const ClassifierSpec& spec, Rng& rng) {
    if (spec.classes < 2) throw ShapeError("classifier needs at least two classes");
    ClassifierModel m;
    m.spec = spec;
    m.net = nn::build_net("dyn", spec.hidden, spec.dynamics, spec.hidden, nn::TimeMode::Concat);
    if (spec.affine_phi) {
      nn::init_linear(m.params, "phi", spec.in, spec.hidden, rng);
    } else {
      nn::init_linear(m.params, "fe.0", spec.in, spec.hidden, rng);
      nn::init_layer_norm(m.params, "fe.0.ln", spec.hidden);
      nn::init_linear(m.params, "fe.1", spec.hidden, spec.hidden, rng);
      nn::init_layer_norm(m.params, "fe.1.ln", spec.hidden);
    }
    m.net.init(m.params, rng, true);
    nn::init_linear(m.params, "head.0", spec.hidden, spec.hidden, rng);
    nn::init_layer_norm(m.params, "head.0.ln", spec.hidden);
    nn::init_linear(m.params, "head.1", spec.hidden, spec.classes, rng);
    return m;
  }

  /// Zeroes the output layer of the head, so every input gets uniform probabilities.
  void zero_head() {
    params.at("head.1.W") = DenseArray(params.at("head.1.W").shape(), 0.0);
    params.at("head.1.b") = DenseArray(params.at("head.1.b").shape(), 0.0);
  }
};

/// phi(x): (B, n, in) -> (B, n, hidden), element by element.
inline ad::Var expand(ad::Graph& g, const ClassifierModel& m, ad::Var x) {
  const Shape s = g.shape(x);
  if (s.size() != 3 || s[2] != m.spec.in)
    throw ShapeError("classifier expects sets of shape (B, n, " + std::to_string(m.spec.in) + "), got " + to_string(s));
  if (m.spec.affine_phi) return nn::linear(g, m.params, "phi", x);
  ad::Var h = g.tanh(nn::layer_norm(g, m.params, "fe.0.ln", nn::linear(g, m.params, "fe.0", x)));
  return g.tanh(nn::layer_norm(g, m.params, "fe.1.ln", nn::linear(g, m.params, "fe.1", h)));
}

/// Invariant set embedding v = maxpool(solve(phi(x))), (B, hidden).
inline ad::Var embed(ad::Graph& g, const ClassifierModel& m, ad::Var x) {
  ad::Var h = expand(g, m, x);
  ad::Var z = ode::integrate_graph(g, m.net.dynamics(m.params), h, 0.0, 1.0, m.spec.solver);
  return g.max(z, 1, false);
}

inline ad::Var logits(ad::Graph& g, const ClassifierModel& m, ad::Var x) {
  ad::Var v = embed(g, m, x);
  ad::Var h = g.tanh(nn::layer_norm(g, m.params, "head.0.ln", nn::linear(g, m.params, "head.0", v)));
  return nn::linear(g, m.params, "head.1", h);
}

/// Logits (B, C) for a batch of sets.
inline DenseArray classify_forward(const ClassifierModel& m, const SetBatch& sets) {
  ad::Graph g;
  return g.value(logits(g, m, g.input("x", sets.values())));
}

/// Mean softmax cross-entropy; the row max is subtracted as a constant for stability.
inline ad::Var cross_entropy(ad::Graph& g, ad::Var logit, const std::vector<int>& labels) {
  const Shape s = g.shape(logit);
  if (labels.size() != s[0]) throw ShapeError("label count does not match batch");
  const DenseArray& lv = g.value(logit);
  DenseArray shift(Shape{s[0], 1}), onehot(s, 0.0);
  for (std::size_t b = 0; b < s[0]; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < s[1]; ++c) mx = std::max(mx, lv[b * s[1] + c]);
    shift[b] = mx;
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= s[1])
      throw ShapeError("label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(s[1]) + ")");
    onehot[b * s[1] + static_cast<std::size_t>(labels[b])] = 1.0;
  }
  ad::Var sh = g.constant(shift);
  ad::Var lse = g.add(g.log(g.sum(g.exp(g.sub(logit, g.broadcast(sh, 1, s[1]))), 1, true)), sh);
  ad::Var picked = g.sum(g.mul(logit, g.constant(onehot)), 1, true);
  return g.scale(g.sum_all(g.sub(lse, picked)), 1.0 / static_cast<double>(s[0]));
}

struct Prediction {
  std::vector<int> labels;
  DenseArray probs;  // (B, C)
};

inline DenseArray softmax_rows(const DenseArray& l) {
  const std::size_t B = l.dim(0), C = l.dim(1);
  DenseArray p(l.shape());
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity(), s = 0;
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, l[b * C + c]);
    for (std::size_t c = 0; c < C; ++c) s += p[b * C + c] = std::exp(l[b * C + c] - mx);
    for (std::size_t c = 0; c < C; ++c) p[b * C + c] /= s;
  }
  return p;
}

inline Prediction predict(const ClassifierModel& m, const SetBatch& sets) {
  Prediction out;
  out.probs = softmax_rows(classify_forward(m, sets));
  const std::size_t C = out.probs.dim(1);
  for (std::size_t b = 0; b < out.probs.dim(0); ++b) {
    const double* row = out.probs.data() + b * C;
    out.labels.push_back(static_cast<int>(std::max_element(row, row + C) - row));
  }
  return out;
}

// ---- training ---------------------------------------------------------------

inline LabeledSets subset(const LabeledSets& d, const std::vector<std::size_t>& idx) {
  const std::size_t w = d.sets.n() * d.sets.d();
  std::vector<double> data;
  data.reserve(idx.size() * w);
  std::vector<int> labels;
  for (std::size_t i : idx) {
    const double* src = d.sets.values().data() + i * w;
    data.insert(data.end(), src, src + w);
    labels.push_back(d.labels[i]);
  }
  return {SetBatch(idx.size(), d.sets.n(), d.sets.d(), std::move(data)), std::move(labels)};
}

struct ClassifierHyper {
  int epochs = 50;
  std::size_t batch = 32;
  AdamConfig adam{};
  StepSchedule schedule{};
  int patience = 10;  // epochs without validation-accuracy improvement before stopping
  double target_accuracy = 0.0;  // stop once validation accuracy reaches this (0 = off)
  std::uint64_t seed = 0;
};

struct ClassifierEpoch {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0, train_acc = 0.0;
  double val_loss = std::nan(""), val_acc = std::nan("");
};

struct ClassifierReport {
  std::vector<ClassifierEpoch> epochs;
  int best_epoch = -1;
  double best_val_acc = -1.0;
  bool stopped_early = false;
  bool reached_target = false;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::vector<long>> confusion;  // [true][predicted]
};

inline EvalResult evaluate(const ClassifierModel& m, const LabeledSets& d, std::size_t batch = 64) {
  EvalResult r;
  const std::size_t C = m.spec.classes, N = d.labels.size();
  r.confusion.assign(C, std::vector<long>(C, 0));
  std::size_t correct = 0;
  for (std::size_t s = 0; s < N; s += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(N, s + batch); ++i) idx.push_back(i);
    LabeledSets part = subset(d, idx);
    ad::Graph g;
    ad::Var l = logits(g, m, g.input("x", part.sets.values()));
    r.loss += g.value(cross_entropy(g, l, part.labels)).item() * static_cast<double>(idx.size());
    DenseArray p = softmax_rows(g.value(l));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* row = p.data() + b * C;
      const int pred = static_cast<int>(std::max_element(row, row + C) - row);
      ++r.confusion[static_cast<std::size_t>(part.labels[b])][static_cast<std::size_t>(pred)];
      correct += pred == part.labels[b];
    }
  }
  r.loss /= static_cast<double>(N);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(N);
  return r;
}

/// Epoch order where consecutive batches cycle through the classes.
inline std::vector<std::size_t> stratified_order(const std::vector<int>& labels, std::size_t classes, Rng& rng) {
  std::vector<std::vector<std::size_t>> by(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by[static_cast<std::size_t>(labels[i])].push_back(i);
  for (auto& v : by) {
    auto p = rng.permutation(v.size());
    std::vector<std::size_t> shuffled;
    for (std::size_t k : p) shuffled.push_back(v[k]);
    v = std::move(shuffled);
  }
  std::vector<std::size_t> out;
  for (std::size_t k = 0; out.size() < labels.size(); ++k)
    for (const auto& v : by)
      if (k < v.size()) out.push_back(v[k]);
  return out;
}

/// Adam on mean cross-entropy with class-stratified batches and early stopping on
/// validation accuracy. The best parameters are restored at the end.
inline ClassifierReport train_classifier(ClassifierModel& m, const LabeledSets& train, const LabeledSets* val,
                                         const ClassifierHyper& hp,
                                         const std::function<void(const ClassifierEpoch&)>& on_epoch = {}) {
  Rng rng(hp.seed);
  Adam opt(hp.adam);
  ClassifierReport rep;
  ParamStore best = m.params;
  int since_best = 0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    ClassifierEpoch ep;
    ep.epoch = epoch;
    ep.lr = hp.schedule.at(hp.adam.lr, epoch);
    opt.set_lr(ep.lr);
    Rng erng = rng.split(static_cast<std::uint64_t>(epoch));
    auto order = stratified_order(train.labels, m.spec.classes, erng);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < order.size(); s += hp.batch) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + hp.batch)));
      LabeledSets b = subset(train, idx);
      ad::Graph g;
      ad::Var l = logits(g, m, g.input("x", b.sets.values()));
      ad::Var loss = cross_entropy(g, l, b.labels);
      const double lv = g.value(loss).item();
      if (!std::isfinite(lv))
        throw DivergenceError("non-finite classification loss at epoch " + std::to_string(epoch) + " (lr " +
                              std::to_string(ep.lr) + ")");
      loss_sum += lv * static_cast<double>(idx.size());
      const DenseArray& lg = g.value(l);
      const std::size_t C = m.spec.classes;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const double* row = lg.data() + k * C;
        correct += static_cast<int>(std::max_element(row, row + C) - row) == b.labels[k];
      }
      opt.step(m.params, g.param_grads(g.backward(loss)));
    }
    ep.train_loss = loss_sum / static_cast<double>(order.size());
    ep.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    if (val) {
      EvalResult r = evaluate(m, *val);
      ep.val_loss = r.loss;
      ep.val_acc = r.accuracy;
      if (ep.val_acc > rep.best_val_acc) {
        rep.best_val_acc = ep.val_acc;
        rep.best_epoch = epoch;
        best = m.params;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    rep.epochs.push_back(ep);
    if (on_epoch) on_epoch(ep);
    if (val && hp.target_accuracy > 0 && ep.val_acc >= hp.target_accuracy) {
      rep.reached_target = true;
      break;
    }
    if (val && since_best >= hp.patience) {
      rep.stopped_early = true;
      break;
    }
  }
  if (val && rep.best_epoch >= 0) m.params = best;
  return rep;
}

}  // namespace exnode::classify
