#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "exnode/array.hpp"
#include "exnode/rng.hpp"

namespace exnode {

/// Named parameter arrays. Iteration order is lexicographic by name, which fixes
/// the flattening order used by optimizers, checkpoints and the adjoint solver.
class ParamStore {
 public:
  DenseArray& add(const std::string& name, DenseArray value) {
    auto [it, inserted] = params_.emplace(name, std::move(value));
    if (!inserted) throw Error("parameter '" + name + "' registered twice");
    return it->second;
  }

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  DenseArray& add_uniform(const std::string& name, const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    return add(name, rng.uniform_array(shape, -bound, bound));
  }

  DenseArray& add_zeros(const std::string& name, const Shape& shape) {
    return add(name, DenseArray(shape, 0.0));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const DenseArray& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  DenseArray& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return params_.size(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Concatenation of every parameter in name order.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& [k, v] : params_) out.insert(out.end(), v.values().begin(), v.values().end());
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != total_size()) throw ShapeError("unflatten: wrong parameter vector length");
    std::size_t off = 0;
    for (auto& [k, v] : params_) {
      std::copy(flat.begin() + off, flat.begin() + off + v.size(), v.values().begin());
      off += v.size();
    }
  }

 private:
  std::map<std::string, DenseArray> params_;
};

}  // namespace exnode
