#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace exnode {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

/// Row-major dense array of doubles. A rank-0 shape holds one scalar.
class DenseArray {
 public:
  DenseArray() : data_(1, 0.0) {}

  explicit DenseArray(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)) {
    check_shape();
    data_.assign(numel(shape_), fill);
  }

  DenseArray(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != numel(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }

  static DenseArray scalar(double v) { return DenseArray(Shape{}, std::vector<double>{v}); }

  static DenseArray vector(std::initializer_list<double> v) {
    return DenseArray(Shape{v.size()}, std::vector<double>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on array of shape " + to_string(shape_));
    return data_[0];
  }

  /// Same data, new shape with equal element count.
  DenseArray reshaped(Shape s) const { return DenseArray(std::move(s), data_); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  DenseArray& operator+=(const DenseArray& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  DenseArray& operator-=(const DenseArray& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  DenseArray& operator*=(double c) {
    for (double& v : data_) v *= c;
    return *this;
  }

  /// this += c * o
  DenseArray& axpy(double c, const DenseArray& o) {
    require_same(o, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += c * o.data_[i];
    return *this;
  }

  friend DenseArray operator+(DenseArray a, const DenseArray& b) { return a += b; }
  friend DenseArray operator-(DenseArray a, const DenseArray& b) { return a -= b; }
  friend DenseArray operator*(double c, DenseArray a) { return a *= c; }

  friend bool operator==(const DenseArray& a, const DenseArray& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("zero-sized dimension in shape " + to_string(shape_));
  }
  void require_same(const DenseArray& o, const char* what) const {
    if (o.shape_ != shape_)
      throw ShapeError(std::string(what) + ": shape " + to_string(shape_) + " vs " +
                       to_string(o.shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const DenseArray& a, const DenseArray& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const DenseArray& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace exnode
