#pragma once

// Deterministic synthetic data: labelled 2D set families, Gaussian-mixture point
// sets with their exact expected log-likelihood, and rotating-shape time series.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "exnode/array.hpp"
#include "exnode/layers.hpp"
#include "exnode/rng.hpp"

namespace exnode::synth {

class DataError : public Error {
 public:
  using Error::Error;
};

enum class Family { Ring, Cross, TwoMoons, GaussianBlobs };

inline Family parse_family(const std::string& s) {
  if (s == "ring") return Family::Ring;
  if (s == "cross") return Family::Cross;
  if (s == "two-moons") return Family::TwoMoons;
  if (s == "gaussian-blobs") return Family::GaussianBlobs;
  throw DataError("unknown set family '" + s + "'");
}

inline std::string family_name(Family f) {
  switch (f) {
    case Family::Ring: return "ring";
    case Family::Cross: return "cross";
    case Family::TwoMoons: return "two-moons";
    case Family::GaussianBlobs: return "gaussian-blobs";
  }
  return "?";
}

/// Centres of the four blobs.
inline constexpr std::array<std::array<double, 2>, 4> kBlobCentres{{{1, 1}, {-1, 1}, {-1, -1}, {1, -1}}};

/// One (n, 2) set from a family, rows shuffled so storage order carries nothing.
inline DenseArray family_points(Family family, std::size_t n, double noise, Rng& rng) {
  if (n < 4) throw DataError("sets need at least 4 points, got " + std::to_string(n));
  DenseArray x(Shape{n, 2});
  const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
  for (std::size_t i = 0; i < n; ++i) {
    double px = 0, py = 0;
    switch (family) {
      case Family::Ring: {
        const double a = phase + 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
        px = std::cos(a);
        py = std::sin(a);
        break;
      }
      case Family::Cross: {
        const double s = rng.uniform(-1.0, 1.0);
        if (i % 2 == 0) px = s; else py = s;
        break;
      }
      case Family::TwoMoons: {
        const double a = rng.uniform(0.0, std::numbers::pi);
        if (i % 2 == 0) {
          px = std::cos(a) - 0.5;
          py = std::sin(a) - 0.25;
        } else {
          px = 0.5 - std::cos(a);
          py = 0.25 - std::sin(a);
        }
        break;
      }
      case Family::GaussianBlobs: {
        const auto& c = kBlobCentres[i % 4];
        px = c[0];
        py = c[1];
        break;
      }
    }
    x[2 * i] = px + noise * rng.normal();
    x[2 * i + 1] = py + noise * rng.normal();
  }
  auto perm = rng.permutation(n);
  DenseArray out(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = x[2 * perm[i]];
    out[2 * i + 1] = x[2 * perm[i] + 1];
  }
  return out;
}

/// `count` sets from one family, all labelled `label`.
inline LabeledSets gen_family_sets(Family family, std::size_t count, std::size_t n, std::uint64_t seed,
                                   double noise = 0.05, int label = 0) {
  Rng rng(seed);
  std::vector<double> data;
  data.reserve(count * n * 2);
  for (std::size_t c = 0; c < count; ++c) {
    Rng r = rng.split(c);
    DenseArray x = family_points(family, n, noise, r);
    data.insert(data.end(), x.values().begin(), x.values().end());
  }
  return {SetBatch(count, n, 2, std::move(data)), std::vector<int>(count, label)};
}

/// Labelled sets over several families; class k is families[k]; classes are balanced (i mod C).
inline LabeledSets gen_class_sets(const std::vector<Family>& families, std::size_t count, std::size_t n,
                                  std::uint64_t seed, double noise = 0.05) {
  if (families.empty()) throw DataError("no set families given");
  Rng rng(seed);
  std::vector<double> data;
  data.reserve(count * n * 2);
  std::vector<int> labels;
  for (std::size_t c = 0; c < count; ++c) {
    const int label = static_cast<int>(c % families.size());
    Rng r = rng.split(c);
    DenseArray x = family_points(families[static_cast<std::size_t>(label)], n, noise, r);
    data.insert(data.end(), x.values().begin(), x.values().end());
    labels.push_back(label);
  }
  return {SetBatch(count, n, 2, std::move(data)), std::move(labels)};
}

// ---- mixtures ---------------------------------------------------------------

/// Isotropic Gaussian mixture in `dim` dimensions.
struct Mixture {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<double> stds;

  std::size_t dim() const { return means.empty() ? 0 : means[0].size(); }

  void validate() const {
    if (weights.empty() || weights.size() != means.size() || weights.size() != stds.size())
      throw DataError("mixture needs matching weights, means and stds");
    double s = 0;
    for (double w : weights) {
      if (!(w >= 0)) throw DataError("mixture weights must be non-negative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw DataError("mixture weights sum to " + std::to_string(s) + ", not 1");
    for (const auto& m : means)
      if (m.size() != dim() || m.empty()) throw DataError("mixture means must share a positive dimension");
    for (double sd : stds)
      if (!(sd > 0)) throw DataError("mixture stds must be positive");
  }

  static Mixture standard_normal(std::size_t d) { return {{1.0}, {std::vector<double>(d, 0.0)}, {1.0}}; }

  /// Four equal modes at (+-s, +-s) with common std.
  static Mixture four_modes(double spread, double sd) {
    Mixture m;
    for (const auto& c : kBlobCentres) {
      m.weights.push_back(0.25);
      m.means.push_back({spread * c[0], spread * c[1]});
      m.stds.push_back(sd);
    }
    return m;
  }

  double log_density(const double* x) const {
    const std::size_t d = dim();
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      if (weights[k] == 0) continue;
      double q = 0;
      for (std::size_t j = 0; j < d; ++j) q += (x[j] - means[k][j]) * (x[j] - means[k][j]);
      const double v = stds[k] * stds[k];
      const double t = std::log(weights[k]) - 0.5 * q / v - 0.5 * static_cast<double>(d) * std::log(2 * std::numbers::pi * v);
      terms.push_back(t);
      best = std::max(best, t);
    }
    double s = 0;
    for (double t : terms) s += std::exp(t - best);
    return best + std::log(s);
  }

  /// E_{x~p}[log p(x)]: closed form for one component, otherwise tensor-grid
  /// quadrature of each component's Gaussian over +-10 std (d <= 2).
  double expected_log_density(std::size_t grid = 201) const {
    validate();
    const std::size_t d = dim();
    std::vector<std::size_t> live;
    for (std::size_t k = 0; k < weights.size(); ++k)
      if (weights[k] > 0) live.push_back(k);
    if (live.size() == 1) {
      const double v = stds[live[0]] * stds[live[0]];
      return -0.5 * static_cast<double>(d) * (std::log(2 * std::numbers::pi * v) + 1.0);
    }
    if (d > 2) throw DataError("expected log-density by quadrature supports d <= 2");
    // Trapezoid on a uniform grid of the standard normal, normalised by its own weight sum.
    std::vector<double> u(grid), wu(grid);
    double wsum = 0;
    for (std::size_t i = 0; i < grid; ++i) {
      u[i] = -10.0 + 20.0 * static_cast<double>(i) / static_cast<double>(grid - 1);
      wu[i] = std::exp(-0.5 * u[i] * u[i]);
      wsum += wu[i];
    }
    for (double& w : wu) w /= wsum;
    double total = 0;
    std::vector<double> x(d);
    for (std::size_t k : live) {
      double e = 0;
      if (d == 1) {
        for (std::size_t i = 0; i < grid; ++i) {
          x[0] = means[k][0] + stds[k] * u[i];
          e += wu[i] * log_density(x.data());
        }
      } else {
        for (std::size_t i = 0; i < grid; ++i)
          for (std::size_t j = 0; j < grid; ++j) {
            x[0] = means[k][0] + stds[k] * u[i];
            x[1] = means[k][1] + stds[k] * u[j];
            e += wu[i] * wu[j] * log_density(x.data());
          }
      }
      total += weights[k] * e;
    }
    return total;
  }

  void sample(Rng& rng, double* out) const {
    double r = rng.uniform(), acc = 0;
    std::size_t k = 0;
    for (; k + 1 < weights.size(); ++k) {
      acc += weights[k];
      if (r < acc && weights[k] > 0) break;
    }
    while (weights[k] == 0) --k;
    for (std::size_t j = 0; j < dim(); ++j) out[j] = means[k][j] + stds[k] * rng.normal();
  }
};

struct DensitySets {
  SetBatch sets;
  double analytic_ppll = 0.0;  // expected log-density per point under the generator
};

inline DensitySets gen_density_sets(const Mixture& m, std::size_t count, std::size_t n, std::uint64_t seed) {
  m.validate();
  Rng rng(seed);
  const std::size_t d = m.dim();
  std::vector<double> data(count * n * d);
  for (std::size_t c = 0; c < count; ++c) {
    Rng r = rng.split(c);
    for (std::size_t i = 0; i < n; ++i) m.sample(r, data.data() + (c * n + i) * d);
  }
  return {SetBatch(count, n, d, std::move(data)), m.expected_log_density()};
}

/// Mean per-point log-density of `sets` under a full-covariance Gaussian fitted
/// by maximum likelihood to `fit`.
inline double gaussian_baseline_ppll(const SetBatch& fit, const SetBatch& sets) {
  const std::size_t d = fit.d();
  if (d > 2) throw DataError("gaussian baseline supports d <= 2");
  const auto& a = fit.values().values();
  const std::size_t N = a.size() / d;
  std::array<double, 2> mu{0, 0};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += a[i * d + j];
  for (std::size_t j = 0; j < d; ++j) mu[j] /= static_cast<double>(N);
  std::array<double, 4> C{0, 0, 0, 0};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) C[j * 2 + k] += (a[i * d + j] - mu[j]) * (a[i * d + k] - mu[k]);
  for (double& c : C) c /= static_cast<double>(N);
  const double det = d == 1 ? C[0] : C[0] * C[3] - C[1] * C[2];
  std::array<double, 4> P{};
  if (d == 1) {
    P[0] = 1.0 / C[0];
  } else {
    P = {C[3] / det, -C[1] / det, -C[2] / det, C[0] / det};
  }
  const auto& b = sets.values().values();
  const std::size_t M = b.size() / d;
  double total = 0;
  for (std::size_t i = 0; i < M; ++i) {
    double q = 0;
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) q += (b[i * d + j] - mu[j]) * P[j * 2 + k] * (b[i * d + k] - mu[k]);
    total += -0.5 * q - 0.5 * std::log(det) - 0.5 * static_cast<double>(d) * std::log(2 * std::numbers::pi);
  }
  return total / static_cast<double>(M);
}

// ---- rotating series --------------------------------------------------------

using Point = std::array<double, 2>;

/// Asymmetric open polyline (a hooked "7"); no rotation maps it onto itself.
inline std::vector<Point> default_shape() { return {{-0.6, 0.8}, {0.6, 0.8}, {-0.2, -0.9}, {-0.55, -0.6}}; }

struct RotatingSpec {
  std::vector<Point> shape = default_shape();
  double omega = std::numbers::pi / 2;  // clockwise radians per unit time
  std::vector<double> times{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t n = 50;
  double noise = 0.0;
};

struct TemporalSeries {
  std::vector<double> times;
  std::vector<DenseArray> sets;  // each (n_i, d)
};

inline Point rotate(const Point& p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p[0] - s * p[1], s * p[0] + c * p[1]};
}

/// Rotation angle of the shape at time t (counter-clockwise positive).
inline double rotation_angle(const RotatingSpec& spec, double t) { return -spec.omega * t; }

/// Uniform sample by arc length.
inline Point sample_on_polyline(const std::vector<Point>& poly, Rng& rng) {
  std::vector<double> cum{0.0};
  for (std::size_t i = 1; i < poly.size(); ++i)
    cum.push_back(cum.back() + std::hypot(poly[i][0] - poly[i - 1][0], poly[i][1] - poly[i - 1][1]));
  const double s = rng.uniform() * cum.back();
  std::size_t k = 1;
  while (k + 1 < cum.size() && cum[k] < s) ++k;
  const double f = (s - cum[k - 1]) / (cum[k] - cum[k - 1]);
  return {poly[k - 1][0] + f * (poly[k][0] - poly[k - 1][0]), poly[k - 1][1] + f * (poly[k][1] - poly[k - 1][1])};
}

inline TemporalSeries rotating_series(const RotatingSpec& spec, Rng& rng) {
  if (spec.times.empty()) throw DataError("rotating series needs a non-empty time grid");
  if (spec.shape.size() < 2) throw DataError("rotating series shape needs at least two vertices");
  TemporalSeries s;
  s.times = spec.times;
  for (double t : spec.times) {
    const double a = rotation_angle(spec, t);
    DenseArray x(Shape{spec.n, 2});
    for (std::size_t i = 0; i < spec.n; ++i) {
      Point p = rotate(sample_on_polyline(spec.shape, rng), a);
      x[2 * i] = p[0] + spec.noise * rng.normal();
      x[2 * i + 1] = p[1] + spec.noise * rng.normal();
    }
    s.sets.push_back(std::move(x));
  }
  return s;
}

inline std::vector<TemporalSeries> gen_rotating_series(const RotatingSpec& spec, std::size_t count,
                                                       std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TemporalSeries> out;
  for (std::size_t c = 0; c < count; ++c) {
    Rng r = rng.split(c);
    out.push_back(rotating_series(spec, r));
  }
  return out;
}

inline double point_segment_sq(const Point& p, const Point& a, const Point& b) {
  const double vx = b[0] - a[0], vy = b[1] - a[1];
  double f = ((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / (vx * vx + vy * vy);
  f = std::clamp(f, 0.0, 1.0);
  const double dx = p[0] - a[0] - f * vx, dy = p[1] - a[1] - f * vy;
  return dx * dx + dy * dy;
}

/// Mean squared distance from the points of `x` (n, 2), rotated by -angle, to the polyline.
inline double shape_misfit(const DenseArray& x, const std::vector<Point>& poly, double angle) {
  const std::size_t n = x.dim(0);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Point p = rotate({x[2 * i], x[2 * i + 1]}, -angle);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k < poly.size(); ++k) best = std::min(best, point_segment_sq(p, poly[k - 1], poly[k]));
    total += best;
  }
  return total / static_cast<double>(n);
}

/// Rotation angle in (-pi, pi] that best aligns a point set with the reference
/// polyline, without point correspondences: a 1-degree grid then golden-section refinement.
inline double fit_rotation(const DenseArray& x, const std::vector<Point>& poly) {
  double best_a = 0, best = std::numeric_limits<double>::infinity();
  for (int k = -179; k <= 180; ++k) {
    const double a = k * std::numbers::pi / 180.0;
    const double m = shape_misfit(x, poly, a);
    if (m < best) {
      best = m;
      best_a = a;
    }
  }
  double lo = best_a - std::numbers::pi / 180.0, hi = best_a + std::numbers::pi / 180.0;
  const double r = (std::sqrt(5.0) - 1) / 2;
  double c = hi - r * (hi - lo), d = lo + r * (hi - lo);
  double fc = shape_misfit(x, poly, c), fd = shape_misfit(x, poly, d);
  for (int it = 0; it < 60; ++it) {
    if (fc < fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - r * (hi - lo);
      fc = shape_misfit(x, poly, c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + r * (hi - lo);
      fd = shape_misfit(x, poly, d);
    }
  }
  double a = 0.5 * (lo + hi);
  if (a <= -std::numbers::pi) a += 2 * std::numbers::pi;
  if (a > std::numbers::pi) a -= 2 * std::numbers::pi;
  return a;
}

/// Wraps an angle difference into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a + std::numbers::pi, 2 * std::numbers::pi);
  if (a <= 0) a += 2 * std::numbers::pi;
  return a - std::numbers::pi;
}

}  // namespace exnode::synth
