#include <gtest/gtest.h>

#include <cmath>

#include "exnode/synth.hpp"

using namespace exnode;
using namespace exnode::synth;

namespace {

/// Lloyd's k-means seeded with farthest-point initialisation; returns labels.
std::vector<int> kmeans(const std::vector<Point>& pts, int k) {
  std::vector<Point> c{pts[0]};
  while (static_cast<int>(c.size()) < k) {
    double far = -1;
    Point pick{};
    for (const Point& p : pts) {
      double dmin = 1e300;
      for (const Point& q : c) dmin = std::min(dmin, std::hypot(p[0] - q[0], p[1] - q[1]));
      if (dmin > far) {
        far = dmin;
        pick = p;
      }
    }
    c.push_back(pick);
  }
  std::vector<int> lab(pts.size(), 0);
  for (int it = 0; it < 50; ++it) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = 1e300;
      for (int j = 0; j < k; ++j) {
        const double d = std::hypot(pts[i][0] - c[j][0], pts[i][1] - c[j][1]);
        if (d < best) {
          best = d;
          lab[i] = j;
        }
      }
    }
    std::vector<Point> sum(k, Point{0, 0});
    std::vector<int> cnt(k, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      sum[lab[i]][0] += pts[i][0];
      sum[lab[i]][1] += pts[i][1];
      ++cnt[lab[i]];
    }
    for (int j = 0; j < k; ++j)
      if (cnt[j]) c[j] = {sum[j][0] / cnt[j], sum[j][1] / cnt[j]};
  }
  return lab;
}

int nearest_blob(const Point& p) {
  int best = 0;
  double bd = 1e300;
  for (int j = 0; j < 4; ++j) {
    const double d = std::hypot(p[0] - kBlobCentres[j][0], p[1] - kBlobCentres[j][1]);
    if (d < bd) {
      bd = d;
      best = j;
    }
  }
  return best;
}

}  // namespace

TEST(ClassSets, RingWithoutNoiseIsUnitCircle) {
  auto d = gen_family_sets(Family::Ring, 5, 17, 3, 0.0);
  for (std::size_t b = 0; b < 5; ++b) {
    double cx = 0, cy = 0;
    for (std::size_t i = 0; i < 17; ++i) {
      cx += d.sets.at(b, i, 0);
      cy += d.sets.at(b, i, 1);
    }
    cx /= 17;
    cy /= 17;
    for (std::size_t i = 0; i < 17; ++i)
      EXPECT_NEAR(std::hypot(d.sets.at(b, i, 0) - cx, d.sets.at(b, i, 1) - cy), 1.0, 1e-12);
  }
}

TEST(ClassSets, Deterministic) {
  for (Family f : {Family::Ring, Family::Cross, Family::TwoMoons, Family::GaussianBlobs}) {
    auto a = gen_family_sets(f, 4, 16, 42);
    auto b = gen_family_sets(f, 4, 16, 42);
    EXPECT_TRUE(a.sets.values() == b.sets.values()) << family_name(f);
    auto c = gen_family_sets(f, 4, 16, 43);
    EXPECT_FALSE(a.sets.values() == c.sets.values()) << family_name(f);
  }
}

TEST(ClassSets, BlobsClusterCleanly) {
  auto d = gen_family_sets(Family::GaussianBlobs, 10, 64, 7, 0.05);
  std::vector<Point> pts;
  double mx = 0, my = 0;
  for (std::size_t b = 0; b < 10; ++b)
    for (std::size_t i = 0; i < 64; ++i) {
      pts.push_back({d.sets.at(b, i, 0), d.sets.at(b, i, 1)});
      mx += pts.back()[0];
      my += pts.back()[1];
    }
  EXPECT_LT(std::abs(mx / pts.size()), 0.05);
  EXPECT_LT(std::abs(my / pts.size()), 0.05);
  auto lab = kmeans(pts, 4);
  // Purity: each cluster's majority true mode, summed.
  int agree = 0;
  for (int j = 0; j < 4; ++j) {
    std::array<int, 4> votes{};
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (lab[i] == j) ++votes[nearest_blob(pts[i])];
    agree += *std::max_element(votes.begin(), votes.end());
  }
  EXPECT_GE(static_cast<double>(agree) / pts.size(), 0.99);
}

TEST(ClassSets, BalancedLabelsAndUnknownFamily) {
  auto d = gen_class_sets({Family::Ring, Family::Cross, Family::GaussianBlobs}, 30, 8, 1);
  std::array<int, 3> cnt{};
  for (int l : d.labels) ++cnt[l];
  EXPECT_EQ(cnt[0], 10);
  EXPECT_EQ(cnt[1], 10);
  EXPECT_EQ(cnt[2], 10);
  EXPECT_THROW(parse_family("spiral"), DataError);
  EXPECT_EQ(parse_family("two-moons"), Family::TwoMoons);
  EXPECT_THROW(gen_family_sets(Family::Ring, 1, 3, 1), DataError);
}

TEST(Density, StandardNormalAnalyticPpll) {
  auto d = gen_density_sets(Mixture::standard_normal(2), 100, 50, 5);
  const double expect = -std::log(2 * std::numbers::pi) - 1.0;
  EXPECT_DOUBLE_EQ(d.analytic_ppll, expect);
  const Mixture m = Mixture::standard_normal(2);
  double s = 0, s2 = 0;
  const auto& v = d.sets.values().values();
  const std::size_t N = v.size() / 2;
  for (std::size_t i = 0; i < N; ++i) {
    const double l = m.log_density(&v[2 * i]);
    s += l;
    s2 += l * l;
  }
  const double mean = s / N, se = std::sqrt((s2 / N - mean * mean) / N);
  EXPECT_LE(std::abs(mean - expect), 3 * se);
}

TEST(Density, ZeroWeightComponentIsIgnored) {
  Mixture two{{1.0, 0.0}, {{0.5, -1.0}, {3.0, 3.0}}, {0.7, 0.2}};
  Mixture one{{1.0}, {{0.5, -1.0}}, {0.7}};
  auto a = gen_density_sets(two, 5, 10, 9);
  auto b = gen_density_sets(one, 5, 10, 9);
  EXPECT_TRUE(a.sets.values() == b.sets.values());
  EXPECT_EQ(a.analytic_ppll, b.analytic_ppll);
}

TEST(Density, InvalidWeights) {
  Mixture m{{0.6, 0.6}, {{0, 0}, {1, 1}}, {1, 1}};
  EXPECT_THROW(gen_density_sets(m, 1, 4, 1), DataError);
  m.weights = {1.2, -0.2};
  EXPECT_THROW(m.validate(), DataError);
}

TEST(Density, FourModeQuadratureMatchesMonteCarlo) {
  const Mixture m = Mixture::four_modes(1.0, 0.4);
  auto d = gen_density_sets(m, 100, 100, 11);
  double s = 0, s2 = 0;
  const auto& v = d.sets.values().values();
  const std::size_t N = v.size() / 2;
  for (std::size_t i = 0; i < N; ++i) {
    const double l = m.log_density(&v[2 * i]);
    s += l;
    s2 += l * l;
  }
  const double mean = s / N, se = std::sqrt((s2 / N - mean * mean) / N);
  EXPECT_LE(std::abs(mean - d.analytic_ppll), 3 * se);
  // Quadrature converged: a coarser grid agrees closely.
  EXPECT_NEAR(m.expected_log_density(101), d.analytic_ppll, 1e-8);
}

TEST(Density, GaussianBaselineOnGaussianData) {
  auto d = gen_density_sets(Mixture::standard_normal(2), 200, 50, 12);
  EXPECT_NEAR(gaussian_baseline_ppll(d.sets, d.sets), d.analytic_ppll, 0.02);
  // A single Gaussian underfits the four-mode mixture.
  auto mix = gen_density_sets(Mixture::four_modes(1.0, 0.4), 50, 50, 13);
  EXPECT_LT(gaussian_baseline_ppll(mix.sets, mix.sets), mix.analytic_ppll - 0.3);
}

TEST(Rotating, StartsUnrotated) {
  RotatingSpec spec;
  auto s = gen_rotating_series(spec, 2, 1);
  for (const auto& series : s) EXPECT_LT(shape_misfit(series.sets[0], spec.shape, 0.0), 1e-24);
}

TEST(Rotating, FullTurnIsPeriodic) {
  RotatingSpec spec;
  spec.omega = 2 * std::numbers::pi;
  auto s = gen_rotating_series(spec, 1, 2)[0];
  EXPECT_LT(shape_misfit(s.sets.back(), spec.shape, 0.0), 1e-24);
  EXPECT_FALSE(s.sets.back() == s.sets.front());  // freshly resampled
}

TEST(Rotating, FittedRotationMatchesSpeed) {
  RotatingSpec spec;
  spec.times = {0.0, 0.1, 0.35, 0.9, 1.0, 1.25};
  auto s = gen_rotating_series(spec, 3, 3);
  for (const auto& series : s) {
    for (std::size_t k = 0; k + 1 < series.times.size(); ++k) {
      const double a0 = fit_rotation(series.sets[k], spec.shape);
      const double a1 = fit_rotation(series.sets[k + 1], spec.shape);
      const double dt = series.times[k + 1] - series.times[k];
      EXPECT_NEAR(wrap_angle(a1 - a0), -spec.omega * dt, 1e-3);
    }
  }
}

TEST(Rotating, Errors) {
  RotatingSpec spec;
  spec.times.clear();
  EXPECT_THROW(gen_rotating_series(spec, 1, 1), DataError);
}
