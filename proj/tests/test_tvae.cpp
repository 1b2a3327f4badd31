#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "exnode/tvae.hpp"
#include "oracles.hpp"

using namespace exnode;
using namespace exnode::tvae;

namespace {

TvaeSpec tiny_spec() {
  TvaeSpec s;
  s.embed = 6;
  s.hidden = 5;
  s.latent = 3;
  s.latent_hidden = 6;
  s.decoder = {6};
  s.latent_solver = ode::SolverConfig::rk4(2);
  s.decoder_solver = ode::SolverConfig::rk4(2);
  return s;
}

/// Model whose latent and decoder dynamics are non-zero from the start.
TvaeModel live_model(std::uint64_t seed, TvaeSpec spec = tiny_spec()) {
  Rng rng(seed);
  TvaeModel m = TvaeModel::create(spec, rng);
  ParamStore fresh;
  m.decoder.init(fresh, rng, false);
  nn::init_linear(fresh, "lat.2", spec.latent_hidden, spec.latent, rng);
  for (const auto& name : fresh.names()) m.params.at(name) = fresh.at(name);
  return m;
}

std::vector<TemporalSeries> rotating(std::size_t count, std::size_t n, std::uint64_t seed) {
  synth::RotatingSpec rs;
  rs.n = n;
  rs.noise = 0.05;
  return synth::gen_rotating_series(rs, count, seed);
}

TemporalSeries permute_within(const TemporalSeries& s, Rng& rng) {
  TemporalSeries out = s;
  for (auto& x : out.sets) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    auto p = rng.permutation(n);
    DenseArray y(x.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) y[i * d + k] = x[p[i] * d + k];
    x = y;
  }
  return out;
}

}  // namespace

TEST(Encoder, InvariantToElementOrder) {
  TvaeModel m = live_model(1);
  auto data = rotating(3, 9, 2);
  Rng rng(3);
  for (const auto& s : data) {
    PosteriorParams a = encode_series(m, s);
    for (int k = 0; k < 10; ++k) {
      PosteriorParams b = encode_series(m, permute_within(s, rng));
      EXPECT_LE(max_abs_diff(a.mean, b.mean), 1e-9);
      EXPECT_LE(max_abs_diff(a.std, b.std), 1e-9);
    }
  }
}

TEST(Encoder, SingleStepSeries) {
  TvaeModel m = live_model(4);
  synth::RotatingSpec rs;
  rs.times = {0.3};
  rs.n = 7;
  auto s = synth::gen_rotating_series(rs, 1, 5)[0];
  PosteriorParams p = encode_series(m, s);
  EXPECT_EQ(p.mean.shape(), (Shape{1, 3}));
  EXPECT_TRUE(p.mean.all_finite());
  for (double v : p.std.values()) EXPECT_GT(v, 0.0);
}

TEST(Encoder, RejectsBadSeries) {
  TvaeModel m = live_model(6);
  TemporalSeries empty;
  EXPECT_THROW(encode_series(m, empty), ShapeError);
  auto s = rotating(1, 5, 7)[0];
  s.times[2] = s.times[1];
  EXPECT_THROW(encode_series(m, s), ShapeError);
  auto a = rotating(2, 5, 8);
  a[1].times.back() = 2.0;
  EXPECT_THROW(stack_series({&a[0], &a[1]}, 2), ShapeError);
}

TEST(LatentTransition, ZeroDynamicsIsConstant) {
  Rng rng(9);
  TvaeModel m = TvaeModel::create(tiny_spec(), rng);
  DenseArray z0 = rng.normal_array({2, 3});
  auto traj = latent_transition(m, z0, {0.0, 0.25, 0.5, 0.75, 1.0});
  ASSERT_EQ(traj.size(), 5u);
  for (const auto& z : traj) EXPECT_TRUE(z == z0);
}

TEST(LatentTransition, LinearDynamicsMatchMatrixExponential) {
  Rng rng(10);
  const std::size_t L = 3;
  DenseArray A = rng.normal_array({L, L});
  A *= 0.7;
  // Row-vector convention: dz/dt = z A, so z(t) = z0 expm(A t).
  ode::GraphField f = [A](ad::Graph& g, ad::Var z, double) { return g.matmul(z, g.constant(A)); };
  DenseArray z0 = rng.normal_array({1, L});
  const std::vector<double> times{0.1, 0.6, 1.3, -0.4};
  auto traj = latent_transition(f, z0, 0.0, times, ode::SolverConfig::dopri5(1e-10, 1e-10));
  ASSERT_EQ(traj.size(), times.size());
  for (std::size_t k = 0; k < times.size(); ++k) {
    std::vector<double> At(A.values());
    for (double& v : At) v *= times[k];
    auto E = oracle::expm(At, L);
    for (std::size_t j = 0; j < L; ++j) {
      double expect = 0;
      for (std::size_t i = 0; i < L; ++i) expect += z0[i] * E[i * L + j];
      EXPECT_NEAR(traj[k][j], expect, 1e-6);
    }
  }
}

TEST(LatentTransition, Deterministic) {
  TvaeModel m = live_model(11);
  Rng rng(12);
  DenseArray z0 = rng.normal_array({1, 3});
  auto a = latent_transition(m, z0, {0.125, 1.0, 1.25});
  auto b = latent_transition(m, z0, {0.125, 1.0, 1.25});
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(a[k] == b[k]);
  EXPECT_FALSE(a[0] == z0);
}

TEST(Decoder, ZeroDynamicsIsBaseDensity) {
  Rng rng(13);
  TvaeModel m = TvaeModel::create(tiny_spec(), rng);
  SetBatch x(rng.normal_array({2, 6, 2}));
  const DenseArray base = cnf::base_log_density(x.values());
  for (double scale : {0.0, 5.0}) {
    DenseArray z = rng.normal_array({2, 3});
    z *= scale;
    DenseArray lp = decode_loglik(m, x, z, 0.7, cnf::TraceConfig::exact());
    EXPECT_LE(max_abs_diff(lp, base), 1e-12);
  }
}

TEST(Decoder, ExchangeableAndConditioned) {
  TvaeModel m = live_model(14);
  Rng rng(15);
  SetBatch x(rng.normal_array({1, 7, 2}));
  DenseArray z = rng.normal_array({1, 3});
  DenseArray lp = decode_loglik(m, x, z, 0.5, cnf::TraceConfig::exact());
  for (int k = 0; k < 10; ++k) {
    SetBatch xp = x.permuted({rng.permutation(7)});
    EXPECT_NEAR(decode_loglik(m, xp, z, 0.5, cnf::TraceConfig::exact())[0], lp[0], 1e-9);
  }
  DenseArray far = z;
  far *= -4.0;
  EXPECT_GT(std::abs(decode_loglik(m, x, far, 0.5, cnf::TraceConfig::exact())[0] - lp[0]), 1e-3);
  EXPECT_GT(std::abs(decode_loglik(m, x, z, 1.5, cnf::TraceConfig::exact())[0] - lp[0]), 1e-3);
}

TEST(Kl, ClosedFormCases) {
  DenseArray zero(Shape{1, 4}, 0.0), one(Shape{1, 4}, 1.0);
  EXPECT_EQ(kl_standard_normal(zero, one), 0.0);
  DenseArray mu(Shape{1, 4}, {0.5, -1.0, 2.0, 0.0});
  EXPECT_NEAR(kl_standard_normal(mu, one), 0.5 * (0.25 + 1 + 4), 1e-15);
  ad::Graph g;
  ad::Var k = kl_standard_normal(g, g.constant(mu), g.constant(DenseArray(Shape{1, 4}, 0.0)));
  EXPECT_NEAR(g.value(k)[0], 2.625, 1e-15);
}

TEST(Kl, MatchesNumericIntegration1D) {
  for (auto [m, s] : {std::pair{0.3, 0.5}, std::pair{-1.2, 1.7}, std::pair{0.0, 0.05}}) {
    const double lo = m - 12 * s, hi = m + 12 * s;
    const int N = 200000;
    const double h = (hi - lo) / N;
    double acc = 0;
    for (int i = 0; i <= N; ++i) {
      const double x = lo + i * h;
      const double lq = -0.5 * std::pow((x - m) / s, 2) - std::log(s) - 0.5 * std::log(2 * std::numbers::pi);
      const double lp = -0.5 * x * x - 0.5 * std::log(2 * std::numbers::pi);
      acc += (i == 0 || i == N ? 0.5 : 1.0) * std::exp(lq) * (lq - lp);
    }
    acc *= h;
    DenseArray mu(Shape{1, 1}, m), sd(Shape{1, 1}, s);
    EXPECT_NEAR(kl_standard_normal(mu, sd), acc, 1e-6);
    EXPECT_GE(kl_standard_normal(mu, sd), 0.0);
  }
}

TEST(Elbo, KlWeightZeroIsRecon) {
  TvaeModel m = live_model(16);
  auto data = rotating(2, 6, 17);
  SeriesBatch b = stack_series({&data[0], &data[1]}, 2);
  ad::Graph g;
  Rng rng(18);
  ElboConfig cfg;
  cfg.kl_weight = 0.0;
  ElboTerms t = elbo(g, m, b, rng, cfg);
  EXPECT_EQ(g.value(t.elbo).item(), g.value(t.recon).item());
  EXPECT_GE(g.value(t.kl).item(), 0.0);
}

TEST(Elbo, DeterministicForFixedSeedAndComposed) {
  TvaeModel m = live_model(19);
  auto data = rotating(2, 6, 20);
  SeriesBatch b = stack_series({&data[0], &data[1]}, 2);
  auto run = [&](double w) {
    ad::Graph g;
    Rng rng(21);
    ElboConfig cfg;
    cfg.kl_weight = w;
    ElboTerms t = elbo(g, m, b, rng, cfg);
    return std::array<double, 3>{g.value(t.elbo).item(), g.value(t.recon).item(), g.value(t.kl).item()};
  };
  auto a = run(1.0), c = run(1.0), h = run(0.5);
  EXPECT_EQ(a, c);
  EXPECT_NEAR(a[0], a[1] - a[2], 1e-12);
  EXPECT_NEAR(h[0], h[1] - 0.5 * h[2], 1e-12);
}

TEST(Elbo, NonFiniteReportsTimeIndex) {
  TvaeModel m = live_model(22);
  auto s = rotating(1, 5, 23)[0];
  s.sets[3][0] = 1e300;
  SeriesBatch b = stack_series(s, 2);
  ad::Graph g;
  Rng rng(24);
  try {
    elbo(g, m, b, rng);
    ADD_FAILURE() << "expected a divergence error";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("time index 3"), std::string::npos) << e.what();
  } catch (const ode::NonFiniteDynamics&) {
    // The solver may notice first; either way training stops.
  }
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
  TvaeModel m = live_model(25);
  synth::RotatingSpec rs;
  rs.n = 4;
  rs.noise = 0.05;
  rs.times = {0.0, 0.5, 1.0};
  auto data = synth::gen_rotating_series(rs, 2, 26);
  SeriesBatch b = stack_series({&data[0], &data[1]}, 2);
  auto value = [&]() {
    ad::Graph g;
    Rng rng(27);
    return g.value(elbo(g, m, b, rng).elbo).item();
  };
  ad::Graph g;
  Rng rng(27);
  auto grads = g.param_grads(g.backward(elbo(g, m, b, rng).elbo));
  double worst = 0;
  std::string where;
  for (const auto& name : m.params.names()) {
    DenseArray& p = m.params.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i], h = 1e-6;
      p[i] = keep + h;
      const double up = value();
      p[i] = keep - h;
      const double dn = value();
      p[i] = keep;
      const double err = ad::relative_error((up - dn) / (2 * h), grads.at(name)[i]);
      if (err > worst) {
        worst = err;
        where = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  EXPECT_LT(worst, 1e-3) << where;
}

TEST(Sample, ShapesAndDeterminism) {
  TvaeModel m = live_model(28);
  const std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
  Rng r1(29), r2(29);
  auto a = sample_series(m, grid, 11, r1);
  auto b = sample_series(m, grid, 11, r2);
  ASSERT_EQ(a.sets.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(a.sets[k].shape(), (Shape{11, 2}));
    EXPECT_TRUE(a.sets[k] == b.sets[k]);
  }
  Rng r3(30);
  auto c = sample_series(m, {0.125, 1.25}, 11, r3);
  for (const auto& x : c.sets) EXPECT_TRUE(x.all_finite());
}

TEST(Sample, ZeroDecoderReturnsBasePoints) {
  Rng rng(31);
  TvaeModel m = TvaeModel::create(tiny_spec(), rng);
  Rng r1(32), r2(32);
  auto s = sample_series(m, {0.5}, 4, r1);
  r2.normal_array({1, 3});  // the prior draw
  DenseArray y = r2.normal_array({1, 4, 2});
  EXPECT_TRUE(s.sets[0] == y.reshaped({4, 2}));
}

TEST(Train, ElboImprovesAndKlStaysNonNegative) {
  Rng rng(33);
  TvaeModel m = TvaeModel::create(tiny_spec(), rng);
  auto data = rotating(16, 8, 34);
  TvaeHyper hp;
  hp.epochs = 6;
  hp.batch = 8;
  hp.adam.lr = 0.01;
  auto rep = train_tvae(m, data, hp);
  ASSERT_EQ(rep.epochs.size(), 6u);
  EXPECT_GT(rep.epochs.back().elbo, rep.epochs.front().elbo);
  for (const auto& e : rep.epochs) {
    EXPECT_GE(e.kl_min, 0.0);
    EXPECT_NEAR(e.elbo, e.recon - e.kl, 1e-9 * std::abs(e.elbo));
  }
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  TvaeModel m = live_model(35);
  auto data = rotating(4, 5, 36);
  auto before = m.params.flatten();
  TvaeHyper hp;
  hp.epochs = 2;
  hp.batch = 2;
  hp.adam.lr = 0.0;
  train_tvae(m, data, hp);
  EXPECT_EQ(m.params.flatten(), before);
}

TEST(Train, KlAnnealing) {
  TvaeHyper hp;
  hp.kl_anneal_epochs = 4;
  EXPECT_DOUBLE_EQ(kl_weight_at(hp, 0), 0.25);
  EXPECT_DOUBLE_EQ(kl_weight_at(hp, 3), 1.0);
  EXPECT_DOUBLE_EQ(kl_weight_at(hp, 9), 1.0);
  hp.kl_anneal_epochs = 0;
  EXPECT_DOUBLE_EQ(kl_weight_at(hp, 0), 1.0);
}
