#include <gtest/gtest.h>

#include <cmath>

#include "cgnsde/builders.hpp"
#include "cgnsde/enkbf.hpp"

using namespace cgnsde;

namespace {

// du1 = u2 dt + dW1, du2 = -u2 dt + dW2
CgnModel scalar_linear() {
  ModelBuilder mb(StatePartition::from_observed({0}, 2));
  mb.add_term(0, {1}, "c", 1.0);
  mb.add_term(1, {1}, "d", -1.0);
  Rng rng(0);
  return mb.build(rng, {1.0}, {1.0});
}

Trajectory observed_path(const CgnModel& m, std::size_t steps, std::uint64_t seed, Trajectory* full = nullptr) {
  Rng rng(seed);
  const auto t = euler_maruyama(model_drift(m), {m.full_sigma()}, Vec(m.dim(), 0.0), 0.01, steps, rng);
  if (full) *full = t;
  return t.select(m.partition.observed);
}

double rms_gap(const PosteriorSeries& a, const PosteriorSeries& b, std::size_t from) {
  double s = 0.0;
  for (std::size_t n = from; n < a.size(); ++n)
    for (std::size_t i = 0; i < a.means[n].size(); ++i) s += (a.means[n][i] - b.means[n][i]) * (a.means[n][i] - b.means[n][i]);
  return std::sqrt(s / static_cast<double>(a.size() - from));
}

}  // namespace

TEST(Enkbf, LargeEnsembleMatchesAnalyticFilter) {
  const CgnModel m = scalar_linear();
  const auto obs = observed_path(m, 5000, 1);
  const auto exact = run_filter(m, obs);
  Rng rng(2);
  const auto run = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 500, 1.0, rng);
  ASSERT_FALSE(run.diverged);
  ASSERT_EQ(run.posterior.size(), exact.size());
  EXPECT_LT(rms_gap(run.posterior, exact, 500), 0.1);
  double var = 0.0;
  for (std::size_t n = 500; n < run.posterior.size(); ++n) var += run.posterior.covariances[n](0, 0);
  var /= static_cast<double>(run.posterior.size() - 500);
  EXPECT_NEAR(var, std::sqrt(2.0) - 1.0, 0.05);
}

TEST(Enkbf, LargerEnsembleIsCloserToAnalytic) {
  const CgnModel m = scalar_linear();
  const auto obs = observed_path(m, 3000, 3);
  const auto exact = run_filter(m, obs);
  Rng r1(4), r2(4);
  const auto small = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 5, 1.0, r1);
  const auto large = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 500, 1.0, r2);
  EXPECT_LT(rms_gap(large.posterior, exact, 300), rms_gap(small.posterior, exact, 300));
}

TEST(Enkbf, UninformativeObservationGivesPriorMean) {
  // h does not depend on u2, so the gain vanishes; σ2 = 0 makes the prior deterministic
  ModelBuilder mb(StatePartition::from_observed({0}, 2));
  mb.add_term(0, {0}, "c", -1.0);
  mb.add_term(1, {1}, "d", -1.0);
  Rng brng(0);
  const CgnModel m = mb.build(brng, {1.0}, {0.0});
  const auto obs = observed_path(m, 200, 5);
  Rng rng(6);
  const auto run = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 50, 1.0, rng);
  const double m0 = run.posterior.means[0][0];
  for (std::size_t n = 0; n < run.posterior.size(); n += 20)
    EXPECT_NEAR(run.posterior.means[n][0], m0 * std::pow(0.99, static_cast<double>(n)), 1e-12);
}

TEST(Enkbf, TwoMembersGiveRankOneCovariance) {
  Rng srng(7);
  const auto b = Benchmark::psbse();
  const auto traj = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 0.01, 200, srng);
  Rng rng(8);
  const auto run = run_enkbf(b, psbse_partition(), traj.select(std::vector<std::size_t>{0}), 2, 1.0, rng);
  for (const auto& c : run.posterior.covariances) {
    const double tr = c(0, 0) + c(1, 1);
    EXPECT_LE(std::abs(c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0)), 1e-10 * tr * tr + 1e-300);
  }
}

TEST(Enkbf, CovariancesArePositiveSemidefinite) {
  const auto b = Benchmark::psbse();
  Rng srng(9);
  const auto traj = euler_maruyama_sampled(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 0.01,
                                           1000, 10, srng);
  Rng rng(10);
  const auto run = run_enkbf(b, psbse_partition(), traj.select(std::vector<std::size_t>{0}), 20, 1.5, rng);
  for (const auto& c : run.posterior.covariances) {
    EXPECT_EQ(c, transpose(c));
    EXPECT_GE(c(0, 0), 0.0);
    EXPECT_GE(c(1, 1), 0.0);
    EXPECT_GE(c(0, 0) * c(1, 1) - c(0, 1) * c(0, 1), -1e-9 * (c(0, 0) + c(1, 1)) * (c(0, 0) + c(1, 1)));
  }
}

TEST(Enkbf, ReproducibleForEqualSeeds) {
  const CgnModel m = scalar_linear();
  const auto obs = observed_path(m, 500, 11);
  Rng r1(12), r2(12);
  const auto a = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 30, 1.0, r1);
  const auto c = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 30, 1.0, r2);
  EXPECT_EQ(a.posterior, c.posterior);
}

TEST(Enkbf, InflationWidensSpread) {
  const CgnModel m = scalar_linear();
  const auto obs = observed_path(m, 2000, 13);
  Rng r1(14), r2(14);
  const auto a = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 200, 1.0, r1);
  const auto c = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 200, 2.0, r2);
  double va = 0.0, vc = 0.0;
  for (std::size_t n = 200; n < a.posterior.size(); ++n) {
    va += a.posterior.covariances[n](0, 0);
    vc += c.posterior.covariances[n](0, 0);
  }
  EXPECT_GT(vc, va);
}

TEST(Enkbf, DivergenceIsRecorded) {
  // du2 = 50 u2^2 dt: any member above zero escapes in finite time
  const DriftField drift = [](std::span<const double> x, double, std::span<double> out) {
    out[0] = 0.0;
    out[1] = 50.0 * x[1] * x[1];
  };
  const auto part = StatePartition::from_observed({0}, 2);
  Trajectory obs{0.0, 0.01, std::vector<Vec>(2000, Vec{0.0})};
  Rng rng(15);
  const auto run = run_enkbf(drift, {{1.0, 1.0}}, part, obs, 20, 1.0, rng);
  EXPECT_TRUE(run.diverged);
  ASSERT_TRUE(run.divergence_step);
  EXPECT_EQ(run.posterior.size(), *run.divergence_step);
  EXPECT_EQ(enkbf_record(run)["diverged"], true);
}

TEST(Enkbf, InvalidArguments) {
  Rng rng(0);
  EXPECT_THROW(initial_ensemble(1, Vec{0.0}, 0.1, rng), Error);
  const auto e = initial_ensemble(5, Vec{0.0}, 0.1, rng);
  const auto part = StatePartition::from_observed({0}, 2);
  const DriftField zero = [](std::span<const double>, double, std::span<double> out) { out[0] = out[1] = 0.0; };
  EXPECT_THROW(enkbf_step(e, zero, {{1.0, 1.0}}, part, Vec{0.0}, Vec{0.0}, 0.01, 0.5, rng), Error);
  EXPECT_THROW(enkbf_step(e, zero, {{1.0, 1.0}}, part, Vec{0.0}, Vec{0.0}, 0.0, 1.0, rng), Error);
  EXPECT_THROW(enkbf_step(e, zero, {{1.0}}, part, Vec{0.0}, Vec{0.0}, 0.01, 1.0, rng), Error);
}

TEST(Enkbf, SubstepsTrackAnalyticFilter) {
  const CgnModel m = scalar_linear();
  const auto obs = observed_path(m, 3000, 16);
  const auto exact = run_filter(m, obs);
  Rng rng(17);
  const auto run = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 500, 1.0, rng, 5);
  ASSERT_FALSE(run.diverged);
  ASSERT_EQ(run.posterior.size(), exact.size());
  EXPECT_LT(rms_gap(run.posterior, exact, 300), 0.1);
}

TEST(Enkbf, SingleSubstepIsDefaultScheme) {
  const CgnModel m = scalar_linear();
  const auto obs = observed_path(m, 300, 18);
  Rng r1(19), r2(19);
  const auto a = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 20, 1.5, r1);
  const auto b = run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 20, 1.5, r2, 1);
  EXPECT_EQ(a.posterior, b.posterior);
  Rng r3(0);
  EXPECT_THROW(run_enkbf(model_drift(m), {m.full_sigma()}, m.partition, obs, 20, 1.0, r3, 0), Error);
}
