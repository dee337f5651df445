#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "cgnsde/dynamics.hpp"

using namespace cgnsde;

namespace {

DriftField linear(double lambda) {
  return [lambda](std::span<const double> x, double, std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = lambda * x[i];
  };
}

DriftField zero_drift() {
  return [](std::span<const double>, double, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
}

double stddev(const Vec& v) {
  double m = 0.0, s = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

TEST(BenchmarkDrift, L84AtOrigin) {
  const Vec d = evaluate(benchmark_drift(Benchmark::l84()), Vec{0, 0, 0});
  EXPECT_DOUBLE_EQ(d[0], 2.0);
  EXPECT_DOUBLE_EQ(d[1], 1.0);
  EXPECT_DOUBLE_EQ(d[2], 0.0);
}

TEST(BenchmarkDrift, L84MatchesHandFormula) {
  const double a = 0.25, b = 4.0, f = 8.0, g = 1.0;
  const double x = 0.7, y = -1.3, z = 2.1;
  const Vec d = evaluate(benchmark_drift(Benchmark::l84()), Vec{x, y, z});
  EXPECT_NEAR(d[0], -(y * y + z * z) - a * (x - f), 1e-14);
  EXPECT_NEAR(d[1], -b * x * z + x * y - y + g, 1e-14);
  EXPECT_NEAR(d[2], b * x * y + x * z - z, 1e-14);
}

TEST(BenchmarkDrift, PsbseOriginIsFixedPoint) {
  const Vec d = evaluate(benchmark_drift(Benchmark::psbse()), Vec{0, 0, 0});
  EXPECT_EQ(d, (Vec{0, 0, 0}));
}

TEST(BenchmarkDrift, L96ZeroStateGivesForcing) {
  const Vec d = evaluate(benchmark_drift(Benchmark::l96_hom()), Vec(36, 0.0));
  ASSERT_EQ(d.size(), 36u);
  for (double v : d) EXPECT_DOUBLE_EQ(v, 8.0);
}

TEST(BenchmarkDrift, L96InhomogeneousDamping) {
  const auto b = Benchmark::l96_inhom();
  const auto& p = std::get<L96Params>(b.params);
  EXPECT_DOUBLE_EQ(p.damping[0], 2.0);
  EXPECT_NEAR(p.damping[9], 2.0 + 1.5 * std::sin(2.0 * std::numbers::pi * 9.0 / 36.0), 1e-15);
  EXPECT_NEAR(p.damping[9], 3.5, 1e-12);
}

TEST(BenchmarkDrift, PsbseNonlinearEnergyConserved) {
  const double alpha = 5.0;
  Rng rng(7);
  for (int k = 0; k < 10000; ++k) {
    const double x = 10.0 * rng.normal(), y = 10.0 * rng.normal(), z = 10.0 * rng.normal();
    const double e = x * (alpha * x * y + alpha * y * z) + y * (-alpha * x * x + 2.0 * alpha * x * z) + z * (-3.0 * alpha * x * y);
    EXPECT_LE(std::abs(e), 1e-12 * alpha * 1e3 * (x * x + y * y + z * z));
    const Vec d = evaluate(benchmark_drift(Benchmark::psbse()), Vec{x, y, z});
    const double nx = d[0] - 0.2 * x, ny = d[1] + 0.3 * y, nz = d[2] + 0.5 * z;
    const double scale = std::abs(x * nx) + std::abs(y * ny) + std::abs(z * nz);
    EXPECT_LE(std::abs(x * nx + y * ny + z * nz), 1e-12 * std::max(1.0, scale));
  }
}

TEST(BenchmarkDrift, UnknownNameRejected) {
  try {
    parse_benchmark_kind("L63");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownBenchmark);
  }
}

TEST(EulerMaruyama, OneDeterministicStep) {
  Rng rng(0);
  const auto t = euler_maruyama(linear(-1.0), {{0.0}}, {1.0}, 0.01, 1, rng);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_DOUBLE_EQ(t.states[1][0], 0.99);
}

TEST(EulerMaruyama, ZeroStepsReturnsInitialState) {
  Rng rng(0);
  const auto t = euler_maruyama(linear(3.0), {{1.0, 1.0}}, {2.0, -1.0}, 0.1, 0, rng);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.states[0], (Vec{2.0, -1.0}));
}

TEST(EulerMaruyama, PureNoiseStepUsesFirstDraw) {
  Rng rng(17), ref(17);
  const auto t = euler_maruyama(zero_drift(), {{1.0}}, {0.5}, 1.0, 1, rng);
  EXPECT_EQ(t.states[1][0], 0.5 + ref.normal());
}

TEST(EulerMaruyama, NoiseFreeLinearMatchesPowerLaw) {
  Rng rng(0);
  const double lambda = -0.7, dt = 0.01;
  const auto t = euler_maruyama(linear(lambda), {{0.3}}, {2.0}, dt, 500, rng, false);
  for (std::size_t n = 0; n < t.size(); n += 50)
    EXPECT_NEAR(t.states[n][0], std::pow(1.0 + lambda * dt, static_cast<double>(n)) * 2.0, 1e-13);
}

TEST(EulerMaruyama, ReproducibleForEqualSeeds) {
  const auto b = Benchmark::l84();
  Rng r1(5), r2(5);
  const auto a = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 1e-3, 2000, r1);
  const auto c = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 1e-3, 2000, r2);
  EXPECT_EQ(a.states, c.states);
}

TEST(EulerMaruyama, BlowupIsReported) {
  Rng rng(0);
  try {
    euler_maruyama(linear(10.0), {{0.0}}, {1.0}, 1.0, 100, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NumericalBlowup);
    ASSERT_TRUE(e.index());
    EXPECT_EQ(*e.index(), 8u);  // 11^8 > 1e8
  }
}

TEST(EulerMaruyama, SubsampledMatchesFineRunBitwise) {
  const auto b = Benchmark::psbse();
  Rng r1(9), r2(9);
  const auto fine = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 1e-3, 3000, r1);
  const auto coarse =
      euler_maruyama_sampled(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 1e-2, 300, 10, r2);
  const auto thinned = fine.every(10);
  EXPECT_EQ(coarse.states, thinned.states);
  EXPECT_DOUBLE_EQ(coarse.dt, 1e-2);
}

TEST(EulerMaruyama, SingleSubstepDelegates) {
  const auto b = Benchmark::l84();
  Rng r1(3), r2(3);
  const auto a = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 1e-3, 100, r1);
  const auto c = euler_maruyama_sampled(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 1e-3, 100, 1, r2);
  EXPECT_EQ(a.states, c.states);
}

TEST(EulerMaruyama, L84SelfConvergence) {
  const auto b = Benchmark::l84();
  Rng r1(1), r2(2);
  const auto x0 = default_initial_state(b);
  const auto coarse = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), x0, 1e-3, 500000, r1);
  const auto fine = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), x0, 5e-4, 1000000, r2);
  const double s1 = stddev(coarse.component(0)), s2 = stddev(fine.component(0));
  EXPECT_LT(std::abs(s1 - s2) / s2, 0.3);
}

TEST(FiniteDiff, ConstantIsZero) {
  Trajectory t{0.0, 0.1, std::vector<Vec>(5, Vec{1.0, 2.0})};
  for (const auto& d : finite_diff_derivative(t)) EXPECT_EQ(d, (Vec{0.0, 0.0}));
}

TEST(FiniteDiff, LinearIsExact) {
  const double dt = 0.25, v = 3.0;
  Trajectory t{0.0, dt, {}};
  for (int n = 0; n < 8; ++n) t.states.push_back({n * dt * v});
  const auto d = finite_diff_derivative(t);
  ASSERT_EQ(d.size(), 7u);
  for (const auto& x : d) EXPECT_DOUBLE_EQ(x[0], v);
}

TEST(FiniteDiff, QuadraticGivesForwardBias) {
  const double dt = 0.1;
  Trajectory t{0.0, dt, {}};
  for (int n = 0; n < 10; ++n) t.states.push_back({(n * dt) * (n * dt)});
  const auto d = finite_diff_derivative(t);
  for (std::size_t n = 0; n < d.size(); ++n) EXPECT_NEAR(d[n][0], 2.0 * t.time(n) + dt, 1e-12);
}

TEST(FiniteDiff, TooShort) {
  Trajectory t{0.0, 0.1, {{1.0}}};
  EXPECT_THROW(finite_diff_derivative(t), Error);
}

TEST(Trajectory, CsvRoundTripIsExact) {
  const auto b = Benchmark::l84();
  Rng rng(4);
  const auto t = euler_maruyama(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b), 1e-3, 50, rng);
  std::stringstream ss;
  write_trajectory_csv(t, ss);
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, "t,x1,x2,x3");
  ss.seekg(0);
  const auto r = read_trajectory_csv(ss);
  EXPECT_EQ(r.states, t.states);
  EXPECT_DOUBLE_EQ(r.dt, t.dt);
}

TEST(Trajectory, EveryRejectsZeroStride) {
  Trajectory t{0.0, 0.1, {{1.0}, {2.0}}};
  EXPECT_THROW(t.every(0), Error);
  EXPECT_EQ(t.every(5).size(), 1u);
}
