#include <gtest/gtest.h>

#include <cmath>

#include "cgnsde/numerics.hpp"

using namespace cgnsde;

namespace {

Mat random_spd(std::size_t n, Rng& rng) {
  Mat a(n, n);
  for (auto& v : a.data()) v = rng.normal();
  Mat s = matmul(a, transpose(a));
  for (std::size_t i = 0; i < n; ++i) s(i, i) += 0.5;
  return s;
}

double det3(const Mat& m) {
  return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
         m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
}

// Gaussian elimination with partial pivoting.
Vec gauss_solve(Mat a, Vec b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(p, c))) p = r;
    for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(p, k));
    std::swap(b[c], b[p]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a(r, c) / a(c, c);
      for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
      b[r] -= f * b[c];
    }
  }
  Vec x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a(i, k) * x[k];
    x[i] = s / a(i, i);
  }
  return x;
}

double rel_frob(const Mat& a, const Mat& b) { return frobenius_norm(a - b) / frobenius_norm(b); }

}  // namespace

TEST(Cholesky, IdentityIsItsOwnFactor) { EXPECT_EQ(cholesky(Mat::identity(3)), Mat::identity(3)); }

TEST(Cholesky, DiagonalSquareRoots) {
  const Mat l = cholesky(Mat{{4, 0}, {0, 9}});
  EXPECT_DOUBLE_EQ(l(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(l(1, 1), 3.0);
  EXPECT_DOUBLE_EQ(l(1, 0), 0.0);
}

TEST(Cholesky, ReconstructsDenseMatrix) {
  const Mat m{{2, 1}, {1, 2}};
  const Mat l = cholesky(m);
  EXPECT_LT(rel_frob(matmul(l, transpose(l)), m), 1e-12);
}

TEST(Cholesky, ReconstructsRandomSpd) {
  Rng rng(3);
  for (std::size_t n : {1u, 2u, 5u, 12u}) {
    const Mat m = random_spd(n, rng);
    const Mat l = cholesky(m);
    EXPECT_LT(rel_frob(matmul(l, transpose(l)), m), 1e-10) << n;
  }
}

TEST(Cholesky, JitterRepairsSemidefinite) {
  const Mat m{{1, 1}, {1, 1}};
  const auto f = cholesky_factor(m);
  EXPECT_GT(f.jitter_added, 0.0);
  EXPECT_LT(f.jitter_added, 1e-9);
}

TEST(Cholesky, IndefiniteThrows) {
  try {
    cholesky(Mat{{1, 2}, {2, 1}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotPositiveDefinite);
  }
}

TEST(LogDet, Identity) { EXPECT_EQ(log_det_spd(Mat::identity(5)), 0.0); }

TEST(LogDet, Diagonal) { EXPECT_NEAR(log_det_spd(Mat{{2, 0}, {0, 3}}), std::log(6.0), 1e-14); }

TEST(LogDet, MatchesCofactorExpansion) {
  Rng rng(11);
  for (int k = 0; k < 20; ++k) {
    const Mat m = random_spd(3, rng);
    const double ref = std::log(det3(m));
    EXPECT_LT(std::abs(log_det_spd(m) - ref) / std::max(1.0, std::abs(ref)), 1e-10);
  }
}

TEST(LogDet, ScalingProperty) {
  Rng rng(5);
  for (int k = 0; k < 10; ++k) {
    const Mat a = random_spd(4, rng);
    const double c = 0.1 + 5.0 * rng.uniform();
    EXPECT_NEAR(log_det_spd(a * c), log_det_spd(a) + 4.0 * std::log(c), 1e-10);
  }
}

TEST(SolveSpd, Identity) {
  const Vec b{1.5, -2.0, 3.0};
  EXPECT_EQ(solve_spd(Mat::identity(3), b), b);
}

TEST(SolveSpd, Diagonal) {
  const Vec x = solve_spd(Mat{{2, 0}, {0, 4}}, Vec{2, 4});
  EXPECT_DOUBLE_EQ(x[0], 1.0);
  EXPECT_DOUBLE_EQ(x[1], 1.0);
}

TEST(SolveSpd, MatchesEliminationOracle) {
  Rng rng(8);
  for (int k = 0; k < 20; ++k) {
    const Mat m = random_spd(3, rng);
    const Vec b = gaussian_draw(rng, 3);
    const Vec x = solve_spd(m, b), ref = gauss_solve(m, b);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(std::abs(x[i] - ref[i]) / std::max(1.0, std::abs(ref[i])), 1e-10);
  }
}

TEST(SampleCovariance, HandExample) {
  const std::vector<Vec> s{{1, 0}, {-1, 0}};
  const Mat c = sample_covariance(s);
  EXPECT_EQ(c, (Mat{{2, 0}, {0, 0}}));
}

TEST(SampleCovariance, ConstantSamplesGiveZero) {
  const std::vector<Vec> s(10, Vec{3.0, -1.0});
  EXPECT_EQ(sample_covariance(s), Mat(2, 2));
  EXPECT_THROW(cholesky(sample_covariance(s)), Error);
}

TEST(SampleCovariance, NeedsTwoSamples) {
  const std::vector<Vec> s{{1, 2}};
  try {
    sample_covariance(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InsufficientSamples);
  }
}

TEST(SampleCovariance, StandardGaussianIsNearIdentity) {
  Rng rng(21);
  std::vector<Vec> s;
  for (int k = 0; k < 100000; ++k) s.push_back(gaussian_draw(rng, 2));
  const Mat c = sample_covariance(s);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(c(i, j), i == j ? 1.0 : 0.0, 0.05);
}

TEST(SampleCovariance, ExactlySymmetric) {
  Rng rng(2);
  std::vector<Vec> s;
  for (int k = 0; k < 50; ++k) s.push_back(gaussian_draw(rng, 4));
  const Mat c = sample_covariance(s);
  EXPECT_EQ(c, transpose(c));
}

TEST(GaussianDraw, DeterministicStream) {
  Rng a(99), b(99);
  const Vec a1 = gaussian_draw(a, 3), a2 = gaussian_draw(a, 3);
  EXPECT_NE(a1, a2);
  EXPECT_EQ(gaussian_draw(b, 3), a1);
  EXPECT_EQ(gaussian_draw(b, 3), a2);
}

TEST(GaussianDraw, Moments) {
  Rng rng(1234);
  const Vec x = gaussian_draw(rng, 1000000);
  double m = 0.0, v = 0.0;
  for (double e : x) m += e;
  m /= static_cast<double>(x.size());
  for (double e : x) v += (e - m) * (e - m);
  v /= static_cast<double>(x.size() - 1);
  EXPECT_NEAR(m, 0.0, 0.005);
  EXPECT_NEAR(v, 1.0, 0.01);
}

TEST(GaussianDraw, EmptyRequest) {
  Rng rng(1);
  EXPECT_TRUE(gaussian_draw(rng, 0).empty());
}

TEST(Hashing, FnvReferenceValues) {
  static_assert(fnv1a64("") == 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Hashing, DerivedSeedsDifferPerStage) {
  EXPECT_NE(derive_seed(42, "data"), derive_seed(42, "train"));
  EXPECT_NE(derive_seed(42, "data"), derive_seed(43, "data"));
  EXPECT_EQ(derive_seed(42, "data"), derive_seed(42, "data"));
}
