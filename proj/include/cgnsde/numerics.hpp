#pragma once

// Dense linear algebra on small matrices, SPD factorizations and a
// platform-stable Gaussian random stream.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cgnsde/error.hpp"

namespace cgnsde {

using Vec = std::vector<double>;

/// Row-major dense matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw Error(Errc::DimensionMismatch, "matrix data size does not match shape");
  }
  Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw Error(Errc::DimensionMismatch, "ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Mat identity(std::size_t n, double scale = 1.0) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = scale;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Mat& operator+=(const Mat& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Mat& operator-=(const Mat& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Mat& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  void check_same(const Mat& o) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) throw Error(Errc::DimensionMismatch, "matrix shapes differ");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Mat operator+(Mat a, const Mat& b) { return a += b; }
inline Mat operator-(Mat a, const Mat& b) { return a -= b; }
inline Mat operator*(Mat a, double s) { return a *= s; }
inline Mat operator*(double s, Mat a) { return a *= s; }

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) throw Error(Errc::DimensionMismatch, "matmul inner dimensions differ");
  Mat c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline Vec matvec(const Mat& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw Error(Errc::DimensionMismatch, "matvec dimensions differ");
  Vec y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

/// aᵀ·x
inline Vec matvec_t(const Mat& a, std::span<const double> x) {
  if (a.rows() != x.size()) throw Error(Errc::DimensionMismatch, "matvec_t dimensions differ");
  Vec y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += a(i, j) * x[i];
  return y;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// (m + mᵀ)/2, bitwise symmetric.
inline Mat symmetrize(const Mat& m) {
  Mat s(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i; j < m.cols(); ++j) {
      const double v = 0.5 * (m(i, j) + m(j, i));
      s(i, j) = v;
      s(j, i) = v;
    }
  return s;
}

inline double frobenius_norm(const Mat& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// SPD factorizations

struct CholeskyOptions {
  /// Pivots below `pivot_floor * max diagonal` are treated as failure.
  double pivot_floor = 1e-12;
  /// Diagonal shift (relative to max diagonal) added once on failure.
  double jitter = 1e-10;
  bool allow_jitter = true;
};

struct CholeskyFactor {
  Mat lower;
  /// Absolute diagonal shift that was needed, 0 when none.
  double jitter_added = 0.0;
};

namespace detail {

inline bool try_cholesky(const Mat& m, double shift, double floor_abs, Mat& l) {
  const std::size_t n = m.rows();
  l = Mat(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j) + shift;
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > floor_abs)) return false;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return true;
}

}  // namespace detail

/// Lower Cholesky factor with one bounded jitter retry. Reads the lower
/// triangle of `m`.
inline CholeskyFactor cholesky_factor(const Mat& m, const CholeskyOptions& opt = {}) {
  if (m.rows() != m.cols()) throw Error(Errc::DimensionMismatch, "cholesky of non-square matrix");
  if (!all_finite(m.data())) throw Error(Errc::NotPositiveDefinite, "matrix has non-finite entries");
  const std::size_t n = m.rows();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, m(i, i));
  if (n == 0) return {};
  if (!(max_diag > 0.0)) throw Error(Errc::NotPositiveDefinite, "non-positive diagonal");

  CholeskyFactor out;
  if (detail::try_cholesky(m, 0.0, opt.pivot_floor * max_diag, out.lower)) return out;
  if (!opt.allow_jitter) throw Error(Errc::NotPositiveDefinite, "pivot below floor");
  const double shift = opt.jitter * max_diag;
  if (detail::try_cholesky(m, shift, opt.pivot_floor * max_diag, out.lower)) {
    out.jitter_added = shift;
    return out;
  }
  throw Error(Errc::NotPositiveDefinite, "pivot below floor after jitter");
}

inline Mat cholesky(const Mat& m) { return cholesky_factor(m).lower; }

inline double log_det_from_factor(const Mat& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

inline double log_det_spd(const Mat& m) { return log_det_from_factor(cholesky(m)); }

/// Solves L·Lᵀ·x = b given the lower factor.
inline Vec cholesky_solve(const Mat& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  if (b.size() != n) throw Error(Errc::DimensionMismatch, "rhs size differs from matrix");
  Vec y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= l(i, k) * y[k];
    y[i] /= l(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) y[ii] -= l(k, ii) * y[k];
    y[ii] /= l(ii, ii);
  }
  return y;
}

inline Vec solve_spd(const Mat& m, std::span<const double> b) {
  if (b.size() != m.rows()) throw Error(Errc::DimensionMismatch, "rhs size differs from matrix");
  return cholesky_solve(cholesky(m), b);
}

/// Inverse of an SPD matrix through its Cholesky factor.
inline Mat inverse_spd_from_factor(const Mat& l) {
  const std::size_t n = l.rows();
  Mat inv(n, n);
  Vec e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(e.begin(), e.end(), 0.0);
    e[j] = 1.0;
    const Vec col = cholesky_solve(l, e);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  return symmetrize(inv);
}

/// Unbiased (n-1) sample covariance, symmetrized.
inline Mat sample_covariance(std::span<const Vec> samples) {
  if (samples.size() < 2) throw Error(Errc::InsufficientSamples, "need at least two samples");
  const std::size_t d = samples.front().size();
  Vec mean(d, 0.0);
  for (const auto& s : samples) {
    if (s.size() != d) throw Error(Errc::DimensionMismatch, "samples have unequal dimensions");
    for (std::size_t i = 0; i < d; ++i) mean[i] += s[i];
  }
  for (auto& m : mean) m /= static_cast<double>(samples.size());
  Mat c(d, d);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < d; ++i) {
      const double di = s[i] - mean[i];
      for (std::size_t j = 0; j <= i; ++j) c(i, j) += di * (s[j] - mean[j]);
    }
  const double denom = static_cast<double>(samples.size() - 1);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      c(i, j) /= denom;
      c(j, i) = c(i, j);
    }
  return c;
}

// ---------------------------------------------------------------------------
// Random numbers
//
// The bit stream comes from std::mt19937_64, whose output sequence is fixed by
// the C++ standard. Uniforms take the top 53 bits; normals use the Box-Muller
// transform with the second variate cached. Nothing here depends on the
// implementation-defined std::*_distribution classes.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw Error(Errc::IndexOutOfRange, "uniform_index over empty range");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do r = engine_();
    while (r >= limit);
    return static_cast<std::size_t>(r % n);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do u1 = uniform();
    while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// n independent standard normals. n = 0 yields an empty vector.
inline Vec gaussian_draw(Rng& rng, std::size_t n) {
  Vec v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

/// SplitMix64 finalizer; used to derive stage seeds from a master seed.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic sub-seed for a named stage.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view stage) {
  return splitmix64(master ^ fnv1a64(stage));
}

/// 16 lowercase hex digits.
inline std::string hex_u64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace cgnsde
