#pragma once

// Closed-form filter for conditional-Gaussian models: the posterior of u2
// given the u1 history is N(μ, R) with
//   dμ = (f2 + g2 μ) dt + R g1ᵀ (σ1σ1ᵀ)⁻¹ (du1 − (f1 + g1 μ) dt)
//   dR = (g2 R + R g2ᵀ + σ2σ2ᵀ − R g1ᵀ (σ1σ1ᵀ)⁻¹ g1 R) dt
// discretized with explicit Euler at the observation step.

#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "cgnsde/dynamics.hpp"
#include "cgnsde/model.hpp"
#include "cgnsde/numerics.hpp"

namespace cgnsde {

struct FilterState {
  Vec mu;
  Mat r;
};

/// Posterior moments aligned with the observation times.
struct PosteriorSeries {
  double t0 = 0.0;
  double dt = 1.0;
  std::vector<Vec> means;
  std::vector<Mat> covariances;

  std::size_t size() const noexcept { return means.size(); }
  double time(std::size_t n) const noexcept { return t0 + static_cast<double>(n) * dt; }

  friend bool operator==(const PosteriorSeries&, const PosteriorSeries&) = default;
};

/// Default initial condition: μ0 = 0, R0 = 0.01·I.
inline FilterState default_filter_init(std::size_t n2) { return {Vec(n2, 0.0), Mat::identity(n2, 0.01)}; }

/// f1, g1 (observed rows) and f2, g2 (unobserved rows).
struct FilterBlocks {
  Vec f1, f2;
  Mat g1, g2;
};

inline FilterBlocks split_blocks(const DriftCoefficients& c, const StatePartition& p) {
  FilterBlocks b{Vec(p.n1()), Vec(p.n2()), Mat(p.n1(), p.n2()), Mat(p.n2(), p.n2())};
  for (std::size_t k = 0; k < p.n1(); ++k) {
    b.f1[k] = c.f[p.observed[k]];
    for (std::size_t j = 0; j < p.n2(); ++j) b.g1(k, j) = c.g(p.observed[k], j);
  }
  for (std::size_t k = 0; k < p.n2(); ++k) {
    b.f2[k] = c.f[p.unobserved[k]];
    for (std::size_t j = 0; j < p.n2(); ++j) b.g2(k, j) = c.g(p.unobserved[k], j);
  }
  return b;
}

namespace detail {

/// One Euler step of the moment equations given already-evaluated blocks.
/// Returns the jitter added during the SPD repair (0 if none).
inline double filter_update(const FilterBlocks& b, std::span<const double> sigma1, std::span<const double> sigma2,
                            const FilterState& fs, std::span<const double> du1, double dt, FilterState& next) {
  const std::size_t n1 = b.f1.size(), n2 = b.f2.size();
  const Mat& R = fs.r;
  // innovation v = du1 − (f1 + g1 μ) dt
  Vec v(n1);
  for (std::size_t k = 0; k < n1; ++k) {
    double s = b.f1[k];
    for (std::size_t j = 0; j < n2; ++j) s += b.g1(k, j) * fs.mu[j];
    v[k] = du1[k] - s * dt;
  }
  // K = R g1ᵀ D with D = diag(1/σ1²)
  Mat K(n2, n1);
  for (std::size_t i = 0; i < n2; ++i)
    for (std::size_t k = 0; k < n1; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < n2; ++j) s += R(i, j) * b.g1(k, j);
      K(i, k) = s / (sigma1[k] * sigma1[k]);
    }
  next.mu.assign(n2, 0.0);
  for (std::size_t i = 0; i < n2; ++i) {
    double drift = b.f2[i];
    for (std::size_t j = 0; j < n2; ++j) drift += b.g2(i, j) * fs.mu[j];
    double gain = 0.0;
    for (std::size_t k = 0; k < n1; ++k) gain += K(i, k) * v[k];
    next.mu[i] = fs.mu[i] + drift * dt + gain;
  }
  // g2 R, and K g1 R = R g1ᵀ D g1 R
  const Mat G2R = matmul(b.g2, R);
  const Mat KG1 = matmul(K, b.g1);
  const Mat KG1R = matmul(KG1, R);
  Mat Rn(n2, n2);
  for (std::size_t i = 0; i < n2; ++i)
    for (std::size_t j = 0; j < n2; ++j) {
      double d = G2R(i, j) + G2R(j, i) - KG1R(i, j);
      if (i == j) d += sigma2[i] * sigma2[i];
      Rn(i, j) = R(i, j) + d * dt;
    }
  next.r = symmetrize(Rn);
  double jitter = 0.0;
  try {
    jitter = cholesky_factor(next.r).jitter_added;
  } catch (const Error&) {
    throw Error(Errc::CovarianceCollapse, "posterior covariance lost positive definiteness");
  }
  if (jitter > 0.0)
    for (std::size_t i = 0; i < n2; ++i) next.r(i, i) += jitter;
  return jitter;
}

}  // namespace detail

inline FilterState filter_step(const CgnModel& model, const FilterState& fs, std::span<const double> u1,
                               std::span<const double> du1, double dt) {
  if (!(dt > 0.0)) throw Error(Errc::ValidationError, "dt must be positive");
  if (u1.size() != model.n1() || du1.size() != model.n1() || fs.mu.size() != model.n2())
    throw Error(Errc::DimensionMismatch, "filter inputs do not match the model partition");
  const auto blocks = split_blocks(model.coefficients(u1), model.partition);
  FilterState next;
  detail::filter_update(blocks, model.sigma1, model.sigma2, fs, du1, dt, next);
  return next;
}

/// Sequential filter over an observed u1 series. Entry n of the result is
/// the posterior at observation time n (entry 0 is the initial condition).
inline PosteriorSeries run_filter(const CgnModel& model, const Trajectory& observed, const Vec& mu0, const Mat& r0) {
  model.validate_noise();
  if (observed.size() < 2) throw Error(Errc::TooShort, "filter needs at least two observations");
  if (observed.dim() != model.n1()) throw Error(Errc::DimensionMismatch, "observation dimension differs from u1");
  PosteriorSeries out{observed.t0, observed.dt, {}, {}};
  out.means.reserve(observed.size());
  out.covariances.reserve(observed.size());
  FilterState fs{mu0, r0};
  out.means.push_back(fs.mu);
  out.covariances.push_back(fs.r);
  Vec du1(model.n1());
  for (std::size_t n = 0; n + 1 < observed.size(); ++n) {
    const auto& a = observed.states[n];
    const auto& b = observed.states[n + 1];
    for (std::size_t k = 0; k < du1.size(); ++k) du1[k] = b[k] - a[k];
    try {
      fs = filter_step(model, fs, a, du1, observed.dt);
    } catch (const Error& e) {
      if (e.code() == Errc::CovarianceCollapse)
        throw Error(Errc::CovarianceCollapse, "posterior covariance collapsed at step " + std::to_string(n + 1), n + 1);
      throw;
    }
    if (!all_finite(fs.mu)) throw Error(Errc::NumericalBlowup, "posterior mean diverged at step " + std::to_string(n + 1), n + 1);
    out.means.push_back(fs.mu);
    out.covariances.push_back(fs.r);
  }
  return out;
}

inline PosteriorSeries run_filter(const CgnModel& model, const Trajectory& observed) {
  const auto init = default_filter_init(model.n2());
  return run_filter(model, observed, init.mu, init.r);
}

inline void write_posterior_csv(const PosteriorSeries& ps, std::ostream& os) {
  const std::size_t n2 = ps.means.empty() ? 0 : ps.means.front().size();
  os << "t";
  for (std::size_t i = 0; i < n2; ++i) os << ",mu_" << (i + 1);
  for (std::size_t i = 0; i < n2; ++i)
    for (std::size_t j = i; j < n2; ++j) os << ",R_" << (i + 1) << '_' << (j + 1);
  os << '\n';
  for (std::size_t n = 0; n < ps.size(); ++n) {
    os << format_double(ps.time(n));
    for (double v : ps.means[n]) os << ',' << format_double(v);
    const Mat& r = ps.covariances[n];
    for (std::size_t i = 0; i < n2; ++i)
      for (std::size_t j = i; j < n2; ++j) os << ',' << format_double(r(i, j));
    os << '\n';
  }
}

inline void write_posterior_csv(const PosteriorSeries& ps, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(Errc::IoError, "cannot open " + path);
  write_posterior_csv(ps, os);
}

}  // namespace cgnsde
