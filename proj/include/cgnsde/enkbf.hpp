#pragma once

// Ensemble Kalman-Bucy filter over the unobserved block, used as the
// reference posterior when the true system is not conditionally Gaussian.
// Members carry u2; u1 is taken from the observations. Each step
//   u2_j += F2(u1, u2_j) dt + γ σ2 √dt ξ_j + K (du1 − ½(h_j + h̄) dt),
//   h_j = F1(u1, u2_j),   K = cov(u2, h) (σ1σ1ᵀ)⁻¹,
// with γ the noise inflation factor.

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgnsde/dynamics.hpp"
#include "cgnsde/error.hpp"
#include "cgnsde/filter.hpp"
#include "cgnsde/model.hpp"
#include "cgnsde/numerics.hpp"

namespace cgnsde {

struct Ensemble {
  std::vector<Vec> members;  // u2 per member

  std::size_t size() const noexcept { return members.size(); }
  Vec mean() const {
    Vec m(members.front().size(), 0.0);
    for (const auto& x : members)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += x[i];
    for (auto& v : m) v /= static_cast<double>(members.size());
    return m;
  }
  Mat covariance() const { return sample_covariance(members); }
};

inline Ensemble initial_ensemble(std::size_t j, const Vec& mean, double spread, Rng& rng) {
  if (j < 2) throw Error(Errc::ValidationError, "an ensemble needs at least two members");
  Ensemble e;
  for (std::size_t k = 0; k < j; ++k) {
    Vec x = mean;
    for (auto& v : x) v += spread * rng.normal();
    e.members.push_back(std::move(x));
  }
  return e;
}

/// One step. Throws NumericalBlowup if a member leaves the finite envelope and
/// EnsembleCollapse if the spread vanishes.
inline Ensemble enkbf_step(const Ensemble& ens, const DriftField& drift, const DiffusionSpec& diff,
                           const StatePartition& part, std::span<const double> u1, std::span<const double> du1, double dt,
                           double inflation, Rng& rng) {
  const std::size_t jn = ens.size(), n1 = part.n1(), n2 = part.n2(), n = part.dim();
  if (jn < 2) throw Error(Errc::ValidationError, "an ensemble needs at least two members");
  if (!(dt > 0.0)) throw Error(Errc::ValidationError, "dt must be positive");
  if (!(inflation >= 1.0) || !std::isfinite(inflation)) throw Error(Errc::ValidationError, "inflation must be finite and >= 1");
  if (diff.sigma.size() != n) throw Error(Errc::DimensionMismatch, "noise amplitudes do not match the state");
  const Vec s1 = part.u1(diff.sigma), s2 = part.u2(diff.sigma);

  std::vector<Vec> f2(jn), h(jn);
  Vec full(n), d(n);
  for (std::size_t j = 0; j < jn; ++j) {
    full = part.join(u1, ens.members[j]);
    drift(full, 0.0, d);
    f2[j] = part.u2(d);
    h[j] = part.u1(d);
  }
  Vec mx(n2, 0.0), mh(n1, 0.0);
  for (std::size_t j = 0; j < jn; ++j) {
    for (std::size_t i = 0; i < n2; ++i) mx[i] += ens.members[j][i];
    for (std::size_t i = 0; i < n1; ++i) mh[i] += h[j][i];
  }
  for (auto& v : mx) v /= static_cast<double>(jn);
  for (auto& v : mh) v /= static_cast<double>(jn);
  double spread = 0.0;
  Mat c(n2, n1);  // cov(u2, h)
  for (std::size_t j = 0; j < jn; ++j)
    for (std::size_t i = 0; i < n2; ++i) {
      const double a = ens.members[j][i] - mx[i];
      spread += a * a;
      for (std::size_t k = 0; k < n1; ++k) c(i, k) += a * (h[j][k] - mh[k]);
    }
  spread = std::sqrt(spread / static_cast<double>(jn - 1));
  if (!(spread >= 1e-12)) throw Error(Errc::EnsembleCollapse, "ensemble spread collapsed");
  for (std::size_t i = 0; i < n2; ++i)
    for (std::size_t k = 0; k < n1; ++k) c(i, k) /= static_cast<double>(jn - 1) * s1[k] * s1[k];

  const double sq = std::sqrt(dt);
  Ensemble out;
  out.members.resize(jn);
  Vec innov(n1);
  for (std::size_t j = 0; j < jn; ++j) {
    for (std::size_t k = 0; k < n1; ++k) innov[k] = du1[k] - 0.5 * (h[j][k] + mh[k]) * dt;
    Vec x = ens.members[j];
    for (std::size_t i = 0; i < n2; ++i) {
      double gain = 0.0;
      for (std::size_t k = 0; k < n1; ++k) gain += c(i, k) * innov[k];
      x[i] += f2[j][i] * dt + gain;
      if (s2[i] > 0.0) x[i] += inflation * s2[i] * sq * rng.normal();
    }
    check_finite_state(x, 0);
    out.members[j] = std::move(x);
  }
  return out;
}

struct EnkbfRun {
  PosteriorSeries posterior;  // up to the last finite step
  std::size_t members = 0;
  double inflation = 1.0;
  bool diverged = false;
  std::optional<std::size_t> divergence_step;
};

/// Runs the ensemble filter over an observed u1 series. Divergence (member
/// overflow or NaN) ends the run and is recorded instead of thrown. With
/// substeps > 1 each observation interval is split evenly, u1 interpolated
/// linearly.
inline EnkbfRun run_enkbf(const DriftField& drift, const DiffusionSpec& diff, const StatePartition& part,
                          const Trajectory& observed, std::size_t members, double inflation, Rng& rng,
                          std::size_t substeps = 1) {
  if (substeps == 0) throw Error(Errc::ValidationError, "substeps must be >= 1");
  if (observed.size() < 2) throw Error(Errc::TooShort, "filter needs at least two observations");
  if (observed.dim() != part.n1()) throw Error(Errc::DimensionMismatch, "observation dimension differs from u1");
  EnkbfRun run;
  run.members = members;
  run.inflation = inflation;
  run.posterior = {observed.t0, observed.dt, {}, {}};
  const auto init = default_filter_init(part.n2());
  Ensemble ens = initial_ensemble(members, init.mu, std::sqrt(init.r(0, 0)), rng);
  run.posterior.means.push_back(ens.mean());
  run.posterior.covariances.push_back(ens.covariance());
  Vec du1(part.n1()), u1(part.n1());
  const double h = observed.dt / static_cast<double>(substeps);
  for (std::size_t n = 0; n + 1 < observed.size(); ++n) {
    const auto& a = observed.states[n];
    const auto& b = observed.states[n + 1];
    for (std::size_t k = 0; k < du1.size(); ++k) du1[k] = (b[k] - a[k]) / static_cast<double>(substeps);
    try {
      for (std::size_t s = 0; s < substeps; ++s) {
        for (std::size_t k = 0; k < u1.size(); ++k) u1[k] = a[k] + static_cast<double>(s) * du1[k];
        ens = enkbf_step(ens, drift, diff, part, u1, du1, h, inflation, rng);
      }
    } catch (const Error& e) {
      if (e.code() == Errc::NumericalBlowup) {
        run.diverged = true;
        run.divergence_step = n + 1;
        return run;
      }
      if (e.code() == Errc::EnsembleCollapse)
        throw Error(Errc::EnsembleCollapse, "ensemble collapsed at step " + std::to_string(n + 1), n + 1);
      throw;
    }
    run.posterior.means.push_back(ens.mean());
    run.posterior.covariances.push_back(ens.covariance());
  }
  return run;
}

inline EnkbfRun run_enkbf(const Benchmark& truth, const StatePartition& part, const Trajectory& observed,
                          std::size_t members, double inflation, Rng& rng, std::size_t substeps = 1) {
  return run_enkbf(benchmark_drift(truth), benchmark_diffusion(truth), part, observed, members, inflation, rng,
                   substeps);
}

inline nlohmann::json enkbf_record(const EnkbfRun& r) {
  nlohmann::json j{{"members", r.members}, {"inflation", r.inflation}, {"diverged", r.diverged}};
  j["divergence_step"] = r.divergence_step ? nlohmann::json(*r.divergence_step) : nlohmann::json(nullptr);
  return j;
}

}  // namespace cgnsde
