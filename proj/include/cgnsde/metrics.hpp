#pragma once

// Validation metrics: forecast and DA errors, histogram PDFs, ACFs and
// long-run statistics.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cgnsde/adjoint.hpp"
#include "cgnsde/dynamics.hpp"
#include "cgnsde/error.hpp"
#include "cgnsde/filter.hpp"
#include "cgnsde/model.hpp"
#include "cgnsde/training.hpp"

namespace cgnsde {

/// Mean of forecast_loss over windows of `horizon` steps starting every
/// `stride` points.
inline double forecast_mse_over_horizon(const CgnModel& model, const Trajectory& test, std::size_t horizon,
                                        std::size_t stride) {
  if (horizon == 0 || stride == 0) throw Error(Errc::ValidationError, "horizon and stride must be >= 1");
  if (test.size() <= horizon) throw Error(Errc::TooShort, "test series shorter than the forecast horizon");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s + horizon < test.size(); s += stride) {
    acc += forecast_loss_value(model, test.slice(s, horizon + 1));
    ++count;
  }
  return acc / static_cast<double>(count);
}

/// One row of the three-model table. MSEs are per state component (the
/// loss divided by the block dimension); the NLL is per time step.
struct ModelMetrics {
  double forecast_mse = std::numeric_limits<double>::quiet_NaN();
  double da_mse = std::numeric_limits<double>::quiet_NaN();
  double da_nll = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
};

inline ModelMetrics posterior_metrics(const std::vector<Vec>& truth_u2, const PosteriorSeries& post, std::size_t nb) {
  ModelMetrics m;
  const double n2 = static_cast<double>(truth_u2.front().size());
  m.da_mse = da_loss_mse(truth_u2, post, nb) / n2;
  m.da_nll = da_loss_nll(truth_u2, post, nb);
  return m;
}

/// Forecast MSE over `horizon` plus DA metrics from the analytic filter on
/// the test series. Blow-ups are reported through `diverged`.
inline ModelMetrics evaluate_model(const CgnModel& model, const Trajectory& test, std::size_t horizon,
                                   std::size_t stride, std::size_t nb, PosteriorSeries* post_out = nullptr) {
  ModelMetrics m;
  try {
    m.forecast_mse = forecast_mse_over_horizon(model, test, horizon, stride) / static_cast<double>(model.dim());
  } catch (const Error& e) {
    if (e.code() != Errc::NumericalBlowup) throw;
    m.diverged = true;
  }
  try {
    auto post = run_filter(model, test.select(model.partition.observed));
    const auto d = posterior_metrics(test.select(model.partition.unobserved).states, post, nb);
    m.da_mse = d.da_mse;
    m.da_nll = d.da_nll;
    if (post_out) *post_out = std::move(post);
  } catch (const Error& e) {
    if (e.code() != Errc::NumericalBlowup && e.code() != Errc::CovarianceCollapse) throw;
    m.diverged = true;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Distributions and correlations

struct Histogram {
  Vec edges;    // n_bins + 1
  Vec density;  // n_bins

  Vec centers() const {
    Vec c(density.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.5 * (edges[i] + edges[i + 1]);
    return c;
  }
  double integral() const {
    double s = 0.0;
    for (std::size_t i = 0; i < density.size(); ++i) s += density[i] * (edges[i + 1] - edges[i]);
    return s;
  }
};

/// Equal-width bins over [min, max], normalized to unit integral.
inline Histogram histogram_pdf(std::span<const double> series, std::size_t n_bins = 100) {
  if (n_bins == 0) throw Error(Errc::ValidationError, "n_bins must be >= 1");
  if (series.size() < n_bins) throw Error(Errc::InsufficientSamples, "fewer samples than bins");
  const auto [lo_it, hi_it] = std::minmax_element(series.begin(), series.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw Error(Errc::DegenerateRange, "series has zero range");
  Histogram h;
  h.edges.resize(n_bins + 1);
  const double w = (hi - lo) / static_cast<double>(n_bins);
  for (std::size_t i = 0; i <= n_bins; ++i) h.edges[i] = lo + w * static_cast<double>(i);
  h.edges.back() = hi;
  std::vector<std::size_t> counts(n_bins, 0);
  for (double v : series) {
    auto b = static_cast<std::size_t>((v - lo) / w);
    ++counts[std::min(b, n_bins - 1)];
  }
  h.density.resize(n_bins);
  const double total = static_cast<double>(series.size());
  for (std::size_t i = 0; i < n_bins; ++i)
    h.density[i] = static_cast<double>(counts[i]) / (total * (h.edges[i + 1] - h.edges[i]));
  return h;
}

struct AcfSeries {
  Vec lags;    // time units
  Vec values;
};

/// Biased estimator ρ(k) = Σ(x_t−x̄)(x_{t+k}−x̄) / Σ(x_t−x̄)².
inline AcfSeries acf(std::span<const double> series, std::size_t max_lag, double dt = 1.0) {
  const std::size_t n = series.size();
  if (n <= max_lag) throw Error(Errc::TooShort, "series not longer than max_lag");
  double mean = 0.0;
  for (double v : series) mean += v;
  mean /= static_cast<double>(n);
  Vec c(n);
  for (std::size_t t = 0; t < n; ++t) c[t] = series[t] - mean;
  double c0 = 0.0;
  for (double v : c) c0 += v * v;
  if (!(c0 > 0.0)) throw Error(Errc::DegenerateRange, "series has zero variance");
  AcfSeries a;
  a.lags.resize(max_lag + 1);
  a.values.resize(max_lag + 1);
  for (std::size_t k = 0; k <= max_lag; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) s += c[t] * c[t + k];
    a.lags[k] = static_cast<double>(k) * dt;
    a.values[k] = k == 0 ? 1.0 : s / c0;
  }
  return a;
}

/// Trapezoidal integral of the ACF up to its first zero crossing (linearly
/// interpolated), or over all lags if it never crosses.
inline double decorrelation_time(const AcfSeries& a) {
  double t = 0.0;
  for (std::size_t k = 0; k + 1 < a.values.size(); ++k) {
    const double v0 = a.values[k], v1 = a.values[k + 1], h = a.lags[k + 1] - a.lags[k];
    if (v1 <= 0.0) {
      const double frac = v0 / (v0 - v1);
      return t + 0.5 * v0 * frac * h;
    }
    t += 0.5 * (v0 + v1) * h;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Long-run statistics

struct ComponentStats {
  double mean = 0.0, variance = 0.0, skewness = 0.0, kurtosis = 0.0, decorrelation = 0.0;
};

inline ComponentStats component_stats(std::span<const double> x, double dt, std::size_t max_lag) {
  ComponentStats s;
  const double n = static_cast<double>(x.size());
  for (double v : x) s.mean += v;
  s.mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = v - s.mean, d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  s.variance = m2;
  s.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  s.kurtosis = m2 > 0.0 ? m4 / (m2 * m2) : 0.0;
  s.decorrelation = m2 > 0.0 ? decorrelation_time(acf(x, std::min(max_lag, x.size() - 1), dt)) : 0.0;
  return s;
}

/// Long noisy simulation of `model` from `x0`; nullopt if it blows up.
inline std::optional<Trajectory> simulate_model(const CgnModel& model, const Vec& x0, double dt, std::size_t steps,
                                                Rng& rng, std::size_t substeps = 1) {
  try {
    return euler_maruyama_sampled(model_drift(model), DiffusionSpec{model.full_sigma()}, x0, dt, steps, substeps, rng);
  } catch (const Error& e) {
    if (e.code() != Errc::NumericalBlowup) throw;
    return std::nullopt;
  }
}

inline void write_longrun_stats_csv(const Trajectory& traj, double max_lag_time, std::ostream& os) {
  const auto max_lag = static_cast<std::size_t>(std::llround(max_lag_time / traj.dt));
  os << "component,mean,variance,skewness,kurtosis,decorrelation_time\n";
  for (std::size_t c = 0; c < traj.dim(); ++c) {
    const auto s = component_stats(traj.component(c), traj.dt, max_lag);
    os << c << ',' << format_double(s.mean) << ',' << format_double(s.variance) << ',' << format_double(s.skewness)
       << ',' << format_double(s.kurtosis) << ',' << format_double(s.decorrelation) << '\n';
  }
}

inline void write_histogram_csv(const Histogram& h, std::ostream& os) {
  os << "left,right,density\n";
  for (std::size_t i = 0; i < h.density.size(); ++i)
    os << format_double(h.edges[i]) << ',' << format_double(h.edges[i + 1]) << ',' << format_double(h.density[i]) << '\n';
}

inline void write_acf_csv(const AcfSeries& a, std::ostream& os) {
  os << "lag,acf\n";
  for (std::size_t i = 0; i < a.values.size(); ++i) os << format_double(a.lags[i]) << ',' << format_double(a.values[i]) << '\n';
}

}  // namespace cgnsde
