#pragma once

// Losses, Adam, and the two-phase training schedule (forecast-only
// pre-training, noise estimation, then forecast + DA retraining).

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cgnsde/adjoint.hpp"
#include "cgnsde/dynamics.hpp"
#include "cgnsde/filter.hpp"
#include "cgnsde/model.hpp"
#include "cgnsde/regression.hpp"

namespace cgnsde {

struct TrainConfig {
  std::size_t ns = 200;         // forecast unroll steps (phase 2, and phase 1 unless ns_phase1 is set)
  std::size_t ns_phase1 = 0;    // 0: same as ns
  std::size_t nl = 50000;       // DA window steps
  std::size_t nb = 5000;        // burn-in steps
  std::optional<double> lambda1;  // default 1/N
  std::optional<double> lambda2;  // default 1/N2
  std::size_t epochs_phase1 = 2000;
  std::size_t epochs_phase2 = 200;
  double lr = 1e-3;
  double clip_norm = 10.0;
  DaLossKind da_loss = DaLossKind::Mse;
  std::size_t tape_capacity = 50'000'000;

  std::size_t phase1_steps() const noexcept { return ns_phase1 ? ns_phase1 : ns; }
  double weight_forecast(const CgnModel& m) const { return lambda1.value_or(1.0 / static_cast<double>(m.dim())); }
  double weight_da(const CgnModel& m) const { return lambda2.value_or(1.0 / static_cast<double>(m.n2())); }

  void validate() const {
    if (ns == 0) throw Error(Errc::ValidationError, "ns must be >= 1");
    if (nl == 0) throw Error(Errc::ValidationError, "nl must be >= 1");
    if (nb >= nl) throw Error(Errc::ValidationError, "nb must be smaller than nl");
    if ((lambda1 && *lambda1 < 0.0) || (lambda2 && *lambda2 < 0.0))
      throw Error(Errc::ValidationError, "loss weights must be non-negative");
    if (!(lr >= 0.0)) throw Error(Errc::ValidationError, "learning rate must be non-negative");
    if (!(clip_norm > 0.0)) throw Error(Errc::ValidationError, "clip_norm must be positive");
  }
};

// ---------------------------------------------------------------------------
// Losses

/// (1/N_s) Σ ‖U(t_n) − Ũ(t_n)‖² over a window of N_s + 1 points.
inline double forecast_loss(const Trajectory& truth, const CgnModel& model) { return forecast_loss_value(model, truth); }

/// (1/(N_l − N_b)) Σ_{n>N_b} ‖u2(t_n) − μ(t_n)‖² with index 0 the initial condition.
inline double da_loss_mse(const std::vector<Vec>& truth_u2, const PosteriorSeries& post, std::size_t nb) {
  if (truth_u2.size() != post.size()) throw Error(Errc::LengthMismatch, "truth and posterior differ in length");
  if (post.size() < 2 || nb + 1 >= post.size()) throw Error(Errc::TooShort, "no steps after burn-in");
  double loss = 0.0;
  for (std::size_t n = nb + 1; n < post.size(); ++n) {
    Vec e(truth_u2[n].size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = truth_u2[n][i] - post.means[n][i];
    loss += squared_norm(e);
  }
  return loss / static_cast<double>(post.size() - 1 - nb);
}

/// Per-step mean of ½(N2 ln 2π + ln det R + ‖u2 − μ‖²_{R⁻¹}) over the same steps.
inline double da_loss_nll(const std::vector<Vec>& truth_u2, const PosteriorSeries& post, std::size_t nb) {
  if (truth_u2.size() != post.size()) throw Error(Errc::LengthMismatch, "truth and posterior differ in length");
  if (post.size() < 2 || nb + 1 >= post.size()) throw Error(Errc::TooShort, "no steps after burn-in");
  double loss = 0.0;
  for (std::size_t n = nb + 1; n < post.size(); ++n) {
    Vec e(truth_u2[n].size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = truth_u2[n][i] - post.means[n][i];
    loss += detail::nll_term(post.covariances[n], e);
  }
  return loss / static_cast<double>(post.size() - 1 - nb);
}

/// λ1·forecast + λ2·DA (MSE or NLL per config).
inline double total_loss(const Trajectory& forecast_window, const DaWindow& da, const CgnModel& model,
                         const TrainConfig& cfg) {
  return cfg.weight_forecast(model) * forecast_loss_value(model, forecast_window) +
         cfg.weight_da(model) * da_loss_value(model, da, cfg.da_loss);
}

/// Builds a DA window from a full-state trajectory segment.
inline DaWindow make_da_window(const CgnModel& model, const Trajectory& segment, std::size_t nb) {
  return {segment.select(model.partition.observed), segment.select(model.partition.unobserved), nb};
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  Vec m, v;
  std::size_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// Scales `grad` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
inline double clip_gradient(std::span<double> grad, double max_norm) {
  const double norm = std::sqrt(squared_norm(grad));
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grad) g *= s;
  }
  return norm;
}

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st, double lr) {
  if (params.size() != grads.size() || st.m.size() != params.size())
    throw Error(Errc::DimensionMismatch, "Adam buffers do not match the parameter count");
  check_gradient(grads);
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
    const double mh = st.m[i] / c1, vh = st.v[i] / c2;
    params[i] -= lr * mh / (std::sqrt(vh) + st.eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  int phase = 1;
  double forecast = std::numeric_limits<double>::quiet_NaN();
  double da = std::numeric_limits<double>::quiet_NaN();
  double total = std::numeric_limits<double>::quiet_NaN();

  friend bool operator==(const EpochRecord& a, const EpochRecord& b) {
    auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    return a.epoch == b.epoch && a.phase == b.phase && same(a.forecast, b.forecast) && same(a.da, b.da) &&
           same(a.total, b.total);
  }
};

struct TrainResult {
  CgnModel model;               // after both phases
  CgnModel phase1_model;        // snapshot after phase 1 (σ already estimated)
  std::vector<EpochRecord> history;
  Vec sigma;                    // full-state σ̂ estimated after phase 1
};

/// Runs one optimizer epoch on the forecast loss.
inline double forecast_epoch(CgnModel& model, const Trajectory& data, std::size_t ns, const TrainConfig& cfg,
                             AdamState& adam, Rng& rng) {
  const std::size_t start = rng.uniform_index(data.size() - ns);
  const auto win = data.slice(start, ns + 1);
  Vec grad(model.params.size(), 0.0);
  const double loss = forecast_loss_grad(model, win, 1.0, grad, cfg.tape_capacity);
  clip_gradient(grad, cfg.clip_norm);
  adam_step(model.params.values(), grad, adam, cfg.lr);
  return loss;
}

/// Two-phase training on a full-state trajectory. Phase 1 minimizes the
/// forecast loss on one random window per epoch; σ is then estimated from
/// the residuals over all of `data` and frozen; phase 2 minimizes
/// λ1·forecast + λ2·DA with fresh optimizer moments.
inline TrainResult train(CgnModel model, const Trajectory& data, const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  model.validate();
  const std::size_t ns1 = cfg.phase1_steps();
  if (data.size() < std::max(cfg.ns, ns1) + 1) throw Error(Errc::TooShort, "training data shorter than the forecast window");
  TrainResult res{model, model, {}, {}};
  AdamState adam(model.params.size());
  for (std::size_t e = 0; e < cfg.epochs_phase1; ++e) {
    double loss;
    try {
      loss = forecast_epoch(model, data, ns1, cfg, adam, rng);
    } catch (const Error& err) {
      throw Error(err.code(), err.message() + " (phase 1, epoch " + std::to_string(e) + ")", e);
    }
    res.history.push_back({e, 1, loss, std::numeric_limits<double>::quiet_NaN(), loss});
  }
  res.sigma = estimate_model_sigma(model, data);
  set_model_sigma(model, res.sigma);
  res.phase1_model = model;

  if (cfg.epochs_phase2 > 0) {
    const std::size_t nl = std::min(cfg.nl, data.size() - 1);
    if (cfg.nb >= nl) throw Error(Errc::TooShort, "training data too short for the DA burn-in");
    const double l1 = cfg.weight_forecast(model), l2 = cfg.weight_da(model);
    AdamState adam2(model.params.size());
    for (std::size_t e = 0; e < cfg.epochs_phase2; ++e) {
      try {
        const std::size_t fs = rng.uniform_index(data.size() - cfg.ns);
        const auto fwin = data.slice(fs, cfg.ns + 1);
        const std::size_t ds = rng.uniform_index(data.size() - nl);
        const auto dwin = make_da_window(model, data.slice(ds, nl + 1), cfg.nb);
        Vec grad(model.params.size(), 0.0);
        const double f = forecast_loss_grad(model, fwin, l1, grad, cfg.tape_capacity);
        const double d = da_loss_grad(model, dwin, cfg.da_loss, l2, grad, cfg.tape_capacity);
        clip_gradient(grad, cfg.clip_norm);
        adam_step(model.params.values(), grad, adam2, cfg.lr);
        res.history.push_back({cfg.epochs_phase1 + e, 2, f, d, l1 * f + l2 * d});
      } catch (const Error& err) {
        throw Error(err.code(), err.message() + " (phase 2, epoch " + std::to_string(e) + ")", e);
      }
    }
  }
  res.model = std::move(model);
  return res;
}

inline void write_history_csv(const std::vector<EpochRecord>& h, std::ostream& os) {
  auto cell = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  os << "epoch,phase,forecast_loss,da_loss,total_loss\n";
  for (const auto& r : h)
    os << r.epoch << ',' << r.phase << ',' << cell(r.forecast) << ',' << cell(r.da) << ',' << cell(r.total) << '\n';
}

inline void write_history_csv(const std::vector<EpochRecord>& h, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(Errc::IoError, "cannot open " + path);
  write_history_csv(h, os);
}

}  // namespace cgnsde
