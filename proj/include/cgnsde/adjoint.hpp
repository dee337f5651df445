#pragma once

// Reverse-mode differentiation of the training losses.
//
// The tape records one node per forward step (an Euler step of the forecast
// unroll, or one filter update) rather than per scalar operation; each node
// knows the vector-Jacobian product of its step. Replaying the nodes in
// reverse order accumulates the gradient with respect to every entry of the
// model's ParamVector, through the networks, the knowledge terms, the drift
// assembly, the unroll and the μ/R recursion.

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "cgnsde/dynamics.hpp"
#include "cgnsde/error.hpp"
#include "cgnsde/filter.hpp"
#include "cgnsde/model.hpp"

namespace cgnsde {

class AdjointTape {
 public:
  explicit AdjointTape(std::size_t capacity = 50'000'000) : capacity_(capacity) {}

  void record(std::function<void()> node) {
    if (nodes_.size() >= capacity_)
      throw Error(Errc::TapeOverflow, "tape capacity of " + std::to_string(capacity_) + " nodes exceeded");
    nodes_.push_back(std::move(node));
  }

  /// Runs every node in reverse recording order, then clears the tape.
  void backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }

 private:
  std::size_t capacity_;
  std::vector<std::function<void()>> nodes_;
};

inline void check_gradient(std::span<const double> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i])) throw Error(Errc::NonFiniteGradient, "non-finite gradient entry", i);
}

/// ½‖params‖², with gradient params. Useful as a tape smoke test and as a
/// regularizer.
inline double half_squared_norm(std::span<const double> params, std::span<double> grad, AdjointTape& tape) {
  double v = 0.0;
  for (double p : params) v += p * p;
  tape.record([params, grad] {
    for (std::size_t i = 0; i < params.size(); ++i) grad[i] += params[i];
  });
  return 0.5 * v;
}

// ---------------------------------------------------------------------------
// Forecast loss

/// (1/Ns) Σ_{n=1..Ns} ‖U(t_n) − Ũ(t_n)‖² with Ũ the noise-free Euler unroll
/// of the model drift from U(t_0). When `tape` is given, records the reverse
/// pass accumulating `scale`·∂L/∂θ into `grad`.
inline double forecast_loss_impl(const CgnModel& model, const Trajectory& window, AdjointTape* tape, double scale,
                                 std::span<double> grad, std::vector<Vec>& path, Vec& xbar) {
  if (window.size() < 2) throw Error(Errc::TooShort, "forecast window needs at least two points");
  if (window.dim() != model.dim()) throw Error(Errc::DimensionMismatch, "window dimension differs from model");
  const std::size_t ns = window.size() - 1;
  const std::size_t n = model.dim(), n2 = model.n2();
  const double dt = window.dt;
  const auto& part = model.partition;
  path.assign(1, window.states.front());
  path.reserve(ns + 1);
  double loss = 0.0;
  DriftCoefficients c;
  xbar.assign(n, 0.0);
  for (std::size_t k = 0; k < ns; ++k) {
    const Vec& x = path.back();
    const Vec u1 = part.u1(x), u2 = part.u2(x);
    model.terms.evaluate(model.params.values(), u1, n, n2, c);
    Vec next(n);
    for (std::size_t r = 0; r < n; ++r) {
      double d = c.f[r];
      for (std::size_t j = 0; j < n2; ++j) d += c.g(r, j) * u2[j];
      next[r] = x[r] + dt * d;
    }
    check_finite_state(next, k + 1);
    double e2 = 0.0;
    const Vec& truth = window.states[k + 1];
    for (std::size_t r = 0; r < n; ++r) e2 += (truth[r] - next[r]) * (truth[r] - next[r]);
    loss += e2;
    path.push_back(std::move(next));
    if (tape) {
      // step k: x_{k+1} = x_k + dt·(f + g u2)
      tape->record([&model, &path, &xbar, grad, k, dt, n, n2] {
        const auto& p = model.partition;
        const Vec& x = path[k];
        const Vec u1 = p.u1(x), u2 = p.u2(x);
        DriftCoefficients cc;
        model.terms.evaluate(model.params.values(), u1, n, n2, cc);
        Vec f_bar(n);
        Mat g_bar(n, n2);
        Vec u2_bar(n2, 0.0), u1_bar(p.n1(), 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          const double d = dt * xbar[r];
          f_bar[r] = d;
          for (std::size_t j = 0; j < n2; ++j) {
            g_bar(r, j) = d * u2[j];
            u2_bar[j] += cc.g(r, j) * d;
          }
        }
        model.terms.backward(model.params.values(), u1, f_bar, g_bar, grad, u1_bar);
        for (std::size_t i = 0; i < p.n1(); ++i) xbar[p.observed[i]] += u1_bar[i];
        for (std::size_t j = 0; j < n2; ++j) xbar[p.unobserved[j]] += u2_bar[j];
      });
      // loss contribution at k+1
      tape->record([&window, &path, &xbar, k, ns, n, scale] {
        const Vec& t = window.states[k + 1];
        const Vec& y = path[k + 1];
        for (std::size_t r = 0; r < n; ++r) xbar[r] += scale * (-2.0 / static_cast<double>(ns)) * (t[r] - y[r]);
      });
    }
  }
  return loss / static_cast<double>(ns);
}

inline double forecast_loss_value(const CgnModel& model, const Trajectory& window) {
  std::vector<Vec> path;
  Vec xbar;
  return forecast_loss_impl(model, window, nullptr, 0.0, {}, path, xbar);
}

/// Value of the forecast loss; adds scale·∂L/∂θ into `grad`.
inline double forecast_loss_grad(const CgnModel& model, const Trajectory& window, double scale, std::span<double> grad,
                                 std::size_t tape_capacity = 50'000'000) {
  if (grad.size() != model.params.size()) throw Error(Errc::DimensionMismatch, "gradient buffer has wrong size");
  AdjointTape tape(tape_capacity);
  std::vector<Vec> path;
  Vec xbar;
  const double v = forecast_loss_impl(model, window, &tape, scale, grad, path, xbar);
  tape.backward();
  check_gradient(grad);
  return v;
}

// ---------------------------------------------------------------------------
// Data-assimilation losses

enum class DaLossKind { Mse, Nll };

/// One DA sample: the observed path u1 and the true hidden path u2 on the
/// same grid (N_l + 1 points), with burn-in N_b.
struct DaWindow {
  Trajectory u1;
  Trajectory u2;
  std::size_t burn_in = 0;
};

namespace detail {

/// ½(N2 ln 2π + ln det R + eᵀR⁻¹e)
inline double nll_term(const Mat& r, std::span<const double> e, Mat* r_inv = nullptr) {
  const auto l = cholesky_factor(r, {.allow_jitter = false}).lower;
  const Vec w = cholesky_solve(l, e);
  if (r_inv) *r_inv = inverse_spd_from_factor(l);
  return 0.5 * (static_cast<double>(e.size()) * std::log(2.0 * std::numbers::pi) + log_det_from_factor(l) + dot(e, w));
}

struct FilterTapeState {
  std::vector<FilterState> states;
  Vec mu_bar;
  Mat r_bar;
};

}  // namespace detail

/// MSE: (1/(Nl−Nb)) Σ_{n>Nb} ‖u2 − μ‖²; NLL: the per-step mean of the
/// Gaussian negative log-likelihood over the same steps.
inline double da_loss_impl(const CgnModel& model, const DaWindow& w, DaLossKind kind, AdjointTape* tape, double scale,
                           std::span<double> grad, detail::FilterTapeState& st) {
  model.validate_noise();
  const std::size_t nl = w.u1.size() - 1;
  if (w.u1.size() < 2) throw Error(Errc::TooShort, "DA window needs at least two points");
  if (w.u2.size() != w.u1.size()) throw Error(Errc::LengthMismatch, "u1 and u2 windows differ in length");
  if (w.burn_in >= nl) throw Error(Errc::ValidationError, "burn-in must be shorter than the DA window");
  if (w.u1.dim() != model.n1() || w.u2.dim() != model.n2())
    throw Error(Errc::DimensionMismatch, "DA window dimensions differ from the partition");
  const std::size_t n = model.dim(), n1 = model.n1(), n2 = model.n2();
  const double dt = w.u1.dt;
  const double count = static_cast<double>(nl - w.burn_in);
  const auto& part = model.partition;

  st.states.clear();
  st.states.reserve(tape ? nl + 1 : 1);
  st.states.push_back(default_filter_init(n2));
  st.mu_bar.assign(n2, 0.0);
  st.r_bar = Mat(n2, n2);
  FilterState cur = st.states.front(), next;
  DriftCoefficients c;
  Vec du1(n1);
  double loss = 0.0;
  for (std::size_t k = 0; k < nl; ++k) {
    const Vec& a = w.u1.states[k];
    const Vec& b = w.u1.states[k + 1];
    for (std::size_t i = 0; i < n1; ++i) du1[i] = b[i] - a[i];
    model.terms.evaluate(model.params.values(), a, n, n2, c);
    const auto blocks = split_blocks(c, part);
    try {
      detail::filter_update(blocks, model.sigma1, model.sigma2, cur, du1, dt, next);
    } catch (const Error& e) {
      throw Error(e.code(), e.message() + " at step " + std::to_string(k + 1), k + 1);
    }
    if (!all_finite(next.mu)) throw Error(Errc::NumericalBlowup, "posterior mean diverged", k + 1);
    if (tape) st.states.push_back(next);
    if (tape) {
      tape->record([&model, &w, &st, grad, k, dt, n, n1, n2] {
        const auto& p = model.partition;
        const FilterState& s = st.states[k];
        const Mat& R = s.r;
        const Vec& mu = s.mu;
        const Vec& a = w.u1.states[k];
        const Vec& b = w.u1.states[k + 1];
        DriftCoefficients cc;
        model.terms.evaluate(model.params.values(), a, n, n2, cc);
        const auto bl = split_blocks(cc, p);
        Vec D(n1);
        for (std::size_t i = 0; i < n1; ++i) D[i] = 1.0 / (model.sigma1[i] * model.sigma1[i]);

        // recompute forward intermediates
        Vec v(n1);
        for (std::size_t i = 0; i < n1; ++i) {
          double sum = bl.f1[i];
          for (std::size_t j = 0; j < n2; ++j) sum += bl.g1(i, j) * mu[j];
          v[i] = (b[i] - a[i]) - sum * dt;
        }
        Mat K(n2, n1);  // R g1ᵀ D
        for (std::size_t i = 0; i < n2; ++i)
          for (std::size_t q = 0; q < n1; ++q) {
            double sum = 0.0;
            for (std::size_t j = 0; j < n2; ++j) sum += R(i, j) * bl.g1(q, j);
            K(i, q) = sum * D[q];
          }
        Mat M(n2, n2);  // g1ᵀ D g1
        for (std::size_t i = 0; i < n2; ++i)
          for (std::size_t j = 0; j < n2; ++j) {
            double sum = 0.0;
            for (std::size_t q = 0; q < n1; ++q) sum += bl.g1(q, i) * D[q] * bl.g1(q, j);
            M(i, j) = sum;
          }

        const Vec abar = st.mu_bar;
        const Mat S = symmetrize(st.r_bar);
        Vec f1b(n1, 0.0), f2b(n2, 0.0), mub(n2, 0.0);
        Mat g1b(n1, n2), g2b(n2, n2), Rb = S;

        // mean update
        for (std::size_t i = 0; i < n2; ++i) {
          mub[i] += abar[i];
          f2b[i] += dt * abar[i];
          for (std::size_t j = 0; j < n2; ++j) {
            g2b(i, j) += dt * abar[i] * mu[j];
            mub[j] += dt * bl.g2(i, j) * abar[i];
          }
        }
        Vec vb(n1, 0.0);
        Mat Kb(n2, n1);
        for (std::size_t i = 0; i < n2; ++i)
          for (std::size_t q = 0; q < n1; ++q) {
            Kb(i, q) = abar[i] * v[q];
            vb[q] += K(i, q) * abar[i];
          }
        for (std::size_t q = 0; q < n1; ++q) {
          f1b[q] -= dt * vb[q];
          for (std::size_t j = 0; j < n2; ++j) {
            g1b(q, j) -= dt * vb[q] * mu[j];
            mub[j] -= dt * bl.g1(q, j) * vb[q];
          }
        }
        // K = R g1ᵀ D: R̄ += K̄ D g1, ḡ1 += D K̄ᵀ R
        for (std::size_t i = 0; i < n2; ++i)
          for (std::size_t j = 0; j < n2; ++j) {
            double sum = 0.0;
            for (std::size_t q = 0; q < n1; ++q) sum += Kb(i, q) * D[q] * bl.g1(q, j);
            Rb(i, j) += sum;
          }
        for (std::size_t q = 0; q < n1; ++q)
          for (std::size_t j = 0; j < n2; ++j) {
            double sum = 0.0;
            for (std::size_t i = 0; i < n2; ++i) sum += Kb(i, q) * R(i, j);
            g1b(q, j) += D[q] * sum;
          }

        // covariance update: R' = sym(R + dt(g2R + Rg2ᵀ + Q − R M R))
        const Mat SR = matmul(S, R);
        const Mat RM = matmul(R, M);
        const Mat RSR = matmul(R, SR);
        for (std::size_t i = 0; i < n2; ++i)
          for (std::size_t j = 0; j < n2; ++j) {
            g2b(i, j) += 2.0 * dt * SR(i, j);
            double sg = 0.0, gs = 0.0, srm = 0.0, mrs = 0.0;
            for (std::size_t q = 0; q < n2; ++q) {
              gs += bl.g2(q, i) * S(q, j);
              sg += S(i, q) * bl.g2(q, j);
              srm += SR(i, q) * M(q, j);
              mrs += RM(q, i) * S(q, j);  // (M R)_{iq} = (R M)_{qi}
            }
            Rb(i, j) += dt * (gs + sg) - dt * (srm + mrs);
          }
        // M̄ = −dt R S R; ḡ1 += 2 D g1 M̄
        for (std::size_t q = 0; q < n1; ++q)
          for (std::size_t j = 0; j < n2; ++j) {
            double sum = 0.0;
            for (std::size_t i = 0; i < n2; ++i) sum += bl.g1(q, i) * RSR(i, j);
            g1b(q, j) += -2.0 * dt * D[q] * sum;
          }

        Vec f_bar(n, 0.0);
        Mat g_bar(n, n2);
        for (std::size_t q = 0; q < n1; ++q) {
          f_bar[p.observed[q]] = f1b[q];
          for (std::size_t j = 0; j < n2; ++j) g_bar(p.observed[q], j) = g1b(q, j);
        }
        for (std::size_t i = 0; i < n2; ++i) {
          f_bar[p.unobserved[i]] = f2b[i];
          for (std::size_t j = 0; j < n2; ++j) g_bar(p.unobserved[i], j) = g2b(i, j);
        }
        model.terms.backward(model.params.values(), a, f_bar, g_bar, grad);
        st.mu_bar = mub;
        st.r_bar = Rb;
      });
    }
    if (k + 1 > w.burn_in) {
      const Vec& truth = w.u2.states[k + 1];
      Vec e(n2);
      for (std::size_t i = 0; i < n2; ++i) e[i] = truth[i] - next.mu[i];
      if (kind == DaLossKind::Mse) {
        loss += squared_norm(e);
        if (tape)
          tape->record([&st, e, scale, count, n2] {
            for (std::size_t i = 0; i < n2; ++i) st.mu_bar[i] += scale * (-2.0 / count) * e[i];
          });
      } else {
        Mat rinv;
        loss += detail::nll_term(next.r, e, tape ? &rinv : nullptr);
        if (tape)
          tape->record([&st, e, rinv, scale, count, n2] {
            const Vec w2 = matvec(rinv, e);  // R⁻¹e
            const double s = scale / count;
            for (std::size_t i = 0; i < n2; ++i) {
              st.mu_bar[i] += -s * w2[i];
              for (std::size_t j = 0; j < n2; ++j) st.r_bar(i, j) += 0.5 * s * (rinv(i, j) - w2[i] * w2[j]);
            }
          });
      }
    }
    cur = std::move(next);
  }
  return loss / count;
}

inline double da_loss_value(const CgnModel& model, const DaWindow& w, DaLossKind kind = DaLossKind::Mse) {
  detail::FilterTapeState st;
  return da_loss_impl(model, w, kind, nullptr, 0.0, {}, st);
}

inline double da_loss_grad(const CgnModel& model, const DaWindow& w, DaLossKind kind, double scale,
                           std::span<double> grad, std::size_t tape_capacity = 50'000'000) {
  if (grad.size() != model.params.size()) throw Error(Errc::DimensionMismatch, "gradient buffer has wrong size");
  AdjointTape tape(tape_capacity);
  detail::FilterTapeState st;
  const double v = da_loss_impl(model, w, kind, &tape, scale, grad, st);
  tape.backward();
  check_gradient(grad);
  return v;
}

}  // namespace cgnsde
