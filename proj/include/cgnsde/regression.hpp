#pragma once

// Least-squares fitting of knowledge-term coefficients and quadratic-variation
// noise estimation.

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgnsde/dynamics.hpp"
#include "cgnsde/error.hpp"
#include "cgnsde/model.hpp"
#include "cgnsde/numerics.hpp"

namespace cgnsde {

struct RegressionProblem {
  Mat design;  // samples x terms
  Vec target;
  std::vector<std::string> terms;
};

namespace detail {

/// Solves (AᵀA) β = Aᵀb given the accumulated normal matrix, with column
/// equilibration; a failed factorization means the design is rank deficient.
inline Vec solve_normal_equations(Mat ata, Vec atb) {
  const std::size_t m = atb.size();
  Vec scale(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (!(ata(i, i) > 0.0)) throw Error(Errc::RankDeficient, "design column " + std::to_string(i) + " is identically zero", i);
    scale[i] = 1.0 / std::sqrt(ata(i, i));
  }
  for (std::size_t i = 0; i < m; ++i) {
    atb[i] *= scale[i];
    for (std::size_t j = 0; j < m; ++j) ata(i, j) *= scale[i] * scale[j];
  }
  Mat l;
  try {
    l = cholesky_factor(ata, {.pivot_floor = 1e-12, .allow_jitter = false}).lower;
  } catch (const Error&) {
    throw Error(Errc::RankDeficient, "design matrix does not have full column rank");
  }
  Vec beta = cholesky_solve(l, atb);
  for (std::size_t i = 0; i < m; ++i) beta[i] *= scale[i];
  return beta;
}

}  // namespace detail

/// argmin_β ‖target − design·β‖² via the normal equations.
inline Vec least_squares_fit(const RegressionProblem& p) {
  const std::size_t n = p.design.rows(), m = p.design.cols();
  if (p.target.size() != n) throw Error(Errc::LengthMismatch, "target length differs from design rows");
  if (n <= m) throw Error(Errc::RankDeficient, "need more samples than terms");
  Mat ata(m, m);
  Vec atb(m, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = p.design.data().data() + r * m;
    for (std::size_t i = 0; i < m; ++i) {
      atb[i] += row[i] * p.target[r];
      for (std::size_t j = i; j < m; ++j) ata(i, j) += row[i] * row[j];
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < i; ++j) ata(i, j) = ata(j, i);
  return detail::solve_normal_equations(std::move(ata), std::move(atb));
}

/// σ̂_i = sqrt( (Δt/N) Σ (u̇_i − ũ̇_i)² ).
inline Vec estimate_noise_sigma(const std::vector<Vec>& true_derivs, const std::vector<Vec>& model_derivs, double dt) {
  if (true_derivs.size() != model_derivs.size()) throw Error(Errc::LengthMismatch, "derivative series differ in length");
  if (true_derivs.size() < 100) throw Error(Errc::InsufficientSamples, "noise estimation needs at least 100 samples");
  const std::size_t d = true_derivs.front().size();
  Vec acc(d, 0.0);
  for (std::size_t n = 0; n < true_derivs.size(); ++n) {
    if (true_derivs[n].size() != d || model_derivs[n].size() != d)
      throw Error(Errc::DimensionMismatch, "derivative vectors differ in dimension");
    for (std::size_t i = 0; i < d; ++i) {
      const double e = true_derivs[n][i] - model_derivs[n][i];
      acc[i] += e * e;
    }
  }
  for (auto& v : acc) v = std::sqrt(dt * v / static_cast<double>(true_derivs.size()));
  return acc;
}

/// Full-state σ̂ from the residual between forward differences of `traj`
/// and the drift of `model` at the left endpoints.
inline Vec estimate_model_sigma(const CgnModel& model, const Trajectory& traj) {
  const auto deriv = finite_diff_derivative(traj);
  std::vector<Vec> md;
  md.reserve(deriv.size());
  for (std::size_t n = 0; n < deriv.size(); ++n) md.push_back(assemble_full_drift(model, traj.states[n]));
  return estimate_noise_sigma(deriv, md, traj.dt);
}

/// Stores a full-state σ̂ into the model's σ1/σ2 blocks.
inline void set_model_sigma(CgnModel& model, const Vec& full) {
  model.sigma1 = model.partition.u1(full);
  model.sigma2 = model.partition.u2(full);
}

/// Distinct knowledge coefficient indices in first-use order.
inline std::vector<std::size_t> knowledge_coefficients(const CgnModel& model) {
  std::vector<std::size_t> out;
  std::set<std::size_t> seen;
  for (const auto& t : model.terms.knowledge)
    if (seen.insert(t.coef).second) out.push_back(t.coef);
  return out;
}

/// Least-squares fit of every knowledge coefficient against forward-difference
/// derivatives of `traj`, holding network outputs fixed. All equations are
/// stacked into one problem, so coefficients shared across rows (lattice
/// models) are fitted jointly. Returns the fitted values (knowledge order).
inline Vec fit_knowledge_coefficients(CgnModel& model, const Trajectory& traj) {
  const auto coefs = knowledge_coefficients(model);
  if (coefs.empty()) return {};
  const std::size_t m = coefs.size(), n = model.dim(), n2 = model.n2();
  std::vector<std::size_t> slot(model.params.size(), m);
  for (std::size_t k = 0; k < m; ++k) slot[coefs[k]] = k;
  const auto deriv = finite_diff_derivative(traj);

  // network-only part: evaluate with knowledge coefficients zeroed
  CgnModel net_only = model;
  for (auto c : coefs) net_only.params[c] = 0.0;

  Mat ata(m, m);
  Vec atb(m, 0.0);
  Mat phi(n, m);
  DriftCoefficients c;
  for (std::size_t s = 0; s < deriv.size(); ++s) {
    const Vec& x = traj.states[s];
    const Vec u1 = model.partition.u1(x), u2 = model.partition.u2(x);
    phi.fill(0.0);
    for (const auto& t : model.terms.knowledge) {
      double v = 1.0;
      for (auto f : t.u1_factors) v *= u1[f];
      if (t.u2_factor) v *= u2[*t.u2_factor];
      phi(t.row, slot[t.coef]) += v;
    }
    Vec rest(n, 0.0);
    if (!net_only.terms.networks.empty()) {
      net_only.terms.evaluate(net_only.params.values(), u1, n, n2, c);
      for (std::size_t r = 0; r < n; ++r) {
        rest[r] = c.f[r];
        for (std::size_t j = 0; j < n2; ++j) rest[r] += c.g(r, j) * u2[j];
      }
    }
    for (std::size_t r = 0; r < n; ++r) {
      const double y = deriv[s][r] - rest[r];
      const double* row = &phi(r, 0);
      for (std::size_t i = 0; i < m; ++i) {
        if (row[i] == 0.0) continue;
        atb[i] += row[i] * y;
        for (std::size_t j = 0; j < m; ++j) ata(i, j) += row[i] * row[j];
      }
    }
  }
  const Vec beta = detail::solve_normal_equations(std::move(ata), std::move(atb));
  for (std::size_t k = 0; k < m; ++k) model.params[coefs[k]] = beta[k];
  return beta;
}

/// Knowledge terms with their fitted coefficients and the noise estimate.
inline nlohmann::json regression_json(const CgnModel& model, const Vec& sigma_full) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : model.terms.knowledge) {
    std::string coef_name;
    for (const auto& s : model.params.segments())
      if (s.offset == t.coef && s.size == 1) coef_name = s.name;
    terms.push_back({{"row", t.row}, {"term", t.label}, {"coefficient_name", coef_name},
                     {"coefficient", model.params[t.coef]}});
  }
  return {{"terms", terms}, {"sigma", sigma_full}};
}

}  // namespace cgnsde
