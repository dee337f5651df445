#pragma once

// Candidate-function libraries and Gaussian causation entropy for sparse
// structure identification.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgnsde/builders.hpp"
#include "cgnsde/dynamics.hpp"
#include "cgnsde/error.hpp"
#include "cgnsde/model.hpp"
#include "cgnsde/numerics.hpp"

namespace cgnsde {

/// Constant (no factors), linear (one) or quadratic (two) monomial in
/// full-state indices.
struct CandidateTerm {
  std::vector<std::size_t> factors;
  std::optional<std::size_t> u2_factor;  // the single unobserved factor, if any
  std::string label;

  friend bool operator==(const CandidateTerm&, const CandidateTerm&) = default;
};

struct FunctionLibrary {
  std::size_t target = 0;  // equation index
  std::vector<CandidateTerm> terms;

  std::size_t size() const noexcept { return terms.size(); }

  void validate() const {
    std::set<std::vector<std::size_t>> seen;
    for (const auto& t : terms) {
      auto f = t.factors;
      std::sort(f.begin(), f.end());
      if (!seen.insert(f).second) throw Error(Errc::ValidationError, "duplicate candidate '" + t.label + "'");
    }
  }
};

inline CandidateTerm make_candidate(std::vector<std::size_t> factors, const StatePartition& p) {
  CandidateTerm t;
  t.label = monomial_label(factors, p.dim());
  for (auto f : factors)
    if (f < p.dim() && p.u2_position(f)) {
      if (t.u2_factor) throw Error(Errc::ValidationError, "candidate " + t.label + " has two unobserved factors");
      t.u2_factor = f;
    }
  t.factors = std::move(factors);
  return t;
}

/// All constants, linears and quadratics over `vars` (in the given order)
/// with at most one unobserved factor. Ordering: constant, linears, squares,
/// then cross products in lexicographic position order.
inline FunctionLibrary generate_library(std::size_t target, const StatePartition& p, const std::vector<std::size_t>& vars,
                                        bool constant = false, bool quadratic = true) {
  FunctionLibrary lib{target, {}};
  auto hidden = [&](std::size_t i) { return p.u2_position(i).has_value(); };
  if (constant) lib.terms.push_back(make_candidate({}, p));
  for (auto v : vars) lib.terms.push_back(make_candidate({v}, p));
  if (quadratic) {
    for (auto v : vars)
      if (!hidden(v)) lib.terms.push_back(make_candidate({v, v}, p));
    for (std::size_t a = 0; a < vars.size(); ++a)
      for (std::size_t b = a + 1; b < vars.size(); ++b)
        if (!(hidden(vars[a]) && hidden(vars[b]))) lib.terms.push_back(make_candidate({vars[a], vars[b]}, p));
  }
  lib.validate();
  return lib;
}

/// Lattice version: the same construction over the window {i-w, ..., i+w}
/// around a representative site, returned as relative offsets.
inline std::vector<LatticeTerm> generate_lattice_library(const StatePartition& p, std::size_t site, long window = 2,
                                                         bool constant = false) {
  const std::size_t n = p.dim();
  std::vector<long> offs;
  for (long o = -window; o <= window; ++o) offs.push_back(o);
  auto hidden = [&](long o) { return p.u2_position(ring(site, o, n)).has_value(); };
  std::vector<LatticeTerm> out;
  if (constant) out.push_back({});
  for (long o : offs) out.push_back({{o}});
  for (long o : offs)
    if (!hidden(o)) out.push_back({{o, o}});
  for (std::size_t a = 0; a < offs.size(); ++a)
    for (std::size_t b = a + 1; b < offs.size(); ++b)
      if (!(hidden(offs[a]) && hidden(offs[b]))) out.push_back({{offs[a], offs[b]}});
  return out;
}

/// Rows = trajectory points, columns = library terms.
inline Mat evaluate_library(const FunctionLibrary& lib, const Trajectory& traj) {
  const std::size_t n = traj.size(), m = lib.size();
  for (const auto& t : lib.terms)
    for (auto f : t.factors)
      if (f >= traj.dim()) throw Error(Errc::IndexOutOfRange, "candidate '" + t.label + "' references a missing component");
  Mat out(n, m);
  for (std::size_t r = 0; r < n; ++r) {
    const Vec& x = traj.states[r];
    for (std::size_t c = 0; c < m; ++c) {
      double v = 1.0;
      for (auto f : lib.terms[c].factors) v *= x[f];
      out(r, c) = v;
    }
  }
  return out;
}

namespace detail {

/// Correlation matrix of columns [target, lib...] over the first `rows`
/// samples, plus a flag per column telling whether it has positive variance.
inline Mat joint_correlation(std::span<const double> target, const Mat& lib, std::vector<bool>& active) {
  const std::size_t n = target.size(), m = lib.cols(), d = m + 1;
  Vec mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    mean[0] += target[r];
    for (std::size_t c = 0; c < m; ++c) mean[c + 1] += lib(r, c);
  }
  for (auto& v : mean) v /= static_cast<double>(n);
  Mat cov(d, d);
  Vec z(d);
  for (std::size_t r = 0; r < n; ++r) {
    z[0] = target[r] - mean[0];
    for (std::size_t c = 0; c < m; ++c) z[c + 1] = lib(r, c) - mean[c + 1];
    for (std::size_t i = 0; i < d; ++i) {
      const double zi = z[i];
      double* row = &cov(i, 0);
      for (std::size_t j = i; j < d; ++j) row[j] += zi * z[j];
    }
  }
  active.assign(d, true);
  Vec sd(d);
  for (std::size_t i = 0; i < d; ++i) {
    sd[i] = std::sqrt(cov(i, i) / static_cast<double>(n - 1));
    // relative to the column scale: constants evaluated in floating point
    // still carry rounding-level variance
    if (!(sd[i] > 1e-12 * (std::abs(mean[i]) + 1e-300))) active[i] = false;
  }
  Mat corr(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      const double v = active[i] && active[j] ? cov(i, j) / static_cast<double>(n - 1) / (sd[i] * sd[j]) : 0.0;
      corr(i, j) = corr(j, i) = v;
    }
  for (std::size_t i = 0; i < d; ++i) corr(i, i) = 1.0;
  return corr;
}

inline double block_log_det(const Mat& c, const std::vector<std::size_t>& idx, std::size_t term) {
  if (idx.empty()) return 0.0;
  Mat b(idx.size(), idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) b(i, j) = c(idx[i], idx[j]);
  try {
    return log_det_from_factor(cholesky_factor(b, {.allow_jitter = false}).lower);
  } catch (const Error&) {
    throw Error(Errc::DegenerateLibrary,
                "candidate library is degenerate (a column is a linear combination of others) at term " +
                    std::to_string(term),
                term);
  }
}

}  // namespace detail

/// Causation entropies from every column of `lib_values` to `target`
/// under the Gaussian approximation, clamped at 0. Constant columns carry
/// no information and get 0.
inline Vec causation_entropies(std::span<const double> target, const Mat& lib_values) {
  const std::size_t n = target.size(), m = lib_values.cols();
  if (lib_values.rows() < n) throw Error(Errc::DimensionMismatch, "library has fewer samples than the target");
  if (n < m + 2) throw Error(Errc::InsufficientSamples, "causation entropy needs at least M+2 samples");
  std::vector<bool> active;
  const Mat c = detail::joint_correlation(target, lib_values, active);
  Vec out(m, 0.0);
  if (!active[0]) return out;
  std::vector<std::size_t> all;  // active library columns (in joint indexing)
  for (std::size_t k = 1; k <= m; ++k)
    if (active[k]) all.push_back(k);
  std::vector<std::size_t> x_all{0};
  x_all.insert(x_all.end(), all.begin(), all.end());
  const double ld_yz = detail::block_log_det(c, all, m);
  const double ld_xyz = detail::block_log_det(c, x_all, m);
  for (std::size_t k = 1; k <= m; ++k) {
    if (!active[k]) continue;
    std::vector<std::size_t> y, xy{0};
    for (auto j : all)
      if (j != k) y.push_back(j);
    xy.insert(xy.end(), y.begin(), y.end());
    const double v = 0.5 * (detail::block_log_det(c, xy, k - 1) - detail::block_log_det(c, y, k - 1) - ld_xyz + ld_yz);
    out[k - 1] = std::max(v, 0.0);
  }
  return out;
}

/// Entropy from column m alone (the others form the conditioning set).
inline double causation_entropy(std::span<const double> target, const Mat& lib_values, std::size_t m) {
  if (m >= lib_values.cols()) throw Error(Errc::IndexOutOfRange, "candidate index out of range");
  return causation_entropies(target, lib_values)[m];
}

/// Per-row candidate labels and entropies (rows may have libraries of
/// different sizes).
struct CemRow {
  std::string target;
  std::vector<std::string> terms;
  Vec values;
};

struct CausationEntropyMatrix {
  std::vector<CemRow> rows;
};

using StructureMask = std::vector<std::vector<bool>>;

/// Row i uses libs[i]; derivatives are forward differences of `traj`.
inline CausationEntropyMatrix causation_entropy_matrix(const Trajectory& traj, const std::vector<FunctionLibrary>& libs) {
  const auto deriv = finite_diff_derivative(traj);
  CausationEntropyMatrix cem;
  for (const auto& lib : libs) {
    if (lib.target >= traj.dim()) throw Error(Errc::IndexOutOfRange, "library target out of range");
    lib.validate();
    Vec target(deriv.size());
    for (std::size_t n = 0; n < deriv.size(); ++n) target[n] = deriv[n][lib.target];
    const Mat values = evaluate_library(lib, traj);
    CemRow row{state_name(lib.target, traj.dim()), {}, {}};
    for (const auto& t : lib.terms) row.terms.push_back(t.label);
    try {
      row.values = causation_entropies(target, values);
    } catch (const Error& e) {
      if (e.code() != Errc::DegenerateLibrary) throw;
      throw Error(Errc::DegenerateLibrary,
                  "row " + row.target + ", term " + lib.terms.at(e.index().value_or(0)).label + ": " + e.message(),
                  e.index());
    }
    cem.rows.push_back(std::move(row));
  }
  return cem;
}

/// Lattice row: the same relative library at every site in `sites`, with the
/// samples of all sites pooled (translation invariance).
inline CemRow lattice_causation_entropy(const Trajectory& traj, const std::vector<std::size_t>& sites,
                                        const std::vector<LatticeTerm>& terms, std::string label) {
  if (sites.empty()) throw Error(Errc::ValidationError, "lattice row needs at least one site");
  const auto deriv = finite_diff_derivative(traj);
  const std::size_t per = deriv.size(), n = traj.dim();
  Vec target(per * sites.size());
  Mat values(target.size(), terms.size());
  for (std::size_t s = 0; s < sites.size(); ++s)
    for (std::size_t t = 0; t < per; ++t) {
      const std::size_t r = s * per + t;
      target[r] = deriv[t][sites[s]];
      for (std::size_t c = 0; c < terms.size(); ++c) {
        double v = 1.0;
        for (long o : terms[c].offsets) v *= traj.states[t][ring(sites[s], o, n)];
        values(r, c) = v;
      }
    }
  CemRow row{std::move(label), {}, causation_entropies(target, values)};
  for (const auto& t : terms) row.terms.push_back(lattice_label(t));
  return row;
}

struct SelectionRule {
  double relative = 0.04;   // fraction of the row maximum
  double absolute = 0.002;  // nats
};

/// Within each row: C ≥ relative·(row max) and C ≥ absolute.
inline StructureMask select_structure(const CausationEntropyMatrix& cem, const SelectionRule& rule = {}) {
  StructureMask mask;
  for (const auto& row : cem.rows) {
    double mx = 0.0;
    for (double v : row.values) {
      if (!std::isfinite(v)) throw Error(Errc::ValidationError, "non-finite causation entropy in row " + row.target);
      mx = std::max(mx, v);
    }
    std::vector<bool> sel(row.values.size(), false);
    for (std::size_t k = 0; k < row.values.size(); ++k)
      sel[k] = row.values[k] > 0.0 && row.values[k] >= rule.relative * mx && row.values[k] >= rule.absolute;
    mask.push_back(std::move(sel));
  }
  return mask;
}

/// Selected library terms as knowledge-term structure.
inline std::vector<StructureTerm> selected_terms(const std::vector<FunctionLibrary>& libs, const StructureMask& mask) {
  std::vector<StructureTerm> out;
  for (std::size_t i = 0; i < libs.size(); ++i)
    for (std::size_t k = 0; k < libs[i].size(); ++k)
      if (mask.at(i).at(k)) out.push_back({libs[i].target, libs[i].terms[k].factors});
  return out;
}

/// Wide CSV: one column per distinct descriptor (first-appearance order),
/// empty cells where a row's library lacks the term.
inline void write_cem_csv(const CausationEntropyMatrix& cem, std::ostream& os) {
  std::vector<std::string> header;
  for (const auto& r : cem.rows)
    for (const auto& t : r.terms)
      if (std::find(header.begin(), header.end(), t) == header.end()) header.push_back(t);
  os << "row";
  for (const auto& h : header) os << ',' << h;
  os << '\n';
  for (const auto& r : cem.rows) {
    os << r.target;
    for (const auto& h : header) {
      os << ',';
      auto it = std::find(r.terms.begin(), r.terms.end(), h);
      if (it != r.terms.end()) os << format_double(r.values[static_cast<std::size_t>(it - r.terms.begin())]);
    }
    os << '\n';
  }
}

inline nlohmann::json structure_json(const CausationEntropyMatrix& cem, const StructureMask& mask) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < cem.rows.size(); ++i)
    for (std::size_t k = 0; k < cem.rows[i].terms.size(); ++k)
      if (mask.at(i).at(k)) out.push_back({{"row", cem.rows[i].target}, {"term", cem.rows[i].terms[k]}});
  return out;
}

}  // namespace cgnsde
