#pragma once

// Benchmark systems, Euler-Maruyama integration and trajectory I/O.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "cgnsde/error.hpp"
#include "cgnsde/numerics.hpp"

namespace cgnsde {

/// Writes drift(state, t) into `out` (same dimension as state).
using DriftField = std::function<void(std::span<const double> state, double t, std::span<double> out)>;

inline Vec evaluate(const DriftField& drift, std::span<const double> state, double t = 0.0) {
  Vec out(state.size(), 0.0);
  drift(state, t, out);
  return out;
}

struct DiffusionSpec {
  Vec sigma;

  void validate() const {
    for (double s : sigma)
      if (!(s >= 0.0) || !std::isfinite(s)) throw Error(Errc::ValidationError, "noise amplitudes must be finite and >= 0");
  }
};

/// Uniform-step time series. times()[n] = t0 + n*dt.
struct Trajectory {
  double t0 = 0.0;
  double dt = 1.0;
  std::vector<Vec> states;

  std::size_t size() const noexcept { return states.size(); }
  std::size_t dim() const noexcept { return states.empty() ? 0 : states.front().size(); }
  double time(std::size_t n) const noexcept { return t0 + static_cast<double>(n) * dt; }
  Vec times() const {
    Vec t(states.size());
    for (std::size_t n = 0; n < t.size(); ++n) t[n] = time(n);
    return t;
  }

  /// Points [begin, begin+count).
  Trajectory slice(std::size_t begin, std::size_t count) const {
    if (begin + count > states.size()) throw Error(Errc::IndexOutOfRange, "trajectory slice out of range");
    Trajectory out{time(begin), dt, {}};
    out.states.assign(states.begin() + static_cast<std::ptrdiff_t>(begin),
                      states.begin() + static_cast<std::ptrdiff_t>(begin + count));
    return out;
  }

  /// Projection onto the listed components.
  Trajectory select(std::span<const std::size_t> components) const {
    Trajectory out{t0, dt, {}};
    out.states.reserve(states.size());
    for (const auto& s : states) {
      Vec v;
      v.reserve(components.size());
      for (auto c : components) {
        if (c >= s.size()) throw Error(Errc::IndexOutOfRange, "component index out of range");
        v.push_back(s[c]);
      }
      out.states.push_back(std::move(v));
    }
    return out;
  }

  /// Every `stride`-th point starting at the first.
  Trajectory every(std::size_t stride) const {
    if (stride == 0) throw Error(Errc::ValidationError, "stride must be >= 1");
    Trajectory out{t0, dt * static_cast<double>(stride), {}};
    out.states.reserve(states.size() / stride + 1);
    for (std::size_t n = 0; n < states.size(); n += stride) out.states.push_back(states[n]);
    return out;
  }

  /// Scalar series of one component.
  Vec component(std::size_t c) const {
    Vec v;
    v.reserve(states.size());
    for (const auto& s : states) v.push_back(s.at(c));
    return v;
  }
};

// ---------------------------------------------------------------------------
// Benchmarks

enum class BenchmarkKind { L84, PSBSE, L96_HOM, L96_INHOM };

inline std::string_view to_string(BenchmarkKind k) {
  switch (k) {
    case BenchmarkKind::L84: return "L84";
    case BenchmarkKind::PSBSE: return "PSBSE";
    case BenchmarkKind::L96_HOM: return "L96_HOM";
    case BenchmarkKind::L96_INHOM: return "L96_INHOM";
  }
  return "?";
}

inline BenchmarkKind parse_benchmark_kind(std::string_view name) {
  if (name == "L84") return BenchmarkKind::L84;
  if (name == "PSBSE") return BenchmarkKind::PSBSE;
  if (name == "L96_HOM") return BenchmarkKind::L96_HOM;
  if (name == "L96_INHOM") return BenchmarkKind::L96_INHOM;
  throw Error(Errc::UnknownBenchmark, "unknown benchmark '" + std::string(name) + "'");
}

/// Noisy Lorenz 84.
struct L84Params {
  double a = 0.25, b = 4.0, f = 8.0, g = 1.0;
  Vec sigma{1.0, 0.05, 0.05};
};

/// Three-mode Galerkin projection of the stochastic Burgers-Sivashinsky equation.
struct PsbseParams {
  double beta_x = 0.2, beta_y = -0.3, beta_z = -0.5, alpha = 5.0;
  Vec sigma{0.3, 1.0, 1.0};
};

/// Noisy Lorenz 96 on a ring of `sites` nodes.
struct L96Params {
  std::size_t sites = 36;
  Vec forcing;  // per site
  Vec damping;  // per site
  Vec sigma;    // per site

  static L96Params homogeneous(std::size_t sites = 36, double forcing = 8.0, double damping = 1.0, double sigma = 0.5) {
    return {sites, Vec(sites, forcing), Vec(sites, damping), Vec(sites, sigma)};
  }
  /// c_i = 2 + 1.5 sin(2π(i-1)/I) with 1-based i.
  static L96Params inhomogeneous(std::size_t sites = 36, double forcing = 8.0, double sigma = 0.5) {
    L96Params p{sites, Vec(sites, forcing), Vec(sites), Vec(sites, sigma)};
    for (std::size_t k = 0; k < sites; ++k)
      p.damping[k] = 2.0 + 1.5 * std::sin(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(sites));
    return p;
  }
};

struct Benchmark {
  BenchmarkKind kind = BenchmarkKind::L84;
  std::variant<L84Params, PsbseParams, L96Params> params = L84Params{};

  static Benchmark l84(L84Params p = {}) { return {BenchmarkKind::L84, p}; }
  static Benchmark psbse(PsbseParams p = {}) { return {BenchmarkKind::PSBSE, p}; }
  static Benchmark l96_hom(std::size_t sites = 36) { return {BenchmarkKind::L96_HOM, L96Params::homogeneous(sites)}; }
  static Benchmark l96_inhom(std::size_t sites = 36) { return {BenchmarkKind::L96_INHOM, L96Params::inhomogeneous(sites)}; }

  static Benchmark from_kind(BenchmarkKind kind, std::size_t l96_sites = 36) {
    switch (kind) {
      case BenchmarkKind::L84: return l84();
      case BenchmarkKind::PSBSE: return psbse();
      case BenchmarkKind::L96_HOM: return l96_hom(l96_sites);
      case BenchmarkKind::L96_INHOM: return l96_inhom(l96_sites);
    }
    throw Error(Errc::UnknownBenchmark, "unknown benchmark kind");
  }

  std::size_t dim() const {
    if (const auto* p = std::get_if<L96Params>(&params)) return p->sites;
    return 3;
  }

  void validate() const {
    if (const auto* p = std::get_if<L96Params>(&params)) {
      if (p->sites < 4) throw Error(Errc::ValidationError, "L96 needs at least 4 sites");
      if (p->forcing.size() != p->sites || p->damping.size() != p->sites || p->sigma.size() != p->sites)
        throw Error(Errc::ValidationError, "L96 parameter arrays must have one entry per site");
      if ((kind != BenchmarkKind::L96_HOM && kind != BenchmarkKind::L96_INHOM))
        throw Error(Errc::ValidationError, "L96 parameters attached to a non-L96 benchmark");
    } else if (std::holds_alternative<L84Params>(params) != (kind == BenchmarkKind::L84)) {
      throw Error(Errc::ValidationError, "benchmark kind and parameter record disagree");
    }
  }
};

/// Integration step implied by the reported step counts per time unit.
inline double default_dt(BenchmarkKind k) { return k == BenchmarkKind::L84 ? 1e-3 : 1e-2; }

inline DiffusionSpec benchmark_diffusion(const Benchmark& b) {
  return std::visit([](const auto& p) { return DiffusionSpec{p.sigma}; }, b.params);
}

inline DriftField benchmark_drift(const Benchmark& b) {
  b.validate();
  switch (b.kind) {
    case BenchmarkKind::L84: {
      const auto p = std::get<L84Params>(b.params);
      return [p](std::span<const double> s, double, std::span<double> out) {
        const double x = s[0], y = s[1], z = s[2];
        out[0] = -(y * y + z * z) - p.a * (x - p.f);
        out[1] = -p.b * x * z + x * y - y + p.g;
        out[2] = p.b * x * y + x * z - z;
      };
    }
    case BenchmarkKind::PSBSE: {
      const auto p = std::get<PsbseParams>(b.params);
      return [p](std::span<const double> s, double, std::span<double> out) {
        const double x = s[0], y = s[1], z = s[2];
        out[0] = p.beta_x * x + p.alpha * x * y + p.alpha * y * z;
        out[1] = p.beta_y * y - p.alpha * x * x + 2.0 * p.alpha * x * z;
        out[2] = p.beta_z * z - 3.0 * p.alpha * x * y;
      };
    }
    case BenchmarkKind::L96_HOM:
    case BenchmarkKind::L96_INHOM: {
      const auto p = std::get<L96Params>(b.params);
      return [p](std::span<const double> s, double, std::span<double> out) {
        const std::size_t n = p.sites;
        for (std::size_t i = 0; i < n; ++i) {
          const double xp1 = s[(i + 1) % n], xm1 = s[(i + n - 1) % n], xm2 = s[(i + n - 2) % n];
          out[i] = (xp1 - xm2) * xm1 - p.damping[i] * s[i] + p.forcing[i];
        }
      };
    }
  }
  throw Error(Errc::UnknownBenchmark, "unknown benchmark kind");
}

/// One monomial contribution `coef * Π state[factors]` to equation `row`.
struct PolyTerm {
  std::size_t row;
  double coef;
  std::vector<std::size_t> factors;
};

/// The benchmark drift written as a sum of monomials (all systems here are
/// quadratic polynomials).
inline std::vector<PolyTerm> benchmark_polynomial(const Benchmark& b) {
  b.validate();
  std::vector<PolyTerm> t;
  switch (b.kind) {
    case BenchmarkKind::L84: {
      const auto& p = std::get<L84Params>(b.params);
      t = {{0, -1.0, {1, 1}}, {0, -1.0, {2, 2}}, {0, -p.a, {0}}, {0, p.a * p.f, {}},
           {1, -p.b, {0, 2}}, {1, 1.0, {0, 1}}, {1, -1.0, {1}},  {1, p.g, {}},
           {2, p.b, {0, 1}},  {2, 1.0, {0, 2}}, {2, -1.0, {2}}};
      break;
    }
    case BenchmarkKind::PSBSE: {
      const auto& p = std::get<PsbseParams>(b.params);
      t = {{0, p.beta_x, {0}}, {0, p.alpha, {0, 1}},        {0, p.alpha, {1, 2}},
           {1, p.beta_y, {1}}, {1, -p.alpha, {0, 0}},       {1, 2.0 * p.alpha, {0, 2}},
           {2, p.beta_z, {2}}, {2, -3.0 * p.alpha, {0, 1}}};
      break;
    }
    default: {
      const auto& p = std::get<L96Params>(b.params);
      const std::size_t n = p.sites;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ip1 = (i + 1) % n, im1 = (i + n - 1) % n, im2 = (i + n - 2) % n;
        t.push_back({i, 1.0, {ip1, im1}});
        t.push_back({i, -1.0, {im2, im1}});
        t.push_back({i, -p.damping[i], {i}});
        t.push_back({i, p.forcing[i], {}});
      }
    }
  }
  return t;
}

/// A point on (or near) the attractor to start spin-up from.
inline Vec default_initial_state(const Benchmark& b) {
  switch (b.kind) {
    case BenchmarkKind::L84: return {1.0, 1.0, 1.0};
    case BenchmarkKind::PSBSE: return {0.5, 0.5, 0.5};
    default: {
      const auto& p = std::get<L96Params>(b.params);
      Vec x(p.sites);
      for (std::size_t i = 0; i < p.sites; ++i) x[i] = p.forcing[i] + (i == 0 ? 0.01 : 0.0);
      return x;
    }
  }
}

// ---------------------------------------------------------------------------
// Integration

inline constexpr double kBlowupThreshold = 1e8;

inline void check_finite_state(std::span<const double> x, std::size_t step) {
  for (double v : x)
    if (!(std::abs(v) <= kBlowupThreshold))
      throw Error(Errc::NumericalBlowup, "state left the finite envelope at step " + std::to_string(step), step);
}

/// x_{n+1} = x_n + drift(x_n, t_n) dt + σ⊙√dt ξ_n.
inline Trajectory euler_maruyama(const DriftField& drift, const DiffusionSpec& diff, const Vec& x0, double dt,
                                 std::size_t n_steps, Rng& rng, bool noise_on = true, double t0 = 0.0) {
  if (!(dt > 0.0)) throw Error(Errc::ValidationError, "dt must be positive");
  if (!all_finite(x0)) throw Error(Errc::ValidationError, "initial state must be finite");
  const std::size_t n = x0.size();
  if (noise_on && diff.sigma.size() != n) throw Error(Errc::DimensionMismatch, "noise amplitudes do not match state");
  diff.validate();

  Trajectory traj{t0, dt, {}};
  traj.states.reserve(n_steps + 1);
  traj.states.push_back(x0);
  const double sqdt = std::sqrt(dt);
  Vec f(n);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const Vec& x = traj.states.back();
    drift(x, traj.time(k), f);
    Vec next(n);
    for (std::size_t i = 0; i < n; ++i) next[i] = x[i] + f[i] * dt;
    if (noise_on)
      for (std::size_t i = 0; i < n; ++i) next[i] += diff.sigma[i] * sqdt * rng.normal();
    check_finite_state(next, k + 1);
    traj.states.push_back(std::move(next));
  }
  return traj;
}

/// Euler-Maruyama at dt/substeps, keeping every `substeps`-th point, so the
/// returned trajectory has step dt and n_samples + 1 points. substeps = 1
/// reproduces euler_maruyama bitwise.
inline Trajectory euler_maruyama_sampled(const DriftField& drift, const DiffusionSpec& diff, const Vec& x0, double dt,
                                         std::size_t n_samples, std::size_t substeps, Rng& rng, double t0 = 0.0) {
  if (substeps == 0) throw Error(Errc::ValidationError, "substeps must be >= 1");
  if (substeps == 1) return euler_maruyama(drift, diff, x0, dt, n_samples, rng, true, t0);
  if (!(dt > 0.0)) throw Error(Errc::ValidationError, "dt must be positive");
  if (!all_finite(x0)) throw Error(Errc::ValidationError, "initial state must be finite");
  const std::size_t n = x0.size();
  if (diff.sigma.size() != n) throw Error(Errc::DimensionMismatch, "noise amplitudes do not match state");
  diff.validate();
  const double h = dt / static_cast<double>(substeps), sqh = std::sqrt(h);
  Trajectory traj{t0, dt, {}};
  traj.states.reserve(n_samples + 1);
  traj.states.push_back(x0);
  Vec x = x0, f(n);
  std::size_t k = 0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (std::size_t j = 0; j < substeps; ++j, ++k) {
      drift(x, t0 + static_cast<double>(k) * h, f);
      for (std::size_t i = 0; i < n; ++i) x[i] += f[i] * h;
      for (std::size_t i = 0; i < n; ++i) x[i] += diff.sigma[i] * sqh * rng.normal();
      check_finite_state(x, k + 1);
    }
    traj.states.push_back(x);
  }
  return traj;
}

/// Forward differences (x_{n+1} - x_n)/dt; one fewer entry than points.
inline std::vector<Vec> finite_diff_derivative(const Trajectory& traj) {
  if (traj.size() < 2) throw Error(Errc::TooShort, "need at least two points for a derivative");
  std::vector<Vec> d;
  d.reserve(traj.size() - 1);
  for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
    const auto& a = traj.states[k];
    const auto& b = traj.states[k + 1];
    Vec v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v[i] = (b[i] - a[i]) / traj.dt;
    d.push_back(std::move(v));
  }
  return d;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_trajectory_csv(const Trajectory& traj, std::ostream& os) {
  os << "t";
  for (std::size_t i = 0; i < traj.dim(); ++i) os << ",x" << (i + 1);
  os << '\n';
  for (std::size_t n = 0; n < traj.size(); ++n) {
    os << format_double(traj.time(n));
    for (double v : traj.states[n]) os << ',' << format_double(v);
    os << '\n';
  }
}

inline void write_trajectory_csv(const Trajectory& traj, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(Errc::IoError, "cannot open " + path);
  write_trajectory_csv(traj, os);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw Error(Errc::ParseError, "bad number '" + s + "' on line " + std::to_string(line), line);
  return v;
}

}  // namespace detail

inline Trajectory read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error(Errc::ParseError, "empty trajectory file", 1);
  const auto header = detail::split_csv_line(line);
  if (header.empty() || header[0] != "t") throw Error(Errc::ParseError, "header must start with 't'", 1);
  const std::size_t dim = header.size() - 1;
  Vec times;
  std::vector<Vec> states;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != dim + 1)
      throw Error(Errc::ParseError, "wrong column count on line " + std::to_string(lineno), lineno);
    times.push_back(detail::parse_double(cells[0], lineno));
    Vec s(dim);
    for (std::size_t i = 0; i < dim; ++i) s[i] = detail::parse_double(cells[i + 1], lineno);
    states.push_back(std::move(s));
  }
  if (times.empty()) throw Error(Errc::TooShort, "trajectory file has no rows");
  Trajectory traj{times.front(), 1.0, std::move(states)};
  if (times.size() >= 2) {
    traj.dt = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
    if (!(traj.dt > 0.0)) throw Error(Errc::ParseError, "times must be strictly increasing");
    for (std::size_t n = 0; n < times.size(); ++n) {
      const double expect = traj.time(n);
      if (std::abs(times[n] - expect) > 1e-12 * std::max(1.0, std::abs(expect)) + 1e-9 * traj.dt)
        throw Error(Errc::ParseError, "time grid is not uniform at row " + std::to_string(n + 2), n + 2);
    }
  }
  return traj;
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::IoError, "cannot open " + path);
  return read_trajectory_csv(is);
}

}  // namespace cgnsde
