#pragma once

// Conditional-Gaussian models: interpretable knowledge terms plus network
// terms, both depending on the observed block u1 only, so that
//   du1 = (f1 + g1 u2) dt + σ1 dW1,   du2 = (f2 + g2 u2) dt + σ2 dW2.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgnsde/dynamics.hpp"
#include "cgnsde/error.hpp"
#include "cgnsde/mlp.hpp"
#include "cgnsde/numerics.hpp"

namespace cgnsde {

/// Split of the full state into observed (u1) and unobserved (u2) indices.
struct StatePartition {
  std::vector<std::size_t> observed;
  std::vector<std::size_t> unobserved;

  std::size_t n1() const noexcept { return observed.size(); }
  std::size_t n2() const noexcept { return unobserved.size(); }
  std::size_t dim() const noexcept { return observed.size() + unobserved.size(); }

  /// Complement of `observed` in [0, dim).
  static StatePartition from_observed(std::vector<std::size_t> observed, std::size_t dim) {
    StatePartition p{std::move(observed), {}};
    std::vector<bool> seen(dim, false);
    for (auto i : p.observed) {
      if (i >= dim) throw Error(Errc::ValidationError, "observed index out of range");
      if (seen[i]) throw Error(Errc::ValidationError, "observed indices overlap");
      seen[i] = true;
    }
    for (std::size_t i = 0; i < dim; ++i)
      if (!seen[i]) p.unobserved.push_back(i);
    return p;
  }

  void validate() const {
    std::vector<int> count(dim(), 0);
    for (auto i : observed) {
      if (i >= dim()) throw Error(Errc::ValidationError, "partition index out of range");
      ++count[i];
    }
    for (auto i : unobserved) {
      if (i >= dim()) throw Error(Errc::ValidationError, "partition index out of range");
      ++count[i];
    }
    for (int c : count)
      if (c != 1) throw Error(Errc::ValidationError, "partition blocks must be disjoint and cover the state");
  }

  Vec u1(std::span<const double> state) const { return gather(state, observed); }
  Vec u2(std::span<const double> state) const { return gather(state, unobserved); }

  Vec join(std::span<const double> u1, std::span<const double> u2) const {
    Vec s(dim());
    for (std::size_t k = 0; k < observed.size(); ++k) s[observed[k]] = u1[k];
    for (std::size_t k = 0; k < unobserved.size(); ++k) s[unobserved[k]] = u2[k];
    return s;
  }

  /// Position of full index `i` within u1, if observed.
  std::optional<std::size_t> u1_position(std::size_t i) const { return position(observed, i); }
  std::optional<std::size_t> u2_position(std::size_t i) const { return position(unobserved, i); }

  friend bool operator==(const StatePartition&, const StatePartition&) = default;

 private:
  static Vec gather(std::span<const double> s, const std::vector<std::size_t>& idx) {
    Vec v(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= s.size()) throw Error(Errc::DimensionMismatch, "state too short for partition");
      v[k] = s[idx[k]];
    }
    return v;
  }
  static std::optional<std::size_t> position(const std::vector<std::size_t>& v, std::size_t i) {
    for (std::size_t k = 0; k < v.size(); ++k)
      if (v[k] == i) return k;
    return std::nullopt;
  }
};

/// coefficient * Π u1[u1_factors] (* u2[u2_factor]) added to equation `row`.
struct KnowledgeTerm {
  std::size_t row = 0;                   // full-state index of the equation
  std::vector<std::size_t> u1_factors;   // positions in u1
  std::optional<std::size_t> u2_factor;  // position in u2
  std::size_t coef = 0;                  // flat parameter index
  std::string label;

  friend bool operator==(const KnowledgeTerm&, const KnowledgeTerm&) = default;
};

/// Where one network output lands: additive in `row`, or multiplying u2[u2_factor].
struct OutputSlot {
  std::size_t row = 0;
  std::optional<std::size_t> u2_factor;

  friend bool operator==(const OutputSlot&, const OutputSlot&) = default;
};

/// One application of a shared network.
struct NeuralSite {
  std::vector<std::size_t> inputs;  // positions in u1
  std::vector<OutputSlot> outputs;  // one per network output

  friend bool operator==(const NeuralSite&, const NeuralSite&) = default;
};

/// A network whose parameters live at [offset, offset + spec.param_count())
/// and which is evaluated at every site with the same weights.
struct NeuralBlock {
  std::string name;
  MlpSpec spec;
  std::size_t offset = 0;
  std::vector<NeuralSite> sites;

  friend bool operator==(const NeuralBlock&, const NeuralBlock&) = default;
};

/// f (N) and g (N x N2), rows in full-state order.
struct DriftCoefficients {
  Vec f;
  Mat g;
};

class TermSet {
 public:
  std::vector<KnowledgeTerm> knowledge;
  std::vector<NeuralBlock> networks;

  void evaluate(std::span<const double> params, std::span<const double> u1, std::size_t n, std::size_t n2,
                DriftCoefficients& out) const {
    if (out.f.size() != n) out.f.assign(n, 0.0);
    else std::fill(out.f.begin(), out.f.end(), 0.0);
    if (out.g.rows() != n || out.g.cols() != n2) out.g = Mat(n, n2);
    else out.g.fill(0.0);

    for (const auto& t : knowledge) {
      const double v = params[t.coef] * monomial(t, u1);
      add(out, t.row, t.u2_factor, v);
    }
    MlpCache cache;
    Vec in;
    for (const auto& net : networks) {
      const auto w = params.subspan(net.offset, net.spec.param_count());
      for (const auto& site : net.sites) {
        gather(u1, site.inputs, in);
        mlp_forward(w, net.spec, in, cache);
        const Vec& y = cache.acts.back();
        for (std::size_t o = 0; o < site.outputs.size(); ++o) add(out, site.outputs[o].row, site.outputs[o].u2_factor, y[o]);
      }
    }
  }

  /// Reverse pass of evaluate(): accumulates into `grad` (parameter adjoint)
  /// and, if non-empty, into `u1_bar`.
  void backward(std::span<const double> params, std::span<const double> u1, const Vec& f_bar, const Mat& g_bar,
                std::span<double> grad, std::span<double> u1_bar = {}) const {
    for (const auto& t : knowledge) {
      const double bar = t.u2_factor ? g_bar(t.row, *t.u2_factor) : f_bar[t.row];
      if (bar == 0.0) continue;
      grad[t.coef] += bar * monomial(t, u1);
      if (!u1_bar.empty()) {
        const double c = params[t.coef] * bar;
        for (std::size_t k = 0; k < t.u1_factors.size(); ++k) {
          double partial = c;
          for (std::size_t m = 0; m < t.u1_factors.size(); ++m)
            if (m != k) partial *= u1[t.u1_factors[m]];
          u1_bar[t.u1_factors[k]] += partial;
        }
      }
    }
    MlpCache cache;
    Vec in, out_bar, in_bar;
    for (const auto& net : networks) {
      const auto w = params.subspan(net.offset, net.spec.param_count());
      const auto gw = grad.subspan(net.offset, net.spec.param_count());
      for (const auto& site : net.sites) {
        out_bar.assign(site.outputs.size(), 0.0);
        bool any = false;
        for (std::size_t o = 0; o < site.outputs.size(); ++o) {
          const auto& s = site.outputs[o];
          out_bar[o] = s.u2_factor ? g_bar(s.row, *s.u2_factor) : f_bar[s.row];
          any = any || out_bar[o] != 0.0;
        }
        if (!any) continue;
        gather(u1, site.inputs, in);
        mlp_forward(w, net.spec, in, cache);
        if (u1_bar.empty()) {
          mlp_backward(w, net.spec, cache, out_bar, gw);
        } else {
          in_bar.assign(in.size(), 0.0);
          mlp_backward(w, net.spec, cache, out_bar, gw, in_bar);
          for (std::size_t i = 0; i < in.size(); ++i) u1_bar[site.inputs[i]] += in_bar[i];
        }
      }
    }
  }

  friend bool operator==(const TermSet&, const TermSet&) = default;

 private:
  static double monomial(const KnowledgeTerm& t, std::span<const double> u1) {
    double m = 1.0;
    for (auto k : t.u1_factors) m *= u1[k];
    return m;
  }
  static void add(DriftCoefficients& out, std::size_t row, const std::optional<std::size_t>& col, double v) {
    if (col) out.g(row, *col) += v;
    else out.f[row] += v;
  }
  static void gather(std::span<const double> u1, const std::vector<std::size_t>& idx, Vec& out) {
    out.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) out[k] = u1[idx[k]];
  }
};

/// Knowledge terms + networks + diagonal noise amplitudes + parameters.
struct CgnModel {
  StatePartition partition;
  TermSet terms;
  Vec sigma1;  // diagonal of σ1, length N1
  Vec sigma2;  // diagonal of σ2, length N2
  ParamVector params;

  std::size_t dim() const noexcept { return partition.dim(); }
  std::size_t n1() const noexcept { return partition.n1(); }
  std::size_t n2() const noexcept { return partition.n2(); }

  DriftCoefficients coefficients(std::span<const double> u1) const {
    DriftCoefficients c;
    terms.evaluate(params.values(), u1, dim(), n2(), c);
    return c;
  }

  void validate() const {
    partition.validate();
    const std::size_t n = dim();
    for (const auto& t : terms.knowledge) {
      if (t.row >= n || t.coef >= params.size()) throw Error(Errc::ValidationError, "knowledge term index out of range");
      for (auto k : t.u1_factors)
        if (k >= n1()) throw Error(Errc::ValidationError, "knowledge term u1 factor out of range");
      if (t.u2_factor && *t.u2_factor >= n2()) throw Error(Errc::ValidationError, "knowledge term u2 factor out of range");
    }
    for (const auto& net : terms.networks) {
      net.spec.validate();
      if (net.offset + net.spec.param_count() > params.size())
        throw Error(Errc::ValidationError, "network '" + net.name + "' parameters out of range");
      for (const auto& s : net.sites) {
        if (s.inputs.size() != net.spec.inputs() || s.outputs.size() != net.spec.outputs())
          throw Error(Errc::ValidationError, "network '" + net.name + "' site does not match its widths");
        for (auto k : s.inputs)
          if (k >= n1()) throw Error(Errc::ValidationError, "network input must be an observed component");
        for (const auto& o : s.outputs)
          if (o.row >= n || (o.u2_factor && *o.u2_factor >= n2()))
            throw Error(Errc::ValidationError, "network output slot out of range");
      }
    }
  }

  /// σ1 strictly positive, σ2 non-negative, sizes matching the partition.
  void validate_noise() const {
    if (sigma1.size() != n1() || sigma2.size() != n2())
      throw Error(Errc::ValidationError, "noise amplitudes do not match the partition");
    for (double s : sigma1)
      if (!(s > 0.0) || !std::isfinite(s)) throw Error(Errc::ValidationError, "sigma1 entries must be strictly positive");
    for (double s : sigma2)
      if (!(s >= 0.0) || !std::isfinite(s)) throw Error(Errc::ValidationError, "sigma2 entries must be non-negative");
  }

  /// Full-state noise amplitudes in original index order.
  Vec full_sigma() const { return partition.join(sigma1, sigma2); }

  friend bool operator==(const CgnModel&, const CgnModel&) = default;
};

/// Drift (f + g u2) in original index order.
inline Vec assemble_full_drift(const CgnModel& model, std::span<const double> state) {
  if (state.size() != model.dim()) throw Error(Errc::DimensionMismatch, "state dimension differs from model");
  const Vec u1 = model.partition.u1(state);
  const Vec u2 = model.partition.u2(state);
  const auto c = model.coefficients(u1);
  Vec d = c.f;
  for (std::size_t r = 0; r < d.size(); ++r)
    for (std::size_t j = 0; j < u2.size(); ++j) d[r] += c.g(r, j) * u2[j];
  return d;
}

/// The model as a plain drift field (for simulation and EnKBF use).
inline DriftField model_drift(CgnModel model) {
  return [model = std::move(model)](std::span<const double> s, double, std::span<double> out) {
    const Vec d = assemble_full_drift(model, s);
    std::copy(d.begin(), d.end(), out.begin());
  };
}

}  // namespace cgnsde
