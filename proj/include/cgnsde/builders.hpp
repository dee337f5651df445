#pragma once

// Construction of CgnModel instances: a generic builder working in full-state
// indices, plus the benchmark model families (true CGNS systems, the hybrid
// models used in the experiments, and their knowledge-only counterparts).

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cgnsde/dynamics.hpp"
#include "cgnsde/error.hpp"
#include "cgnsde/mlp.hpp"
#include "cgnsde/model.hpp"

namespace cgnsde {

/// Display name of state component i ("x", "y", "z" for 3-D systems, x1..xN otherwise).
inline std::string state_name(std::size_t i, std::size_t dim) {
  if (dim == 3) return std::string(1, "xyz"[i]);
  return "x" + std::to_string(i + 1);
}

inline std::string monomial_label(const std::vector<std::size_t>& factors, std::size_t dim) {
  if (factors.empty()) return "1";
  if (factors.size() == 2 && factors[0] == factors[1]) return state_name(factors[0], dim) + "^2";
  std::string s;
  for (std::size_t k = 0; k < factors.size(); ++k) s += (k ? "*" : "") + state_name(factors[k], dim);
  return s;
}

class ModelBuilder {
 public:
  explicit ModelBuilder(StatePartition p) : part_(std::move(p)) { part_.validate(); }

  const StatePartition& partition() const noexcept { return part_; }

  /// Index of the named scalar coefficient, created on first use.
  std::size_t coefficient(const std::string& name, double init = 0.0) {
    if (auto it = coefs_.find(name); it != coefs_.end()) return it->second;
    const std::size_t idx = params_.add_segment("k:" + name, 1, init);
    coefs_.emplace(name, idx);
    return idx;
  }

  /// coefficient(name) * Π state[factors] in equation `row`; factors are
  /// full-state indices with at most one unobserved component.
  void add_term(std::size_t row, const std::vector<std::size_t>& factors, const std::string& coef_name,
                double init = 0.0) {
    if (row >= part_.dim()) throw Error(Errc::IndexOutOfRange, "term row out of range");
    KnowledgeTerm t;
    t.row = row;
    for (auto f : factors) {
      if (f >= part_.dim()) throw Error(Errc::IndexOutOfRange, "term factor out of range");
      if (auto p = part_.u1_position(f)) {
        t.u1_factors.push_back(*p);
      } else {
        if (t.u2_factor)
          throw Error(Errc::ValidationError, "term " + monomial_label(factors, part_.dim()) +
                                                  " is not conditionally linear in the unobserved block");
        t.u2_factor = part_.u2_position(f);
      }
    }
    t.coef = coefficient(coef_name, init);
    t.label = monomial_label(factors, part_.dim());
    terms_.knowledge.push_back(std::move(t));
  }

  std::size_t add_network(const std::string& name, MlpSpec spec) {
    spec.validate();
    const std::size_t off = params_.add_segment("nn:" + name, spec.param_count());
    terms_.networks.push_back({name, std::move(spec), off, {}});
    return terms_.networks.size() - 1;
  }

  /// One application of network `block`: inputs are full indices (must be
  /// observed); each output is (row, optional full index of the u2 factor).
  void add_site(std::size_t block, const std::vector<std::size_t>& inputs,
                const std::vector<std::pair<std::size_t, std::optional<std::size_t>>>& outputs) {
    NeuralSite s;
    for (auto i : inputs) {
      auto p = part_.u1_position(i);
      if (!p) throw Error(Errc::ValidationError, "network inputs must be observed components");
      s.inputs.push_back(*p);
    }
    for (const auto& [row, col] : outputs) {
      OutputSlot o{row, std::nullopt};
      if (col) {
        auto p = part_.u2_position(*col);
        if (!p) throw Error(Errc::ValidationError, "network multipliers must be unobserved components");
        o.u2_factor = p;
      }
      s.outputs.push_back(o);
    }
    terms_.networks.at(block).sites.push_back(std::move(s));
  }

  /// Finalizes: networks get Glorot initialization from `rng`.
  CgnModel build(Rng& rng, Vec sigma1 = {}, Vec sigma2 = {}) {
    CgnModel m{part_, terms_, std::move(sigma1), std::move(sigma2), params_};
    for (const auto& net : m.terms.networks)
      mlp_init(net.spec, m.params.values().subspan(net.offset, net.spec.param_count()), rng);
    if (m.sigma1.empty()) m.sigma1.assign(part_.n1(), 1.0);
    if (m.sigma2.empty()) m.sigma2.assign(part_.n2(), 1.0);
    m.validate();
    return m;
  }

 private:
  StatePartition part_;
  TermSet terms_;
  ParamVector params_;
  std::map<std::string, std::size_t> coefs_;
};

// ---------------------------------------------------------------------------
// Partitions used by the experiments

enum class L96Case { Case1 = 1, Case2 = 2, Case3 = 3 };

inline StatePartition l84_partition() { return StatePartition::from_observed({1, 2}, 3); }
inline StatePartition psbse_partition() { return StatePartition::from_observed({0}, 3); }

/// Case 1: every third site (1-based i with i mod 3 = 0) hidden.
/// Cases 2 and 3: even 1-based sites hidden.
inline StatePartition l96_partition(L96Case c, std::size_t sites) {
  std::vector<std::size_t> obs;
  for (std::size_t k = 0; k < sites; ++k) {
    const bool hidden = c == L96Case::Case1 ? (k % 3 == 2) : (k % 2 == 1);
    if (!hidden) obs.push_back(k);
  }
  return StatePartition::from_observed(std::move(obs), sites);
}

inline std::size_t ring(std::size_t i, long off, std::size_t n) {
  const long v = (static_cast<long>(i) + off) % static_cast<long>(n);
  return static_cast<std::size_t>(v < 0 ? v + static_cast<long>(n) : v);
}

// ---------------------------------------------------------------------------
// Model families

/// The benchmark drift itself as a CGNS under partition `p` (fixed
/// coefficients stored as parameters). Throws if the system is not
/// conditionally linear in the unobserved block.
inline CgnModel true_cgns_model(const Benchmark& b, const StatePartition& p) {
  ModelBuilder mb(p);
  const auto poly = benchmark_polynomial(b);
  for (std::size_t k = 0; k < poly.size(); ++k)
    mb.add_term(poly[k].row, poly[k].factors, "c" + std::to_string(k), poly[k].coef);
  Rng rng(0);
  const Vec sig = benchmark_diffusion(b).sigma;
  return mb.build(rng, p.u1(sig), p.u2(sig));
}

/// Hybrid L84 model: a degraded knowledge part (constant, linear damping, one
/// quadratic per row, with the y-row quadratics removed) plus one network of
/// (y, z) with six outputs: additive terms for x, y, z then multipliers of x.
inline CgnModel l84_cgnsde(Rng& rng, bool with_network = true, MlpSpec spec = {{2, 13, 13, 13, 6}}) {
  ModelBuilder mb(l84_partition());
  mb.add_term(0, {}, "f_x");
  mb.add_term(0, {0}, "a_x");
  mb.add_term(0, {2, 2}, "b_x");
  mb.add_term(1, {}, "f_y");
  mb.add_term(1, {1}, "a_y");
  mb.add_term(2, {}, "f_z");
  mb.add_term(2, {2}, "a_z");
  mb.add_term(2, {0, 2}, "b_z");
  if (with_network) {
    if (spec.inputs() != 2 || spec.outputs() != 6) throw Error(Errc::ValidationError, "L84 network must map 2 -> 6");
    const auto nn = mb.add_network("nn", spec);
    mb.add_site(nn, {1, 2}, {{0, std::nullopt}, {1, std::nullopt}, {2, std::nullopt}, {0, 0}, {1, 0}, {2, 0}});
  }
  return mb.build(rng);
}

/// Selected knowledge term: equation row and full-index factors.
struct StructureTerm {
  std::size_t row = 0;
  std::vector<std::size_t> factors;
  friend bool operator==(const StructureTerm&, const StructureTerm&) = default;
};

/// Generic single-network hybrid for small systems: knowledge terms from a
/// selected structure, plus one network of all of u1 whose outputs are the
/// additive term of every row followed by the multiplier of each u2
/// component in each row (row-major).
inline CgnModel single_network_cgnsde(const StatePartition& p, const std::vector<StructureTerm>& structure, Rng& rng,
                                      bool with_network, std::vector<std::size_t> hidden) {
  ModelBuilder mb(p);
  const std::size_t n = p.dim();
  for (const auto& t : structure)
    mb.add_term(t.row, t.factors, state_name(t.row, n) + ":" + monomial_label(t.factors, n));
  if (with_network) {
    std::vector<std::size_t> w{p.n1()};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(n + n * p.n2());
    const auto nn = mb.add_network("nn", {w});
    std::vector<std::pair<std::size_t, std::optional<std::size_t>>> outs;
    for (std::size_t r = 0; r < n; ++r) outs.push_back({r, std::nullopt});
    for (std::size_t r = 0; r < n; ++r)
      for (auto j : p.unobserved) outs.push_back({r, j});
    mb.add_site(nn, p.observed, outs);
  }
  return mb.build(rng);
}

/// Hybrid PSBSE model: u1 = x, network 1 -> 9.
inline CgnModel psbse_cgnsde(const std::vector<StructureTerm>& structure, Rng& rng, bool with_network = true,
                             std::vector<std::size_t> hidden = {12, 12, 12}) {
  return single_network_cgnsde(psbse_partition(), structure, rng, with_network, std::move(hidden));
}

/// Relative-offset monomial used by translation-invariant lattice models.
struct LatticeTerm {
  std::vector<long> offsets;  // empty = constant
  friend bool operator==(const LatticeTerm&, const LatticeTerm&) = default;
};

inline std::string lattice_label(const LatticeTerm& t) {
  if (t.offsets.empty()) return "1";
  auto one = [](long o) {
    if (o == 0) return std::string("x[i]");
    return std::string("x[i") + (o > 0 ? "+" : "-") + std::to_string(o > 0 ? o : -o) + "]";
  };
  if (t.offsets.size() == 2 && t.offsets[0] == t.offsets[1]) return one(t.offsets[0]) + "^2";
  std::string s;
  for (std::size_t k = 0; k < t.offsets.size(); ++k) s += (k ? "*" : "") + one(t.offsets[k]);
  return s;
}

struct L96Widths {
  std::vector<MlpSpec> nets;
};

inline L96Widths default_l96_widths(L96Case c) {
  switch (c) {
    case L96Case::Case1: return {{{{3, 8, 3}}, {{3, 8, 3}}, {{4, 8, 2}}}};
    case L96Case::Case2: return {{{{3, 13, 13, 13, 3}}, {{2, 9, 4}}}};
    case L96Case::Case3: return {{{{3, 14, 14, 14, 3}}, {{2, 16, 4}}}};
  }
  throw Error(Errc::ValidationError, "unknown L96 case");
}

/// Lattice hybrid models. `knowledge[r]` lists the shared knowledge terms for
/// site role r (case 1: the three residues mod 3; cases 2-3: observed then
/// hidden sites). Each role has one shared network.
inline CgnModel l96_cgnsde(L96Case c, std::size_t sites, const std::vector<std::vector<LatticeTerm>>& knowledge,
                           Rng& rng, bool with_networks = true, std::optional<L96Widths> widths = std::nullopt) {
  const auto p = l96_partition(c, sites);
  ModelBuilder mb(p);
  using Out = std::pair<std::size_t, std::optional<std::size_t>>;
  const std::size_t roles = c == L96Case::Case1 ? 3 : 2;
  if (c == L96Case::Case1 ? sites % 3 != 0 : sites % 2 != 0)
    throw Error(Errc::ValidationError, "L96 site count must be a multiple of the role period");
  if (knowledge.size() != roles) throw Error(Errc::ValidationError, "one knowledge list per site role required");
  auto role_of = [&](std::size_t k) { return c == L96Case::Case1 ? k % 3 : k % 2; };
  for (std::size_t k = 0; k < sites; ++k)
    for (const auto& t : knowledge[role_of(k)]) {
      std::vector<std::size_t> f;
      for (long o : t.offsets) f.push_back(ring(k, o, sites));
      mb.add_term(k, f, "r" + std::to_string(role_of(k) + 1) + ":" + lattice_label(t));
    }
  if (with_networks) {
    const auto w = widths ? *widths : default_l96_widths(c);
    if (w.nets.size() != roles) throw Error(Errc::ValidationError, "one network spec per site role required");
    std::vector<std::size_t> nn;
    for (std::size_t r = 0; r < roles; ++r) nn.push_back(mb.add_network("nn" + std::to_string(r + 1), w.nets[r]));
    for (std::size_t k = 0; k < sites; ++k) {
      auto at = [&](long o) { return ring(k, o, sites); };
      const std::size_t r = role_of(k);
      if (c == L96Case::Case1) {
        // 1-based i mod 3 = 1, 2, 0 correspond to k mod 3 = 0, 1, 2
        if (r == 0) mb.add_site(nn[0], {at(-2), at(0), at(1)}, {Out{k, std::nullopt}, Out{k, at(-1)}, Out{k, at(2)}});
        if (r == 1) mb.add_site(nn[1], {at(-1), at(0), at(2)}, {Out{k, std::nullopt}, Out{k, at(-2)}, Out{k, at(1)}});
        if (r == 2)
          mb.add_site(nn[2], {at(-2), at(-1), at(1), at(2)}, {Out{k, std::nullopt}, Out{k, at(0)}});
      } else {
        if (r == 0) mb.add_site(nn[0], {at(-2), at(0), at(2)}, {Out{k, std::nullopt}, Out{k, at(-1)}, Out{k, at(1)}});
        else
          mb.add_site(nn[1], {at(-1), at(1)},
                      {Out{k, std::nullopt}, Out{k, at(-2)}, Out{k, at(0)}, Out{k, at(2)}});
      }
    }
  }
  return mb.build(rng);
}

/// Case-1 knowledge: a shared constant and linear damping for every role.
inline std::vector<std::vector<LatticeTerm>> l96_case1_knowledge() {
  const std::vector<LatticeTerm> lin{{{}}, {{0}}};
  return {lin, lin, lin};
}

/// Case-2/3 knowledge in the form selected by causation entropy: observed
/// sites a0 + a1 x_i + a2 x_{i+1} + a3 x_{i-2}x_{i-1} + a4 x_{i-1}x_{i+2} + a5 x_i x_{i+1};
/// hidden sites b0 + b1 x_i + b2 x_{i-2}x_{i-1} + b3 x_{i-1}x_{i+1}.
inline std::vector<std::vector<LatticeTerm>> l96_case2_knowledge() {
  return {{{{}}, {{0}}, {{1}}, {{-2, -1}}, {{-1, 2}}, {{0, 1}}}, {{{}}, {{0}}, {{-2, -1}}, {{-1, 1}}}};
}

}  // namespace cgnsde
