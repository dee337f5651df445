#pragma once

// Config-driven experiment runner: data generation, structure
// identification, two-phase training, assimilation with every model and a
// reference filter, then metrics and long-run statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cgnsde/builders.hpp"
#include "cgnsde/bundle.hpp"
#include "cgnsde/causal.hpp"
#include "cgnsde/dynamics.hpp"
#include "cgnsde/enkbf.hpp"
#include "cgnsde/filter.hpp"
#include "cgnsde/metrics.hpp"
#include "cgnsde/regression.hpp"
#include "cgnsde/training.hpp"

namespace cgnsde {

// ---------------------------------------------------------------------------
// Configuration

struct DataSpec {
  double dt = 1e-3;
  double spinup_units = 5.0;
  double train_units = 50.0;
  double test_units = 200.0;
  std::size_t substeps = 1;  // integrator steps per stored sample
};

struct EvalSpec {
  double horizon_units = 0.2;
  std::size_t stride = 1000;  // steps between forecast windows
  std::size_t burn_in = 5000;
  double longrun_units = 200.0;
  double acf_max_lag_units = 10.0;
  std::size_t histogram_bins = 100;
};

struct EnkbfSpec {
  std::size_t members = 100;
  std::vector<double> inflations{1.0, 1.5, 2.0, 3.0};
  std::size_t substeps = 1;  // filter steps per observation interval
};

enum class StructureSource { Manual, Causal };

struct StructureSpec {
  StructureSource source = StructureSource::Manual;
  std::vector<StructureTerm> terms;                  // manual, full-state models
  std::vector<std::vector<LatticeTerm>> lattice;     // manual, L96 (one list per role)
  bool add_constant = false;                         // causal: prepend a constant per row/role
  SelectionRule rule;
};

struct ExperimentConfig {
  std::string name = "experiment";
  Benchmark benchmark = Benchmark::l84();
  std::optional<L96Case> l96_case;
  StatePartition partition;
  StructureSpec structure;
  std::vector<std::size_t> hidden{13, 13, 13};  // single-network models
  std::optional<L96Widths> l96_widths;
  TrainConfig train;
  DataSpec data;
  EvalSpec eval;
  EnkbfSpec enkbf;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  bool is_lattice() const { return l96_case.has_value(); }
  std::size_t roles() const { return !l96_case ? 0 : (*l96_case == L96Case::Case1 ? 3 : 2); }

  void validate() const {
    benchmark.validate();
    const std::size_t n = benchmark.dim();
    if (partition.dim() != n) throw Error(Errc::ValidationError, "partition: must cover all " + std::to_string(n) + " components");
    partition.validate();
    if (partition.n1() == 0 || partition.n2() == 0)
      throw Error(Errc::ValidationError, "partition: both blocks must be non-empty");
    if (is_lattice()) {
      if (benchmark.kind != BenchmarkKind::L96_HOM && benchmark.kind != BenchmarkKind::L96_INHOM)
        throw Error(Errc::ValidationError, "l96: only valid for L96 benchmarks");
      if (!(partition == l96_partition(*l96_case, n)))
        throw Error(Errc::ValidationError, "partition: must match the L96 case layout");
      if (structure.source == StructureSource::Manual && structure.lattice.size() != roles())
        throw Error(Errc::ValidationError, "structure.lattice_terms: one list per site role required");
      if (l96_widths && l96_widths->nets.size() != roles())
        throw Error(Errc::ValidationError, "network.nets: one spec per site role required");
    } else {
      if (benchmark.kind == BenchmarkKind::L96_HOM || benchmark.kind == BenchmarkKind::L96_INHOM)
        throw Error(Errc::ValidationError, "l96: L96 benchmarks need an l96.case entry");
      for (const auto& t : structure.terms) {
        if (t.row >= n) throw Error(Errc::ValidationError, "structure.terms: row out of range");
        if (t.factors.size() > 2) throw Error(Errc::ValidationError, "structure.terms: at most quadratic terms");
        std::size_t hidden_count = 0;
        for (auto f : t.factors) {
          if (f >= n) throw Error(Errc::ValidationError, "structure.terms: factor out of range");
          if (partition.u2_position(f)) ++hidden_count;
        }
        if (hidden_count > 1) throw Error(Errc::ValidationError, "structure.terms: at most one unobserved factor per term");
      }
    }
    if (!(data.dt > 0.0)) throw Error(Errc::ValidationError, "data.dt: must be positive");
    if (data.substeps == 0) throw Error(Errc::ValidationError, "data.substeps: must be >= 1");
    if (!(data.train_units > 0.0) || !(data.test_units > 0.0) || data.spinup_units < 0.0)
      throw Error(Errc::ValidationError, "data: lengths must be positive");
    if (!(eval.horizon_units > 0.0) || eval.stride == 0) throw Error(Errc::ValidationError, "eval: horizon and stride must be positive");
    if (eval.burn_in + 1 >= test_steps()) throw Error(Errc::ValidationError, "eval.burn_in: must be shorter than the test series");
    if (horizon_steps() >= test_steps()) throw Error(Errc::ValidationError, "eval.horizon_units: longer than the test series");
    if (enkbf.members < 2) throw Error(Errc::ValidationError, "enkbf.members: must be >= 2");
    if (enkbf.substeps == 0) throw Error(Errc::ValidationError, "enkbf.substeps: must be >= 1");
    for (double a : enkbf.inflations)
      if (!(a >= 1.0) || !std::isfinite(a)) throw Error(Errc::ValidationError, "enkbf.inflations: entries must be >= 1");
    try {
      train.validate();
    } catch (const Error& e) {
      throw Error(Errc::ValidationError, std::string("train: ") + e.what());
    }
  }

  std::size_t steps(double units) const { return static_cast<std::size_t>(std::llround(units / data.dt)); }
  std::size_t spinup_steps() const { return steps(data.spinup_units); }
  std::size_t train_steps() const { return steps(data.train_units); }
  std::size_t test_steps() const { return steps(data.test_units); }
  std::size_t horizon_steps() const { return std::max<std::size_t>(1, steps(eval.horizon_units)); }
};

/// Reference settings per benchmark; a config file only overrides what it names.
inline ExperimentConfig default_config(BenchmarkKind kind, std::optional<L96Case> c = std::nullopt,
                                       std::size_t l96_sites = 36) {
  ExperimentConfig cfg;
  switch (kind) {
    case BenchmarkKind::L84:
      cfg.name = "l84";
      cfg.benchmark = Benchmark::l84();
      cfg.partition = l84_partition();
      cfg.structure.source = StructureSource::Manual;
      cfg.structure.terms = {{0, {}}, {0, {0}}, {0, {2, 2}}, {1, {}}, {1, {1}}, {2, {}}, {2, {2}}, {2, {0, 2}}};
      cfg.hidden = {13, 13, 13};
      cfg.train.ns = 200;
      cfg.train.nl = 50000;
      cfg.train.nb = 5000;
      cfg.train.epochs_phase1 = 10000;
      cfg.train.epochs_phase2 = 500;
      cfg.data = {1e-3, 5.0, 50.0, 200.0, 1};
      cfg.eval = {0.2, 1000, 5000, 200.0, 10.0, 100};
      break;
    case BenchmarkKind::PSBSE:
      cfg.name = "psbse";
      cfg.benchmark = Benchmark::psbse();
      cfg.partition = psbse_partition();
      cfg.structure.source = StructureSource::Causal;
      cfg.hidden = {12, 12, 12};
      cfg.train.ns = 50;
      cfg.train.nl = 10000;
      cfg.train.nb = 1000;
      cfg.train.epochs_phase1 = 10000;
      cfg.train.epochs_phase2 = 500;
      cfg.data = {1e-2, 10.0, 100.0, 500.0, 10};
      cfg.eval = {0.5, 100, 1000, 1000.0, 10.0, 100};
      break;
    case BenchmarkKind::L96_HOM:
    case BenchmarkKind::L96_INHOM: {
      const L96Case lc = c.value_or(kind == BenchmarkKind::L96_HOM ? L96Case::Case1 : L96Case::Case3);
      cfg.name = "l96_case" + std::to_string(static_cast<int>(lc));
      cfg.benchmark = Benchmark::from_kind(kind, l96_sites);
      cfg.l96_case = lc;
      cfg.partition = l96_partition(lc, l96_sites);
      if (lc == L96Case::Case1) {
        cfg.structure.source = StructureSource::Manual;
        cfg.structure.lattice = l96_case1_knowledge();
      } else {
        cfg.structure.source = StructureSource::Causal;
        cfg.structure.add_constant = true;
      }
      cfg.train.ns = 5;
      cfg.train.ns_phase1 = 1;
      cfg.train.nl = 10000;
      cfg.train.nb = 500;
      cfg.train.epochs_phase1 = 10000;
      cfg.train.epochs_phase2 = 500;
      cfg.data = {1e-2, 10.0, 100.0, 200.0, 1};
      cfg.eval = {0.2, 100, 500, 200.0, 5.0, 100};
      break;
    }
  }
  return cfg;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw Error(Errc::ValidationError, where + ": must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw Error(Errc::ValidationError, where + (where.empty() ? "" : ".") + it.key() + ": unknown field");
  }
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::ValidationError, where + "." + key + ": wrong type");
  }
}

inline L96Case parse_l96_case(int c) {
  if (c < 1 || c > 3) throw Error(Errc::ValidationError, "l96.case: must be 1, 2 or 3");
  return static_cast<L96Case>(c);
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  detail::reject_unknown(j, "", {"name", "benchmark", "l96", "partition", "structure", "network", "train", "data", "eval",
                                 "enkbf", "seed", "out_dir"});
  if (!j.contains("benchmark") || !j.at("benchmark").is_string())
    throw Error(Errc::ValidationError, "benchmark: required string field");
  BenchmarkKind kind;
  try {
    kind = parse_benchmark_kind(j.at("benchmark").get<std::string>());
  } catch (const Error& e) {
    throw Error(Errc::ValidationError, std::string("benchmark: ") + e.what());
  }
  std::optional<L96Case> lc;
  std::size_t sites = 36;
  if (j.contains("l96")) {
    const auto& l = j.at("l96");
    detail::reject_unknown(l, "l96", {"case", "sites"});
    int c = 0;
    read_field(l, "case", c, "l96");
    lc = detail::parse_l96_case(c);
    read_field(l, "sites", sites, "l96");
  }
  if ((kind == BenchmarkKind::L96_HOM || kind == BenchmarkKind::L96_INHOM) && !lc)
    throw Error(Errc::ValidationError, "l96.case: required for L96 benchmarks");
  if (lc && kind != BenchmarkKind::L96_HOM && kind != BenchmarkKind::L96_INHOM)
    throw Error(Errc::ValidationError, "l96: only valid for L96 benchmarks");
  if (lc && sites < 4) throw Error(Errc::ValidationError, "l96.sites: must be >= 4");

  ExperimentConfig cfg = default_config(kind, lc, sites);
  read_field(j, "name", cfg.name, "");
  read_field(j, "seed", cfg.seed, "");
  if (!j.contains("seed")) throw Error(Errc::ValidationError, "seed: required field");
  read_field(j, "out_dir", cfg.out_dir, "");

  if (j.contains("partition")) {
    const auto& p = j.at("partition");
    detail::reject_unknown(p, "partition", {"observed"});
    std::vector<std::size_t> obs;
    read_field(p, "observed", obs, "partition");
    try {
      cfg.partition = StatePartition::from_observed(obs, cfg.benchmark.dim());
    } catch (const Error& e) {
      throw Error(Errc::ValidationError, std::string("partition.observed: ") + e.what());
    }
  }
  if (j.contains("structure")) {
    const auto& s = j.at("structure");
    detail::reject_unknown(s, "structure", {"source", "terms", "lattice_terms", "add_constant", "relative", "absolute"});
    std::string src = s.value("source", cfg.structure.source == StructureSource::Manual ? "manual" : "causal");
    if (src == "manual") cfg.structure.source = StructureSource::Manual;
    else if (src == "causal") cfg.structure.source = StructureSource::Causal;
    else throw Error(Errc::ValidationError, "structure.source: must be 'manual' or 'causal'");
    if (s.contains("terms")) {
      cfg.structure.terms.clear();
      for (const auto& t : s.at("terms")) {
        detail::reject_unknown(t, "structure.terms[]", {"row", "factors"});
        StructureTerm st;
        read_field(t, "row", st.row, "structure.terms[]");
        read_field(t, "factors", st.factors, "structure.terms[]");
        cfg.structure.terms.push_back(std::move(st));
      }
    }
    if (s.contains("lattice_terms")) {
      cfg.structure.lattice.clear();
      std::vector<std::vector<std::vector<long>>> raw;
      read_field(s, "lattice_terms", raw, "structure");
      for (const auto& role : raw) {
        std::vector<LatticeTerm> terms;
        for (const auto& offs : role) {
          if (offs.size() > 2) throw Error(Errc::ValidationError, "structure.lattice_terms: at most quadratic terms");
          terms.push_back({offs});
        }
        cfg.structure.lattice.push_back(std::move(terms));
      }
    }
    read_field(s, "add_constant", cfg.structure.add_constant, "structure");
    read_field(s, "relative", cfg.structure.rule.relative, "structure");
    read_field(s, "absolute", cfg.structure.rule.absolute, "structure");
  }
  if (j.contains("network")) {
    const auto& n = j.at("network");
    detail::reject_unknown(n, "network", {"hidden", "nets"});
    read_field(n, "hidden", cfg.hidden, "network");
    if (n.contains("nets")) {
      std::vector<std::vector<std::size_t>> nets;
      read_field(n, "nets", nets, "network");
      L96Widths w;
      for (auto& x : nets) w.nets.push_back({x});
      cfg.l96_widths = w;
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown(t, "train", {"ns", "ns_phase1", "nl", "nb", "lambda1", "lambda2", "epochs_phase1",
                                        "epochs_phase2", "lr", "clip_norm", "da_loss", "tape_capacity"});
    auto& tc = cfg.train;
    read_field(t, "ns", tc.ns, "train");
    read_field(t, "ns_phase1", tc.ns_phase1, "train");
    read_field(t, "nl", tc.nl, "train");
    read_field(t, "nb", tc.nb, "train");
    if (t.contains("lambda1")) tc.lambda1 = t.at("lambda1").get<double>();
    if (t.contains("lambda2")) tc.lambda2 = t.at("lambda2").get<double>();
    read_field(t, "epochs_phase1", tc.epochs_phase1, "train");
    read_field(t, "epochs_phase2", tc.epochs_phase2, "train");
    read_field(t, "lr", tc.lr, "train");
    read_field(t, "clip_norm", tc.clip_norm, "train");
    read_field(t, "tape_capacity", tc.tape_capacity, "train");
    if (t.contains("da_loss")) {
      const auto k = t.at("da_loss").get<std::string>();
      if (k == "mse") tc.da_loss = DaLossKind::Mse;
      else if (k == "nll") tc.da_loss = DaLossKind::Nll;
      else throw Error(Errc::ValidationError, "train.da_loss: must be 'mse' or 'nll'");
    }
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, "data", {"dt", "spinup_units", "train_units", "test_units", "substeps"});
    read_field(d, "dt", cfg.data.dt, "data");
    read_field(d, "spinup_units", cfg.data.spinup_units, "data");
    read_field(d, "train_units", cfg.data.train_units, "data");
    read_field(d, "test_units", cfg.data.test_units, "data");
    read_field(d, "substeps", cfg.data.substeps, "data");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, "eval", {"horizon_units", "stride", "burn_in", "longrun_units", "acf_max_lag_units",
                                       "histogram_bins"});
    read_field(e, "horizon_units", cfg.eval.horizon_units, "eval");
    read_field(e, "stride", cfg.eval.stride, "eval");
    read_field(e, "burn_in", cfg.eval.burn_in, "eval");
    read_field(e, "longrun_units", cfg.eval.longrun_units, "eval");
    read_field(e, "acf_max_lag_units", cfg.eval.acf_max_lag_units, "eval");
    read_field(e, "histogram_bins", cfg.eval.histogram_bins, "eval");
  }
  if (j.contains("enkbf")) {
    const auto& e = j.at("enkbf");
    detail::reject_unknown(e, "enkbf", {"members", "inflations", "substeps"});
    read_field(e, "members", cfg.enkbf.members, "enkbf");
    read_field(e, "inflations", cfg.enkbf.inflations, "enkbf");
    read_field(e, "substeps", cfg.enkbf.substeps, "enkbf");
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json j;
  j["name"] = c.name;
  j["benchmark"] = std::string(to_string(c.benchmark.kind));
  if (c.l96_case) j["l96"] = {{"case", static_cast<int>(*c.l96_case)}, {"sites", c.benchmark.dim()}};
  j["partition"] = {{"observed", c.partition.observed}};
  json s;
  s["source"] = c.structure.source == StructureSource::Manual ? "manual" : "causal";
  if (!c.structure.terms.empty()) {
    auto t = json::array();
    for (const auto& x : c.structure.terms) t.push_back({{"row", x.row}, {"factors", x.factors}});
    s["terms"] = t;
  }
  if (!c.structure.lattice.empty()) {
    auto roles = json::array();
    for (const auto& r : c.structure.lattice) {
      auto terms = json::array();
      for (const auto& t : r) terms.push_back(t.offsets);
      roles.push_back(terms);
    }
    s["lattice_terms"] = roles;
  }
  s["add_constant"] = c.structure.add_constant;
  s["relative"] = c.structure.rule.relative;
  s["absolute"] = c.structure.rule.absolute;
  j["structure"] = s;
  if (c.is_lattice()) {
    const auto w = c.l96_widths ? *c.l96_widths : default_l96_widths(*c.l96_case);
    auto nets = json::array();
    for (const auto& n : w.nets) nets.push_back(n.widths);
    j["network"] = {{"nets", nets}};
  } else {
    j["network"] = {{"hidden", c.hidden}};
  }
  json t{{"ns", c.train.ns}, {"ns_phase1", c.train.ns_phase1}, {"nl", c.train.nl}, {"nb", c.train.nb},
         {"epochs_phase1", c.train.epochs_phase1}, {"epochs_phase2", c.train.epochs_phase2}, {"lr", c.train.lr},
         {"clip_norm", c.train.clip_norm}, {"da_loss", c.train.da_loss == DaLossKind::Mse ? "mse" : "nll"},
         {"tape_capacity", c.train.tape_capacity}};
  if (c.train.lambda1) t["lambda1"] = *c.train.lambda1;
  if (c.train.lambda2) t["lambda2"] = *c.train.lambda2;
  j["train"] = t;
  j["data"] = {{"dt", c.data.dt}, {"spinup_units", c.data.spinup_units}, {"train_units", c.data.train_units},
               {"test_units", c.data.test_units}, {"substeps", c.data.substeps}};
  j["eval"] = {{"horizon_units", c.eval.horizon_units}, {"stride", c.eval.stride}, {"burn_in", c.eval.burn_in},
               {"longrun_units", c.eval.longrun_units}, {"acf_max_lag_units", c.eval.acf_max_lag_units},
               {"histogram_bins", c.eval.histogram_bins}};
  j["enkbf"] = {{"members", c.enkbf.members}, {"inflations", c.enkbf.inflations}, {"substeps", c.enkbf.substeps}};
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  return config_from_json(parse_json_text(read_text_file(path), path));
}

// ---------------------------------------------------------------------------
// Runner

enum class Stage { Data = 0, Identify, Train, Assimilate, Evaluate };

inline constexpr std::array<Stage, 5> kAllStages{Stage::Data, Stage::Identify, Stage::Train, Stage::Assimilate,
                                                 Stage::Evaluate};

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Data: return "data";
    case Stage::Identify: return "identify";
    case Stage::Train: return "train";
    case Stage::Assimilate: return "assimilate";
    case Stage::Evaluate: return "evaluate";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (auto st : kAllStages)
    if (to_string(st) == s) return st;
  throw Error(Errc::ValidationError, "unknown stage '" + std::string(s) + "'");
}

/// Worker cap from CGNSDE_THREADS (default: hardware concurrency).
inline std::size_t thread_cap() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv("CGNSDE_THREADS");
  if (!env || !*env) return hw;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw Error(Errc::ValidationError, "CGNSDE_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

/// Runs fn(0..n-1) on at most `threads` workers; the first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errs(n);
  for (std::size_t b = 0; b < n; b += threads) {
    std::vector<std::thread> pool;
    for (std::size_t i = b; i < std::min(n, b + threads); ++i)
      pool.emplace_back([&, i] {
        try {
          fn(i);
        } catch (...) {
          errs[i] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

struct RunOptions {
  std::optional<Stage> until;  // run stages up to and including this one
  bool write_files = true;
  std::ostream* log = nullptr;
};

/// Reference DA: analytic filter on the true system when it is a CGNS,
/// otherwise the best run of an EnKBF inflation sweep.
struct ReferenceResult {
  std::string method;  // "analytic" or "enkbf"
  std::optional<PosteriorSeries> posterior;
  std::optional<double> best_inflation;
  std::vector<EnkbfRun> sweep;
  std::vector<double> sweep_mse;  // per component, NaN if diverged
};

/// True when every benchmark term has at most one unobserved factor.
inline bool is_conditionally_gaussian(const Benchmark& b, const StatePartition& p) {
  for (const auto& t : benchmark_polynomial(b)) {
    std::size_t h = 0;
    for (auto f : t.factors)
      if (p.u2_position(f)) ++h;
    if (h > 1) return false;
  }
  return true;
}

class ExperimentRunner {
 public:
  static constexpr std::array<const char*, 3> kVariants{"krm", "cgnsde_noda", "cgnsde_da"};

  ExperimentRunner(ExperimentConfig cfg, RunOptions opt = {}) : cfg_(std::move(cfg)), opt_(opt) { cfg_.validate(); }

  const ExperimentConfig& config() const { return cfg_; }
  const Trajectory& train_data() const { return train_; }
  const Trajectory& test_data() const { return test_; }
  const std::optional<CausationEntropyMatrix>& cem() const { return cem_; }
  const StructureMask& mask() const { return mask_; }
  const std::map<std::string, CgnModel>& models() const { return models_; }
  const std::map<std::string, ModelMetrics>& metrics() const { return metrics_; }
  const std::optional<ReferenceResult>& reference() const { return reference_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const std::vector<std::string>& files() const { return files_; }

  /// Human-readable plan; no computation.
  std::string plan() const {
    std::ostringstream os;
    os << "experiment " << cfg_.name << " (" << to_string(cfg_.benchmark.kind) << ", seed " << cfg_.seed << ")\n";
    for (auto s : kAllStages) {
      if (opt_.until && static_cast<int>(s) > static_cast<int>(*opt_.until)) break;
      os << "  stage " << to_string(s) << ": ";
      switch (s) {
        case Stage::Data:
          os << cfg_.data.train_units << " training + " << cfg_.data.test_units << " test units at dt=" << cfg_.data.dt;
          break;
        case Stage::Identify:
          os << (cfg_.structure.source == StructureSource::Manual ? "manual structure" : "causation-entropy selection");
          break;
        case Stage::Train:
          os << "regression model; CGNSDE " << cfg_.train.epochs_phase1 << " + " << cfg_.train.epochs_phase2 << " epochs";
          break;
        case Stage::Assimilate:
          os << "filter test data with every model and the reference filter";
          break;
        case Stage::Evaluate:
          os << "metrics table and long-run statistics";
          break;
      }
      os << '\n';
    }
    return os.str();
  }

  void run() {
    if (opt_.write_files) std::filesystem::create_directories(cfg_.out_dir);
    for (auto s : kAllStages) {
      if (opt_.until && static_cast<int>(s) > static_cast<int>(*opt_.until)) break;
      log("stage " + std::string(to_string(s)));
      try {
        run_stage(s);
      } catch (const Error& e) {
        failed_ = {std::string(to_string(s)), e.what()};
        write_manifest();
        throw Error(e.code(), "stage " + std::string(to_string(s)) + ": " + e.message(), e.index());
      } catch (const std::exception& e) {
        failed_ = {std::string(to_string(s)), e.what()};
        write_manifest();
        throw;
      }
      completed_.push_back(std::string(to_string(s)));
    }
    write_manifest();
  }

  /// Hash of the resolved config without the output location.
  std::uint64_t config_hash() const {
    auto j = config_to_json(cfg_);
    j.erase("out_dir");
    return fnv1a64(j.dump());
  }

 private:
  ExperimentConfig cfg_;
  RunOptions opt_;
  Trajectory train_, test_;
  std::optional<CausationEntropyMatrix> cem_;
  StructureMask mask_;
  std::vector<StructureTerm> terms_;
  std::vector<std::vector<LatticeTerm>> lattice_;
  std::map<std::string, CgnModel> models_;
  std::map<std::string, PosteriorSeries> posteriors_;
  std::set<std::string> diverged_;
  std::optional<ReferenceResult> reference_;
  std::map<std::string, ModelMetrics> metrics_;
  std::vector<EpochRecord> history_;
  std::vector<std::string> files_;
  std::vector<std::string> completed_;
  std::optional<std::pair<std::string, std::string>> failed_;

  void log(const std::string& m) const {
    if (opt_.log) *opt_.log << "[" << cfg_.name << "] " << m << std::endl;
  }

  std::uint64_t seed_for(const std::string& stage) const { return derive_seed(cfg_.seed, stage); }

  template <class Fn>
  void emit(const std::string& name, Fn&& write) {
    if (!opt_.write_files) return;
    const auto path = (std::filesystem::path(cfg_.out_dir) / name).string();
    std::ofstream os(path);
    if (!os) throw Error(Errc::IoError, "cannot open " + path);
    write(os);
    if (!os) throw Error(Errc::IoError, "write failed for " + path);
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
  }

  void run_stage(Stage s) {
    switch (s) {
      case Stage::Data: stage_data(); break;
      case Stage::Identify: stage_identify(); break;
      case Stage::Train: stage_train(); break;
      case Stage::Assimilate: stage_assimilate(); break;
      case Stage::Evaluate: stage_evaluate(); break;
    }
  }

  void stage_data() {
    const auto& b = cfg_.benchmark;
    Rng rng(seed_for("data"));
    const std::size_t ns = cfg_.spinup_steps(), ntr = cfg_.train_steps(), nte = cfg_.test_steps();
    const auto all = euler_maruyama_sampled(benchmark_drift(b), benchmark_diffusion(b), default_initial_state(b),
                                            cfg_.data.dt, ns + ntr + nte, cfg_.data.substeps, rng);
    train_ = all.slice(ns, ntr + 1);
    test_ = all.slice(ns + ntr, nte + 1);
    emit("train.csv", [&](std::ostream& os) { write_trajectory_csv(train_, os); });
    emit("test.csv", [&](std::ostream& os) { write_trajectory_csv(test_, os); });
    log("generated " + std::to_string(train_.size()) + " training and " + std::to_string(test_.size()) + " test points");
  }

  std::vector<std::size_t> role_sites(std::size_t role) const {
    std::vector<std::size_t> out;
    const std::size_t n = cfg_.benchmark.dim(), period = cfg_.roles();
    for (std::size_t k = 0; k < n; ++k)
      if (k % period == role) out.push_back(k);
    return out;
  }

  void stage_identify() {
    using nlohmann::json;
    const auto& p = cfg_.partition;
    const std::size_t n = p.dim();
    json doc;
    doc["source"] = cfg_.structure.source == StructureSource::Manual ? "manual" : "causal";
    if (cfg_.structure.source == StructureSource::Manual) {
      terms_ = cfg_.structure.terms;
      lattice_ = cfg_.structure.lattice;
    } else if (!cfg_.is_lattice()) {
      std::vector<std::size_t> vars(n);
      for (std::size_t i = 0; i < n; ++i) vars[i] = i;
      std::vector<FunctionLibrary> libs;
      for (std::size_t r = 0; r < n; ++r) libs.push_back(generate_library(r, p, vars, false));
      cem_ = causation_entropy_matrix(train_, libs);
      mask_ = select_structure(*cem_, cfg_.structure.rule);
      terms_.clear();
      if (cfg_.structure.add_constant)
        for (std::size_t r = 0; r < n; ++r) terms_.push_back({r, {}});
      for (const auto& t : selected_terms(libs, mask_)) terms_.push_back(t);
      doc["selected"] = structure_json(*cem_, mask_);
    } else {
      CausationEntropyMatrix cem;
      lattice_.assign(cfg_.roles(), {});
      std::vector<std::vector<LatticeTerm>> libs;
      for (std::size_t r = 0; r < cfg_.roles(); ++r) {
        const auto sites = role_sites(r);
        libs.push_back(generate_lattice_library(p, sites.front(), 2, false));
        const bool hidden = p.u2_position(sites.front()).has_value();
        cem.rows.push_back(lattice_causation_entropy(train_, sites, libs.back(),
                                                     "role" + std::to_string(r + 1) + (hidden ? "(hidden)" : "(observed)")));
      }
      mask_ = select_structure(cem, cfg_.structure.rule);
      for (std::size_t r = 0; r < cfg_.roles(); ++r) {
        if (cfg_.structure.add_constant) lattice_[r].push_back({});
        for (std::size_t k = 0; k < libs[r].size(); ++k)
          if (mask_[r][k]) lattice_[r].push_back(libs[r][k]);
      }
      cem_ = std::move(cem);
      doc["selected"] = structure_json(*cem_, mask_);
    }
    if (cem_) emit("cem.csv", [&](std::ostream& os) { write_cem_csv(*cem_, os); });
    auto terms = json::array();
    if (cfg_.is_lattice()) {
      for (std::size_t r = 0; r < lattice_.size(); ++r)
        for (const auto& t : lattice_[r]) terms.push_back({{"role", r + 1}, {"term", lattice_label(t)}});
    } else {
      for (const auto& t : terms_) terms.push_back({{"row", state_name(t.row, n)}, {"term", monomial_label(t.factors, n)}});
    }
    doc["knowledge"] = terms;
    emit("structure.json", [&](std::ostream& os) { os << doc.dump(1) << '\n'; });
    log("knowledge terms: " + std::to_string(terms.size()));
  }

  CgnModel build_model(bool with_network, Rng& rng) const {
    if (cfg_.is_lattice())
      return l96_cgnsde(*cfg_.l96_case, cfg_.benchmark.dim(), lattice_, rng, with_network, cfg_.l96_widths);
    return single_network_cgnsde(cfg_.partition, terms_, rng, with_network, cfg_.hidden);
  }

  void save_bundle(const std::string& variant, const CgnModel& m, nlohmann::json extra) {
    ModelBundle b{m, std::move(extra)};
    b.provenance["variant"] = variant;
    b.provenance["config_hash"] = hex_u64(config_hash());
    b.provenance["seed"] = cfg_.seed;
    emit("model_" + variant + ".json", [&](std::ostream& os) { os << bundle_to_json(b).dump(1) << '\n'; });
  }

  void stage_train() {
    Rng unused(0);
    CgnModel krm = build_model(false, unused);
    fit_knowledge_coefficients(krm, train_);
    const Vec sk = estimate_model_sigma(krm, train_);
    set_model_sigma(krm, sk);
    models_["krm"] = krm;
    save_bundle("krm", krm, {});
    log("regression model fitted");

    Rng init(seed_for("init"));
    CgnModel m = build_model(true, init);
    fit_knowledge_coefficients(m, train_);
    Rng rng(seed_for("train"));
    auto res = train(std::move(m), train_, cfg_.train, rng);
    history_ = res.history;
    models_["cgnsde_noda"] = res.phase1_model;
    models_["cgnsde_da"] = res.model;
    auto last = [&](int phase) {
      for (auto it = history_.rbegin(); it != history_.rend(); ++it)
        if (it->phase == phase) return nlohmann::json{{"forecast", it->forecast}, {"total", it->total}};
      return nlohmann::json(nullptr);
    };
    save_bundle("cgnsde_noda", res.phase1_model, {{"phase1_final", last(1)}});
    save_bundle("cgnsde_da", res.model, {{"phase1_final", last(1)}, {"phase2_final", last(2)}});
    emit("loss_history.csv", [&](std::ostream& os) { write_history_csv(history_, os); });
    log("CGNSDE trained");
  }

  void stage_assimilate() {
    const auto obs = test_.select(cfg_.partition.observed);
    for (const char* v : kVariants) {
      try {
        posteriors_[v] = run_filter(models_.at(v), obs);
        emit(std::string("posterior_") + v + ".csv", [&](std::ostream& os) { write_posterior_csv(posteriors_[v], os); });
      } catch (const Error& e) {
        if (e.code() != Errc::NumericalBlowup && e.code() != Errc::CovarianceCollapse) throw;
        diverged_.insert(v);
        log(std::string(v) + ": filter diverged");
      }
    }
    reference_ = compute_reference(obs);
    if (reference_->posterior)
      emit("posterior_reference.csv", [&](std::ostream& os) { write_posterior_csv(*reference_->posterior, os); });
    if (reference_->method == "enkbf") {
      emit("enkbf.json", [&](std::ostream& os) {
        auto arr = nlohmann::json::array();
        for (std::size_t i = 0; i < reference_->sweep.size(); ++i) {
          auto r = enkbf_record(reference_->sweep[i]);
          r["da_mse"] = std::isnan(reference_->sweep_mse[i]) ? nlohmann::json(nullptr) : nlohmann::json(reference_->sweep_mse[i]);
          arr.push_back(r);
        }
        os << nlohmann::json{{"sweep", arr}}.dump(1) << '\n';
      });
    }
  }

  ReferenceResult compute_reference(const Trajectory& obs) const {
    ReferenceResult ref;
    const auto u2 = test_.select(cfg_.partition.unobserved).states;
    if (is_conditionally_gaussian(cfg_.benchmark, cfg_.partition)) {
      ref.method = "analytic";
      ref.posterior = run_filter(true_cgns_model(cfg_.benchmark, cfg_.partition), obs);
      return ref;
    }
    ref.method = "enkbf";
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cfg_.enkbf.inflations.size(); ++i) {
      const double a = cfg_.enkbf.inflations[i];
      Rng rng(seed_for("enkbf:" + std::to_string(i)));
      auto run = run_enkbf(cfg_.benchmark, cfg_.partition, obs, cfg_.enkbf.members, a, rng, cfg_.enkbf.substeps);
      double mse = std::numeric_limits<double>::quiet_NaN();
      if (!run.diverged) mse = posterior_metrics(u2, run.posterior, cfg_.eval.burn_in).da_mse;
      log("enkbf inflation " + format_double(a) + (run.diverged ? ": diverged" : ": DA MSE " + format_double(mse)));
      if (!run.diverged && mse < best) {
        best = mse;
        ref.posterior = run.posterior;
        ref.best_inflation = a;
      }
      ref.sweep_mse.push_back(mse);
      run.posterior = {};
      ref.sweep.push_back(std::move(run));
    }
    return ref;
  }

  void stage_evaluate() {
    const auto u2 = test_.select(cfg_.partition.unobserved).states;
    const std::size_t h = cfg_.horizon_steps(), nb = cfg_.eval.burn_in;
    for (const char* v : kVariants) {
      ModelMetrics m;
      const auto& model = models_.at(v);
      try {
        m.forecast_mse = forecast_mse_over_horizon(model, test_, h, cfg_.eval.stride) / static_cast<double>(model.dim());
      } catch (const Error& e) {
        if (e.code() != Errc::NumericalBlowup) throw;
        m.diverged = true;
      }
      if (posteriors_.count(v)) {
        const auto d = posterior_metrics(u2, posteriors_.at(v), nb);
        m.da_mse = d.da_mse;
        m.da_nll = d.da_nll;
      } else {
        m.diverged = true;
      }
      metrics_[v] = m;
    }
    ModelMetrics ref;
    if (reference_ && reference_->posterior) {
      const auto d = posterior_metrics(u2, *reference_->posterior, nb);
      ref.da_mse = d.da_mse;
      ref.da_nll = d.da_nll;
      if (reference_->method == "analytic")
        ref.forecast_mse = forecast_mse_over_horizon(true_cgns_model(cfg_.benchmark, cfg_.partition), test_, h,
                                                     cfg_.eval.stride) / static_cast<double>(test_.dim());
    } else {
      ref.diverged = true;
    }
    metrics_["reference"] = ref;
    emit("metrics.csv", [&](std::ostream& os) { write_metrics(os); });
    longrun();
  }

  void write_metrics(std::ostream& os) const {
    auto cell = [](double v, bool div) {
      if (std::isfinite(v)) return format_double(v);
      return std::string(div ? "diverged" : "");
    };
    os << "model,ForecastMSE,DaMSE,DaNLL\n";
    std::vector<std::string> rows(kVariants.begin(), kVariants.end());
    rows.push_back("reference");
    for (const auto& r : rows) {
      const auto& m = metrics_.at(r);
      const bool fdiv = m.diverged && r != "reference";
      os << r << ',' << cell(m.forecast_mse, fdiv) << ',' << cell(m.da_mse, m.diverged) << ','
         << cell(m.da_nll, m.diverged) << '\n';
    }
  }

  void longrun() {
    const std::size_t steps = cfg_.steps(cfg_.eval.longrun_units);
    if (steps < 2) return;
    std::vector<std::string> names{"truth"};
    for (const char* v : kVariants) names.push_back(v);
    std::vector<std::optional<Trajectory>> sims(names.size());
    const Vec x0 = test_.states.front();
    parallel_for(names.size(), thread_cap(), [&](std::size_t i) {
      Rng rng(seed_for("longrun:" + names[i]));
      if (i == 0) {
        try {
          sims[i] = euler_maruyama_sampled(benchmark_drift(cfg_.benchmark), benchmark_diffusion(cfg_.benchmark), x0,
                                           cfg_.data.dt, steps, cfg_.data.substeps, rng);
        } catch (const Error& e) {
          if (e.code() != Errc::NumericalBlowup) throw;
        }
      } else {
        sims[i] = simulate_model(models_.at(names[i]), x0, cfg_.data.dt, steps, rng, cfg_.data.substeps);
      }
    });
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto& name = names[i];
      if (!sims[i]) {
        emit("longrun_stats_" + name + ".csv", [&](std::ostream& os) { os << "diverged\n"; });
        log(name + ": long-run simulation blew up");
        continue;
      }
      const auto& t = *sims[i];
      emit("longrun_stats_" + name + ".csv",
           [&](std::ostream& os) { write_longrun_stats_csv(t, cfg_.eval.acf_max_lag_units, os); });
      emit("pdf_" + name + ".csv", [&](std::ostream& os) {
        os << "component,left,right,density\n";
        for (std::size_t c = 0; c < t.dim(); ++c) {
          const auto comp = t.component(c);
          try {
            const auto hst = histogram_pdf(comp, cfg_.eval.histogram_bins);
            for (std::size_t k = 0; k < hst.density.size(); ++k)
              os << c << ',' << format_double(hst.edges[k]) << ',' << format_double(hst.edges[k + 1]) << ','
                 << format_double(hst.density[k]) << '\n';
          } catch (const Error& e) {
            if (e.code() != Errc::DegenerateRange) throw;
          }
        }
      });
      emit("acf_" + name + ".csv", [&](std::ostream& os) {
        const auto lag = std::min(t.size() - 1, cfg_.steps(cfg_.eval.acf_max_lag_units));
        os << "component,lag,acf\n";
        for (std::size_t c = 0; c < t.dim(); ++c) {
          try {
            const auto a = acf(t.component(c), lag, t.dt);
            for (std::size_t k = 0; k < a.values.size(); ++k)
              os << c << ',' << format_double(a.lags[k]) << ',' << format_double(a.values[k]) << '\n';
          } catch (const Error& e) {
            if (e.code() != Errc::DegenerateRange) throw;
          }
        }
      });
    }
  }

  void write_manifest() {
    if (!opt_.write_files) return;
    using nlohmann::json;
    json files = json::array();
    for (const auto& f : files_) {
      const auto path = (std::filesystem::path(cfg_.out_dir) / f).string();
      const auto text = read_text_file(path);
      files.push_back({{"path", f}, {"bytes", text.size()}, {"fnv1a64", hex_u64(fnv1a64(text))}});
    }
    json m{{"name", cfg_.name},
           {"seed", cfg_.seed},
           {"config", config_to_json(cfg_)},
           {"config_hash", hex_u64(config_hash())},
           {"stages_completed", completed_},
           {"files", files}};
    m["failed_stage"] = failed_ ? json{{"stage", failed_->first}, {"error", failed_->second}} : json(nullptr);
    if (reference_) {
      m["reference"] = {{"method", reference_->method}};
      if (reference_->best_inflation) m["reference"]["best_inflation"] = *reference_->best_inflation;
    }
    const auto path = (std::filesystem::path(cfg_.out_dir) / "manifest.json").string();
    std::ofstream os(path);
    if (!os) throw Error(Errc::IoError, "cannot open " + path);
    os << m.dump(1) << '\n';
  }
};

}  // namespace cgnsde
