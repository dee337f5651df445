#pragma once

// JSON model bundles. Every scalar is stored as a C99 hex-float string so a
// save/load cycle is bitwise exact.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "cgnsde/error.hpp"
#include "cgnsde/model.hpp"

namespace cgnsde {

inline constexpr int kBundleSchemaVersion = 1;

inline std::string hex_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_hex_double(const std::string& s, const std::string& field) {
  if (s.empty()) throw Error(Errc::ParseError, "empty number in '" + field + "'");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw Error(Errc::ParseError, "malformed number '" + s + "' in '" + field + "'");
  return v;
}

namespace detail {

inline nlohmann::json hex_array(std::span<const double> v) {
  auto a = nlohmann::json::array();
  for (double x : v) a.push_back(hex_double(x));
  return a;
}

inline Vec parse_hex_array(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw Error(Errc::ValidationError, "'" + field + "' must be an array");
  Vec v;
  v.reserve(j.size());
  for (const auto& e : j) {
    if (!e.is_string()) throw Error(Errc::ValidationError, "'" + field + "' entries must be hex strings");
    v.push_back(parse_hex_double(e.get<std::string>(), field));
  }
  return v;
}

inline nlohmann::json optional_index(const std::optional<std::size_t>& i) {
  return i ? nlohmann::json(*i) : nlohmann::json(nullptr);
}

inline std::optional<std::size_t> parse_optional_index(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::size_t>();
}

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw Error(Errc::ValidationError, where + ": missing field '" + key + "'");
  return j.at(key);
}

}  // namespace detail

inline nlohmann::json model_to_json(const CgnModel& m) {
  using nlohmann::json;
  json j;
  j["partition"] = {{"observed", m.partition.observed}, {"unobserved", m.partition.unobserved}};
  auto segs = json::array();
  for (const auto& s : m.params.segments()) segs.push_back({{"name", s.name}, {"offset", s.offset}, {"size", s.size}});
  j["parameters"] = {{"segments", segs}, {"values", detail::hex_array(m.params.values())}};
  auto kn = json::array();
  for (const auto& t : m.terms.knowledge)
    kn.push_back({{"row", t.row}, {"u1_factors", t.u1_factors}, {"u2_factor", detail::optional_index(t.u2_factor)},
                  {"coef", t.coef}, {"label", t.label}});
  j["knowledge"] = kn;
  auto nets = json::array();
  for (const auto& n : m.terms.networks) {
    auto sites = json::array();
    for (const auto& s : n.sites) {
      auto outs = json::array();
      for (const auto& o : s.outputs) outs.push_back({{"row", o.row}, {"u2_factor", detail::optional_index(o.u2_factor)}});
      sites.push_back({{"inputs", s.inputs}, {"outputs", outs}});
    }
    nets.push_back({{"name", n.name}, {"widths", n.spec.widths}, {"offset", n.offset}, {"sites", sites}});
  }
  j["networks"] = nets;
  j["sigma1"] = detail::hex_array(m.sigma1);
  j["sigma2"] = detail::hex_array(m.sigma2);
  return j;
}

inline CgnModel model_from_json(const nlohmann::json& j) {
  using detail::require;
  CgnModel m;
  try {
    const auto& part = require(j, "partition", "model");
    m.partition.observed = require(part, "observed", "partition").get<std::vector<std::size_t>>();
    m.partition.unobserved = require(part, "unobserved", "partition").get<std::vector<std::size_t>>();

    const auto& params = require(j, "parameters", "model");
    const Vec values = detail::parse_hex_array(require(params, "values", "parameters"), "parameters.values");
    for (const auto& s : require(params, "segments", "parameters")) {
      const auto name = require(s, "name", "segment").get<std::string>();
      const auto off = require(s, "offset", "segment").get<std::size_t>();
      const auto size = require(s, "size", "segment").get<std::size_t>();
      if (off != m.params.size()) throw Error(Errc::ValidationError, "parameter segments must tile the vector in order");
      m.params.add_segment(name, size);
    }
    if (m.params.size() != values.size()) throw Error(Errc::ValidationError, "parameter count differs from segments");
    m.params.assign(values);

    for (const auto& t : require(j, "knowledge", "model")) {
      KnowledgeTerm k;
      k.row = require(t, "row", "knowledge").get<std::size_t>();
      k.u1_factors = require(t, "u1_factors", "knowledge").get<std::vector<std::size_t>>();
      k.u2_factor = detail::parse_optional_index(require(t, "u2_factor", "knowledge"));
      k.coef = require(t, "coef", "knowledge").get<std::size_t>();
      k.label = require(t, "label", "knowledge").get<std::string>();
      m.terms.knowledge.push_back(std::move(k));
    }
    for (const auto& n : require(j, "networks", "model")) {
      NeuralBlock b;
      b.name = require(n, "name", "network").get<std::string>();
      b.spec.widths = require(n, "widths", "network").get<std::vector<std::size_t>>();
      b.offset = require(n, "offset", "network").get<std::size_t>();
      for (const auto& s : require(n, "sites", "network")) {
        NeuralSite site;
        site.inputs = require(s, "inputs", "site").get<std::vector<std::size_t>>();
        for (const auto& o : require(s, "outputs", "site"))
          site.outputs.push_back({require(o, "row", "output").get<std::size_t>(),
                                  detail::parse_optional_index(require(o, "u2_factor", "output"))});
        b.sites.push_back(std::move(site));
      }
      m.terms.networks.push_back(std::move(b));
    }
    if (!j.contains("sigma1") || !j.contains("sigma2"))
      throw Error(Errc::ValidationError, "model: missing noise amplitudes (sigma1/sigma2)");
    m.sigma1 = detail::parse_hex_array(j.at("sigma1"), "sigma1");
    m.sigma2 = detail::parse_hex_array(j.at("sigma2"), "sigma2");
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ValidationError, std::string("model: ") + e.what());
  }
  m.validate();
  m.validate_noise();
  return m;
}

/// A model plus free-form provenance (config hash, seed, losses).
struct ModelBundle {
  CgnModel model;
  nlohmann::json provenance = nlohmann::json::object();
};

inline nlohmann::json bundle_to_json(const ModelBundle& b) {
  return {{"schema_version", kBundleSchemaVersion}, {"model", model_to_json(b.model)}, {"provenance", b.provenance}};
}

inline ModelBundle bundle_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema_version") || !j.at("schema_version").is_number_integer())
    throw Error(Errc::SchemaVersionMismatch, "bundle has no schema_version");
  const int v = j.at("schema_version").get<int>();
  if (v != kBundleSchemaVersion)
    throw Error(Errc::SchemaVersionMismatch,
                "bundle schema " + std::to_string(v) + ", expected " + std::to_string(kBundleSchemaVersion));
  ModelBundle b;
  b.model = model_from_json(detail::require(j, "model", "bundle"));
  if (j.contains("provenance")) b.provenance = j.at("provenance");
  return b;
}

inline void save_model(const ModelBundle& b, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(Errc::IoError, "cannot open " + path + " for writing");
  os << bundle_to_json(b).dump(1) << '\n';
  if (!os) throw Error(Errc::IoError, "write failed for " + path);
}

/// Parse errors carry the 1-based line of the failure.
inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i)
      if (text[i] == '\n') ++line;
    throw Error(Errc::ParseError, what + ":" + std::to_string(line) + ": " + e.what(), line);
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline ModelBundle load_model(const std::string& path) {
  return bundle_from_json(parse_json_text(read_text_file(path), path));
}

}  // namespace cgnsde
