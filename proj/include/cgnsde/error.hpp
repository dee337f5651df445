#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cgnsde {

enum class Errc {
  NotPositiveDefinite,
  InsufficientSamples,
  DimensionMismatch,
  UnknownBenchmark,
  NumericalBlowup,
  TooShort,
  CovarianceCollapse,
  IndexOutOfRange,
  DegenerateLibrary,
  RankDeficient,
  LengthMismatch,
  TapeOverflow,
  NonFiniteGradient,
  EnsembleCollapse,
  DegenerateRange,
  ParseError,
  ValidationError,
  IoError,
  SchemaVersionMismatch,
};

constexpr std::string_view to_string(Errc c) {
  switch (c) {
    case Errc::NotPositiveDefinite: return "NotPositiveDefinite";
    case Errc::InsufficientSamples: return "InsufficientSamples";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::UnknownBenchmark: return "UnknownBenchmark";
    case Errc::NumericalBlowup: return "NumericalBlowup";
    case Errc::TooShort: return "TooShort";
    case Errc::CovarianceCollapse: return "CovarianceCollapse";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::DegenerateLibrary: return "DegenerateLibrary";
    case Errc::RankDeficient: return "RankDeficient";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::TapeOverflow: return "TapeOverflow";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::EnsembleCollapse: return "EnsembleCollapse";
    case Errc::DegenerateRange: return "DegenerateRange";
    case Errc::ParseError: return "ParseError";
    case Errc::ValidationError: return "ValidationError";
    case Errc::IoError: return "IoError";
    case Errc::SchemaVersionMismatch: return "SchemaVersionMismatch";
  }
  return "Unknown";
}

/// Library-wide exception. `index()` carries the failing time step, epoch or
/// matrix position when the failure is tied to one.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), index_(index), message_(what) {}

  Errc code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& message() const noexcept { return message_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  Errc code_;
  std::optional<std::size_t> index_;
  std::string message_;
};

}  // namespace cgnsde
