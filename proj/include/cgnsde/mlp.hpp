#pragma once

// Feed-forward networks with tanh hidden layers and a linear output layer,
// plus the flat parameter store shared by networks and knowledge terms.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cgnsde/error.hpp"
#include "cgnsde/numerics.hpp"

namespace cgnsde {

/// Named contiguous block of trainable scalars.
struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;

  friend bool operator==(const ParamSegment&, const ParamSegment&) = default;
};

/// Flat vector of every trainable scalar. Segments tile [0, size()) in order.
class ParamVector {
 public:
  std::size_t add_segment(std::string name, std::size_t size, double init = 0.0) {
    const std::size_t off = values_.size();
    segments_.push_back({std::move(name), off, size});
    values_.resize(off + size, init);
    return off;
  }

  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  const std::vector<ParamSegment>& segments() const noexcept { return segments_; }

  const ParamSegment& segment(const std::string& name) const {
    for (const auto& s : segments_)
      if (s.name == name) return s;
    throw Error(Errc::IndexOutOfRange, "no parameter segment named '" + name + "'");
  }

  /// Flat index of (segment, position).
  std::size_t index(const std::string& name, std::size_t pos) const {
    const auto& s = segment(name);
    if (pos >= s.size) throw Error(Errc::IndexOutOfRange, "position outside segment '" + name + "'");
    return s.offset + pos;
  }

  void assign(std::span<const double> v) {
    if (v.size() != values_.size()) throw Error(Errc::DimensionMismatch, "parameter count differs");
    values_.assign(v.begin(), v.end());
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
  std::vector<ParamSegment> segments_;
};

struct MlpSpec {
  /// input, hidden..., output
  std::vector<std::size_t> widths;

  std::size_t inputs() const { return widths.front(); }
  std::size_t outputs() const { return widths.back(); }
  std::size_t layers() const { return widths.size() - 1; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
    return n;
  }

  void validate() const {
    if (widths.size() < 3) throw Error(Errc::ValidationError, "an MLP needs at least one hidden layer");
    for (auto w : widths)
      if (w == 0) throw Error(Errc::ValidationError, "layer widths must be >= 1");
  }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Glorot-uniform weights, zero biases. Layout per layer: weights (out x in,
/// row-major) then biases.
inline void mlp_init(const MlpSpec& spec, std::span<double> params, Rng& rng) {
  spec.validate();
  if (params.size() != spec.param_count()) throw Error(Errc::DimensionMismatch, "parameter span has wrong size");
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (std::size_t k = 0; k < in * out; ++k) params[off++] = bound * (2.0 * rng.uniform() - 1.0);
    for (std::size_t k = 0; k < out; ++k) params[off++] = 0.0;
  }
}

/// Layer activations kept for the backward pass; acts[0] is the input.
struct MlpCache {
  std::vector<Vec> acts;
};

inline void mlp_forward(std::span<const double> params, const MlpSpec& spec, std::span<const double> input,
                        MlpCache& cache) {
  if (input.size() != spec.inputs()) throw Error(Errc::DimensionMismatch, "network input width mismatch");
  cache.acts.resize(spec.widths.size());
  cache.acts[0].assign(input.begin(), input.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const double* w = params.data() + off;
    const double* b = w + in * out;
    const Vec& x = cache.acts[l];
    Vec& y = cache.acts[l + 1];
    y.resize(out);
    const bool hidden = l + 1 < spec.layers();
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      const double* wr = w + o * in;
      for (std::size_t i = 0; i < in; ++i) s += wr[i] * x[i];
      y[o] = hidden ? std::tanh(s) : s;
    }
    off += in * out + out;
  }
}

inline Vec mlp_forward(std::span<const double> params, const MlpSpec& spec, std::span<const double> input) {
  MlpCache cache;
  mlp_forward(params, spec, input, cache);
  return cache.acts.back();
}

/// Accumulates ∂(out_bar·y)/∂params into `param_grad` and, when non-empty,
/// ∂/∂input into `input_grad`.
inline void mlp_backward(std::span<const double> params, const MlpSpec& spec, const MlpCache& cache,
                         std::span<const double> out_bar, std::span<double> param_grad,
                         std::span<double> input_grad = {}) {
  Vec delta(out_bar.begin(), out_bar.end());
  std::size_t off = spec.param_count();
  for (std::size_t l = spec.layers(); l-- > 0;) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    off -= in * out + out;
    const double* w = params.data() + off;
    double* gw = param_grad.data() + off;
    double* gb = gw + in * out;
    const Vec& x = cache.acts[l];
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      gb[o] += d;
      if (d == 0.0) continue;
      double* gwr = gw + o * in;
      for (std::size_t i = 0; i < in; ++i) gwr[i] += d * x[i];
    }
    if (l == 0 && input_grad.empty()) break;
    Vec prev(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* wr = w + o * in;
      for (std::size_t i = 0; i < in; ++i) prev[i] += wr[i] * d;
    }
    if (l == 0) {
      for (std::size_t i = 0; i < in; ++i) input_grad[i] += prev[i];
    } else {
      // tanh' = 1 - a²
      for (std::size_t i = 0; i < in; ++i) prev[i] *= 1.0 - x[i] * x[i];
      delta = std::move(prev);
    }
  }
}

}  // namespace cgnsde
