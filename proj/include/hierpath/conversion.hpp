#pragma once

// Conversion of per-layer CNN feature maps (D×W×H) to length-p vectors.
//
// Three converters are provided: linear (three mode products), convolutional
// (one strided convolution) and pooling (parameter-free pooling followed by
// mode products). The dimension solvers enumerate convolution and pooling
// parameters that land exactly on p for square maps.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hierpath/autodiff.hpp"

namespace hierpath {

/// S_1..S_T, each a set of 1-based CNN layer indices.
struct LayerSchedule {
  std::vector<std::vector<std::size_t>> steps;
};

enum class ScheduleOrder { increasing, decreasing };

/// Throws ScheduleError naming the offending step pair (n, n+1).
void validate_schedule(const LayerSchedule& schedule, std::size_t num_layers,
                       std::size_t num_steps, ScheduleOrder order = ScheduleOrder::increasing);

/// One layer per step using the last T layers, deepest last; `reverse`
/// puts the deepest layer first.
LayerSchedule default_schedule(std::size_t num_layers, std::size_t num_steps, bool reverse);

enum class ConversionKind { linear, conv, pool };

std::string to_string(ConversionKind kind);
ConversionKind conversion_kind_from_string(const std::string& s);

struct FactorShape {
  std::size_t m = 1, n = 1, v = 1;
  std::size_t product() const { return m * n * v; }
};

struct ConvSpec {
  std::size_t filter = 1, filters = 1, stride = 1, padding = 0;
};

struct PoolSpec {
  std::size_t window = 1, stride = 1;
  PoolKind kind = PoolKind::avg;
};

struct ConversionSpec {
  ConversionKind kind = ConversionKind::linear;
  std::size_t target_p = 0;
  Shape input;          // D, W, H of the layer being converted
  FactorShape factors;  // linear and pool
  ConvSpec conv;
  PoolSpec pool;
};

/// m = largest divisor of p not above `depth`, then n·v = p/m split as
/// evenly as divisibility allows (n ≤ v).
FactorShape allocate_factors(std::size_t depth, std::size_t p);

/// Builds a spec for one layer shape. Conv and pool parameters come from the
/// first solver tuple; pooling falls back to a 2×2-output disjoint window
/// followed by factor matrices when no exact tuple exists.
ConversionSpec make_conversion_spec(ConversionKind kind, const Shape& input, std::size_t p,
                                    PoolKind pool_kind = PoolKind::avg);

/// Trainable parameters α_s of one converter.
struct Converter {
  ConversionSpec spec;
  Tensor u1, u2, u3;        // linear / pool factors
  Tensor conv_w, conv_b;    // conv filters and bias

  static Converter create(const ConversionSpec& spec, std::uint64_t seed);

  Var forward(Tape& tape, Var feature_map) const;
  std::vector<std::pair<std::string, Tensor*>> parameters();
};

/// vec(a ×₁ U¹ ×₂ U² ×₃ U³).
Var linear_convert(Var a, Var u1, Var u2, Var u3);
/// vec(Conv(a)), checked to produce exactly `target_p` values.
Var conv_convert(Var a, Var filters, const Var* bias, const ConvSpec& spec,
                 std::size_t target_p);
/// vec(Pool(a) ×₁ U¹ ×₂ U² ×₃ U³).
Var pool_convert(Var a, const PoolSpec& pool, Var u1, Var u2, Var u3);

/// u_t: elementwise mean of the converted vectors of one step.
Var aggregate_step(std::span<const Var> features);

struct ConvSolution {
  std::size_t filter = 0, filters = 0, stride = 0, padding = 0;
  int case_id = 0;
  bool operator==(const ConvSolution&) const = default;
};

struct PoolSolution {
  std::size_t window = 0, stride = 0;
  int case_id = 0;
  bool operator==(const PoolSolution&) const = default;
};

/// All (F, K, G, Z) with K·W_out² = p, grouped by the four square-map cases;
/// strides bounded by F and padding by F−1. Sorted by (F, G, Z, K).
std::vector<ConvSolution> solve_conv_dims(std::size_t depth, std::size_t width,
                                          std::size_t height, std::size_t p);

/// All (F, G) with D·W_out² = p: the disjoint case F = G = W·√(D/p), and
/// the strided case 1 < G < F < W. Sorted by (F, G).
std::vector<PoolSolution> solve_pool_dims(std::size_t depth, std::size_t width,
                                          std::size_t height, std::size_t p);

}  // namespace hierpath
