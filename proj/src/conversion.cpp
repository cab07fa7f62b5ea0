#include "hierpath/conversion.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "hierpath/error.hpp"
#include "hierpath/random.hpp"

namespace hierpath {

void validate_schedule(const LayerSchedule& schedule, std::size_t num_layers,
                       std::size_t num_steps, ScheduleOrder order) {
  if (schedule.steps.size() != num_steps) {
    throw ScheduleError("schedule has " + std::to_string(schedule.steps.size()) +
                        " steps, expected T = " + std::to_string(num_steps));
  }
  for (std::size_t t = 0; t < schedule.steps.size(); ++t) {
    const auto& s = schedule.steps[t];
    if (s.empty()) throw ScheduleError("S_" + std::to_string(t + 1) + " is empty");
    for (auto layer : s) {
      if (layer < 1 || layer > num_layers) {
        throw ScheduleError("S_" + std::to_string(t + 1) + " names layer " +
                            std::to_string(layer) + " outside 1.." + std::to_string(num_layers));
      }
    }
  }
  for (std::size_t t = 0; t + 1 < schedule.steps.size(); ++t) {
    const auto& a = schedule.steps[t];
    const auto& b = schedule.steps[t + 1];
    const bool ok = order == ScheduleOrder::increasing
                        ? *std::max_element(a.begin(), a.end()) < *std::min_element(b.begin(), b.end())
                        : *std::min_element(a.begin(), a.end()) > *std::max_element(b.begin(), b.end());
    if (!ok) {
      throw ScheduleError("steps (" + std::to_string(t + 1) + ", " + std::to_string(t + 2) +
                          ") are not " +
                          (order == ScheduleOrder::increasing ? "increasing" : "decreasing"));
    }
  }
}

LayerSchedule default_schedule(std::size_t num_layers, std::size_t num_steps, bool reverse) {
  if (num_steps == 0 || num_steps > num_layers) {
    throw ScheduleError("cannot place " + std::to_string(num_steps) + " steps on " +
                        std::to_string(num_layers) + " layers one layer per step");
  }
  LayerSchedule schedule;
  for (std::size_t t = 0; t < num_steps; ++t) {
    const std::size_t layer = reverse ? num_layers - t : num_layers - num_steps + t + 1;
    schedule.steps.push_back({layer});
  }
  return schedule;
}

std::string to_string(ConversionKind kind) {
  switch (kind) {
    case ConversionKind::linear: return "linear";
    case ConversionKind::conv: return "conv";
    case ConversionKind::pool: return "pool";
  }
  return "?";
}

ConversionKind conversion_kind_from_string(const std::string& s) {
  if (s == "linear") return ConversionKind::linear;
  if (s == "conv") return ConversionKind::conv;
  if (s == "pool") return ConversionKind::pool;
  throw ConfigError("unknown conversion kind '" + s + "' (linear|conv|pool)");
}

namespace {

std::size_t largest_divisor_at_most(std::size_t value, std::size_t bound) {
  for (std::size_t d = std::min(value, bound); d > 1; --d) {
    if (value % d == 0) return d;
  }
  return 1;
}

std::size_t isqrt(std::size_t x) {
  auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(x)));
  while (r * r > x) --r;
  while ((r + 1) * (r + 1) <= x) ++r;
  return r;
}

Tensor factor_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == cols) return Tensor::identity(rows);
  return gaussian_tensor(Shape{rows, cols}, 1.0 / std::sqrt(static_cast<double>(cols)), seed);
}

}  // namespace

FactorShape allocate_factors(std::size_t depth, std::size_t p) {
  if (p == 0) throw UsageError("target p must be positive");
  FactorShape f;
  f.m = largest_divisor_at_most(p, depth);
  const std::size_t rest = p / f.m;
  f.n = largest_divisor_at_most(rest, isqrt(rest));
  f.v = rest / f.n;
  return f;
}

ConversionSpec make_conversion_spec(ConversionKind kind, const Shape& input, std::size_t p,
                                    PoolKind pool_kind) {
  if (input.size() != 3) throw DimensionError("conversion input must be D×W×H");
  ConversionSpec spec;
  spec.kind = kind;
  spec.target_p = p;
  spec.input = input;
  const std::size_t D = input[0], W = input[1], H = input[2];
  switch (kind) {
    case ConversionKind::linear:
      spec.factors = allocate_factors(D, p);
      break;
    case ConversionKind::conv: {
      const auto solutions = solve_conv_dims(D, W, H, p);
      if (solutions.empty()) {
        throw ConfigError("no convolution parameters map " + shape_string(input) + " to p = " +
                          std::to_string(p));
      }
      const auto& s = solutions.front();
      spec.conv = {s.filter, s.filters, s.stride, s.padding};
      break;
    }
    case ConversionKind::pool: {
      spec.pool.kind = pool_kind;
      std::vector<PoolSolution> solutions;
      if (W == H) solutions = solve_pool_dims(D, W, H, p);
      if (!solutions.empty()) {
        spec.pool.window = solutions.front().window;
        spec.pool.stride = solutions.front().stride;
        const std::size_t out = pool_output_extent(W, spec.pool.window, spec.pool.stride);
        spec.factors = {D, out, out};
      } else {
        const std::size_t window = (W % 2 == 0 && H == W && W >= 2) ? W / 2 : 1;
        spec.pool.window = spec.pool.stride = window;
        spec.factors = allocate_factors(D, p);
      }
      break;
    }
  }
  return spec;
}

Converter Converter::create(const ConversionSpec& spec, std::uint64_t seed) {
  Converter c;
  c.spec = spec;
  const std::size_t D = spec.input.at(0), W = spec.input.at(1), H = spec.input.at(2);
  switch (spec.kind) {
    case ConversionKind::linear:
      c.u1 = factor_init(spec.factors.m, D, mix_seed(seed, 1));
      c.u2 = factor_init(spec.factors.n, W, mix_seed(seed, 2));
      c.u3 = factor_init(spec.factors.v, H, mix_seed(seed, 3));
      break;
    case ConversionKind::pool: {
      const std::size_t Wp = pool_output_extent(W, spec.pool.window, spec.pool.stride);
      const std::size_t Hp = pool_output_extent(H, spec.pool.window, spec.pool.stride);
      c.u1 = factor_init(spec.factors.m, D, mix_seed(seed, 1));
      c.u2 = factor_init(spec.factors.n, Wp, mix_seed(seed, 2));
      c.u3 = factor_init(spec.factors.v, Hp, mix_seed(seed, 3));
      break;
    }
    case ConversionKind::conv: {
      const double fan_in = static_cast<double>(D * spec.conv.filter * spec.conv.filter);
      c.conv_w = gaussian_tensor(Shape{spec.conv.filters, D, spec.conv.filter, spec.conv.filter},
                                 std::sqrt(2.0 / fan_in), mix_seed(seed, 4));
      c.conv_b = Tensor(Shape{spec.conv.filters});
      break;
    }
  }
  for (Tensor* t : {&c.u1, &c.u2, &c.u3, &c.conv_w, &c.conv_b}) t->set_requires_grad(true);
  return c;
}

Var Converter::forward(Tape& tape, Var feature_map) const {
  if (feature_map.shape() != spec.input) {
    throw DimensionError("converter expects " + shape_string(spec.input) + ", got " +
                         shape_string(feature_map.shape()));
  }
  switch (spec.kind) {
    case ConversionKind::linear:
      return linear_convert(feature_map, tape.parameter(u1), tape.parameter(u2),
                            tape.parameter(u3));
    case ConversionKind::pool:
      return pool_convert(feature_map, spec.pool, tape.parameter(u1), tape.parameter(u2),
                          tape.parameter(u3));
    case ConversionKind::conv: {
      Var b = tape.parameter(conv_b);
      return conv_convert(feature_map, tape.parameter(conv_w), &b, spec.conv, spec.target_p);
    }
  }
  throw UsageError("unknown conversion kind");
}

std::vector<std::pair<std::string, Tensor*>> Converter::parameters() {
  if (spec.kind == ConversionKind::conv) return {{"conv_w", &conv_w}, {"conv_b", &conv_b}};
  return {{"u1", &u1}, {"u2", &u2}, {"u3", &u3}};
}

Var linear_convert(Var a, Var u1, Var u2, Var u3) {
  return vec(mode_k_product(mode_k_product(mode_k_product(a, u1, 1), u2, 2), u3, 3));
}

Var conv_convert(Var a, Var filters, const Var* bias, const ConvSpec& spec,
                 std::size_t target_p) {
  const auto& s = a.shape();
  if (s.size() != 3) throw DimensionError("conv_convert input must be D×W×H");
  const std::size_t W = s[1], H = s[2];
  int case_id = 0;
  if (spec.filter == W) case_id = 1;
  else if (spec.filter == spec.stride) case_id = 2;
  else if (spec.stride == 1) case_id = 3;
  else case_id = 4;
  const std::size_t Wo = conv_output_extent(W, spec.filter, spec.stride, spec.padding);
  const std::size_t Ho = conv_output_extent(H, spec.filter, spec.stride, spec.padding);
  const std::size_t produced = spec.filters * Wo * Ho;
  if (produced != target_p) {
    throw DimensionError("convolutional conversion (case " + std::to_string(case_id) +
                         ": F=" + std::to_string(spec.filter) + ", K=" +
                         std::to_string(spec.filters) + ", G=" + std::to_string(spec.stride) +
                         ", Z=" + std::to_string(spec.padding) + ") yields " +
                         std::to_string(spec.filters) + "·" + std::to_string(Wo) + "·" +
                         std::to_string(Ho) + " = " + std::to_string(produced) +
                         ", not p = " + std::to_string(target_p));
  }
  if (filters.shape().at(0) != spec.filters || filters.shape().at(2) != spec.filter) {
    throw DimensionError("conv_convert: filters " + shape_string(filters.shape()) +
                         " do not match the spec");
  }
  Var out = conv2d(a, filters, spec.stride, spec.padding);
  if (bias != nullptr) out = add_channel_bias(out, *bias);
  return vec(out);
}

Var pool_convert(Var a, const PoolSpec& pool, Var u1, Var u2, Var u3) {
  return linear_convert(pool2d(a, pool.window, pool.stride, pool.kind), u1, u2, u3);
}

Var aggregate_step(std::span<const Var> features) {
  if (features.empty()) throw ScheduleError("aggregate_step over an empty layer set");
  Var total = features[0];
  for (std::size_t i = 1; i < features.size(); ++i) {
    if (features[i].shape() != features[0].shape()) {
      throw DimensionError("aggregate_step: vectors of shape " +
                           shape_string(features[0].shape()) + " and " +
                           shape_string(features[i].shape()));
    }
    total = add(total, features[i]);
  }
  if (features.size() == 1) return total;
  return scale(total, 1.0 / static_cast<double>(features.size()));
}

std::vector<ConvSolution> solve_conv_dims(std::size_t depth, std::size_t width,
                                          std::size_t height, std::size_t p) {
  (void)depth;
  if (width != height) {
    throw UsageError("convolution solver needs a square map, got " + std::to_string(width) +
                     "×" + std::to_string(height));
  }
  if (width == 0 || p == 0) throw UsageError("width and p must be positive");
  const std::size_t W = width;
  std::vector<ConvSolution> out;
  const auto emit = [&](std::size_t F, std::size_t G, std::size_t Z, std::size_t side, int c) {
    const std::size_t area = side * side;
    if (area == 0 || p % area != 0) return;
    out.push_back({F, p / area, G, Z, c});
  };
  // Case 1: F = W, Z = 0, K = p; the stride is free (bounded by F).
  for (std::size_t G = 1; G <= W; ++G) out.push_back({W, p, G, 0, 1});
  for (std::size_t F = 1; F < W; ++F) {
    // Case 2: F = G < W, side = (W + 2Z) / F.
    for (std::size_t Z = 0; Z < F; ++Z) {
      if ((W + 2 * Z) % F == 0) emit(F, F, Z, (W + 2 * Z) / F, 2);
    }
    // Case 3: G = 1 ≠ F, Z = 0, side = W − F + 1.
    if (F != 1) emit(F, 1, 0, W - F + 1, 3);
    // Case 4: 1 < G < F, side = (W − F + 2Z) / G + 1.
    for (std::size_t G = 2; G < F; ++G) {
      for (std::size_t Z = 0; Z < F; ++Z) {
        if ((W - F + 2 * Z) % G == 0) emit(F, G, Z, (W - F + 2 * Z) / G + 1, 4);
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const ConvSolution& a, const ConvSolution& b) {
    return std::tie(a.filter, a.stride, a.padding, a.filters) <
           std::tie(b.filter, b.stride, b.padding, b.filters);
  });
  return out;
}

std::vector<PoolSolution> solve_pool_dims(std::size_t depth, std::size_t width,
                                          std::size_t height, std::size_t p) {
  if (width != height) {
    throw UsageError("pooling solver needs a square map, got " + std::to_string(width) + "×" +
                     std::to_string(height));
  }
  if (width == 0 || depth == 0 || p == 0) throw UsageError("depth, width and p must be positive");
  const std::size_t D = depth, W = width;
  std::vector<PoolSolution> out;
  // Case 1: F = G = W·√(D/p), i.e. F² = D·W²/p with F | W.
  const std::size_t num = D * W * W;
  if (num % p == 0) {
    const std::size_t sq = num / p;
    const std::size_t F = isqrt(sq);
    if (F >= 1 && F * F == sq && F <= W && W % F == 0) out.push_back({F, F, 1});
  }
  // Case 2: 1 < G < F < W with D·((W − F)/G + 1)² = p.
  for (std::size_t F = 3; F < W; ++F) {
    for (std::size_t G = 2; G < F; ++G) {
      if ((W - F) % G != 0) continue;
      const std::size_t side = (W - F) / G + 1;
      if (D * side * side == p) out.push_back({F, G, 2});
    }
  }
  std::sort(out.begin(), out.end(), [](const PoolSolution& a, const PoolSolution& b) {
    return std::tie(a.window, a.stride) < std::tie(b.window, b.stride);
  });
  return out;
}

}  // namespace hierpath
