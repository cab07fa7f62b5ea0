#pragma once

#include <cstdint>
#include <string_view>

#include "hierpath/tensor.hpp"

namespace hierpath {

/// splitmix64 finaliser; derives independent stream seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

/// Stable 64-bit FNV-1a hash of a string.
std::uint64_t fnv1a(std::string_view text);

/// N(0, stddev²) entries from a seeded mt19937_64.
Tensor gaussian_tensor(Shape shape, double stddev, std::uint64_t seed);

}  // namespace hierpath
