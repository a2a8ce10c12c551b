#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "pvilab/tensor.hpp"

namespace pvilab {

using Rng = std::mt19937_64;

// Stable 64-bit mix of a base seed and a label, for independent streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

Tensor randn(Rng& rng, Shape shape, double stddev, DType dtype = DType::f32);

}  // namespace pvilab
