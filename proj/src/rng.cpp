#include "pvilab/rng.hpp"

namespace pvilab {

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
    // splitmix64 over the base, folded with an FNV-1a hash of the label.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (h | 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Tensor randn(Rng& rng, Shape shape, double stddev, DType dtype) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(values), dtype);
}

}  // namespace pvilab
