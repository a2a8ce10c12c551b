#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pvilab/dit.hpp"
#include "pvilab/injection.hpp"
#include "pvilab/rng.hpp"
#include "pvilab/tensor.hpp"

namespace testutil {

using namespace pvilab;

inline Tensor rand_tensor(Rng& rng, Shape shape, double std = 1.0, DType dt = DType::f64, bool grad = false) {
    Tensor t = randn(rng, std::move(shape), std, dt);
    if (grad) t.set_requires_grad(true);
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

// Small aux-bearing config used across the model tests.
inline DiTConfig small_config(std::size_t blocks = 2, std::size_t hidden = 16) {
    DiTConfig c;
    c.blocks = blocks;
    c.hidden = hidden;
    c.heads = 2;
    c.horizon = 4;
    c.action_dim = 2;
    c.state_dim = 2;
    c.cond_len = 3;
    c.cond_dim = 8;
    c.aux_len = 3;
    c.aux_dim = 6;
    c.mlp_ratio = 2;
    return c;
}

struct Inputs {
    Tensor state, a_t;
    std::vector<double> t;
    ConditioningBundle cond;
};

inline Inputs random_inputs(const DiTConfig& c, std::size_t batch, std::uint64_t seed, DType dt = DType::f64) {
    Rng rng(seed);
    Inputs in;
    in.state = rand_tensor(rng, {batch, c.state_dim}, 1.0, dt);
    in.a_t = rand_tensor(rng, {batch, c.horizon, c.action_dim}, 1.0, dt);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t b = 0; b < batch; ++b) in.t.push_back(u(rng));
    in.cond.z_vl = rand_tensor(rng, {batch, c.cond_len, c.cond_dim}, 1.0, dt);
    if (c.aux_len > 0) in.cond.z_aux = rand_tensor(rng, {batch, c.aux_len, c.aux_dim}, 1.0, dt);
    return in;
}

inline ParamStore make_base(const DiTConfig& c, std::uint64_t seed, DType dt = DType::f64) {
    ParamStore s;
    init_base(s, c, dt, seed);
    return s;
}

}  // namespace testutil
