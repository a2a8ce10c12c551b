#pragma once

// Flow-matching objective and fixed-grid Euler sampler.
//
//   a_t = (1 - t) eps + t a,   target velocity a - eps
//   loss = mean over batch of || v_hat(a_t, t) - (a - eps) ||^2

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "pvilab/injection.hpp"
#include "pvilab/rng.hpp"
#include "pvilab/tensor.hpp"

namespace pvilab {

inline constexpr std::size_t kDefaultEulerSteps = 16;

// v_hat for a batch: a_t [B, H, A], t (B values) -> [B, H, A].
using VelocityFn = std::function<Tensor(const Tensor& a_t, const std::vector<double>& t)>;

struct FlowBatch {
    Tensor actions;  // [B, H, A]
    Tensor noise;    // [B, H, A]
    std::vector<double> t;

    std::size_t size() const { return t.size(); }
};

// Elementwise (1 - t) eps + t a for any matching shapes.
Tensor interpolate(const Tensor& a, const Tensor& eps, double t);

// Per-sample interpolation over the leading batch axis.
Tensor interpolate_batch(const FlowBatch& batch);

// Draws noise ~ N(0, I) and t ~ U[0, 1] for the given targets.
FlowBatch make_flow_batch(const Tensor& actions, Rng& rng);

Tensor flow_matching_loss(const VelocityFn& velocity, const FlowBatch& batch);

Tensor flow_matching_loss(const PolicyModel& model, const Tensor& state, const ConditioningBundle& cond,
                          const FlowBatch& batch);

// a <- eps ~ N(0, I) of `shape`; a <- a + v_hat(a, k/K) / K for k = 0..K-1.
// Runs without recording gradients.
Tensor euler_sample(const VelocityFn& velocity, const Shape& shape, std::size_t steps, Rng& rng,
                    DType dtype = DType::f32);

// Same, starting from explicitly supplied noise.
Tensor euler_integrate(const VelocityFn& velocity, const Tensor& noise, std::size_t steps);

Tensor euler_sample(const PolicyModel& model, const Tensor& state, const ConditioningBundle& cond,
                    std::size_t steps, std::uint64_t seed);

}  // namespace pvilab
