#include "pvilab/flow_match.hpp"

#include <stdexcept>
#include <string>

#include "pvilab/ops.hpp"

namespace pvilab {

namespace {

void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow time " + std::to_string(t) + " outside [0, 1]");
}

}  // namespace

Tensor interpolate(const Tensor& a, const Tensor& eps, double t) {
    check_time(t);
    if (a.shape() != eps.shape()) {
        throw ShapeError("interpolate: " + shape_str(a.shape()) + " vs " + shape_str(eps.shape()));
    }
    std::vector<double> out(a.numel());
    const auto av = a.data();
    const auto ev = eps.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * ev[i] + t * av[i];
    return Tensor::from(a.shape(), std::move(out), detail::promote(a.dtype(), eps.dtype()));
}

Tensor interpolate_batch(const FlowBatch& batch) {
    const auto& shape = batch.actions.shape();
    if (batch.noise.shape() != shape || shape.empty() || shape[0] != batch.t.size()) {
        throw ShapeError("flow batch: actions " + shape_str(shape) + ", noise " + shape_str(batch.noise.shape()) +
                         ", " + std::to_string(batch.t.size()) + " times");
    }
    const std::size_t per = batch.actions.numel() / shape[0];
    std::vector<double> out(batch.actions.numel());
    const auto av = batch.actions.data();
    const auto ev = batch.noise.data();
    for (std::size_t b = 0; b < shape[0]; ++b) {
        const double t = batch.t[b];
        check_time(t);
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = (1.0 - t) * ev[i] + t * av[i];
    }
    return Tensor::from(shape, std::move(out), batch.actions.dtype());
}

FlowBatch make_flow_batch(const Tensor& actions, Rng& rng) {
    if (actions.rank() == 0 || actions.dim(0) == 0) throw std::invalid_argument("flow batch: empty");
    FlowBatch batch;
    batch.actions = actions.detach();
    batch.noise = randn(rng, actions.shape(), 1.0, actions.dtype());
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    batch.t.resize(actions.dim(0));
    for (auto& t : batch.t) t = unif(rng);
    return batch;
}

Tensor flow_matching_loss(const VelocityFn& velocity, const FlowBatch& batch) {
    if (batch.size() == 0) throw std::invalid_argument("flow-matching loss: batch is empty");
    Tensor a_t = interpolate_batch(batch);
    Tensor target = sub(batch.actions, batch.noise);
    Tensor v = velocity(a_t, batch.t);
    if (v.shape() != target.shape()) {
        throw ShapeError("velocity " + shape_str(v.shape()) + " vs target " + shape_str(target.shape()));
    }
    // mean over all entries times H*A is the per-sample squared norm averaged over the batch
    const double per_sample = static_cast<double>(target.numel() / batch.size());
    return scale(mean_sq_error(v, target.detach()), per_sample);
}

Tensor flow_matching_loss(const PolicyModel& model, const Tensor& state, const ConditioningBundle& cond,
                          const FlowBatch& batch) {
    return flow_matching_loss(
        [&](const Tensor& a_t, const std::vector<double>& t) { return forward_velocity(model, state, a_t, t, cond); },
        batch);
}

Tensor euler_integrate(const VelocityFn& velocity, const Tensor& noise, std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("euler sampling needs K >= 1 steps");
    NoGradGuard no_grad;
    const std::size_t batch = noise.rank() > 0 ? noise.dim(0) : 1;
    std::vector<double> a(noise.data().begin(), noise.data().end());
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        Tensor cur = Tensor::from(noise.shape(), a, noise.dtype());
        std::vector<double> t(batch, static_cast<double>(k) * dt);
        Tensor v = velocity(cur, t);
        if (v.shape() != noise.shape()) {
            throw ShapeError("euler: velocity " + shape_str(v.shape()) + " vs state " + shape_str(noise.shape()));
        }
        const auto vv = v.data();
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += dt * vv[i];
    }
    return Tensor::from(noise.shape(), std::move(a), noise.dtype());
}

Tensor euler_sample(const VelocityFn& velocity, const Shape& shape, std::size_t steps, Rng& rng, DType dtype) {
    if (steps == 0) throw std::invalid_argument("euler sampling needs K >= 1 steps");
    return euler_integrate(velocity, randn(rng, shape, 1.0, dtype), steps);
}

Tensor euler_sample(const PolicyModel& model, const Tensor& state, const ConditioningBundle& cond,
                    std::size_t steps, std::uint64_t seed) {
    Rng rng(seed);
    const Shape shape{state.dim(0), model.config.horizon, model.config.action_dim};
    const DType dtype = model.params.get("dit.cond.w").dtype();
    return euler_sample(
        [&](const Tensor& a, const std::vector<double>& t) { return forward_velocity(model, state, a, t, cond); },
        shape, steps, rng, dtype);
}

}  // namespace pvilab
