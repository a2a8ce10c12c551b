#include "pvilab/param_store.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <utility>

namespace pvilab {

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adamw") return OptimizerKind::adamw;
    throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd or adamw)");
}

const char* optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adamw"; }

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Tensor& ParamStore::add(std::string name, Tensor value, bool trainable) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    value.set_requires_grad(trainable);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value), trainable, {}});
    return entries_.back().value;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second];
}

const Tensor& ParamStore::get(const std::string& name) const { return entry(name).value; }

Tensor& ParamStore::get(const std::string& name) {
    return const_cast<Entry&>(std::as_const(*this).entry(name)).value;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
    auto& e = const_cast<Entry&>(entry(name));
    e.trainable = trainable;
    e.value.set_requires_grad(trainable);
    if (!trainable) {
        e.moments = {};
        e.value.zero_grad();
    }
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
}

std::size_t ParamStore::count(const std::function<bool(const Entry&)>& pred) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (pred(e)) n += e.value.numel();
    }
    return n;
}

std::size_t ParamStore::total_count() const {
    return count([](const Entry&) { return true; });
}

std::size_t ParamStore::trainable_count() const {
    return count([](const Entry& e) { return e.trainable; });
}

std::uint64_t ParamStore::hash(const std::function<bool(const Entry&)>& pred) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        h = fnv1a({static_cast<const unsigned char*>(p), n}, h);
    };
    for (const auto& e : entries_) {
        if (!pred(e)) continue;
        mix(e.name.data(), e.name.size());
        const auto dt = static_cast<std::uint8_t>(e.value.dtype());
        mix(&dt, 1);
        for (auto extent : e.value.shape()) {
            const auto x = static_cast<std::uint64_t>(extent);
            mix(&x, sizeof x);
        }
        const auto values = e.value.data();
        mix(values.data(), values.size() * sizeof(double));
    }
    return h;
}

std::uint64_t ParamStore::hash_frozen() const {
    return hash([](const Entry& e) { return !e.trainable; });
}

std::uint64_t ParamStore::hash_all() const {
    return hash([](const Entry&) { return true; });
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& e : entries_) out.add(e.name, e.value.detach(), e.trainable);
    return out;
}

void ParamStore::optimizer_step(double lr, OptimizerKind kind, const AdamWSettings& adam) {
    for (const auto& e : entries_) {
        if (e.trainable && !e.value.has_grad()) {
            throw std::logic_error("optimizer step: trainable parameter '" + e.name + "' has no gradient");
        }
    }
    for (auto& e : entries_) {
        if (!e.trainable) {
            e.value.zero_grad();
            continue;
        }
        auto& impl = e.value.impl();
        const auto& g = impl.grad;
        auto& w = impl.data;
        if (kind == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        } else {
            auto& mo = e.moments;
            if (mo.m.empty()) {
                mo.m.assign(w.size(), 0.0);
                mo.v.assign(w.size(), 0.0);
            }
            ++mo.steps;
            const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(mo.steps));
            const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(mo.steps));
            for (std::size_t i = 0; i < w.size(); ++i) {
                mo.m[i] = adam.beta1 * mo.m[i] + (1.0 - adam.beta1) * g[i];
                mo.v[i] = adam.beta2 * mo.v[i] + (1.0 - adam.beta2) * g[i] * g[i];
                const double mhat = mo.m[i] / bc1;
                const double vhat = mo.v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + adam.eps) + adam.weight_decay * w[i]);
            }
        }
        impl.round_to_dtype();
        e.value.zero_grad();
    }
}

}  // namespace pvilab
