#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pvilab/tensor.hpp"

namespace pvilab {

enum class OptimizerKind { sgd, adamw };

OptimizerKind parse_optimizer(const std::string& name);
const char* optimizer_name(OptimizerKind kind);

struct AdamWSettings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Named parameters in insertion order, each flagged trainable or frozen.
// Frozen entries never receive gradients and never carry optimizer state.
class ParamStore {
public:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
        std::uint64_t steps = 0;
    };

    struct Entry {
        std::string name;
        Tensor value;
        bool trainable = true;
        Moments moments;
    };

    // Throws std::invalid_argument on duplicate names.
    Tensor& add(std::string name, Tensor value, bool trainable = true);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    const Entry& entry(const std::string& name) const;

    void set_trainable(const std::string& name, bool trainable);
    bool trainable(const std::string& name) const { return entry(name).trainable; }

    std::span<const Entry> entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::vector<std::string> names() const;

    void zero_grad();

    std::size_t count(const std::function<bool(const Entry&)>& pred) const;
    std::size_t total_count() const;
    std::size_t trainable_count() const;

    // FNV-1a over (name, dtype, shape, raw values) of entries matching `pred`.
    std::uint64_t hash(const std::function<bool(const Entry&)>& pred) const;
    std::uint64_t hash_frozen() const;
    std::uint64_t hash_all() const;

    // Deep copy of values and flags without grads, history, or optimizer state.
    ParamStore clone() const;

    // Applies one update to every trainable entry, then clears all grads.
    // Throws std::logic_error (and leaves the store untouched) when a
    // trainable entry has no grad.
    void optimizer_step(double lr, OptimizerKind kind, const AdamWSettings& adam = {});

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace pvilab
