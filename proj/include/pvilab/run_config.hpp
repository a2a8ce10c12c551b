#pragma once

// Run configuration as flat "key = value" text with dotted section prefixes:
//
//   task.family = intercept
//   dit.hidden = 32
//   variant = pvi
//   encoder.kind = temporal
//   train.steps = 1500
//   flags.freeze_projector = false
//
// '#' starts a comment. Every key can be overridden with --key=value.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pvilab/dit.hpp"
#include "pvilab/encoders.hpp"
#include "pvilab/injection.hpp"
#include "pvilab/param_store.hpp"
#include "pvilab/taskbench.hpp"

namespace pvilab {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainSettings {
    std::size_t steps = 1500;
    std::size_t batch = 32;
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adamw;
    std::uint64_t seed = 1;
};

struct RunFlags {
    bool freeze_projector = false;
    bool zero_init = true;
};

struct RunConfig {
    TaskSpec task;
    DiTConfig dit;
    Variant variant = Variant::pvi;
    EncoderSpec encoder{EncoderKind::temporal, 8, 0, 16, 3};
    TrainSettings train;
    RunFlags flags;
    std::size_t sampler_k = 16;
    std::uint64_t vlm_seed = 11;
    std::uint64_t base_seed = 5;  // initialization of a freshly built base
    DType dtype = DType::f32;
    // families mixed during base pretraining
    std::vector<TaskFamily> pretrain_families{TaskFamily::reach, TaskFamily::intercept, TaskFamily::multiphase};

    // Applies one key; throws ConfigError on an unknown key or bad value.
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static const std::vector<std::string>& keys();

    // Copies task/encoder extents into the DiT config and checks consistency.
    void finalize();

    std::string to_text() const;
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);

    VariantOptions variant_options() const { return {flags.zero_init, flags.freeze_projector}; }
    bool has_aux() const { return encoder.kind != EncoderKind::none; }
};

// Applies PVILAB_SEED (train.seed) when the variable is set.
void apply_seed_env(RunConfig& cfg);

}  // namespace pvilab
