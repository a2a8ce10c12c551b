#pragma once

// Conditioning architectures built around one pretrained base: the plain
// fine-tuned baseline, the dual-pathway plug-in (copy branch + zero-init
// per-layer injection), and four rival ways of feeding auxiliary features
// into the action expert. Each variant owns a freeze plan naming exactly
// the parameters it optimizes.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "pvilab/dit.hpp"
#include "pvilab/param_store.hpp"
#include "pvilab/tensor.hpp"

namespace pvilab {

enum class Variant { baseline, pvi, concat, controlnet, referencenet, controlvla };

Variant parse_variant(const std::string& name);
const char* variant_name(Variant v);
const std::vector<Variant>& all_variants();
bool uses_aux(Variant v);
// Parameter-name prefix of the variant's plug-in parameters ("" for baseline).
std::string plugin_prefix(Variant v);

struct VariantOptions {
    // Zero-initialize projector / injection / fusion / K_z,V_z maps. When
    // false they are drawn from N(0, 0.02^2) instead.
    bool zero_init = true;
    // Exclude the auxiliary projector from the trainable set.
    bool freeze_projector = false;
};

inline constexpr double kNoZeroInitStd = 0.02;

struct ConditioningBundle {
    Tensor z_vl;   // [B, S, cond_dim]
    Tensor z_aux;  // [B, L, d_E]; undefined when no auxiliary encoder is configured

    bool has_aux() const { return z_aux.defined(); }
};

struct PolicyModel {
    DiTConfig config;
    Variant variant = Variant::baseline;
    VariantOptions options;
    ParamStore params;
};

// Copies the base parameters, attaches the variant's plug-in parameters and
// applies its freeze plan. `seed` drives any random plug-in initialization.
PolicyModel build_policy(const ParamStore& base, const DiTConfig& cfg, Variant variant,
                         const VariantOptions& options = {}, std::uint64_t seed = 0);

// Names of the parameters optimized under `variant` for this store.
std::set<std::string> freeze_plan(const ParamStore& store, Variant variant,
                                  const VariantOptions& options = {});

// z_aux [B, L, d_E] -> [B, L, D] through the named projector.
Tensor project_aux(const PolicyModel& model, const Tensor& z_aux);

// Hidden-state routes, all returning [B, M, D] from the shared h0.
Tensor baseline_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl);
Tensor pvi_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl, const Tensor& z_aux);
Tensor concat_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl, const Tensor& z_aux);
Tensor controlnet_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl,
                          const Tensor& z_aux);
Tensor referencenet_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl,
                            const Tensor& z_aux);
Tensor controlvla_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl,
                          const Tensor& z_aux);

Tensor forward_hidden(const PolicyModel& model, const Tensor& h0, const ConditioningBundle& cond);

// Predicted velocity [B, H, A] for noisy actions a_t at flow times t.
Tensor forward_velocity(const PolicyModel& model, const Tensor& state, const Tensor& a_t,
                        const std::vector<double>& t, const ConditioningBundle& cond);

}  // namespace pvilab
