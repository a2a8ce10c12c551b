#include "pvilab/injection.hpp"

#include <cmath>
#include <stdexcept>

#include "pvilab/ops.hpp"
#include "pvilab/rng.hpp"

namespace pvilab {

Variant parse_variant(const std::string& name) {
    for (Variant v : all_variants()) {
        if (name == variant_name(v)) return v;
    }
    throw std::invalid_argument("unknown variant '" + name + "'");
}

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::baseline: return "baseline";
        case Variant::pvi: return "pvi";
        case Variant::concat: return "concat";
        case Variant::controlnet: return "controlnet";
        case Variant::referencenet: return "referencenet";
        case Variant::controlvla: return "controlvla";
    }
    return "?";
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v = {Variant::baseline, Variant::pvi, Variant::concat,
                                           Variant::controlnet, Variant::referencenet, Variant::controlvla};
    return v;
}

bool uses_aux(Variant v) { return v != Variant::baseline; }

std::string plugin_prefix(Variant v) {
    switch (v) {
        case Variant::baseline: return "";
        case Variant::pvi: return "pvi";
        case Variant::concat: return "concat";
        case Variant::controlnet: return "cnet";
        case Variant::referencenet: return "ref";
        case Variant::controlvla: return "cvla";
    }
    return "";
}

namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
    return s.compare(0, prefix.size(), prefix) == 0;
}

// Trainable name prefixes per variant; the projector is handled separately.
std::vector<std::string> trainable_prefixes(Variant v) {
    switch (v) {
        case Variant::baseline: return {"adapter.", "dit."};
        case Variant::pvi: return {"adapter.", "pvi."};
        case Variant::concat: return {"adapter.", "dit.", "concat."};
        case Variant::controlnet: return {"adapter.", "cnet."};
        case Variant::referencenet: return {"adapter.", "dit.", "ref."};
        case Variant::controlvla: return {"adapter.", "dit.", "cvla."};
    }
    return {};
}

std::string projector_name(Variant v) { return plugin_prefix(v) + ".proj.w"; }

Tensor small_or_zero(Rng& rng, Shape shape, bool zero, DType dtype) {
    return zero ? Tensor::zeros(std::move(shape), dtype) : randn(rng, std::move(shape), kNoZeroInitStd, dtype);
}

void copy_blocks(ParamStore& store, const std::string& prefix, std::size_t blocks) {
    for (std::size_t i = 0; i < blocks; ++i) {
        for (const auto& suffix : block_param_suffixes()) {
            const Tensor& src = store.get(main_block_prefix(i) + "." + suffix);
            store.add(prefix + ".copy.block" + std::to_string(i) + "." + suffix, src.detach());
        }
    }
}

void add_injections(ParamStore& store, Rng& rng, const std::string& name, std::size_t blocks, std::size_t D,
                    bool zero, DType dtype) {
    for (std::size_t i = 0; i < blocks; ++i) {
        const std::string p = name + std::to_string(i);
        store.add(p + ".w", small_or_zero(rng, {D, D}, zero, dtype));
        store.add(p + ".b", small_or_zero(rng, {D}, zero, dtype));
    }
}

void require_aux(const PolicyModel& model, const Tensor& z_aux) {
    if (!z_aux.defined()) {
        throw std::invalid_argument(std::string(variant_name(model.variant)) +
                                    " forward requires auxiliary features but none were supplied");
    }
}

BlockParams copy_block(const PolicyModel& model, const std::string& branch, std::size_t i) {
    return BlockParams::bind(model.params, branch + ".copy.block" + std::to_string(i));
}

BlockParams main_block(const PolicyModel& model, std::size_t i) {
    return BlockParams::bind(model.params, main_block_prefix(i));
}

Tensor inject(const PolicyModel& model, const std::string& name, std::size_t i, const Tensor& x) {
    const std::string p = name + std::to_string(i);
    return linear(x, model.params.get(p + ".w"), model.params.get(p + ".b"));
}

// Shared loop of the copy-branch designs: the branch runs alongside the main
// pathway and its block outputs are added through per-layer maps.
Tensor dual_pathway(const PolicyModel& model, const std::string& branch, const Tensor& h0, Tensor branch_h,
                    const Tensor& main_cond, const Tensor& branch_cond) {
    Tensor hm = h0;
    for (std::size_t i = 0; i < model.config.blocks; ++i) {
        branch_h = dit_block(copy_block(model, branch, i), branch_h, branch_cond, model.config.heads);
        hm = add(dit_block(main_block(model, i), hm, main_cond, model.config.heads),
                 inject(model, branch + ".inject", i, branch_h));
    }
    return hm;
}

}  // namespace

std::set<std::string> freeze_plan(const ParamStore& store, Variant variant, const VariantOptions& options) {
    const auto prefixes = trainable_prefixes(variant);
    std::set<std::string> plan;
    for (const auto& e : store.entries()) {
        for (const auto& p : prefixes) {
            if (starts_with(e.name, p)) {
                plan.insert(e.name);
                break;
            }
        }
    }
    if (options.freeze_projector && uses_aux(variant)) plan.erase(projector_name(variant));
    return plan;
}

PolicyModel build_policy(const ParamStore& base, const DiTConfig& cfg, Variant variant,
                         const VariantOptions& options, std::uint64_t seed) {
    cfg.validate();
    PolicyModel model{cfg, variant, options, base.clone()};
    ParamStore& store = model.params;
    const DType dtype = store.get("dit.cond.w").dtype();
    const std::size_t D = cfg.hidden;
    const bool zero = options.zero_init;
    Rng rng(derive_seed(seed, std::string("plugin.") + variant_name(variant)));

    if (uses_aux(variant) && cfg.aux_dim == 0) {
        throw std::invalid_argument(std::string(variant_name(variant)) + " needs an auxiliary encoder (aux_dim > 0)");
    }
    const std::string pre = plugin_prefix(variant);
    // A frozen projector is never updated, so it starts from small random
    // values rather than zero; a zero frozen projector would cut the
    // auxiliary input off entirely.
    const bool zero_proj = zero && !options.freeze_projector;
    switch (variant) {
        case Variant::baseline:
            break;
        case Variant::pvi:
        case Variant::controlnet:
            store.add(pre + ".proj.w", small_or_zero(rng, {cfg.aux_dim, D}, zero_proj, dtype));
            copy_blocks(store, pre, cfg.blocks);
            add_injections(store, rng, pre + ".inject", cfg.blocks, D, zero, dtype);
            break;
        case Variant::referencenet:
            store.add(pre + ".proj.w", small_or_zero(rng, {cfg.aux_dim, D}, zero_proj, dtype));
            copy_blocks(store, pre, cfg.blocks);
            add_injections(store, rng, pre + ".fuse", cfg.blocks, D, zero, dtype);
            break;
        case Variant::concat:
            store.add(pre + ".proj.w", small_or_zero(rng, {cfg.aux_dim, D}, zero_proj, dtype));
            break;
        case Variant::controlvla:
            // K_z and V_z carry the zero init here; the projector feeding them
            // must be nonzero or neither side ever receives a gradient.
            store.add(pre + ".proj.w",
                      randn(rng, {cfg.aux_dim, D}, 1.0 / std::sqrt(static_cast<double>(cfg.aux_dim)), dtype));
            for (std::size_t i = 0; i < cfg.blocks; ++i) {
                const std::string p = pre + ".block" + std::to_string(i);
                for (const char* m : {".kz", ".vz"}) {
                    store.add(p + m + ".w", small_or_zero(rng, {D, D}, zero, dtype));
                    store.add(p + m + ".b", small_or_zero(rng, {D}, zero, dtype));
                }
            }
            break;
    }

    const auto plan = freeze_plan(store, variant, options);
    for (const auto& name : store.names()) store.set_trainable(name, plan.count(name) != 0);
    return model;
}

Tensor project_aux(const PolicyModel& model, const Tensor& z_aux) {
    if (!uses_aux(model.variant)) throw std::invalid_argument("baseline has no auxiliary projector");
    const Tensor& w = model.params.get(projector_name(model.variant));
    if (z_aux.rank() != 3 || z_aux.dim(2) != w.dim(0)) {
        throw ShapeError("project_aux: z_aux " + shape_str(z_aux.shape()) + " does not have width d_E=" +
                         std::to_string(w.dim(0)));
    }
    return linear(z_aux, w);
}

Tensor baseline_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl) {
    Tensor c = project_cond(model.params, model.config, z_vl);
    Tensor h = h0;
    for (std::size_t i = 0; i < model.config.blocks; ++i) h = dit_block(main_block(model, i), h, c, model.config.heads);
    return h;
}

Tensor pvi_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl, const Tensor& z_aux) {
    require_aux(model, z_aux);
    Tensor c = project_cond(model.params, model.config, z_vl);
    return dual_pathway(model, "pvi", h0, h0, c, project_aux(model, z_aux));
}

Tensor concat_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl, const Tensor& z_aux) {
    require_aux(model, z_aux);
    Tensor c = project_cond(model.params, model.config, z_vl);
    Tensor ctx = z_aux.dim(1) == 0 ? c : concat({c, project_aux(model, z_aux)}, 1);
    Tensor h = h0;
    for (std::size_t i = 0; i < model.config.blocks; ++i) h = dit_block(main_block(model, i), h, ctx, model.config.heads);
    return h;
}

Tensor controlnet_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl, const Tensor& z_aux) {
    require_aux(model, z_aux);
    if (z_aux.dim(1) == 0) throw ShapeError("controlnet: pooling needs at least one auxiliary token");
    Tensor c = project_cond(model.params, model.config, z_vl);
    // L aux tokens vs M policy tokens: pool, then broadcast-add to every token.
    Tensor branch_in = add(h0, mean_axis(project_aux(model, z_aux), 1));
    return dual_pathway(model, "cnet", h0, branch_in, c, c);
}

Tensor referencenet_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl, const Tensor& z_aux) {
    require_aux(model, z_aux);
    if (z_aux.dim(1) == 0) throw ShapeError("referencenet: the reference branch needs at least one token");
    Tensor c = project_cond(model.params, model.config, z_vl);
    Tensor hr = project_aux(model, z_aux);
    Tensor hm = h0;
    for (std::size_t i = 0; i < model.config.blocks; ++i) {
        hr = dit_block(copy_block(model, "ref", i), hr, c, model.config.heads);
        hm = add(dit_block(main_block(model, i), hm, c, model.config.heads),
                 inject(model, "ref.fuse", i, mean_axis(hr, 1)));
    }
    return hm;
}

Tensor controlvla_forward(const PolicyModel& model, const Tensor& h0, const Tensor& z_vl, const Tensor& z_aux) {
    require_aux(model, z_aux);
    if (z_aux.dim(1) == 0) throw ShapeError("controlvla: the auxiliary attention term needs at least one token");
    Tensor c = project_cond(model.params, model.config, z_vl);
    AuxAttention aux;
    aux.tokens = project_aux(model, z_aux);
    Tensor h = h0;
    for (std::size_t i = 0; i < model.config.blocks; ++i) {
        const std::string p = "cvla.block" + std::to_string(i);
        aux.kz_w = model.params.get(p + ".kz.w");
        aux.kz_b = model.params.get(p + ".kz.b");
        aux.vz_w = model.params.get(p + ".vz.w");
        aux.vz_b = model.params.get(p + ".vz.b");
        h = dit_block(main_block(model, i), h, c, model.config.heads, &aux);
    }
    return h;
}

Tensor forward_hidden(const PolicyModel& model, const Tensor& h0, const ConditioningBundle& cond) {
    switch (model.variant) {
        case Variant::baseline: return baseline_forward(model, h0, cond.z_vl);
        case Variant::pvi: return pvi_forward(model, h0, cond.z_vl, cond.z_aux);
        case Variant::concat: return concat_forward(model, h0, cond.z_vl, cond.z_aux);
        case Variant::controlnet: return controlnet_forward(model, h0, cond.z_vl, cond.z_aux);
        case Variant::referencenet: return referencenet_forward(model, h0, cond.z_vl, cond.z_aux);
        case Variant::controlvla: return controlvla_forward(model, h0, cond.z_vl, cond.z_aux);
    }
    throw std::logic_error("unhandled variant");
}

Tensor forward_velocity(const PolicyModel& model, const Tensor& state, const Tensor& a_t,
                        const std::vector<double>& t, const ConditioningBundle& cond) {
    if (uses_aux(model.variant) && !cond.has_aux()) {
        throw std::invalid_argument(std::string(variant_name(model.variant)) +
                                    " requires z_aux but the conditioning bundle has none");
    }
    Tensor h0 = embed_tokens(model.params, model.config, state, a_t, t);
    return decode_actions(model.params, model.config, forward_hidden(model, h0, cond));
}

}  // namespace pvilab
