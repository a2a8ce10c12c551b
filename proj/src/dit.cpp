#include "pvilab/dit.hpp"

#include <cmath>
#include <stdexcept>

#include "pvilab/ops.hpp"
#include "pvilab/rng.hpp"

namespace pvilab {

void DiTConfig::validate() const {
    const std::size_t extents[] = {blocks, hidden, heads, horizon, action_dim, state_dim, cond_len, cond_dim, mlp_ratio};
    for (auto e : extents) {
        if (e == 0) throw std::invalid_argument("DiT config: all extents must be >= 1");
    }
    if (hidden % heads != 0) {
        throw std::invalid_argument("DiT config: hidden " + std::to_string(hidden) +
                                    " not divisible by heads " + std::to_string(heads));
    }
}

std::string main_block_prefix(std::size_t i) { return "dit.block" + std::to_string(i); }

const std::vector<std::string>& block_param_suffixes() {
    static const std::vector<std::string> suffixes = {
        "ln1.g",     "ln1.b",     "self.q.w",  "self.q.b",  "self.k.w",  "self.k.b",  "self.v.w",
        "self.v.b",  "self.o.w",  "self.o.b",  "ln2.g",     "ln2.b",     "cross.q.w", "cross.q.b",
        "cross.k.w", "cross.k.b", "cross.v.w", "cross.v.b", "cross.o.w", "cross.o.b", "ln3.g",
        "ln3.b",     "mlp.in.w",  "mlp.in.b",  "mlp.out.w", "mlp.out.b"};
    return suffixes;
}

BlockParams BlockParams::bind(const ParamStore& store, const std::string& prefix) {
    auto t = [&](const char* s) { return store.get(prefix + "." + s); };
    BlockParams p;
    p.ln1 = {t("ln1.g"), t("ln1.b")};
    p.ln2 = {t("ln2.g"), t("ln2.b")};
    p.ln3 = {t("ln3.g"), t("ln3.b")};
    p.self_q = {t("self.q.w"), t("self.q.b")};
    p.self_k = {t("self.k.w"), t("self.k.b")};
    p.self_v = {t("self.v.w"), t("self.v.b")};
    p.self_o = {t("self.o.w"), t("self.o.b")};
    p.cross_q = {t("cross.q.w"), t("cross.q.b")};
    p.cross_k = {t("cross.k.w"), t("cross.k.b")};
    p.cross_v = {t("cross.v.w"), t("cross.v.b")};
    p.cross_o = {t("cross.o.w"), t("cross.o.b")};
    p.mlp_in = {t("mlp.in.w"), t("mlp.in.b")};
    p.mlp_out = {t("mlp.out.w"), t("mlp.out.b")};
    return p;
}

namespace {

void add_linear(ParamStore& store, Rng& rng, const std::string& name, std::size_t in, std::size_t out,
                DType dtype) {
    store.add(name + ".w", randn(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), dtype));
    store.add(name + ".b", Tensor::zeros({out}, dtype));
}

void add_norm(ParamStore& store, const std::string& name, std::size_t width, DType dtype) {
    store.add(name + ".g", Tensor::full({width}, 1.0, dtype));
    store.add(name + ".b", Tensor::zeros({width}, dtype));
}

Tensor lin(const Tensor& x, const BlockParams::Linear& l) { return linear(x, l.w, l.b); }

}  // namespace

void init_block(ParamStore& store, const std::string& prefix, const DiTConfig& cfg, DType dtype,
                std::uint64_t seed) {
    Rng rng(derive_seed(seed, prefix));
    const std::size_t D = cfg.hidden;
    add_norm(store, prefix + ".ln1", D, dtype);
    for (const char* n : {"q", "k", "v", "o"}) add_linear(store, rng, prefix + ".self." + n, D, D, dtype);
    add_norm(store, prefix + ".ln2", D, dtype);
    for (const char* n : {"q", "k", "v", "o"}) add_linear(store, rng, prefix + ".cross." + n, D, D, dtype);
    add_norm(store, prefix + ".ln3", D, dtype);
    add_linear(store, rng, prefix + ".mlp.in", D, cfg.mlp_ratio * D, dtype);
    add_linear(store, rng, prefix + ".mlp.out", cfg.mlp_ratio * D, D, dtype);
}

void init_base(ParamStore& store, const DiTConfig& cfg, DType dtype, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "base"));
    const std::size_t D = cfg.hidden;
    add_linear(store, rng, "adapter.state", cfg.state_dim, D, dtype);
    add_linear(store, rng, "adapter.action", cfg.action_dim, D, dtype);
    store.add("adapter.action.pos", randn(rng, {cfg.horizon, D}, 0.02, dtype));
    add_linear(store, rng, "adapter.head", D, cfg.action_dim, dtype);
    add_linear(store, rng, "dit.cond", cfg.cond_dim, D, dtype);
    add_linear(store, rng, "dit.time.l1", D, D, dtype);
    add_linear(store, rng, "dit.time.l2", D, D, dtype);
    for (std::size_t i = 0; i < cfg.blocks; ++i) init_block(store, main_block_prefix(i), cfg, dtype, seed);
    add_norm(store, "dit.final", D, dtype);
}

Tensor affine_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
    return add(mul(layernorm(x), g), b);
}

Tensor dit_block(const BlockParams& p, const Tensor& h, const Tensor& cond, std::size_t heads,
                 const AuxAttention* aux) {
    const std::size_t D = p.ln1.g.dim(0);
    if (h.rank() != 3 || h.dim(2) != D) {
        throw ShapeError("dit_block: hidden state " + shape_str(h.shape()) + " does not match width " +
                         std::to_string(D));
    }
    if (cond.rank() != 3 || cond.dim(2) != D || cond.dim(0) != h.dim(0)) {
        throw ShapeError("dit_block: conditioning " + shape_str(cond.shape()) +
                         " must be [B, S, " + std::to_string(D) + "] after its input projection");
    }
    if (cond.dim(1) == 0) throw ShapeError("dit_block: empty conditioning sequence");

    Tensor x = affine_norm(h, p.ln1.g, p.ln1.b);
    Tensor sa = attention(lin(x, p.self_q), lin(x, p.self_k), lin(x, p.self_v), heads);
    Tensor h1 = add(h, lin(sa, p.self_o));

    x = affine_norm(h1, p.ln2.g, p.ln2.b);
    Tensor q = lin(x, p.cross_q);
    Tensor ca = attention(q, lin(cond, p.cross_k), lin(cond, p.cross_v), heads);
    if (aux != nullptr) {
        Tensor kz = linear(aux->tokens, aux->kz_w, aux->kz_b);
        Tensor vz = linear(aux->tokens, aux->vz_w, aux->vz_b);
        ca = add(ca, attention(q, kz, vz, heads));
    }
    Tensor h2 = add(h1, lin(ca, p.cross_o));

    x = affine_norm(h2, p.ln3.g, p.ln3.b);
    return add(h2, lin(gelu(lin(x, p.mlp_in)), p.mlp_out));
}

Tensor time_features(const std::vector<double>& t, std::size_t width, DType dtype) {
    const std::size_t half = width / 2;
    std::vector<double> values(t.size() * width, 0.0);
    for (std::size_t b = 0; b < t.size(); ++b) {
        if (!(t[b] >= 0.0 && t[b] <= 1.0)) {
            throw std::invalid_argument("flow time " + std::to_string(t[b]) + " outside [0, 1]");
        }
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double angle = 1000.0 * t[b] * freq;
            values[b * width + i] = std::sin(angle);
            values[b * width + half + i] = std::cos(angle);
        }
    }
    return Tensor::from({t.size(), width}, std::move(values), dtype);
}

Tensor embed_tokens(const ParamStore& store, const DiTConfig& cfg, const Tensor& state,
                    const Tensor& actions, const std::vector<double>& t) {
    const std::size_t D = cfg.hidden;
    if (state.rank() != 2 || state.dim(1) != cfg.state_dim) {
        throw ShapeError("embed_tokens: state " + shape_str(state.shape()) + ", expected [B, " +
                         std::to_string(cfg.state_dim) + "]");
    }
    const std::size_t B = state.dim(0);
    if (actions.shape() != Shape{B, cfg.horizon, cfg.action_dim}) {
        throw ShapeError("embed_tokens: actions " + shape_str(actions.shape()) + ", expected " +
                         shape_str({B, cfg.horizon, cfg.action_dim}));
    }
    if (t.size() != B) throw ShapeError("embed_tokens: " + std::to_string(t.size()) + " flow times for batch " + std::to_string(B));

    const DType dt = store.get("dit.time.l1.w").dtype();
    Tensor temb = linear(gelu(linear(time_features(t, D, dt), store.get("dit.time.l1.w"), store.get("dit.time.l1.b"))),
                         store.get("dit.time.l2.w"), store.get("dit.time.l2.b"));
    Tensor st = reshape(linear(state, store.get("adapter.state.w"), store.get("adapter.state.b")), {B, 1, D});
    Tensor at = add(linear(actions, store.get("adapter.action.w"), store.get("adapter.action.b")),
                    store.get("adapter.action.pos"));
    return add(concat({st, at}, 1), reshape(temb, {B, 1, D}));
}

Tensor project_cond(const ParamStore& store, const DiTConfig& cfg, const Tensor& z_vl) {
    if (z_vl.rank() != 3 || z_vl.dim(2) != cfg.cond_dim) {
        throw ShapeError("z_vl " + shape_str(z_vl.shape()) + " does not have width " + std::to_string(cfg.cond_dim));
    }
    return linear(z_vl, store.get("dit.cond.w"), store.get("dit.cond.b"));
}

Tensor decode_actions(const ParamStore& store, const DiTConfig& cfg, const Tensor& h) {
    Tensor x = affine_norm(h, store.get("dit.final.g"), store.get("dit.final.b"));
    return linear(slice(x, 1, 1, cfg.horizon), store.get("adapter.head.w"), store.get("adapter.head.b"));
}

}  // namespace pvilab
