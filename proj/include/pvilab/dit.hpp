#pragma once

// Flow-matching action expert: state/action token embedding, pre-norm DiT
// blocks with self- and cross-attention, and a per-token velocity head.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pvilab/param_store.hpp"
#include "pvilab/tensor.hpp"

namespace pvilab {

struct DiTConfig {
    std::size_t blocks = 2;       // N
    std::size_t hidden = 32;      // D
    std::size_t heads = 4;
    std::size_t horizon = 8;      // H
    std::size_t action_dim = 2;   // A
    std::size_t state_dim = 2;
    std::size_t cond_len = 3;     // S
    std::size_t cond_dim = 32;
    std::size_t aux_len = 0;      // L
    std::size_t aux_dim = 0;      // d_E
    std::size_t mlp_ratio = 2;

    // One state token followed by H action tokens.
    std::size_t tokens() const { return 1 + horizon; }
    void validate() const;
};

// Tensor handles of one transformer block, resolved from a name prefix such
// as "dit.block0" or "pvi.copy.block1".
struct BlockParams {
    struct Linear {
        Tensor w, b;
    };
    struct Norm {
        Tensor g, b;
    };
    Norm ln1, ln2, ln3;
    Linear self_q, self_k, self_v, self_o;
    Linear cross_q, cross_k, cross_v, cross_o;
    Linear mlp_in, mlp_out;

    static BlockParams bind(const ParamStore& store, const std::string& prefix);
};

// Extra attention term added inside a block's cross-attention:
//   softmax(Q K_z^T / sqrt(d)) V_z, with K_z, V_z linear maps of `tokens`.
struct AuxAttention {
    Tensor tokens;  // [B, L, D]
    Tensor kz_w, kz_b, vz_w, vz_b;
};

// Suffixes of every parameter a block owns, in creation order.
const std::vector<std::string>& block_param_suffixes();

// Adds a block's parameters under `prefix`.
void init_block(ParamStore& store, const std::string& prefix, const DiTConfig& cfg, DType dtype,
                std::uint64_t seed);

// Creates the pretrained-base parameter set: "adapter.*" and "dit.*".
void init_base(ParamStore& store, const DiTConfig& cfg, DType dtype, std::uint64_t seed);

Tensor affine_norm(const Tensor& x, const Tensor& g, const Tensor& b);

// h' = h + selfattn(ln(h)); h'' = h' + crossattn(ln(h'), cond); out = h'' + mlp(ln(h'')).
// cond: [B, S', D] with S' >= 1.
Tensor dit_block(const BlockParams& p, const Tensor& h, const Tensor& cond, std::size_t heads,
                 const AuxAttention* aux = nullptr);

// Sinusoidal flow-time features, [B, width]; t must lie in [0, 1].
Tensor time_features(const std::vector<double>& t, std::size_t width, DType dtype);

// h0 = concat(state token, action tokens) + time embedding on every token.
// state: [B, state_dim]; actions: [B, H, A]; t: B values in [0, 1].
Tensor embed_tokens(const ParamStore& store, const DiTConfig& cfg, const Tensor& state,
                    const Tensor& actions, const std::vector<double>& t);

// z_vl [B, S, cond_dim] -> [B, S, D] through the main DiT's input projection.
Tensor project_cond(const ParamStore& store, const DiTConfig& cfg, const Tensor& z_vl);

// Final norm and velocity head over the action tokens: [B, M, D] -> [B, H, A].
Tensor decode_actions(const ParamStore& store, const DiTConfig& cfg, const Tensor& h);

std::string main_block_prefix(std::size_t i);

}  // namespace pvilab
