#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "pvilab/flow_match.hpp"
#include "pvilab/ops.hpp"

using namespace pvilab;
using namespace testutil;

namespace {

bool starts(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

std::set<std::string> names_where(const ParamStore& s, const std::function<bool(const std::string&)>& pred) {
    std::set<std::string> out;
    for (const auto& e : s.entries()) {
        if (pred(e.name)) out.insert(e.name);
    }
    return out;
}

std::uint64_t hash_prefix(const ParamStore& s, const std::string& prefix) {
    return s.hash([&](const ParamStore::Entry& e) { return starts(e.name, prefix); });
}

// Hash of block tensors under `prefix`, keyed by suffix so copies compare equal.
std::uint64_t block_values_hash(const ParamStore& s, const std::string& prefix, std::size_t blocks) {
    std::vector<unsigned char> bytes;
    for (std::size_t i = 0; i < blocks; ++i)
        for (const auto& suf : block_param_suffixes()) {
            const Tensor& t = s.get(prefix + std::to_string(i) + "." + suf);
            const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
            bytes.insert(bytes.end(), p, p + t.numel() * sizeof(double));
        }
    return fnv1a(bytes);
}

void train_steps(PolicyModel& m, std::size_t steps, std::uint64_t seed) {
    for (std::size_t s = 0; s < steps; ++s) {
        Inputs in = random_inputs(m.config, 4, seed * 1000 + s);
        Rng rng(seed + s);
        FlowBatch fb = make_flow_batch(in.a_t, rng);
        backward(flow_matching_loss(m, in.state, in.cond, fb));
        m.params.optimizer_step(1e-2, OptimizerKind::adamw);
    }
}

const Variant kPreserving[] = {Variant::pvi, Variant::controlnet, Variant::referencenet, Variant::controlvla};

}  // namespace

TEST_CASE("projector examples") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 1);
    PolicyModel m = build_policy(base, c, Variant::pvi);
    Rng rng(2);
    Tensor z = rand_tensor(rng, {2, c.aux_len, c.aux_dim});
    Tensor zero = project_aux(m, z);
    for (std::size_t i = 0; i < zero.numel(); ++i) CHECK(zero[i] == 0.0);

    Tensor w = rand_tensor(rng, {c.aux_dim, c.hidden});
    std::copy(w.data().begin(), w.data().end(), m.params.get("pvi.proj.w").mutable_data().begin());
    std::vector<double> eye(c.aux_dim * c.aux_dim, 0.0);
    for (std::size_t i = 0; i < c.aux_dim; ++i) eye[i * c.aux_dim + i] = 1.0;
    Tensor rows = project_aux(m, Tensor::from({1, c.aux_dim, c.aux_dim}, eye, DType::f64));
    CHECK(bit_equal(reshape(rows, {c.aux_dim, c.hidden}), w));

    Tensor got = project_aux(m, z);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t l = 0; l < c.aux_len; ++l)
            for (std::size_t d = 0; d < c.hidden; ++d) {
                double acc = 0;
                for (std::size_t k = 0; k < c.aux_dim; ++k)
                    acc += z[(b * c.aux_len + l) * c.aux_dim + k] * w[k * c.hidden + d];
                CHECK(got[(b * c.aux_len + l) * c.hidden + d] == doctest::Approx(acc).epsilon(1e-12));
            }
    CHECK_THROWS_AS((void)project_aux(m, rand_tensor(rng, {1, 2, c.aux_dim + 1})), ShapeError);
}

TEST_CASE("zero-init variants reproduce the frozen base on random inputs") {
    for (DType dt : {DType::f64, DType::f32}) {
        DiTConfig c = small_config();
        ParamStore base = make_base(c, 3, dt);
        PolicyModel ref = build_policy(base, c, Variant::baseline);
        for (Variant v : kPreserving) {
            PolicyModel m = build_policy(base, c, v, {}, 17);
            double worst = 0;
            for (std::uint64_t s = 0; s < 100; ++s) {
                Inputs in = random_inputs(c, 1, 500 + s, dt);
                worst = std::max(worst, max_abs_diff(forward_velocity(m, in.state, in.a_t, in.t, in.cond),
                                                     forward_velocity(ref, in.state, in.a_t, in.t, in.cond)));
            }
            CAPTURE(variant_name(v));
            CHECK(worst <= 1e-6);
        }
    }
}

TEST_CASE("concat changes the output at init") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 3);
    PolicyModel ref = build_policy(base, c, Variant::baseline);
    PolicyModel m = build_policy(base, c, Variant::concat);
    double found = 0;
    for (std::uint64_t s = 0; s < 100 && found <= 1e-3; ++s) {
        Inputs in = random_inputs(c, 1, s);
        found = max_abs_diff(forward_velocity(m, in.state, in.a_t, in.t, in.cond),
                             forward_velocity(ref, in.state, in.a_t, in.t, in.cond));
    }
    CHECK(found > 1e-3);
}

TEST_CASE("concat with no aux tokens equals the baseline") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 4);
    PolicyModel ref = build_policy(base, c, Variant::baseline);
    PolicyModel m = build_policy(base, c, Variant::concat);
    Inputs in = random_inputs(c, 2, 5);
    Tensor h0 = embed_tokens(base, c, in.state, in.a_t, in.t);
    Tensor empty = Tensor::zeros({2, 0, c.aux_dim}, DType::f64);
    CHECK(bit_equal(concat_forward(m, h0, in.cond.z_vl, empty), baseline_forward(ref, h0, in.cond.z_vl)));
}

TEST_CASE("attention weights over a longer context still sum to one") {
    Rng rng(6);
    for (std::size_t S : {1, 3, 7}) {
        Tensor q = rand_tensor(rng, {1, 4, 8});
        Tensor k = rand_tensor(rng, {1, S, 8});
        Tensor out = attention(q, k, Tensor::full({1, S, 8}, 1.0, DType::f64), 2);
        for (std::size_t i = 0; i < out.numel(); ++i) CHECK(std::abs(out[i] - 1.0) <= 1e-12);
    }
}

TEST_CASE("single block, identity injection, identity copy block") {
    DiTConfig c = small_config(1);
    ParamStore base = make_base(c, 7);
    PolicyModel m = build_policy(base, c, Variant::pvi);
    auto& w = m.params.get("pvi.inject0.w");
    auto wd = w.mutable_data();
    for (std::size_t i = 0; i < c.hidden; ++i) wd[i * c.hidden + i] = 1.0;
    for (const char* n : {"self.o.w", "self.o.b", "cross.o.w", "cross.o.b", "mlp.out.w", "mlp.out.b"})
        for (auto& x : m.params.get(std::string("pvi.copy.block0.") + n).mutable_data()) x = 0.0;
    Inputs in = random_inputs(c, 2, 8);
    Tensor h0 = embed_tokens(m.params, c, in.state, in.a_t, in.t);
    Tensor cond = project_cond(m.params, c, in.cond.z_vl);
    Tensor expect = add(dit_block(BlockParams::bind(m.params, "dit.block0"), h0, cond, c.heads), h0);
    CHECK(max_abs_diff(pvi_forward(m, h0, in.cond.z_vl, in.cond.z_aux), expect) <= 1e-12);
}

TEST_CASE("PVI gradients reach exactly the plug-in and adapters") {
    DiTConfig c = small_config();
    PolicyModel m = build_policy(make_base(c, 9), c, Variant::pvi);
    Inputs in = random_inputs(c, 3, 10);
    Rng rng(11);
    FlowBatch fb = make_flow_batch(in.a_t, rng);
    backward(flow_matching_loss(m, in.state, in.cond, fb));
    const auto plan = freeze_plan(m.params, Variant::pvi);
    std::set<std::string> with_grad;
    for (const auto& e : m.params.entries()) {
        if (e.value.has_grad()) with_grad.insert(e.name);
    }
    CHECK(with_grad == plan);
    for (const auto& e : m.params.entries()) {
        if (starts(e.name, "dit.")) CHECK_FALSE(e.value.has_grad());
    }
    // at init only the injections see a nonzero gradient; Z_i = 0 blocks the path into the branch
    auto peak = [&](const char* n) {
        double g = 0;
        for (double x : m.params.get(n).grad()) g = std::max(g, std::abs(x));
        return g;
    };
    CHECK(peak("pvi.inject0.w") > 0.0);
    CHECK(peak("pvi.proj.w") == 0.0);
}

TEST_CASE("step-0 PVI loss equals the frozen baseline loss") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 12, DType::f32);
    PolicyModel ref = build_policy(base, c, Variant::baseline);
    PolicyModel m = build_policy(base, c, Variant::pvi);
    Inputs in = random_inputs(c, 8, 13, DType::f32);
    Rng r1(14), r2(14);
    const double a = flow_matching_loss(m, in.state, in.cond, make_flow_batch(in.a_t, r1)).item();
    const double b = flow_matching_loss(ref, in.state, in.cond, make_flow_batch(in.a_t, r2)).item();
    CHECK(std::abs(a - b) <= 1e-6);
}

TEST_CASE("copy branch starts as the main DiT and diverges after training") {
    DiTConfig c = small_config();
    PolicyModel m = build_policy(make_base(c, 15), c, Variant::pvi);
    CHECK(block_values_hash(m.params, "pvi.copy.block", c.blocks) == block_values_hash(m.params, "dit.block", c.blocks));
    const auto main_before = hash_prefix(m.params, "dit.");
    train_steps(m, 2, 16);
    CHECK(block_values_hash(m.params, "pvi.copy.block", c.blocks) != block_values_hash(m.params, "dit.block", c.blocks));
    CHECK(hash_prefix(m.params, "dit.") == main_before);
}

TEST_CASE("ControlNet-style branch leaves the main DiT untouched over 200 steps") {
    DiTConfig c = small_config(1, 8);
    ParamStore base = make_base(c, 17);
    PolicyModel m = build_policy(base, c, Variant::controlnet);
    PolicyModel ref = build_policy(base, c, Variant::baseline);

    Inputs in = random_inputs(c, 2, 18);
    ConditioningBundle zero_aux = in.cond;
    zero_aux.z_aux = Tensor::zeros(in.cond.z_aux.shape(), DType::f64);
    CHECK(bit_equal(forward_velocity(m, in.state, in.a_t, in.t, zero_aux),
                    forward_velocity(ref, in.state, in.a_t, in.t, in.cond)));

    const auto before = hash_prefix(m.params, "dit.");
    const auto frozen = m.params.hash_frozen();
    train_steps(m, 200, 19);
    CHECK(hash_prefix(m.params, "dit.") == before);
    CHECK(m.params.hash_frozen() == frozen);
}

TEST_CASE("ReferenceNet-style output shape does not depend on the aux length") {
    DiTConfig c = small_config();
    PolicyModel m = build_policy(make_base(c, 20), c, Variant::referencenet);
    for (std::size_t L : {1, 3, 9}) {
        Rng rng(L);
        Inputs in = random_inputs(c, 2, 21);
        Tensor h0 = embed_tokens(m.params, c, in.state, in.a_t, in.t);
        Tensor out = referencenet_forward(m, h0, in.cond.z_vl, rand_tensor(rng, {2, L, c.aux_dim}));
        CHECK(out.shape() == Shape{2, c.tokens(), c.hidden});
    }
}

TEST_CASE("single auxiliary token adds its value row to every query") {
    Rng rng(22);
    Tensor q = rand_tensor(rng, {1, 5, 8});
    Tensor k = rand_tensor(rng, {1, 1, 8});
    Tensor v = rand_tensor(rng, {1, 1, 8});
    Tensor out = attention(q, k, v, 2);
    for (std::size_t m = 0; m < 5; ++m)
        for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(out[m * 8 + d] - v[d]) <= 1e-12);
}

TEST_CASE("ControlVLA-style block agrees with a dense two-term recomputation") {
    DiTConfig c = small_config(1, 8);
    ParamStore base = make_base(c, 23);
    PolicyModel m = build_policy(base, c, Variant::controlvla);
    Rng rng(24);
    for (const char* n : {"cvla.block0.kz.w", "cvla.block0.kz.b", "cvla.block0.vz.w", "cvla.block0.vz.b"}) {
        Tensor r = rand_tensor(rng, m.params.get(n).shape(), 0.4);
        std::copy(r.data().begin(), r.data().end(), m.params.get(n).mutable_data().begin());
    }
    Inputs in = random_inputs(c, 1, 25);
    Tensor h0 = embed_tokens(m.params, c, in.state, in.a_t, in.t);
    Tensor got = controlvla_forward(m, h0, in.cond.z_vl, in.cond.z_aux);

    // Dense recomputation of the block with explicit loops for both attention terms.
    const BlockParams p = BlockParams::bind(m.params, "dit.block0");
    const std::size_t M = c.tokens(), D = c.hidden, H = c.heads, dh = D / H;
    Tensor cond = project_cond(m.params, c, in.cond.z_vl);
    Tensor zt = linear(in.cond.z_aux, m.params.get("cvla.proj.w"));
    Tensor x = affine_norm(h0, p.ln1.g, p.ln1.b);
    Tensor h1 = add(h0, linear(attention(linear(x, p.self_q.w, p.self_q.b), linear(x, p.self_k.w, p.self_k.b),
                                         linear(x, p.self_v.w, p.self_v.b), H),
                               p.self_o.w, p.self_o.b));
    x = affine_norm(h1, p.ln2.g, p.ln2.b);
    Tensor q = linear(x, p.cross_q.w, p.cross_q.b);
    auto dense = [&](const Tensor& kk, const Tensor& vv, std::vector<double>& acc) {
        const std::size_t S = kk.dim(1);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < M; ++i) {
                std::vector<double> s(S);
                double mx = -1e300;
                for (std::size_t j = 0; j < S; ++j) {
                    double dot = 0;
                    for (std::size_t d = 0; d < dh; ++d) dot += q[i * D + h * dh + d] * kk[j * D + h * dh + d];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j < S; ++j)
                    for (std::size_t d = 0; d < dh; ++d) acc[i * D + h * dh + d] += s[j] / z * vv[j * D + h * dh + d];
            }
    };
    std::vector<double> ca(M * D, 0.0);
    dense(linear(cond, p.cross_k.w, p.cross_k.b), linear(cond, p.cross_v.w, p.cross_v.b), ca);
    dense(linear(zt, m.params.get("cvla.block0.kz.w"), m.params.get("cvla.block0.kz.b")),
          linear(zt, m.params.get("cvla.block0.vz.w"), m.params.get("cvla.block0.vz.b")), ca);
    Tensor h2 = add(h1, linear(Tensor::from({1, M, D}, ca, DType::f64), p.cross_o.w, p.cross_o.b));
    x = affine_norm(h2, p.ln3.g, p.ln3.b);
    Tensor expect = add(h2, linear(gelu(linear(x, p.mlp_in.w, p.mlp_in.b)), p.mlp_out.w, p.mlp_out.b));
    CHECK(max_abs_diff(got, expect) <= 1e-6);
}

TEST_CASE("freeze plans match the per-variant module lists") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 26);
    auto is_main = [](const std::string& n) { return starts(n, "dit."); };
    auto is_adapter = [](const std::string& n) { return starts(n, "adapter."); };
    for (Variant v : all_variants()) {
        PolicyModel m = build_policy(base, c, v);
        const std::string pre = plugin_prefix(v);
        std::set<std::string> expect;
        for (const auto& e : m.params.entries()) {
            const std::string& n = e.name;
            bool in = is_adapter(n);
            switch (v) {
                case Variant::baseline: in = in || is_main(n); break;
                case Variant::pvi:
                case Variant::controlnet:
                    in = in || n == pre + ".proj.w" || starts(n, pre + ".copy.") || starts(n, pre + ".inject");
                    break;
                case Variant::concat: in = in || is_main(n) || n == "concat.proj.w"; break;
                case Variant::referencenet:
                    in = in || is_main(n) || n == "ref.proj.w" || starts(n, "ref.copy.") || starts(n, "ref.fuse");
                    break;
                case Variant::controlvla:
                    in = in || is_main(n) || n == "cvla.proj.w" || starts(n, "cvla.block");
                    break;
            }
            if (in) expect.insert(n);
        }
        CAPTURE(variant_name(v));
        const auto plan = freeze_plan(m.params, v);
        CHECK(plan == expect);
        // every parameter is either a base entry or belongs to this variant's plug-in
        for (const auto& e : m.params.entries())
            CHECK((is_main(e.name) || is_adapter(e.name) || starts(e.name, pre + ".")));
        for (const auto& e : m.params.entries()) CHECK(e.trainable == (plan.count(e.name) == 1));
        const bool main_trainable = v != Variant::pvi && v != Variant::controlnet;
        CHECK((names_where(m.params, is_main).size() > 0));
        for (const auto& n : names_where(m.params, is_main)) CHECK((plan.count(n) == 1) == main_trainable);
    }
}

TEST_CASE("freeze_projector drops only the projector") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 27);
    PolicyModel a = build_policy(base, c, Variant::pvi);
    PolicyModel b = build_policy(base, c, Variant::pvi, {true, true});
    auto pa = freeze_plan(a.params, Variant::pvi);
    auto pb = freeze_plan(b.params, Variant::pvi, {true, true});
    pa.erase("pvi.proj.w");
    CHECK(pa == pb);
    CHECK_FALSE(b.params.trainable("pvi.proj.w"));
}

TEST_CASE("no_zero_init draws small random plug-in weights") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 28);
    PolicyModel m = build_policy(base, c, Variant::pvi, {false, false}, 3);
    double mx = 0, ss = 0;
    const auto w = m.params.get("pvi.inject0.w").data();
    for (double x : w) {
        mx = std::max(mx, std::abs(x));
        ss += x * x;
    }
    CHECK(mx > 0.0);
    CHECK(std::sqrt(ss / static_cast<double>(w.size())) == doctest::Approx(kNoZeroInitStd).epsilon(0.3));
    PolicyModel ref = build_policy(base, c, Variant::baseline);
    Inputs in = random_inputs(c, 1, 29);
    CHECK(max_abs_diff(forward_velocity(m, in.state, in.a_t, in.t, in.cond),
                       forward_velocity(ref, in.state, in.a_t, in.t, in.cond)) > 1e-6);
}

TEST_CASE("missing aux and unknown variants are rejected") {
    DiTConfig c = small_config();
    ParamStore base = make_base(c, 30);
    Inputs in = random_inputs(c, 1, 31);
    ConditioningBundle no_aux{in.cond.z_vl, {}};
    for (Variant v : kPreserving) {
        PolicyModel m = build_policy(base, c, v);
        CHECK_THROWS_AS((void)forward_velocity(m, in.state, in.a_t, in.t, no_aux), std::invalid_argument);
    }
    CHECK_THROWS_AS((void)parse_variant("lora"), std::invalid_argument);
    for (Variant v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
    DiTConfig no_dim = c;
    no_dim.aux_dim = 0;
    CHECK_THROWS_AS((void)build_policy(base, no_dim, Variant::pvi), std::invalid_argument);
}
