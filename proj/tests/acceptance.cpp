// Acceptance run: one PASS/FAIL line per criterion.
//
//   pvilab_acceptance [--work DIR] [--only 1,5] [--report FILE] [--strict]
//
// Trained runs are cached under --work and reused on the next invocation when
// config and base match. Exit status is 0 once every criterion has been
// evaluated; --strict also makes any FAIL exit 1.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hand_count.hpp"
#include "helpers.hpp"
#include "pvilab/checkpoint.hpp"
#include "pvilab/flow_match.hpp"
#include "pvilab/gradcheck.hpp"
#include "pvilab/harness.hpp"
#include "pvilab/ops.hpp"
#include "toys.hpp"

using namespace pvilab;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string num(double x, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << x;
    return os.str();
}

bool starts(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

fs::path g_work;

// Shared desk-scale setup for the trained criteria.
RunConfig bench_config() {
    RunConfig c;
    c.task.family = TaskFamily::intercept;
    c.task.n_demos = 2000;
    c.task.eval_rollouts = 400;
    c.dit.blocks = 2;
    c.dit.hidden = 32;
    c.dit.heads = 4;
    c.dit.cond_len = 3;
    c.dit.cond_dim = 32;
    c.variant = Variant::pvi;
    c.encoder.kind = EncoderKind::temporal;
    c.encoder.window = 8;
    c.train.steps = 1500;
    c.train.seed = 1;
    c.finalize();
    return c;
}

const ParamStore& bench_base() {
    static const ParamStore base = [] {
        RunConfig pc = bench_config();
        pc.train.steps = 3000;
        pc.task.family = TaskFamily::reach;
        pc.finalize();
        const fs::path ck = g_work / "base.bin", txt = g_work / "base.config.txt";
        if (fs::exists(ck) && fs::exists(txt) && read_text(txt) == pc.to_text()) return load_checkpoint(ck);
        std::cerr << "pretraining base (" << pc.train.steps << " steps)\n";
        ParamStore b = pretrain_base(pc);
        fs::create_directories(g_work);
        save_checkpoint(b, ck);
        write_text(txt, pc.to_text());
        return b;
    }();
    return base;
}

RunConfig small_run_config(std::size_t steps) {
    RunConfig c;
    c.task.family = TaskFamily::intercept;
    c.task.n_demos = 256;
    c.dit.blocks = 2;
    c.dit.hidden = 32;
    c.dit.heads = 4;
    c.dit.cond_len = 3;
    c.dit.cond_dim = 32;
    c.variant = Variant::pvi;
    c.encoder.kind = EncoderKind::temporal;
    c.encoder.window = 4;
    c.train.steps = steps;
    c.train.batch = 16;
    c.finalize();
    return c;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = g_work / name;
    fs::remove_all(p);
    return p;
}

// Expected trainable names per variant, written from the module lists.
std::set<std::string> expected_plan(const ParamStore& s, Variant v) {
    const std::string pre = plugin_prefix(v);
    const bool main_trains = v != Variant::pvi && v != Variant::controlnet;
    std::set<std::string> out;
    for (const auto& n : s.names()) {
        bool in = starts(n, "adapter.") || (main_trains && starts(n, "dit."));
        if (!pre.empty() && starts(n, pre + ".")) in = true;
        if (in) out.insert(n);
    }
    return out;
}

Verdict c1_init_equivalence() {
    DiTConfig c = small_config();
    const ParamStore base = make_base(c, 3);
    const PolicyModel ref = build_policy(base, c, Variant::baseline);
    std::ostringstream os;
    bool ok = true;
    for (Variant v : {Variant::pvi, Variant::controlnet, Variant::referencenet, Variant::controlvla, Variant::concat}) {
        const PolicyModel m = build_policy(base, c, v, {}, 17);
        double worst = 0;
        for (std::uint64_t s = 0; s < 100; ++s) {
            const Inputs in = random_inputs(c, 1, 500 + s);
            worst = std::max(worst, max_abs_diff(forward_velocity(m, in.state, in.a_t, in.t, in.cond),
                                                 forward_velocity(ref, in.state, in.a_t, in.t, in.cond)));
        }
        const bool good = v == Variant::concat ? worst > 1e-3 : worst <= 1e-6;
        ok = ok && good;
        os << variant_name(v) << " " << num(worst, 3) << (v == Variant::concat ? " (counterexample)" : "") << "; ";
    }
    return {ok, "max |dv| over 100 inputs: " + os.str()};
}

Verdict c2_freezing() {
    RunConfig c = small_run_config(500);
    const ParamStore base = init_base_params(c);
    const fs::path dir = fresh_dir("c2_pvi500");
    const RunResult run = train_run(c, base, dir);
    bool main_same = true;
    for (const auto& e : base.entries()) {
        if (!starts(e.name, "dit.")) continue;
        const auto a = e.value.data(), b = run.model.params.get(e.name).data();
        main_same = main_same && std::equal(a.begin(), a.end(), b.begin());
    }
    const FreezeManifest man = parse_manifest(read_text(dir / "freeze_manifest.json"));
    bool plans = true;
    std::string bad;
    for (Variant v : all_variants()) {
        RunConfig vc = c;
        vc.variant = v;
        if (!uses_aux(v)) vc.encoder.kind = EncoderKind::none;
        vc.finalize();
        const PolicyModel m = build_policy(base, vc.dit, v, vc.variant_options(), 1);
        if (freeze_plan(m.params, v, vc.variant_options()) != expected_plan(m.params, v)) {
            plans = false;
            bad += std::string(" ") + variant_name(v);
        }
    }
    const bool ok = run.log.frozen_ok() && main_same && man.trainable == expected_plan(run.model.params, Variant::pvi) &&
                    plans && run.log.losses.size() == 500;
    return {ok, "500 steps, frozen hash " + std::string(run.log.frozen_ok() ? "unchanged" : "CHANGED") +
                    ", main DiT bit-identical " + (main_same ? "yes" : "no") + ", plans for 6 variants " +
                    (plans ? "match" : "differ:" + bad)};
}

Verdict c3_gradcheck() {
    DiTConfig c = small_config(2, 16);
    double worst = 0;
    std::size_t checks = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const ParamStore base = make_base(c, 100 + seed);
        for (auto [v, zero] : {std::pair{Variant::baseline, true}, std::pair{Variant::pvi, true},
                               std::pair{Variant::pvi, false}}) {
            DiTConfig vc = c;
            if (v == Variant::baseline) vc.aux_len = vc.aux_dim = 0;
            PolicyModel m = build_policy(base, vc, v, {zero, false}, seed);
            Inputs in = random_inputs(vc, 2, 200 + seed);
            Rng rng(300 + seed);
            const FlowBatch fb = make_flow_batch(in.a_t, rng);
            ParamGradcheckOptions opt;
            opt.coords_per_entry = 24;
            opt.seed = seed;
            worst = std::max(worst, gradcheck_params(m.params, [&] {
                                 return flow_matching_loss(m, in.state, in.cond, fb);
                             }, opt));
            ++checks;
        }
    }
    return {worst <= 1e-4, std::to_string(checks) + " checks (baseline, pvi, pvi without zero-init; 10 seeds), "
                               "max relative error " + num(worst, 3)};
}

Verdict c4_flow() {
    Rng rng(1);
    const Tensor a = rand_tensor(rng, {4, 8, 2}), e = rand_tensor(rng, {4, 8, 2});
    const bool ends = bit_equal(interpolate(a, e, 0.0), e) && bit_equal(interpolate(a, e, 1.0), a);
    const Tensor cst = rand_tensor(rng, {4, 8, 2});
    auto field = [&](const Tensor&, const std::vector<double>&) { return cst; };
    double euler = 0;
    for (std::size_t k : {1, 4, 16}) euler = std::max(euler, max_abs_diff(euler_integrate(field, e, k), add(e, cst)));
    const double acc = toys::two_point_accuracy(1);
    return {ends && euler <= 1e-12 && acc >= 0.95, std::string("endpoints ") + (ends ? "exact" : "WRONG") +
                                                       ", constant-field Euler err " + num(euler, 3) +
                                                       ", two-point toy accuracy " + num(acc)};
}

Verdict c5_ordering() {
    const RunConfig cfg = bench_config();
    const ParamStore& base = bench_base();
    const Method temporal = parse_method("pvi@temporal"), stat = parse_method("pvi@static");
    const CompareResult res = compare(cfg, base, {TaskFamily::intercept, TaskFamily::reach}, {temporal, stat},
                                      g_work / "c5");
    std::cout << res.table();
    const auto& ti = res.cell(TaskFamily::intercept, temporal).eval;
    const auto& si = res.cell(TaskFamily::intercept, stat).eval;
    const auto& sr = res.cell(TaskFamily::reach, stat).eval;

    const RunConfig ic = cell_config(cfg, TaskFamily::intercept, stat);
    const double bound = ambiguity_bound(ic.task);

    const RunConfig rc = cell_config(cfg, TaskFamily::reach, Method{});
    const PolicyModel frozen = build_policy(base, rc.dit, Variant::baseline);
    const EvalResult br =
        evaluate_model(rc, frozen, rc.task.eval_rollouts, derive_seed(cfg.train.seed, "eval/reach"));

    const double hw = std::max({ti.half_width(), si.half_width(), sr.half_width(), br.half_width()});
    const bool a = ti.rate - si.rate >= 0.15;
    const bool b = ti.rate - bound >= 0.05;
    const bool c = std::abs(si.rate - bound) <= 0.05;
    const bool d = sr.rate >= br.rate + 0.10;
    const bool e = hw <= 0.05 && ti.n == 400 && si.n == 400;
    std::ostringstream os;
    os << "intercept: temporal " << num(ti.rate) << ", static " << num(si.rate) << ", bound " << num(bound)
       << " [gap>=0.15 " << (a ? "ok" : "no") << ", temporal-bound>=0.05 " << (b ? "ok" : "no")
       << ", |static-bound|<=0.05 " << (c ? "ok" : "no") << "]; reach: static " << num(sr.rate) << " vs frozen base "
       << num(br.rate) << " [" << (d ? "ok" : "no") << "]; max CI half-width " << num(hw, 3);
    return {a && b && c && d && e, os.str()};
}

Verdict c6_ablations() {
    const RunConfig cfg = bench_config();
    const ParamStore& base = bench_base();
    const auto t_rows = ablate(AblationKind::temporal_context, cfg, base, g_work / "c6_window");
    std::cout << ablation_table(t_rows);
    const auto fp_rows = ablate(AblationKind::freeze_projector, cfg, base, g_work / "c6_freeze_projector");
    std::cout << ablation_table(fp_rows);
    const auto nz_rows = ablate(AblationKind::no_zero_init, cfg, base, g_work / "c6_no_zero_init");
    std::cout << ablation_table(nz_rows);

    bool shaped = t_rows.size() == 4 && fp_rows.size() == 2 && nz_rows.size() == 2;
    const std::size_t frames[] = {2, 4, 8, 16};
    for (std::size_t i = 0; shaped && i < 4; ++i) shaped = t_rows[i].frames == frames[i] && t_rows[i].eval.n == 400;
    shaped = shaped && ablation_table(t_rows).find("Frames") != std::string::npos;
    const double gap = fp_rows[0].eval.rate - fp_rows[1].eval.rate;
    std::ostringstream os;
    os << "T-sweep";
    for (const auto& r : t_rows) os << " " << r.frames << ":" << num(r.eval.rate);
    os << "; default " << num(fp_rows[0].eval.rate) << " vs freeze_projector " << num(fp_rows[1].eval.rate)
       << " (gap " << num(gap, 3) << ", need >= 0.05); no_zero_init " << num(nz_rows[1].eval.rate)
       << " (step-0 |dv| " << num(nz_rows[1].init_max_diff, 3) << ")";
    return {shaped && gap >= 0.05, os.str()};
}

Verdict c7_params() {
    bool ok = true;
    std::ostringstream os;
    for (Variant v : all_variants()) {
        RunConfig c = small_run_config(1);
        c.variant = v;
        c.encoder.kind = uses_aux(v) ? EncoderKind::temporal : EncoderKind::none;
        c.finalize();
        const ParamReport rep = param_report(c);
        const handcount::Counts hc = handcount::count(c);
        const bool match = rep.total == hc.total() && rep.trainable == hc.trainable();
        ok = ok && match;
        os << variant_name(v) << " " << rep.trainable << "/" << rep.total << (match ? "" : " MISMATCH") << "; ";
        if (v == Variant::pvi) {
            for (const auto& r : rep.rows)
                if (r.module == "main DiT" && r.trainable != 0) ok = false;
            const PolicyModel m = build_policy(init_base_params(c), c.dit, v);
            for (const auto& n : freeze_plan(m.params, v)) {
                const bool allowed = n == "pvi.proj.w" || starts(n, "pvi.copy.") || starts(n, "pvi.inject") ||
                                     starts(n, "adapter.");
                ok = ok && allowed;
            }
        }
    }
    return {ok, "trainable/total vs hand count: " + os.str()};
}

int cli_exit(const std::string& args) {
    const std::string cmd = std::string(PVILAB_CLI) + " " + args + " > /dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

Verdict c8_determinism() {
    RunConfig c = small_run_config(60);
    const ParamStore base = init_base_params(c);
    const fs::path a = fresh_dir("c8_a"), b = fresh_dir("c8_b");
    (void)train_run(c, base, a);
    (void)train_run(c, base, b);
    const auto ca = read_file(a / "checkpoint.bin");
    const bool same = ca == read_file(b / "checkpoint.bin");

    const ParamStore loaded = load_checkpoint(a / "checkpoint.bin");
    const bool ck_rt = encode_checkpoint(loaded) == ca && encode_checkpoint(decode_checkpoint(ca)) == ca;

    TaskSpec s = c.task;
    s.noise_std = 0.05;
    s.n_demos = 50;
    const auto bytes = encode_dataset(make_dataset(s, 4));
    const bool ds_rt = encode_dataset(decode_dataset(bytes)) == bytes;

    const int clean = cli_exit("report --run " + a.string());
    auto man = nlohmann::json::parse(read_text(a / "freeze_manifest.json"));
    man["trainable"].push_back("dit.block1.self.q.w");
    write_text(a / "freeze_manifest.json", man.dump(2));
    const int corrupted = cli_exit("report --run " + a.string());

    std::ostringstream os;
    os << "checkpoints from the same seed " << (same ? "bit-identical" : "DIFFER") << ", checkpoint round-trip "
       << (ck_rt ? "exact" : "FAILED") << ", dataset round-trip " << (ds_rt ? "exact" : "FAILED")
       << ", CLI exit clean=" << clean << " corrupted manifest=" << corrupted;
    return {same && ck_rt && ds_rt && clean == 0 && corrupted == 3, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string work = "acceptance_work", only, report;
    bool strict = false;
    app.add_option("--work", work, "Directory for cached runs");
    app.add_option("--only", only, "Comma-separated criterion numbers");
    app.add_option("--report", report, "Also write the verdict lines here");
    app.add_flag("--strict", strict, "Exit 1 when any criterion fails");
    CLI11_PARSE(app, argc, argv);
    g_work = work;
    fs::create_directories(g_work);

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"init-equivalence", c1_init_equivalence}, {"freezing contract", c2_freezing},
        {"gradient correctness", c3_gradcheck},   {"flow-matching sanity", c4_flow},
        {"representation ordering", c5_ordering}, {"ablation harness", c6_ablations},
        {"parameter accounting", c7_params},      {"determinism and persistence", c8_determinism},
    };
    std::set<std::size_t> pick;
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) pick.insert(std::stoul(tok));

    std::vector<std::string> lines;
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!pick.empty() && !pick.count(i + 1)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream line;
        line << (v.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first << ": " << v.detail
             << " [" << std::fixed << std::setprecision(1) << secs << " s]";
        std::cout << line.str() << std::endl;
        lines.push_back(line.str());
        all = all && v.pass;
    }
    if (!report.empty()) {
        std::ofstream out(report);
        for (const auto& l : lines) out << l << "\n";
    }
    return strict && !all ? 1 : 0;
}
