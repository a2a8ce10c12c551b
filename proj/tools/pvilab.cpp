// pvilab command line: pretrain, train, eval, compare, ablate, report, param-report.
//
// Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 contract violation.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pvilab/checkpoint.hpp"
#include "pvilab/harness.hpp"

namespace fs = std::filesystem;
using namespace pvilab;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitContract = 3;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// Leftover "--key=value" / "--key value" arguments become config overrides.
std::vector<std::pair<std::string, std::string>> overrides_from(std::vector<std::string> rest) {
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 0; i < rest.size(); ++i) {
        const std::string& a = rest[i];
        if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
        const auto eq = a.find('=');
        if (eq != std::string::npos) {
            out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
        } else if (i + 1 < rest.size()) {
            out.emplace_back(a.substr(2), rest[++i]);
        } else {
            throw ConfigError("override '" + a + "' has no value");
        }
    }
    return out;
}

RunConfig make_config(const std::string& path, const std::vector<std::string>& rest) {
    RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::load(path);
    apply_seed_env(cfg);
    for (const auto& [k, v] : overrides_from(rest)) cfg.set(k, v);
    cfg.finalize();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Plug-in visual injection lab: train and compare conditioning designs for a flow-matching policy"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Print training progress to stderr");

    std::string config_path, base_path, out_path, run_dir, tasks_arg = "reach,intercept,multiphase",
                                                            methods_arg, kind_arg;
    std::size_t rollouts = 0, jobs = 1;
    std::uint64_t eval_seed = 1234;
    bool as_json = false;

    auto* pretrain = app.add_subcommand("pretrain", "Train the shared base on a task mixture");
    pretrain->add_option("--config", config_path, "Config file (key = value)");
    pretrain->add_option("--out", out_path, "Base checkpoint to write")->required();
    pretrain->allow_extras();

    auto* train = app.add_subcommand("train", "Fine-tune one variant from the base into a run directory");
    train->add_option("--config", config_path, "Config file");
    train->add_option("--base", base_path, "Base checkpoint")->required();
    train->add_option("--out", out_path, "Run directory")->required();
    train->allow_extras();

    auto* eval = app.add_subcommand("eval", "Evaluate a run directory");
    eval->add_option("--run", run_dir, "Run directory")->required();
    eval->add_option("--rollouts", rollouts, "Number of rollouts (default: task.eval_rollouts)");
    eval->add_option("--seed", eval_seed, "Evaluation seed");
    eval->allow_extras();

    auto* cmp = app.add_subcommand("compare", "Train and evaluate a tasks x methods matrix");
    cmp->add_option("--config", config_path, "Config file");
    cmp->add_option("--base", base_path, "Base checkpoint")->required();
    cmp->add_option("--out", out_path, "Output directory")->required();
    cmp->add_option("--tasks", tasks_arg, "Comma-separated task families");
    cmp->add_option("--methods", methods_arg, "Comma-separated methods, e.g. baseline,pvi@temporal")->required();
    cmp->add_option("--jobs", jobs, "Parallel cells");
    cmp->allow_extras();

    auto* abl = app.add_subcommand("ablate", "Run one ablation sweep");
    abl->add_option("--config", config_path, "Config file");
    abl->add_option("--base", base_path, "Base checkpoint")->required();
    abl->add_option("--out", out_path, "Output directory")->required();
    abl->add_option("--kind", kind_arg, "temporal_context | freeze_projector | no_zero_init | sampler_k")->required();
    abl->allow_extras();

    auto* report = app.add_subcommand("report", "Audit and summarize a run directory");
    report->add_option("--run", run_dir, "Run directory")->required();

    auto* params = app.add_subcommand("param-report", "Per-module trainable / total parameter counts");
    params->add_option("--config", config_path, "Config file");
    params->add_flag("--json", as_json, "Emit JSON instead of a table");
    params->allow_extras();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }
    set_verbose(verbose);

    try {
        if (*pretrain) {
            RunConfig cfg = make_config(config_path, pretrain->remaining());
            std::vector<double> losses;
            const ParamStore base = pretrain_base(cfg, &losses);
            const fs::path out(out_path);
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            save_checkpoint(base, out);
            std::ostringstream csv;
            csv << "step,loss\n";
            csv.precision(9);
            for (std::size_t i = 0; i < losses.size(); ++i) csv << i << "," << losses[i] << "\n";
            write_text(out.string() + ".metrics.csv", csv.str());
            write_text(out.string() + ".config.txt", cfg.to_text());
            std::cout << "base checkpoint: " << out.string() << " (" << base.total_count() << " parameters)\n";
        } else if (*train) {
            RunConfig cfg = make_config(config_path, train->remaining());
            const ParamStore base = load_checkpoint(base_path);
            const RunResult run = train_run(cfg, base, out_path);
            std::cout << "run written to " << out_path;
            if (!run.log.losses.empty()) std::cout << "; final loss " << run.log.losses.back();
            std::cout << "\n";
        } else if (*eval) {
            const EvalResult res = evaluate_run(run_dir, rollouts, eval_seed, overrides_from(eval->remaining()));
            std::cout << "success " << res.successes << "/" << res.n << " = " << res.rate << "  95% CI [" << res.lo
                      << ", " << res.hi << "]\n";
        } else if (*cmp) {
            RunConfig cfg = make_config(config_path, cmp->remaining());
            std::vector<TaskFamily> tasks;
            for (const auto& t : split_list(tasks_arg)) tasks.push_back(parse_family(t));
            std::vector<Method> methods;
            for (const auto& m : split_list(methods_arg)) methods.push_back(parse_method(m));
            const CompareResult res = compare(cfg, load_checkpoint(base_path), tasks, methods, out_path, jobs);
            std::cout << res.table();
        } else if (*abl) {
            RunConfig cfg = make_config(config_path, abl->remaining());
            const auto rows = ablate(parse_ablation(kind_arg), cfg, load_checkpoint(base_path), out_path);
            std::cout << ablation_table(rows);
        } else if (*report) {
            std::cout << run_report(run_dir);
        } else if (*params) {
            RunConfig cfg = make_config(config_path, params->remaining());
            const ParamReport rep = param_report(cfg);
            std::cout << (as_json ? rep.json() : rep.text());
        }
    } catch (const ContractViolation& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return kExitContract;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
