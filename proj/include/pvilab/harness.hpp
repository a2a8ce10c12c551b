#pragma once

// Training, evaluation and experiment orchestration.
//
// A run directory holds everything needed to re-derive a run:
//   config.txt            config snapshot
//   freeze_manifest.json  trainable / frozen names, base hash, budget
//   audit.json            frozen-parameter hash at start and end
//   metrics.csv           step,loss
//   checkpoint.bin        all parameters with their trainable flags

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "pvilab/encoders.hpp"
#include "pvilab/injection.hpp"
#include "pvilab/run_config.hpp"
#include "pvilab/taskbench.hpp"

namespace pvilab {

// Freezing or equivalence audit failure (CLI exit code 3).
class ContractViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Progress lines go to stderr when enabled.
void set_verbose(bool on);
void log_line(const std::string& line);

struct EncoderSuite {
    VlmProxy vlm;
    std::optional<AuxEncoder> aux;

    explicit EncoderSuite(const RunConfig& cfg);
};

// Encoder outputs and targets for a set of windows, stored flat.
struct EncodedSet {
    std::size_t n = 0;
    std::size_t state_dim = 2, horizon = 8, action_dim = 2;
    std::size_t cond_len = 0, cond_dim = 0, aux_len = 0, aux_dim = 0;
    std::vector<double> state, action, z_vl, z_aux;

    struct Batch {
        Tensor state;
        Tensor action;
        ConditioningBundle cond;
    };
    Batch gather(const std::vector<std::size_t>& index, DType dtype) const;
    void append(const EncodedSet& other);
};

EncodedSet encode_windows(const EncoderSuite& enc, const std::vector<const ObservationWindow*>& windows,
                          const std::vector<const std::vector<double>*>& actions, const DiTConfig& cfg);
EncodedSet encode_demos(const EncoderSuite& enc, const Dataset& data, const DiTConfig& cfg);

// DiT config of the shared base (no auxiliary input).
DiTConfig base_dit_config(const RunConfig& cfg);
ParamStore init_base_params(const RunConfig& cfg);

struct TrainLog {
    std::vector<double> losses;
    std::uint64_t frozen_hash_start = 0;
    std::uint64_t frozen_hash_end = 0;
    bool frozen_ok() const { return frozen_hash_start == frozen_hash_end; }
};

// Fine-tunes the model's trainable entries; batches and flow noise come from
// streams derived from `seed`.
TrainLog train_policy(PolicyModel& model, const EncodedSet& data, const TrainSettings& settings,
                      std::uint64_t seed);

struct EpisodeLog {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    bool success = false;
    double final_x = 0, final_y = 0;
    double goal_x = 0, goal_y = 0;
};

struct EvalResult {
    std::size_t n = 0;
    std::size_t successes = 0;
    double rate = 0, lo = 0, hi = 0;
    std::vector<EpisodeLog> episodes;

    double half_width() const { return 0.5 * (hi - lo); }
};

// 95% Wilson score interval for k successes out of n.
std::pair<double, double> wilson_interval(std::size_t k, std::size_t n, double z = 1.959963984540054);

// Maps a chunk of episodes to one H x 2 action chunk each.
using PolicyFn = std::function<std::vector<std::vector<double>>(const std::vector<Episode>&)>;

EvalResult evaluate_policy(const TaskSpec& spec, const PolicyFn& policy, std::size_t n, std::uint64_t seed);

// Samples each episode's chunk with K Euler steps from per-episode noise.
PolicyFn model_policy(const RunConfig& cfg, const PolicyModel& model, const EncoderSuite& enc);

EvalResult evaluate_model(const RunConfig& cfg, const PolicyModel& model, std::size_t n, std::uint64_t seed);

// Trains the base on a mixture of task families and returns its parameters.
ParamStore pretrain_base(const RunConfig& cfg, std::vector<double>* losses = nullptr);

struct RunResult {
    PolicyModel model;
    TrainLog log;
    std::uint64_t base_hash = 0;
};

// Builds the variant from `base`, fine-tunes it on the configured task, and
// (when `dir` is non-empty) writes the run directory. Throws
// ContractViolation after writing a FAILED audit if frozen entries moved.
RunResult train_run(const RunConfig& cfg, const ParamStore& base, const std::filesystem::path& dir,
                    const Dataset* data = nullptr);

// Same as train_run, but reuses `dir` when it already holds a completed,
// audited run of an identical config built from the same base.
RunResult train_or_load(const RunConfig& cfg, const ParamStore& base, const std::filesystem::path& dir,
                        const Dataset* data = nullptr);

struct FreezeManifest {
    std::string variant;
    std::set<std::string> trainable;
    std::set<std::string> frozen;
    std::uint64_t base_hash = 0;
    TrainSettings budget;
};

std::string manifest_json(const PolicyModel& model, std::uint64_t base_hash, const TrainSettings& budget);
FreezeManifest parse_manifest(const std::string& text);

struct LoadedRun {
    RunConfig config;
    PolicyModel model;
    FreezeManifest manifest;
};

// Loads a run directory and cross-checks the manifest against the freeze
// plan and checkpoint flags; throws ContractViolation on any disagreement.
LoadedRun load_run(const std::filesystem::path& dir);

// Evaluates a run directory and writes eval.json and episodes.csv into it.
EvalResult evaluate_run(const std::filesystem::path& dir, std::size_t n, std::uint64_t seed,
                        const std::vector<std::pair<std::string, std::string>>& overrides = {});

struct Method {
    Variant variant = Variant::baseline;
    EncoderKind encoder = EncoderKind::none;
    std::string label() const;
};

Method parse_method(const std::string& text);  // "baseline", "pvi@temporal", ...

struct CellResult {
    TaskFamily task = TaskFamily::reach;
    Method method;
    EvalResult eval;
    std::uint64_t base_hash = 0;
    TrainSettings budget;
};

struct CompareResult {
    std::vector<TaskFamily> tasks;
    std::vector<Method> methods;
    std::vector<CellResult> cells;

    const CellResult& cell(TaskFamily task, const Method& method) const;
    std::string table() const;  // rows = tasks, columns = methods, then Average and delta vs baseline
    std::string csv() const;
    std::string json() const;
};

// Per-cell config: same budget, per-cell seeds derived from the cell name so
// results do not depend on matrix order.
RunConfig cell_config(const RunConfig& cfg, TaskFamily task, const Method& method);

CompareResult compare(const RunConfig& cfg, const ParamStore& base, const std::vector<TaskFamily>& tasks,
                      const std::vector<Method>& methods, const std::filesystem::path& out_dir,
                      std::size_t jobs = 1);

enum class AblationKind { temporal_context, freeze_projector, no_zero_init, sampler_k };

AblationKind parse_ablation(const std::string& name);
const char* ablation_name(AblationKind kind);

struct AblationRow {
    std::string method;
    std::string setting;
    std::size_t frames = 0;
    EvalResult eval;
    double init_max_diff = 0;  // step-0 output change versus the base
};

std::vector<AblationRow> ablate(AblationKind kind, const RunConfig& cfg, const ParamStore& base,
                                const std::filesystem::path& out_dir);
std::string ablation_table(const std::vector<AblationRow>& rows);
std::string ablation_json(const std::vector<AblationRow>& rows);

// Largest |v_hat(model) - v_hat(base)| over `samples` random inputs.
double init_output_gap(const RunConfig& cfg, const PolicyModel& model, const ParamStore& base,
                       std::size_t samples, std::uint64_t seed);

struct ParamRow {
    std::string module;
    std::size_t trainable = 0;
    std::size_t total = 0;
};

struct ParamReport {
    std::vector<ParamRow> rows;
    std::size_t trainable = 0;
    std::size_t total = 0;
    double ratio = 0;

    std::string text() const;
    std::string json() const;
};

ParamReport param_report(const RunConfig& cfg);

// Summary of a run directory (after load_run's contract checks).
std::string run_report(const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace pvilab
