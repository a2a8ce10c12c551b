#include "pvilab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "pvilab/checkpoint.hpp"
#include "pvilab/flow_match.hpp"
#include "pvilab/ops.hpp"
#include "pvilab/rng.hpp"

namespace pvilab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool g_verbose = false;
std::mutex g_log_mutex;

std::string hex64(std::uint64_t x) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
    return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument("bad hex value '" + s + "'");
    return v;
}

std::string pct(double rate) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * rate;
    return os.str();
}

}  // namespace

void set_verbose(bool on) { g_verbose = on; }

void log_line(const std::string& line) {
    if (!g_verbose) return;
    std::lock_guard<std::mutex> lock(g_log_mutex);
    std::cerr << line << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// encoding

EncoderSuite::EncoderSuite(const RunConfig& cfg) : vlm(cfg.dit.cond_len, cfg.dit.cond_dim, cfg.vlm_seed) {
    if (cfg.encoder.kind != EncoderKind::none) {
        EncoderSpec spec = cfg.encoder;
        spec.grid = cfg.task.grid;
        aux.emplace(spec);
    }
}

EncodedSet::Batch EncodedSet::gather(const std::vector<std::size_t>& index, DType dtype) const {
    const std::size_t B = index.size();
    auto pick = [&](const std::vector<double>& src, std::size_t width) {
        std::vector<double> out(B * width);
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(index[b] * width), width,
                        out.begin() + static_cast<std::ptrdiff_t>(b * width));
        }
        return out;
    };
    Batch batch;
    batch.state = Tensor::from({B, state_dim}, pick(state, state_dim), dtype);
    if (!action.empty()) {
        batch.action = Tensor::from({B, horizon, action_dim}, pick(action, horizon * action_dim), dtype);
    }
    batch.cond.z_vl = Tensor::from({B, cond_len, cond_dim}, pick(z_vl, cond_len * cond_dim), dtype);
    if (aux_len > 0) batch.cond.z_aux = Tensor::from({B, aux_len, aux_dim}, pick(z_aux, aux_len * aux_dim), dtype);
    return batch;
}

void EncodedSet::append(const EncodedSet& other) {
    if (n == 0 && state.empty()) {
        *this = other;
        return;
    }
    if (other.cond_len != cond_len || other.cond_dim != cond_dim || other.aux_len != aux_len ||
        other.aux_dim != aux_dim || other.horizon != horizon) {
        throw std::invalid_argument("EncodedSet::append: layouts differ");
    }
    n += other.n;
    state.insert(state.end(), other.state.begin(), other.state.end());
    action.insert(action.end(), other.action.begin(), other.action.end());
    z_vl.insert(z_vl.end(), other.z_vl.begin(), other.z_vl.end());
    z_aux.insert(z_aux.end(), other.z_aux.begin(), other.z_aux.end());
}

EncodedSet encode_windows(const EncoderSuite& enc, const std::vector<const ObservationWindow*>& windows,
                          const std::vector<const std::vector<double>*>& actions, const DiTConfig& cfg) {
    EncodedSet set;
    set.n = windows.size();
    set.state_dim = cfg.state_dim;
    set.horizon = cfg.horizon;
    set.action_dim = cfg.action_dim;
    set.cond_len = enc.vlm.len();
    set.cond_dim = enc.vlm.dim();
    if (enc.aux) {
        set.aux_len = enc.aux->out_len();
        set.aux_dim = enc.aux->out_dim();
    }
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const auto& w = *windows[i];
        if (w.state.size() != cfg.state_dim) throw std::invalid_argument("window state width mismatch");
        set.state.insert(set.state.end(), w.state.begin(), w.state.end());
        const auto zv = enc.vlm.encode_values(w);
        set.z_vl.insert(set.z_vl.end(), zv.begin(), zv.end());
        if (enc.aux) {
            const auto za = enc.aux->encode_values(w);
            set.z_aux.insert(set.z_aux.end(), za.begin(), za.end());
        }
        if (!actions.empty()) {
            const auto& a = *actions[i];
            if (a.size() != cfg.horizon * cfg.action_dim) throw std::invalid_argument("demo action length mismatch");
            set.action.insert(set.action.end(), a.begin(), a.end());
        }
    }
    return set;
}

EncodedSet encode_demos(const EncoderSuite& enc, const Dataset& data, const DiTConfig& cfg) {
    std::vector<const ObservationWindow*> windows;
    std::vector<const std::vector<double>*> actions;
    for (const auto& d : data.demos) {
        windows.push_back(&d.window);
        actions.push_back(&d.action);
    }
    return encode_windows(enc, windows, actions, cfg);
}

// ---------------------------------------------------------------------------
// training

DiTConfig base_dit_config(const RunConfig& cfg) {
    DiTConfig d = cfg.dit;
    d.horizon = cfg.task.horizon;
    d.action_dim = cfg.task.action_dim();
    d.state_dim = cfg.task.state_dim();
    d.aux_len = 0;
    d.aux_dim = 0;
    return d;
}

ParamStore init_base_params(const RunConfig& cfg) {
    ParamStore store;
    init_base(store, base_dit_config(cfg), cfg.dtype, cfg.base_seed);
    return store;
}

TrainLog train_policy(PolicyModel& model, const EncodedSet& data, const TrainSettings& settings,
                      std::uint64_t seed) {
    if (data.n == 0) throw std::invalid_argument("training set is empty");
    if (settings.batch == 0) throw std::invalid_argument("batch size must be >= 1");
    TrainLog log;
    log.frozen_hash_start = model.params.hash_frozen();
    const DType dtype = model.params.get("dit.cond.w").dtype();
    Rng rng(derive_seed(seed, "train"));
    std::uniform_int_distribution<std::size_t> pick(0, data.n - 1);
    std::vector<std::size_t> index(settings.batch);
    log.losses.reserve(settings.steps);
    for (std::size_t step = 0; step < settings.steps; ++step) {
        for (auto& i : index) i = pick(rng);
        const auto batch = data.gather(index, dtype);
        const FlowBatch fb = make_flow_batch(batch.action, rng);
        Tensor loss = flow_matching_loss(model, batch.state, batch.cond, fb);
        backward(loss);
        log.losses.push_back(loss.item());
        model.params.optimizer_step(settings.lr, settings.optimizer);
        if ((step + 1) % 250 == 0 || step + 1 == settings.steps) {
            double avg = 0;
            const std::size_t from = step + 1 >= 50 ? step + 1 - 50 : 0;
            for (std::size_t k = from; k <= step; ++k) avg += log.losses[k];
            avg /= static_cast<double>(step + 1 - from);
            log_line("  step " + std::to_string(step + 1) + "/" + std::to_string(settings.steps) +
                     "  loss(avg50) " + std::to_string(avg));
        }
    }
    log.frozen_hash_end = model.params.hash_frozen();
    return log;
}

// ---------------------------------------------------------------------------
// evaluation

std::pair<double, double> wilson_interval(std::size_t k, std::size_t n, double z) {
    if (n == 0) return {0.0, 1.0};
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(k) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double centre = (p + z2 / (2 * nn)) / denom;
    const double half = z * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn)) / denom;
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

EvalResult evaluate_policy(const TaskSpec& spec, const PolicyFn& policy, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("evaluation needs at least one rollout");
    EvalResult res;
    res.n = n;
    constexpr std::size_t kChunk = 50;
    for (std::size_t start = 0; start < n; start += kChunk) {
        const std::size_t count = std::min(kChunk, n - start);
        std::vector<Episode> eps;
        eps.reserve(count);
        for (std::size_t i = start; i < start + count; ++i) {
            eps.push_back(gen_episode(spec, derive_seed(seed, "eval" + std::to_string(i))));
        }
        const auto actions = policy(eps);
        if (actions.size() != count) throw std::logic_error("policy returned the wrong number of chunks");
        for (std::size_t j = 0; j < count; ++j) {
            EpisodeLog log;
            log.index = start + j;
            log.seed = eps[j].seed;
            log.success = success(actions[j], eps[j], spec);
            log.final_x = actions[j][(spec.horizon - 1) * 2];
            log.final_y = actions[j][(spec.horizon - 1) * 2 + 1];
            log.goal_x = eps[j].hidden.gx;
            log.goal_y = eps[j].hidden.gy;
            res.successes += log.success ? 1 : 0;
            res.episodes.push_back(log);
        }
    }
    res.rate = static_cast<double>(res.successes) / static_cast<double>(n);
    std::tie(res.lo, res.hi) = wilson_interval(res.successes, n);
    return res;
}

PolicyFn model_policy(const RunConfig& cfg, const PolicyModel& model, const EncoderSuite& enc) {
    return [&cfg, &model, &enc](const std::vector<Episode>& eps) {
        std::vector<const ObservationWindow*> windows;
        for (const auto& e : eps) windows.push_back(&e.window);
        const EncodedSet set = encode_windows(enc, windows, {}, model.config);
        std::vector<std::size_t> index(eps.size());
        for (std::size_t i = 0; i < index.size(); ++i) index[i] = i;
        const DType dtype = model.params.get("dit.cond.w").dtype();
        const auto batch = set.gather(index, dtype);
        const std::size_t H = model.config.horizon, A = model.config.action_dim;
        // per-episode noise keeps each sample independent of the chunking
        std::vector<double> noise;
        noise.reserve(eps.size() * H * A);
        for (const auto& e : eps) {
            Rng rng(derive_seed(e.seed, "sampler"));
            const Tensor z = randn(rng, {H, A}, 1.0, dtype);
            noise.insert(noise.end(), z.data().begin(), z.data().end());
        }
        const Tensor a = euler_integrate(
            [&](const Tensor& at, const std::vector<double>& t) {
                return forward_velocity(model, batch.state, at, t, batch.cond);
            },
            Tensor::from({eps.size(), H, A}, std::move(noise), dtype), cfg.sampler_k);
        std::vector<std::vector<double>> out(eps.size());
        for (std::size_t i = 0; i < eps.size(); ++i) {
            out[i].assign(a.data().begin() + static_cast<std::ptrdiff_t>(i * H * A),
                          a.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * H * A));
        }
        return out;
    };
}

EvalResult evaluate_model(const RunConfig& cfg, const PolicyModel& model, std::size_t n, std::uint64_t seed) {
    const EncoderSuite enc(cfg);
    return evaluate_policy(cfg.task, model_policy(cfg, model, enc), n, seed);
}

// ---------------------------------------------------------------------------
// pretraining and runs

ParamStore pretrain_base(const RunConfig& cfg_in, std::vector<double>* losses) {
    RunConfig cfg = cfg_in;
    cfg.variant = Variant::baseline;
    cfg.encoder.kind = EncoderKind::none;
    cfg.flags = {};
    cfg.finalize();
    const EncoderSuite enc(cfg);
    EncodedSet mix;
    for (TaskFamily fam : cfg.pretrain_families) {
        TaskSpec spec = cfg.task;
        spec.family = fam;
        const Dataset ds = make_dataset(spec, derive_seed(cfg.train.seed, std::string("pretrain/") + family_name(fam)));
        mix.append(encode_demos(enc, ds, cfg.dit));
    }
    PolicyModel model = build_policy(init_base_params(cfg), cfg.dit, Variant::baseline, {}, cfg.train.seed);
    log_line("pretraining base on " + std::to_string(mix.n) + " demos");
    TrainLog log = train_policy(model, mix, cfg.train, derive_seed(cfg.train.seed, "pretrain"));
    if (losses) *losses = log.losses;
    return model.params.clone();
}

namespace {

void check_base(const RunConfig& cfg, const ParamStore& base) {
    const ParamStore expect = init_base_params(cfg);
    bool ok = expect.size() == base.size();
    for (const auto& e : expect.entries()) {
        if (!ok) break;
        ok = base.contains(e.name) && base.get(e.name).shape() == e.value.shape() &&
             base.get(e.name).dtype() == e.value.dtype();
    }
    if (!ok) throw ConfigError("base checkpoint does not match the configured DiT (dit.* and task.horizon)");
}

std::string audit_json(const TrainLog& log) {
    json j{{"frozen_hash_start", hex64(log.frozen_hash_start)},
           {"frozen_hash_end", hex64(log.frozen_hash_end)},
           {"status", log.frozen_ok() ? "OK" : "FAILED"}};
    return j.dump(2) + "\n";
}

std::string metrics_csv(const std::vector<double>& losses) {
    std::ostringstream os;
    os << "step,loss\n";
    os.precision(9);
    for (std::size_t i = 0; i < losses.size(); ++i) os << i << "," << losses[i] << "\n";
    return os.str();
}

}  // namespace

std::string manifest_json(const PolicyModel& model, std::uint64_t base_hash, const TrainSettings& budget) {
    json trainable = json::array(), frozen = json::array();
    for (const auto& e : model.params.entries()) (e.trainable ? trainable : frozen).push_back(e.name);
    json j{{"variant", variant_name(model.variant)},
           {"zero_init", model.options.zero_init},
           {"freeze_projector", model.options.freeze_projector},
           {"trainable", trainable},
           {"frozen", frozen},
           {"trainable_count", model.params.trainable_count()},
           {"total_count", model.params.total_count()},
           {"base_hash", hex64(base_hash)},
           {"budget",
            {{"steps", budget.steps},
             {"batch", budget.batch},
             {"lr", budget.lr},
             {"optimizer", optimizer_name(budget.optimizer)}}}};
    return j.dump(2) + "\n";
}

FreezeManifest parse_manifest(const std::string& text) {
    try {
        const json j = json::parse(text);
        FreezeManifest m;
        m.variant = j.at("variant").get<std::string>();
        for (const auto& n : j.at("trainable")) m.trainable.insert(n.get<std::string>());
        for (const auto& n : j.at("frozen")) m.frozen.insert(n.get<std::string>());
        m.base_hash = parse_hex64(j.at("base_hash").get<std::string>());
        const auto& b = j.at("budget");
        m.budget.steps = b.at("steps").get<std::size_t>();
        m.budget.batch = b.at("batch").get<std::size_t>();
        m.budget.lr = b.at("lr").get<double>();
        m.budget.optimizer = parse_optimizer(b.at("optimizer").get<std::string>());
        return m;
    } catch (const std::exception& e) {
        throw ContractViolation(std::string("freeze manifest unreadable: ") + e.what());
    }
}

RunResult train_run(const RunConfig& cfg_in, const ParamStore& base, const fs::path& dir, const Dataset* data) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    check_base(cfg, base);
    std::optional<Dataset> local;
    if (!data) {
        local = make_dataset(cfg.task, derive_seed(cfg.train.seed, "data"));
        data = &*local;
    }
    if (data->spec.horizon != cfg.task.horizon || data->spec.grid != cfg.task.grid) {
        throw ConfigError("dataset layout does not match task config");
    }
    const EncoderSuite enc(cfg);
    const EncodedSet set = encode_demos(enc, *data, cfg.dit);

    RunResult res{build_policy(base, cfg.dit, cfg.variant, cfg.variant_options(),
                               derive_seed(cfg.train.seed, "plugin")),
                  {},
                  base.hash_all()};
    if (!dir.empty()) {
        fs::create_directories(dir);
        fs::remove(dir / "audit.json");
        write_text(dir / "config.txt", cfg.to_text());
        write_text(dir / "freeze_manifest.json", manifest_json(res.model, res.base_hash, cfg.train));
    }
    log_line("training " + std::string(variant_name(cfg.variant)) + "@" + encoder_name(cfg.encoder.kind) + " on " +
             family_name(cfg.task.family) + " (" + std::to_string(res.model.params.trainable_count()) + "/" +
             std::to_string(res.model.params.total_count()) + " trainable)");
    res.log = train_policy(res.model, set, cfg.train, cfg.train.seed);
    if (!dir.empty()) {
        write_text(dir / "metrics.csv", metrics_csv(res.log.losses));
        save_checkpoint(res.model.params, dir / "checkpoint.bin");
        write_text(dir / "audit.json", audit_json(res.log));
    }
    if (!res.log.frozen_ok()) {
        throw ContractViolation("frozen parameters changed during training (hash " + hex64(res.log.frozen_hash_start) +
                                " -> " + hex64(res.log.frozen_hash_end) + ")");
    }
    return res;
}

LoadedRun load_run(const fs::path& dir) {
    RunConfig cfg = RunConfig::load((dir / "config.txt").string());
    cfg.finalize();
    ParamStore params = load_checkpoint(dir / "checkpoint.bin");
    const FreezeManifest manifest = parse_manifest(read_text(dir / "freeze_manifest.json"));

    if (manifest.variant != variant_name(cfg.variant)) {
        throw ContractViolation("manifest variant '" + manifest.variant + "' differs from config variant '" +
                                variant_name(cfg.variant) + "'");
    }
    const auto plan = freeze_plan(params, cfg.variant, cfg.variant_options());
    std::set<std::string> flagged, all;
    for (const auto& e : params.entries()) {
        all.insert(e.name);
        if (e.trainable) flagged.insert(e.name);
    }
    std::set<std::string> frozen;
    std::set_difference(all.begin(), all.end(), plan.begin(), plan.end(), std::inserter(frozen, frozen.end()));
    auto first_diff = [](const std::set<std::string>& a, const std::set<std::string>& b) {
        std::vector<std::string> d;
        std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(d));
        return d.empty() ? std::string() : d.front();
    };
    if (manifest.trainable != plan || manifest.frozen != frozen) {
        const auto d = first_diff(manifest.trainable, plan);
        throw ContractViolation("freeze manifest disagrees with the freeze plan of " +
                                std::string(variant_name(cfg.variant)) +
                                (d.empty() ? std::string() : " (first difference: '" + d + "')"));
    }
    if (flagged != plan) {
        throw ContractViolation("checkpoint trainable flags disagree with the freeze plan (first difference: '" +
                                first_diff(flagged, plan) + "')");
    }
    const json audit = json::parse(read_text(dir / "audit.json"));
    if (audit.at("status").get<std::string>() != "OK" ||
        audit.at("frozen_hash_start").get<std::string>() != audit.at("frozen_hash_end").get<std::string>()) {
        throw ContractViolation("run audit reports a freezing violation");
    }
    if (hex64(params.hash_frozen()) != audit.at("frozen_hash_end").get<std::string>()) {
        throw ContractViolation("checkpoint frozen entries do not match the audited hash");
    }
    PolicyModel model{cfg.dit, cfg.variant, cfg.variant_options(), std::move(params)};
    return {cfg, std::move(model), manifest};
}

RunResult train_or_load(const RunConfig& cfg_in, const ParamStore& base, const fs::path& dir, const Dataset* data) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    if (!dir.empty() && fs::exists(dir / "audit.json") && fs::exists(dir / "checkpoint.bin")) {
        try {
            if (read_text(dir / "config.txt") == cfg.to_text()) {
                LoadedRun run = load_run(dir);
                if (run.manifest.base_hash == base.hash_all()) {
                    RunResult res{std::move(run.model), {}, run.manifest.base_hash};
                    log_line("reusing completed run in " + dir.string());
                    return res;
                }
            }
        } catch (const std::exception& e) {
            log_line("cannot reuse " + dir.string() + ": " + e.what());
        }
    }
    return train_run(cfg, base, dir, data);
}

EvalResult evaluate_run(const fs::path& dir, std::size_t n, std::uint64_t seed,
                        const std::vector<std::pair<std::string, std::string>>& overrides) {
    LoadedRun run = load_run(dir);
    RunConfig cfg = run.config;
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    cfg.finalize();
    const auto& m = run.model.config;
    if (cfg.dit.horizon != m.horizon || cfg.dit.aux_len != m.aux_len || cfg.dit.aux_dim != m.aux_dim ||
        cfg.dit.cond_len != m.cond_len || cfg.dit.cond_dim != m.cond_dim || cfg.variant != run.model.variant ||
        cfg.dit.hidden != m.hidden || cfg.dit.blocks != m.blocks || cfg.task.grid != run.config.task.grid) {
        throw ConfigError("evaluation config does not match the trained model (task/encoder extents differ)");
    }
    if (n == 0) n = cfg.task.eval_rollouts;
    const EvalResult res = evaluate_model(cfg, run.model, n, seed);
    json j{{"rollouts", res.n},   {"successes", res.successes}, {"rate", res.rate}, {"wilson_lo", res.lo},
           {"wilson_hi", res.hi}, {"seed", seed},              {"sampler_k", cfg.sampler_k},
           {"task", family_name(cfg.task.family)}};
    write_text(dir / "eval.json", j.dump(2) + "\n");
    std::ostringstream os;
    os << "index,seed,success,final_x,final_y,goal_x,goal_y\n";
    os.precision(9);
    for (const auto& e : res.episodes) {
        os << e.index << "," << e.seed << "," << (e.success ? 1 : 0) << "," << e.final_x << "," << e.final_y << ","
           << e.goal_x << "," << e.goal_y << "\n";
    }
    write_text(dir / "episodes.csv", os.str());
    return res;
}

// ---------------------------------------------------------------------------
// comparison matrix

std::string Method::label() const {
    if (variant == Variant::baseline) return "baseline";
    return std::string(variant_name(variant)) + "@" + encoder_name(encoder);
}

Method parse_method(const std::string& text) {
    const auto at = text.find('@');
    Method m;
    m.variant = parse_variant(text.substr(0, at));
    if (at == std::string::npos) {
        if (m.variant != Variant::baseline) {
            throw std::invalid_argument("method '" + text + "' needs an encoder, e.g. pvi@temporal");
        }
        return m;
    }
    m.encoder = parse_encoder(text.substr(at + 1));
    if (m.variant == Variant::baseline && m.encoder != EncoderKind::none) {
        throw std::invalid_argument("baseline takes no auxiliary encoder");
    }
    return m;
}

RunConfig cell_config(const RunConfig& cfg, TaskFamily task, const Method& method) {
    RunConfig c = cfg;
    c.task.family = task;
    c.variant = method.variant;
    c.encoder.kind = method.encoder;
    if (method.encoder == EncoderKind::static_image) {
        c.encoder.window = 1;
    } else if (cfg.encoder.kind == EncoderKind::static_image || cfg.encoder.window < 2) {
        c.encoder.window = 8;
    }
    if (!uses_aux(method.variant)) c.flags.freeze_projector = false;
    c.train.seed = derive_seed(cfg.train.seed, std::string("cell/") + family_name(task) + "/" + method.label());
    c.finalize();
    return c;
}

const CellResult& CompareResult::cell(TaskFamily task, const Method& method) const {
    for (const auto& c : cells) {
        if (c.task == task && c.method.label() == method.label()) return c;
    }
    throw std::out_of_range("no cell " + std::string(family_name(task)) + "/" + method.label());
}

namespace {

std::optional<std::size_t> baseline_column(const std::vector<Method>& methods) {
    for (std::size_t i = 0; i < methods.size(); ++i) {
        if (methods[i].variant == Variant::baseline) return i;
    }
    return std::nullopt;
}

}  // namespace

std::string CompareResult::table() const {
    std::ostringstream os;
    const int w0 = 20, w = 22;
    os << std::left << std::setw(w0) << "task";
    for (const auto& m : methods) os << std::right << std::setw(w) << m.label();
    os << "\n";
    std::vector<double> avg(methods.size(), 0.0);
    for (auto t : tasks) {
        os << std::left << std::setw(w0) << family_name(t);
        for (std::size_t i = 0; i < methods.size(); ++i) {
            const double r = cell(t, methods[i]).eval.rate;
            avg[i] += r / static_cast<double>(tasks.size());
            os << std::right << std::setw(w) << pct(r);
        }
        os << "\n";
    }
    os << std::left << std::setw(w0) << "Average";
    for (double a : avg) os << std::right << std::setw(w) << pct(a);
    os << "\n";
    if (const auto b = baseline_column(methods)) {
        os << std::left << std::setw(w0) << "delta vs base (pp)";
        for (double a : avg) {
            std::ostringstream d;
            d << std::showpos << std::fixed << std::setprecision(2) << 100.0 * (a - avg[*b]);
            os << std::right << std::setw(w) << d.str();
        }
        os << "\n";
    }
    return os.str();
}

std::string CompareResult::csv() const {
    std::ostringstream os;
    os << "task,method,successes,rollouts,rate,wilson_lo,wilson_hi\n";
    os.precision(6);
    for (const auto& c : cells) {
        os << family_name(c.task) << "," << c.method.label() << "," << c.eval.successes << "," << c.eval.n << ","
           << c.eval.rate << "," << c.eval.lo << "," << c.eval.hi << "\n";
    }
    return os.str();
}

std::string CompareResult::json() const {
    nlohmann::json j;
    j["cells"] = nlohmann::json::array();
    for (const auto& c : cells) {
        j["cells"].push_back({{"task", family_name(c.task)},
                              {"method", c.method.label()},
                              {"successes", c.eval.successes},
                              {"rollouts", c.eval.n},
                              {"rate", c.eval.rate},
                              {"wilson_lo", c.eval.lo},
                              {"wilson_hi", c.eval.hi},
                              {"base_hash", hex64(c.base_hash)}});
    }
    nlohmann::json avg;
    for (const auto& m : methods) {
        double a = 0;
        for (auto t : tasks) a += cell(t, m).eval.rate / static_cast<double>(tasks.size());
        avg[m.label()] = a;
    }
    j["average"] = avg;
    if (const auto b = baseline_column(methods)) {
        nlohmann::json delta;
        const double base = avg[methods[*b].label()].get<double>();
        for (const auto& m : methods) delta[m.label()] = 100.0 * (avg[m.label()].get<double>() - base);
        j["delta_vs_base_pp"] = delta;
    }
    return j.dump(2) + "\n";
}

CompareResult compare(const RunConfig& cfg, const ParamStore& base, const std::vector<TaskFamily>& tasks,
                      const std::vector<Method>& methods, const fs::path& out_dir, std::size_t jobs) {
    if (tasks.empty() || methods.empty()) throw ConfigError("compare needs at least one task and one method");
    CompareResult result;
    result.tasks = tasks;
    result.methods = methods;

    std::vector<Dataset> datasets;
    for (auto t : tasks) {
        TaskSpec spec = cfg.task;
        spec.family = t;
        datasets.push_back(make_dataset(spec, derive_seed(cfg.train.seed, std::string("data/") + family_name(t))));
    }
    struct Job {
        std::size_t task_index;
        Method method;
    };
    std::vector<Job> queue;
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
        for (const auto& m : methods) queue.push_back({ti, m});
    }
    result.cells.resize(queue.size());
    std::vector<std::string> errors(queue.size());
    std::vector<bool> violation(queue.size(), false);
    std::mutex mu;
    std::size_t next = 0;

    auto worker = [&] {
        for (;;) {
            std::size_t k;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= queue.size()) return;
                k = next++;
            }
            const auto& job = queue[k];
            const TaskFamily task = tasks[job.task_index];
            try {
                const RunConfig c = cell_config(cfg, task, job.method);
                const fs::path dir =
                    out_dir.empty() ? fs::path() : out_dir / family_name(task) / job.method.label();
                RunResult run = train_or_load(c, base, dir, &datasets[job.task_index]);
                CellResult& cell = result.cells[k];
                cell.task = task;
                cell.method = job.method;
                cell.base_hash = run.base_hash;
                cell.budget = c.train;
                // every method sees the same evaluation episodes for a task
                cell.eval = evaluate_model(c, run.model, c.task.eval_rollouts,
                                           derive_seed(cfg.train.seed, std::string("eval/") + family_name(task)));
                log_line("cell " + std::string(family_name(task)) + "/" + job.method.label() + ": " +
                         pct(cell.eval.rate) + "%");
            } catch (const ContractViolation& e) {
                violation[k] = true;
                errors[k] = e.what();
            } catch (const std::exception& e) {
                errors[k] = e.what();
            }
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, queue.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (std::size_t k = 0; k < queue.size(); ++k) {
        if (errors[k].empty()) continue;
        const std::string where = std::string(family_name(tasks[queue[k].task_index])) + "/" + queue[k].method.label();
        if (violation[k]) throw ContractViolation("compare aborted: cell " + where + ": " + errors[k]);
        throw std::runtime_error("compare aborted: cell " + where + ": " + errors[k]);
    }
    // fairness: one base, one budget
    for (const auto& c : result.cells) {
        const auto& f = result.cells.front();
        if (c.base_hash != f.base_hash || c.budget.steps != f.budget.steps || c.budget.batch != f.budget.batch ||
            c.budget.lr != f.budget.lr || c.budget.optimizer != f.budget.optimizer) {
            throw ContractViolation("compare cells do not share the base checkpoint and training budget");
        }
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(out_dir / "results.csv", result.csv());
        write_text(out_dir / "results.json", result.json());
        write_text(out_dir / "table.txt", result.table());
    }
    return result;
}

// ---------------------------------------------------------------------------
// ablations

AblationKind parse_ablation(const std::string& name) {
    if (name == "temporal_context") return AblationKind::temporal_context;
    if (name == "freeze_projector") return AblationKind::freeze_projector;
    if (name == "no_zero_init") return AblationKind::no_zero_init;
    if (name == "sampler_k") return AblationKind::sampler_k;
    throw std::invalid_argument("unknown ablation '" + name + "'");
}

const char* ablation_name(AblationKind kind) {
    switch (kind) {
        case AblationKind::temporal_context: return "temporal_context";
        case AblationKind::freeze_projector: return "freeze_projector";
        case AblationKind::no_zero_init: return "no_zero_init";
        case AblationKind::sampler_k: return "sampler_k";
    }
    return "?";
}

double init_output_gap(const RunConfig& cfg, const PolicyModel& model, const ParamStore& base, std::size_t samples,
                       std::uint64_t seed) {
    const PolicyModel ref = build_policy(base, base_dit_config(cfg), Variant::baseline);
    const auto& d = model.config;
    const DType dtype = model.params.get("dit.cond.w").dtype();
    Rng rng(seed);
    NoGradGuard no_grad;
    ConditioningBundle cond;
    cond.z_vl = randn(rng, {samples, d.cond_len, d.cond_dim}, 1.0, dtype);
    if (d.aux_len > 0) cond.z_aux = randn(rng, {samples, d.aux_len, d.aux_dim}, 1.0, dtype);
    const Tensor state = randn(rng, {samples, d.state_dim}, 1.0, dtype);
    const Tensor a = randn(rng, {samples, d.horizon, d.action_dim}, 1.0, dtype);
    std::vector<double> t(samples);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& x : t) x = u(rng);
    const Tensor v1 = forward_velocity(model, state, a, t, cond);
    const Tensor v0 = forward_velocity(ref, state, a, t, cond);
    double gap = 0;
    for (std::size_t i = 0; i < v1.numel(); ++i) gap = std::max(gap, std::abs(v1[i] - v0[i]));
    return gap;
}

std::vector<AblationRow> ablate(AblationKind kind, const RunConfig& cfg_in, const ParamStore& base,
                                const fs::path& out_dir) {
    RunConfig cfg = cfg_in;
    cfg.variant = Variant::pvi;
    if (cfg.encoder.kind == EncoderKind::none) cfg.encoder.kind = EncoderKind::temporal;
    cfg.flags = {};
    const std::uint64_t eval_seed = derive_seed(cfg.train.seed, "eval/ablate");
    const Dataset data = make_dataset(cfg.task, derive_seed(cfg.train.seed, "data/ablate"));
    const std::string method = std::string("pvi@") + encoder_name(cfg.encoder.kind);

    auto run_row = [&](RunConfig c, const std::string& name, const std::string& setting) {
        c.finalize();
        const fs::path dir = out_dir.empty() ? fs::path() : out_dir / name;
        RunResult run = train_or_load(c, base, dir, &data);
        AblationRow row;
        row.method = method;
        row.setting = setting;
        row.frames = c.encoder.kind == EncoderKind::static_image ? 1 : c.encoder.window;
        {
            const PolicyModel fresh =
                build_policy(base, c.dit, c.variant, c.variant_options(), derive_seed(c.train.seed, "plugin"));
            row.init_max_diff = init_output_gap(c, fresh, base, 32, derive_seed(c.train.seed, "init-gap"));
        }
        if (row.init_max_diff > 1e-6) {
            std::cerr << "warning: " << name << " starts from a non-preserving init (max |dv| = " << row.init_max_diff
                      << ")\n";
        }
        row.eval = evaluate_model(c, run.model, c.task.eval_rollouts, eval_seed);
        log_line("ablation " + name + ": " + pct(row.eval.rate) + "%");
        return row;
    };

    std::vector<AblationRow> rows;
    switch (kind) {
        case AblationKind::temporal_context: {
            if (cfg.encoder.kind != EncoderKind::temporal) {
                throw ConfigError("temporal_context ablation needs encoder.kind = temporal");
            }
            for (std::size_t T : {2, 4, 8, 16}) {
                RunConfig c = cfg;
                c.encoder.window = T;
                rows.push_back(run_row(c, "T" + std::to_string(T), "default"));
            }
            break;
        }
        case AblationKind::freeze_projector: {
            rows.push_back(run_row(cfg, "default", "default"));
            RunConfig c = cfg;
            c.flags.freeze_projector = true;
            rows.push_back(run_row(c, "freeze_projector", "freeze projector"));
            break;
        }
        case AblationKind::no_zero_init: {
            rows.push_back(run_row(cfg, "default", "default"));
            RunConfig c = cfg;
            c.flags.zero_init = false;
            rows.push_back(run_row(c, "no_zero_init", "no zero-init"));
            break;
        }
        case AblationKind::sampler_k: {
            RunConfig c = cfg;
            c.finalize();
            RunResult run = train_or_load(c, base, out_dir.empty() ? fs::path() : out_dir / "default", &data);
            for (std::size_t K : {1, 4, 16}) {
                RunConfig ck = c;
                ck.sampler_k = K;
                AblationRow row;
                row.method = method;
                row.setting = "K=" + std::to_string(K);
                row.frames = c.encoder.kind == EncoderKind::static_image ? 1 : c.encoder.window;
                row.eval = evaluate_model(ck, run.model, ck.task.eval_rollouts, eval_seed);
                rows.push_back(row);
            }
            break;
        }
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(out_dir / "ablation.txt", ablation_table(rows));
        write_text(out_dir / "ablation.json", ablation_json(rows));
    }
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(40) << "Method" << std::right << std::setw(8) << "Frames" << std::setw(16)
       << "Avg success" << std::setw(20) << "95% CI" << "\n";
    for (const auto& r : rows) {
        std::string name = r.method;
        if (r.setting != "default") name += " (" + r.setting + ")";
        os << std::left << std::setw(40) << name << std::right << std::setw(8) << r.frames << std::setw(16)
           << pct(r.eval.rate) << std::setw(20) << ("[" + pct(r.eval.lo) + ", " + pct(r.eval.hi) + "]") << "\n";
    }
    return os.str();
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
    json j = json::array();
    for (const auto& r : rows) {
        j.push_back({{"method", r.method},
                     {"setting", r.setting},
                     {"frames", r.frames},
                     {"rate", r.eval.rate},
                     {"wilson_lo", r.eval.lo},
                     {"wilson_hi", r.eval.hi},
                     {"rollouts", r.eval.n},
                     {"init_max_diff", r.init_max_diff}});
    }
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// parameter accounting

ParamReport param_report(const RunConfig& cfg_in) {
    RunConfig cfg = cfg_in;
    cfg.finalize();
    const PolicyModel model = build_policy(init_base_params(cfg), cfg.dit, cfg.variant, cfg.variant_options(),
                                           derive_seed(cfg.train.seed, "plugin"));
    const EncoderSuite enc(cfg);
    auto by_prefix = [&](const std::string& prefix) {
        ParamRow row;
        for (const auto& e : model.params.entries()) {
            if (prefix.empty() || e.name.compare(0, prefix.size(), prefix) != 0) continue;
            row.total += e.value.numel();
            if (e.trainable) row.trainable += e.value.numel();
        }
        return row;
    };
    ParamReport rep;
    rep.rows.push_back({"vlm-proxy", 0, enc.vlm.parameter_count()});
    ParamRow dit = by_prefix("dit.");
    dit.module = "main DiT";
    rep.rows.push_back(dit);
    ParamRow adapters = by_prefix("adapter.");
    adapters.module = "adapters";
    rep.rows.push_back(adapters);
    rep.rows.push_back({"aux encoder", 0, enc.aux ? enc.aux->parameter_count() : 0});
    const std::string pre = plugin_prefix(cfg.variant);
    ParamRow plug = pre.empty() ? ParamRow{} : by_prefix(pre + ".");
    plug.module = "plug-in branch";
    rep.rows.push_back(plug);
    for (const auto& r : rep.rows) {
        rep.trainable += r.trainable;
        rep.total += r.total;
    }
    rep.ratio = rep.total == 0 ? 0.0 : static_cast<double>(rep.trainable) / static_cast<double>(rep.total);
    return rep;
}

std::string ParamReport::text() const {
    std::ostringstream os;
    os << std::left << std::setw(18) << "module" << std::right << std::setw(12) << "trainable" << std::setw(12)
       << "total" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(18) << r.module << std::right << std::setw(12) << r.trainable << std::setw(12)
           << r.total << "\n";
    }
    os << std::left << std::setw(18) << "total" << std::right << std::setw(12) << trainable << std::setw(12) << total
       << "\n";
    os << "trainable ratio: " << std::fixed << std::setprecision(2) << 100.0 * ratio << "%\n";
    return os.str();
}

std::string ParamReport::json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back({{"module", r.module}, {"trainable", r.trainable}, {"total", r.total}});
    j["trainable"] = trainable;
    j["total"] = total;
    j["trainable_ratio"] = ratio;
    return j.dump(2) + "\n";
}

std::string run_report(const fs::path& dir) {
    const LoadedRun run = load_run(dir);
    std::ostringstream os;
    os << "run: " << dir.string() << "\n";
    os << "variant: " << variant_name(run.config.variant) << "  encoder: " << encoder_name(run.config.encoder.kind)
       << "  task: " << family_name(run.config.task.family) << "\n";
    os << "trainable: " << run.model.params.trainable_count() << " / " << run.model.params.total_count() << "\n";
    os << "base hash: " << hex64(run.manifest.base_hash) << "\n";
    os << "freezing audit: OK\n";
    if (fs::exists(dir / "metrics.csv")) {
        std::istringstream in(read_text(dir / "metrics.csv"));
        std::string line, first, last;
        std::getline(in, line);
        std::size_t rows = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (rows++ == 0) first = line;
            last = line;
        }
        os << "steps: " << rows << "  first: " << first << "  last: " << last << "\n";
    }
    if (fs::exists(dir / "eval.json")) {
        const json e = json::parse(read_text(dir / "eval.json"));
        os << "eval: " << pct(e.at("rate").get<double>()) << "% [" << pct(e.at("wilson_lo").get<double>()) << ", "
           << pct(e.at("wilson_hi").get<double>()) << "] over " << e.at("rollouts").get<std::size_t>()
           << " rollouts\n";
    }
    return os.str();
}

}  // namespace pvilab
