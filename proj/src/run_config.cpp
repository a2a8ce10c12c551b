#include "pvilab/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace pvilab {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size() || x < 0) throw std::invalid_argument("");
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size() || (!v.empty() && v[0] == '-')) throw std::invalid_argument("");
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

std::string fmt(bool b) { return b ? "true" : "false"; }

template <class F>
auto wrap(const std::string& key, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define PV_SIZE(path) \
    Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.path = to_size(k, v); }, \
            [](const RunConfig& c) { return std::to_string(c.path); } }
#define PV_U64(path) \
    Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.path = to_u64(k, v); }, \
            [](const RunConfig& c) { return std::to_string(c.path); } }
#define PV_DOUBLE(path) \
    Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.path = to_double(k, v); }, \
            [](const RunConfig& c) { return fmt(c.path); } }
#define PV_BOOL(path) \
    Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.path = to_bool(k, v); }, \
            [](const RunConfig& c) { return fmt(c.path); } }

const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"task.family",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              c.task.family = wrap(k, [&] { return parse_family(v); });
          },
          [](const RunConfig& c) { return std::string(family_name(c.task.family)); }}},
        {"task.grid", PV_SIZE(task.grid)},
        {"task.horizon", PV_SIZE(task.horizon)},
        {"task.history", PV_SIZE(task.history)},
        {"task.noise_std", PV_DOUBLE(task.noise_std)},
        {"task.n_demos", PV_SIZE(task.n_demos)},
        {"task.eval_rollouts", PV_SIZE(task.eval_rollouts)},
        {"task.success_radius", PV_DOUBLE(task.success_radius)},
        {"task.blob_sigma", PV_DOUBLE(task.blob_sigma)},
        {"task.speed", PV_DOUBLE(task.speed)},
        {"task.direction_mean", PV_DOUBLE(task.direction_mean)},
        {"task.direction_spread", PV_DOUBLE(task.direction_spread)},
        {"dit.blocks", PV_SIZE(dit.blocks)},
        {"dit.hidden", PV_SIZE(dit.hidden)},
        {"dit.heads", PV_SIZE(dit.heads)},
        {"dit.cond_len", PV_SIZE(dit.cond_len)},
        {"dit.cond_dim", PV_SIZE(dit.cond_dim)},
        {"dit.mlp_ratio", PV_SIZE(dit.mlp_ratio)},
        {"dit.dtype",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              if (v == "f32" || v == "float32") c.dtype = DType::f32;
              else if (v == "f64" || v == "float64") c.dtype = DType::f64;
              else throw ConfigError(k + ": expected float32 or float64, got '" + v + "'");
          },
          [](const RunConfig& c) { return std::string(dtype_name(c.dtype)); }}},
        {"variant",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              c.variant = wrap(k, [&] { return parse_variant(v); });
          },
          [](const RunConfig& c) { return std::string(variant_name(c.variant)); }}},
        {"encoder.kind",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              c.encoder.kind = wrap(k, [&] { return parse_encoder(v); });
          },
          [](const RunConfig& c) { return std::string(encoder_name(c.encoder.kind)); }}},
        {"encoder.window", PV_SIZE(encoder.window)},
        {"encoder.dim", PV_SIZE(encoder.out_dim)},
        {"encoder.seed", PV_U64(encoder.seed)},
        {"vlm.seed", PV_U64(vlm_seed)},
        {"base.seed", PV_U64(base_seed)},
        {"pretrain.families",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              std::vector<TaskFamily> fams;
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) {
                  item = trim(item);
                  if (!item.empty()) fams.push_back(wrap(k, [&] { return parse_family(item); }));
              }
              if (fams.empty()) throw ConfigError(k + ": needs at least one family");
              c.pretrain_families = fams;
          },
          [](const RunConfig& c) {
              std::string out;
              for (auto f : c.pretrain_families) out += (out.empty() ? "" : ",") + std::string(family_name(f));
              return out;
          }}},
        {"train.steps", PV_SIZE(train.steps)},
        {"train.batch", PV_SIZE(train.batch)},
        {"train.lr", PV_DOUBLE(train.lr)},
        {"train.optimizer",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              c.train.optimizer = wrap(k, [&] { return parse_optimizer(v); });
          },
          [](const RunConfig& c) { return std::string(optimizer_name(c.train.optimizer)); }}},
        {"train.seed", PV_U64(train.seed)},
        {"flags.freeze_projector", PV_BOOL(flags.freeze_projector)},
        {"flags.zero_init", PV_BOOL(flags.zero_init)},
        {"sampler.k", PV_SIZE(sampler_k)},
    };
    return table;
}

#undef PV_SIZE
#undef PV_U64
#undef PV_DOUBLE
#undef PV_BOOL

const Field& field(const std::string& key) {
    for (const auto& [k, f] : fields()) {
        if (k == key) return f;
    }
    throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> out = [] {
        std::vector<std::string> k;
        for (const auto& [name, f] : fields()) k.push_back(name);
        return k;
    }();
    return out;
}

void RunConfig::finalize() {
    try {
        task.validate();
        if (encoder.kind == EncoderKind::static_image) encoder.window = 1;
        encoder.grid = task.grid;
        if (encoder.kind != EncoderKind::none) encoder.validate();
        if (encoder.kind == EncoderKind::vlm_proxy) throw ConfigError("encoder.kind: vlm_proxy cannot be auxiliary");
        if (uses_aux(variant) && encoder.kind == EncoderKind::none) {
            throw ConfigError(std::string("variant ") + variant_name(variant) + " needs encoder.kind other than none");
        }
        if (flags.freeze_projector && !uses_aux(variant)) {
            throw ConfigError("flags.freeze_projector only applies to variants with an auxiliary projector");
        }
        if (sampler_k == 0) throw ConfigError("sampler.k must be >= 1");
        if (train.batch == 0) throw ConfigError("train.batch must be >= 1");
        if (!(train.lr > 0)) throw ConfigError("train.lr must be > 0");
        dit.horizon = task.horizon;
        dit.action_dim = task.action_dim();
        dit.state_dim = task.state_dim();
        dit.aux_len = encoder.kind == EncoderKind::none ? 0 : encoder.out_len();
        dit.aux_dim = encoder.kind == EncoderKind::none ? 0 : encoder.resolved_dim();
        dit.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

std::string RunConfig::to_text() const {
    std::string out;
    std::string section;
    for (const auto& [key, f] : fields()) {
        const auto dot = key.find('.');
        const std::string s = dot == std::string::npos ? "" : key.substr(0, dot);
        if (s != section && !out.empty()) out += "\n";
        section = s;
        out += key + " = " + f.get(*this) + "\n";
    }
    return out;
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        }
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void apply_seed_env(RunConfig& cfg) {
    if (const char* s = std::getenv("PVILAB_SEED"); s != nullptr && *s != '\0') cfg.set("train.seed", s);
}

}  // namespace pvilab
