#include "pvilab/taskbench.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "pvilab/checkpoint.hpp"
#include "pvilab/rng.hpp"

namespace pvilab {

using nlohmann::json;

TaskFamily parse_family(const std::string& name) {
    if (name == "reach") return TaskFamily::reach;
    if (name == "intercept") return TaskFamily::intercept;
    if (name == "multiphase") return TaskFamily::multiphase;
    throw std::invalid_argument("unknown task family '" + name + "'");
}

const char* family_name(TaskFamily family) {
    switch (family) {
        case TaskFamily::reach: return "reach";
        case TaskFamily::intercept: return "intercept";
        case TaskFamily::multiphase: return "multiphase";
    }
    return "?";
}

void TaskSpec::validate() const {
    if (!(success_radius > 0)) throw std::invalid_argument("task: success_radius must be > 0");
    if (n_demos < 1) throw std::invalid_argument("task: n_demos must be >= 1");
    if (grid < 4) throw std::invalid_argument("task: grid must be >= 4");
    if (horizon < 2) throw std::invalid_argument("task: horizon must be >= 2");
    if (history < 1) throw std::invalid_argument("task: history must be >= 1");
    if (noise_std < 0 || blob_sigma <= 0 || speed < 0 || direction_spread < 0) {
        throw std::invalid_argument("task: negative noise, speed or spread");
    }
}

double pixel_to_world(double px) { return px / 4.0 - 2.0; }
double world_to_pixel(double u) { return (u + 2.0) * 4.0; }

std::vector<double> render_blob(std::size_t grid, double sigma_px, double x, double y) {
    std::vector<double> img(grid * grid);
    const double cx = world_to_pixel(x);
    const double cy = world_to_pixel(y);
    const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
    for (std::size_t r = 0; r < grid; ++r) {
        for (std::size_t c = 0; c < grid; ++c) {
            const double dx = static_cast<double>(c) - cx;
            const double dy = static_cast<double>(r) - cy;
            img[r * grid + c] = std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
    return img;
}

std::vector<double> straight_line(double fx, double fy, double tx, double ty, std::size_t horizon) {
    std::vector<double> out(horizon * 2);
    for (std::size_t k = 1; k <= horizon; ++k) {
        const double s = static_cast<double>(k) / static_cast<double>(horizon);
        out[(k - 1) * 2] = fx + s * (tx - fx);
        out[(k - 1) * 2 + 1] = fy + s * (ty - fy);
    }
    return out;
}

namespace {

struct Track {
    // target position as a function of the (non-positive) tick
    std::function<std::pair<double, double>(int)> at;
};

ObservationWindow render_window(const TaskSpec& spec, const Track& track, double ex, double ey) {
    ObservationWindow w;
    w.views = 1;
    w.frames = spec.history;
    w.grid = spec.grid;
    w.instruction = family_name(spec.family);
    w.state = {ex, ey};
    w.pixels.reserve(spec.history * spec.grid * spec.grid);
    for (std::size_t f = 0; f < spec.history; ++f) {
        const int tick = static_cast<int>(f) - static_cast<int>(spec.history) + 1;
        const auto [x, y] = track.at(tick);
        const auto img = render_blob(spec.grid, spec.blob_sigma, x, y);
        w.pixels.insert(w.pixels.end(), img.begin(), img.end());
    }
    return w;
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Episode make_intercept(const TaskSpec& spec, std::uint64_t seed, Rng& rng, double ex, double ey, double vx,
                       double vy, int age) {
    Episode ep;
    ep.family = spec.family;
    ep.seed = seed;
    auto& h = ep.hidden;
    h.px = uniform(rng, -0.75, 0.75);
    h.py = uniform(rng, -0.75, 0.75);
    h.vx = vx;
    h.vy = vy;
    h.age = age;
    h.gx = h.px + static_cast<double>(spec.horizon) * vx;
    h.gy = h.py + static_cast<double>(spec.horizon) * vy;
    // before the episode began the target sat at its start point
    Track track{[h](int tick) {
        const double k = static_cast<double>(std::max(tick, -h.age));
        return std::pair{h.px + k * h.vx, h.py + k * h.vy};
    }};
    ep.window = render_window(spec, track, ex, ey);
    ep.oracle = straight_line(ex, ey, h.gx, h.gy, spec.horizon);
    return ep;
}

}  // namespace

Episode gen_intercept(const TaskSpec& spec, std::uint64_t seed, double vx, double vy, int age) {
    spec.validate();
    Rng rng(derive_seed(seed, "episode"));
    const double ex = uniform(rng, -1.5, 1.5);
    const double ey = uniform(rng, -1.5, 1.5);
    TaskSpec s = spec;
    s.family = TaskFamily::intercept;
    return make_intercept(s, seed, rng, ex, ey, vx, vy, age);
}

Episode gen_episode(const TaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, "episode"));
    const double ex = uniform(rng, -1.5, 1.5);
    const double ey = uniform(rng, -1.5, 1.5);
    const auto H = spec.horizon;

    switch (spec.family) {
        case TaskFamily::reach: {
            Episode ep;
            ep.family = spec.family;
            ep.seed = seed;
            auto& h = ep.hidden;
            h.px = uniform(rng, -1.0, 1.0);
            h.py = uniform(rng, -1.0, 1.0);
            h.gx = h.px;
            h.gy = h.py;
            Track track{[h](int) { return std::pair{h.px, h.py}; }};
            ep.window = render_window(spec, track, ex, ey);
            ep.oracle = straight_line(ex, ey, h.gx, h.gy, H);
            return ep;
        }
        case TaskFamily::intercept: {
            // current position is drawn independently of the velocity so a
            // single frame carries no information about the motion
            Rng prior(derive_seed(seed, "velocity"));
            const double theta =
                spec.direction_mean + uniform(prior, -0.5, 0.5) * spec.direction_spread;
            const int age = std::uniform_int_distribution<int>(1, 4)(prior);
            return make_intercept(spec, seed, rng, ex, ey, spec.speed * std::cos(theta),
                                  spec.speed * std::sin(theta), age);
        }
        case TaskFamily::multiphase: {
            Episode ep;
            ep.family = spec.family;
            ep.seed = seed;
            auto& h = ep.hidden;
            h.px = uniform(rng, -1.0, 1.0);
            h.py = uniform(rng, -1.0, 1.0);
            h.phase = std::bernoulli_distribution(0.5)(rng) ? 1 : -1;
            h.gx = h.px;
            h.gy = h.py;
            h.wx = h.px;
            h.wy = h.py + 0.6 * h.phase;
            // cue: the target drifts along +-y during the first half of the
            // history, then rests at p
            const int half = static_cast<int>(spec.history / 2);
            const double step = spec.speed > 0 ? spec.speed : 0.125;
            Track track{[h, half, step](int tick) {
                const double k = static_cast<double>(std::min(0, tick + half));
                return std::pair{h.px, h.py + k * step * h.phase};
            }};
            ep.window = render_window(spec, track, ex, ey);
            const std::size_t mid = H / 2;
            auto first = straight_line(ex, ey, h.wx, h.wy, mid);
            auto second = straight_line(h.wx, h.wy, h.gx, h.gy, H - mid);
            first.insert(first.end(), second.begin(), second.end());
            ep.oracle = std::move(first);
            return ep;
        }
    }
    throw std::logic_error("unhandled family");
}

bool success(std::span<const double> action, const Episode& episode, const TaskSpec& spec) {
    if (action.size() != spec.horizon * 2) {
        throw std::invalid_argument("success: action has " + std::to_string(action.size()) + " values, expected " +
                                    std::to_string(spec.horizon * 2));
    }
    const double eps2 = spec.success_radius * spec.success_radius;
    auto d2 = [&](std::size_t k, double x, double y) {
        const double dx = action[k * 2] - x;
        const double dy = action[k * 2 + 1] - y;
        return dx * dx + dy * dy;
    };
    const auto& h = episode.hidden;
    if (d2(spec.horizon - 1, h.gx, h.gy) > eps2) return false;
    if (episode.family != TaskFamily::multiphase) return true;
    for (std::size_t k = 0; k < spec.horizon; ++k) {
        if (d2(k, h.wx, h.wy) <= eps2) return true;
    }
    return false;
}

double ambiguity_bound(const TaskSpec& spec, std::size_t draws, std::uint64_t seed) {
    if (spec.family != TaskFamily::intercept) {
        throw std::invalid_argument("ambiguity_bound is defined for the intercept family only");
    }
    if (draws == 0) throw std::invalid_argument("ambiguity_bound: draws must be > 0");
    const double R = static_cast<double>(spec.horizon) * spec.speed;
    const double eps = spec.success_radius;
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<double> dx(draws), dy(draws);
    for (std::size_t i = 0; i < draws; ++i) {
        const double th = spec.direction_mean + u(rng) * spec.direction_spread;
        dx[i] = R * std::cos(th);
        dy[i] = R * std::sin(th);
    }
    // The best guess lies on the prior's symmetry axis within eps of the ring.
    const std::size_t grid = 241;
    const double lo = std::max(0.0, R - eps);
    const double hi = R + eps;
    const double ax = std::cos(spec.direction_mean);
    const double ay = std::sin(spec.direction_mean);
    std::size_t best = 0;
    for (std::size_t g = 0; g < grid; ++g) {
        const double rho = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid - 1);
        const double gx = rho * ax;
        const double gy = rho * ay;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < draws; ++i) {
            const double ex = dx[i] - gx;
            const double ey = dy[i] - gy;
            if (ex * ex + ey * ey <= eps * eps) ++hits;
        }
        best = std::max(best, hits);
    }
    return static_cast<double>(best) / static_cast<double>(draws);
}

Dataset make_dataset(const TaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    Dataset data;
    data.spec = spec;
    data.seed = seed;
    data.demos.reserve(spec.n_demos);
    Rng noise(derive_seed(seed, "demo-noise"));
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t i = 0; i < spec.n_demos; ++i) {
        Episode ep = gen_episode(spec, derive_seed(seed, "demo" + std::to_string(i)));
        Demo d{std::move(ep.window), std::move(ep.oracle)};
        if (spec.noise_std > 0) {
            for (auto& a : d.action) a += spec.noise_std * n01(noise);
        }
        data.demos.push_back(std::move(d));
    }
    return data;
}

std::string spec_to_json(const TaskSpec& spec) {
    json j{{"family", family_name(spec.family)},
           {"grid", spec.grid},
           {"horizon", spec.horizon},
           {"history", spec.history},
           {"noise_std", spec.noise_std},
           {"n_demos", spec.n_demos},
           {"eval_rollouts", spec.eval_rollouts},
           {"success_radius", spec.success_radius},
           {"blob_sigma", spec.blob_sigma},
           {"speed", spec.speed},
           {"direction_mean", spec.direction_mean},
           {"direction_spread", spec.direction_spread}};
    return j.dump();
}

TaskSpec spec_from_json(const std::string& text) {
    const json j = json::parse(text);
    TaskSpec s;
    s.family = parse_family(j.at("family").get<std::string>());
    s.grid = j.at("grid").get<std::size_t>();
    s.horizon = j.at("horizon").get<std::size_t>();
    s.history = j.at("history").get<std::size_t>();
    s.noise_std = j.at("noise_std").get<double>();
    s.n_demos = j.at("n_demos").get<std::size_t>();
    s.eval_rollouts = j.at("eval_rollouts").get<std::size_t>();
    s.success_radius = j.at("success_radius").get<double>();
    s.blob_sigma = j.at("blob_sigma").get<double>();
    s.speed = j.at("speed").get<double>();
    s.direction_mean = j.at("direction_mean").get<double>();
    s.direction_spread = j.at("direction_spread").get<double>();
    return s;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
    const auto& s = data.spec;
    const std::size_t pixels = s.history * s.grid * s.grid;
    json header{{"format", "pvilab-dataset-1"},
                {"spec", json::parse(spec_to_json(s))},
                {"seed", data.seed},
                {"count", data.demos.size()},
                {"record", {{"pixels", pixels}, {"state", s.state_dim()}, {"action", s.horizon * s.action_dim()}}}};
    const std::string line = header.dump() + "\n";
    std::vector<std::uint8_t> out(line.begin(), line.end());
    out.reserve(out.size() + data.demos.size() * (pixels + 2 + s.horizon * 2) * 8);
    for (const auto& d : data.demos) {
        if (d.window.pixels.size() != pixels || d.window.state.size() != 2 || d.action.size() != s.horizon * 2) {
            throw std::invalid_argument("encode_dataset: record does not match the spec's fixed layout");
        }
        for (double v : d.window.pixels) le::put_f64(out, v);
        for (double v : d.window.state) le::put_f64(out, v);
        for (double v : d.action) le::put_f64(out, v);
    }
    return out;
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
    const auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t{'\n'});
    if (nl == bytes.end()) throw std::runtime_error("dataset: missing header line");
    const json header = json::parse(std::string(bytes.begin(), nl));
    if (header.value("format", "") != "pvilab-dataset-1") throw std::runtime_error("dataset: unknown format");
    Dataset data;
    data.spec = spec_from_json(header.at("spec").dump());
    data.seed = header.at("seed").get<std::uint64_t>();
    const auto count = header.at("count").get<std::size_t>();
    const auto& s = data.spec;
    const std::size_t pixels = s.history * s.grid * s.grid;
    le::Reader r(bytes.subspan(static_cast<std::size_t>(nl - bytes.begin()) + 1));
    const std::size_t record = (pixels + 2 + s.horizon * 2) * 8;
    if (r.remaining() != count * record) {
        throw std::runtime_error("dataset: payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                                 std::to_string(count * record));
    }
    data.demos.resize(count);
    for (auto& d : data.demos) {
        d.window.views = 1;
        d.window.frames = s.history;
        d.window.grid = s.grid;
        d.window.instruction = family_name(s.family);
        d.window.pixels.resize(pixels);
        for (auto& v : d.window.pixels) v = r.f64();
        d.window.state = {r.f64(), r.f64()};
        d.action.resize(s.horizon * 2);
        for (auto& v : d.action) v = r.f64();
    }
    return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
    write_file(path, encode_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

}  // namespace pvilab
