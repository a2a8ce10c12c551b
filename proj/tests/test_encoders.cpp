#include <doctest.h>

#include <cmath>

#include "pvilab/encoders.hpp"
#include "pvilab/injection.hpp"
#include "pvilab/rng.hpp"
#include "pvilab/taskbench.hpp"

using namespace pvilab;

namespace {

ObservationWindow window_at(const std::vector<std::pair<double, double>>& path, const std::string& instr = "reach") {
    ObservationWindow w;
    w.frames = path.size();
    for (const auto& [x, y] : path) {
        const auto f = render_blob(16, 1.2, x, y);
        w.pixels.insert(w.pixels.end(), f.begin(), f.end());
    }
    w.state = {0.0, 0.0};
    w.instruction = instr;
    return w;
}

// Solves (X^T X + lambda I) w = X^T y by Gaussian elimination; X rows carry a
// trailing 1 for the intercept.
std::vector<double> ridge_fit(const std::vector<std::vector<double>>& X, const std::vector<double>& y, double lambda) {
    const std::size_t d = X[0].size();
    std::vector<std::vector<double>> A(d, std::vector<double>(d + 1, 0.0));
    for (std::size_t n = 0; n < X.size(); ++n)
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) A[i][j] += X[n][i] * X[n][j];
            A[i][d] += X[n][i] * y[n];
        }
    for (std::size_t i = 0; i < d; ++i) A[i][i] += lambda;
    for (std::size_t c = 0; c < d; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < d; ++r)
            if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
        std::swap(A[c], A[piv]);
        for (std::size_t r = 0; r < d; ++r) {
            if (r == c) continue;
            const double f = A[r][c] / A[c][c];
            for (std::size_t k = c; k <= d; ++k) A[r][k] -= f * A[c][k];
        }
    }
    std::vector<double> w(d);
    for (std::size_t i = 0; i < d; ++i) w[i] = A[i][d] / A[i][i];
    return w;
}

struct Probe {
    double r2 = 0;
    double mse = 0;
};

// Fits on the first half of the scenes and scores on the second half.
Probe probe(const std::vector<std::vector<double>>& feats, const std::vector<std::vector<double>>& targets) {
    const std::size_t n = feats.size(), half = n / 2;
    std::vector<std::vector<double>> X;
    for (const auto& f : feats) {
        auto row = f;
        row.push_back(1.0);
        X.push_back(row);
    }
    std::vector<std::vector<double>> train(X.begin(), X.begin() + half);
    double ss_res = 0, ss_tot = 0;
    for (std::size_t k = 0; k < targets[0].size(); ++k) {
        std::vector<double> y;
        for (std::size_t i = 0; i < half; ++i) y.push_back(targets[i][k]);
        const auto w = ridge_fit(train, y, 1e-3);
        double mean = 0;
        for (std::size_t i = half; i < n; ++i) mean += targets[i][k];
        mean /= static_cast<double>(n - half);
        for (std::size_t i = half; i < n; ++i) {
            double pred = 0;
            for (std::size_t j = 0; j < w.size(); ++j) pred += w[j] * X[i][j];
            ss_res += (pred - targets[i][k]) * (pred - targets[i][k]);
            ss_tot += (targets[i][k] - mean) * (targets[i][k] - mean);
        }
    }
    return {1.0 - ss_res / ss_tot, ss_res / static_cast<double>((n - half) * targets[0].size())};
}

AuxEncoder make(EncoderKind kind, std::size_t window, std::size_t dim = 0, std::uint64_t seed = 3) {
    return AuxEncoder(EncoderSpec{kind, window, dim, 16, seed});
}

}  // namespace

TEST_CASE("VLM proxy is frozen, current-frame only, and not constant") {
    VlmProxy vlm(4, 32, 11);
    CHECK(vlm.bottleneck_width() <= 32 / 4);
    ObservationWindow a = window_at({{-1.0, 0.5}, {0.3, -0.2}});
    ObservationWindow b = window_at({{1.2, 1.2}, {0.3, -0.2}});
    CHECK(vlm.encode_values(a) == vlm.encode_values(a));
    CHECK(vlm.encode_values(a) == vlm.encode_values(b));
    ObservationWindow m1 = window_at({{0.9, 0.6}});
    ObservationWindow m2 = window_at({{-0.9, -0.6}});
    CHECK(vlm.encode_values(m1) != vlm.encode_values(m2));
    CHECK(vlm.encode(a).shape() == Shape{4, 32});
}

TEST_CASE("static encoder separates a 1-pixel pair that collides under the VLM proxy") {
    VlmProxy vlm(4, 32, 11);
    AuxEncoder st = make(EncoderKind::static_image, 1);
    bool found = false;
    for (int px = 0; px < 15 && !found; ++px) {
        const double x0 = pixel_to_world(px + 0.25), x1 = pixel_to_world(px + 1.25), y = pixel_to_world(6.5);
        ObservationWindow a = window_at({{x0, y}}), b = window_at({{x1, y}});
        if (vlm.encode_values(a) != vlm.encode_values(b)) continue;
        found = true;
        const auto sa = st.encode_values(a), sb = st.encode_values(b);
        double gap = 0;
        for (std::size_t i = 0; i < sa.size(); ++i) gap = std::max(gap, std::abs(sa[i] - sb[i]));
        CHECK(gap > 1e-2);
    }
    CHECK(found);
}

TEST_CASE("static encoder ignores past frames and is deterministic") {
    AuxEncoder st = make(EncoderKind::static_image, 1);
    ObservationWindow a = window_at({{-1.0, 0.5}, {0.3, -0.2}});
    ObservationWindow b = window_at({{1.2, 1.2}, {0.3, -0.2}});
    CHECK(st.encode_values(a) == st.encode_values(b));
    CHECK(st.encode_values(a) == make(EncoderKind::static_image, 1).encode_values(a));
    CHECK(st.out_len() == kStaticTokens);
    CHECK(st.out_dim() == kStaticDim);
}

TEST_CASE("temporal encoder on a static scene reduces to its static component") {
    for (std::size_t T : {2, 4, 8, 16}) {
        AuxEncoder te = make(EncoderKind::temporal, T);
        ObservationWindow w = window_at(std::vector<std::pair<double, double>>(T, {0.4, -0.7}));
        const auto z = te.encode_values(w);
        const auto s = te.static_component(w);
        CHECK(te.out_len() == T - 1);
        CHECK(te.out_dim() == kTemporalDim);
        REQUIRE(z.size() == (T - 1) * s.size());
        for (std::size_t l = 0; l + 1 < T; ++l)
            for (std::size_t d = 0; d < s.size(); ++d) CHECK(std::abs(z[l * s.size() + d] - s[d]) <= 1e-12);
    }
}

TEST_CASE("temporal encoder separates clips sharing a final frame") {
    TaskSpec spec;
    spec.family = TaskFamily::intercept;
    Episode a = gen_intercept(spec, 5, 0.125, 0.0, 4);
    Episode b = gen_intercept(spec, 5, 0.0, 0.125, 4);
    REQUIRE(std::vector<double>(a.window.current().begin(), a.window.current().end()) ==
            std::vector<double>(b.window.current().begin(), b.window.current().end()));
    AuxEncoder te = make(EncoderKind::temporal, 8);
    CHECK(te.encode_values(a.window) != te.encode_values(b.window));
    AuxEncoder st = make(EncoderKind::static_image, 1);
    CHECK(st.encode_values(a.window) == st.encode_values(b.window));
}

TEST_CASE("temporal windows below two frames are rejected") {
    CHECK_THROWS_AS(make(EncoderKind::temporal, 1), std::invalid_argument);
}

TEST_CASE("combined encoder concatenates static then temporal tokens") {
    AuxEncoder st = make(EncoderKind::static_image, 1, 48, 3);
    AuxEncoder te = make(EncoderKind::temporal, 4, 48, 4);
    AuxEncoder both = AuxEncoder::combine(st, te);
    TaskSpec spec;
    spec.family = TaskFamily::intercept;
    Episode ep = gen_episode(spec, 9);
    const auto z = both.encode_values(ep.window);
    const auto zs = st.encode_values(ep.window);
    const auto zt = te.encode_values(ep.window);
    CHECK(both.out_len() == st.out_len() + te.out_len());
    REQUIRE(z.size() == zs.size() + zt.size());
    CHECK(std::vector<double>(z.begin(), z.begin() + zs.size()) == zs);
    CHECK(std::vector<double>(z.begin() + zs.size(), z.end()) == zt);
    CHECK(z == AuxEncoder::combine(st, te).encode_values(ep.window));
    CHECK_THROWS_AS(AuxEncoder::combine(make(EncoderKind::static_image, 1), make(EncoderKind::temporal, 4)),
                    std::invalid_argument);

    AuxEncoder from_spec = make(EncoderKind::combined, 4);
    CHECK(from_spec.out_len() == kStaticTokens + 3);
}

TEST_CASE("velocity is linearly decodable from temporal tokens only") {
    TaskSpec spec;
    spec.family = TaskFamily::intercept;
    VlmProxy vlm(4, 32, 11);
    AuxEncoder te = make(EncoderKind::temporal, 8);
    AuxEncoder st = make(EncoderKind::static_image, 1);
    std::vector<std::vector<double>> ft, fs, fv, vel;
    for (std::uint64_t i = 0; i < 1000; ++i) {
        Episode ep = gen_episode(spec, derive_seed(77, "probe" + std::to_string(i)));
        ft.push_back(te.encode_values(ep.window));
        fs.push_back(st.encode_values(ep.window));
        fv.push_back(vlm.encode_values(ep.window));
        vel.push_back({ep.hidden.vx, ep.hidden.vy});
    }
    const double rt = probe(ft, vel).r2, rs = probe(fs, vel).r2, rv = probe(fv, vel).r2;
    MESSAGE("velocity probe R2: temporal " << rt << ", static " << rs << ", vlm " << rv);
    CHECK(rt >= 0.9);
    CHECK(rs <= 0.1);
    CHECK(rv <= 0.1);
}

TEST_CASE("the VLM bottleneck loses target position that the static encoder keeps") {
    TaskSpec spec;
    VlmProxy vlm(4, 32, 11);
    AuxEncoder st = make(EncoderKind::static_image, 1);
    std::vector<std::vector<double>> fs, fv, pos;
    for (std::uint64_t i = 0; i < 1000; ++i) {
        Episode ep = gen_episode(spec, derive_seed(78, "pos" + std::to_string(i)));
        fs.push_back(st.encode_values(ep.window));
        fv.push_back(vlm.encode_values(ep.window));
        pos.push_back({ep.hidden.px, ep.hidden.py});
    }
    const double ms = probe(fs, pos).mse, mv = probe(fv, pos).mse;
    MESSAGE("position probe MSE: static " << ms << ", vlm " << mv);
    CHECK(ms < mv);
}
