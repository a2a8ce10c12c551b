#include "pvilab/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "pvilab/rng.hpp"
#include "pvilab/taskbench.hpp"

namespace pvilab {

EncoderKind parse_encoder(const std::string& name) {
    if (name == "none") return EncoderKind::none;
    if (name == "vlm_proxy") return EncoderKind::vlm_proxy;
    if (name == "static") return EncoderKind::static_image;
    if (name == "temporal") return EncoderKind::temporal;
    if (name == "combined") return EncoderKind::combined;
    throw std::invalid_argument("unknown encoder '" + name + "'");
}

const char* encoder_name(EncoderKind kind) {
    switch (kind) {
        case EncoderKind::none: return "none";
        case EncoderKind::vlm_proxy: return "vlm_proxy";
        case EncoderKind::static_image: return "static";
        case EncoderKind::temporal: return "temporal";
        case EncoderKind::combined: return "combined";
    }
    return "?";
}

std::size_t EncoderSpec::resolved_dim() const {
    if (out_dim != 0) return out_dim;
    switch (kind) {
        case EncoderKind::static_image:
        case EncoderKind::combined: return kStaticDim;
        case EncoderKind::temporal: return kTemporalDim;
        default: return 0;
    }
}

std::size_t EncoderSpec::out_len() const {
    switch (kind) {
        case EncoderKind::static_image: return kStaticTokens;
        case EncoderKind::temporal: return window - 1;
        case EncoderKind::combined: return kStaticTokens + window - 1;
        default: return 0;
    }
}

void EncoderSpec::validate() const {
    if (kind == EncoderKind::vlm_proxy) {
        throw std::invalid_argument("the VLM proxy is configured separately, not as the auxiliary encoder");
    }
    if ((kind == EncoderKind::temporal || kind == EncoderKind::combined) && window < 2) {
        throw std::invalid_argument("temporal encoder needs a window of T >= 2 frames, got " + std::to_string(window));
    }
    if (kind == EncoderKind::static_image && window != 1) {
        throw std::invalid_argument("static encoder consumes exactly one frame (window = 1)");
    }
    if (grid < 4) throw std::invalid_argument("encoder grid must be >= 4");
}

std::pair<double, double> centroid(std::span<const double> frame, std::size_t grid) {
    double total = 0, sx = 0, sy = 0;
    for (std::size_t r = 0; r < grid; ++r) {
        for (std::size_t c = 0; c < grid; ++c) {
            const double v = frame[r * grid + c];
            total += v;
            sx += v * static_cast<double>(c);
            sy += v * static_cast<double>(r);
        }
    }
    if (total <= 0) return {0.0, 0.0};
    return {pixel_to_world(sx / total), pixel_to_world(sy / total)};
}

std::vector<double> orthonormal_columns(std::uint64_t seed, std::size_t rows, std::size_t cols) {
    if (cols > rows) throw std::invalid_argument("orthonormal_columns: cols > rows");
    Rng rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> q(rows * cols);
    for (std::size_t j = 0; j < cols; ++j) {
        std::vector<double> v(rows);
        // modified Gram-Schmidt; redraw on the (practically impossible) degenerate case
        for (;;) {
            for (auto& x : v) x = n01(rng);
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0;
                for (std::size_t i = 0; i < rows; ++i) dot += v[i] * q[i * cols + k];
                for (std::size_t i = 0; i < rows; ++i) v[i] -= dot * q[i * cols + k];
            }
            double norm = 0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (std::size_t i = 0; i < rows; ++i) q[i * cols + j] = v[i] / norm;
                break;
            }
        }
    }
    return q;
}

namespace {

std::vector<double> gaussian(std::uint64_t seed, std::size_t n, double std) {
    Rng rng(seed);
    std::normal_distribution<double> d(0.0, std);
    std::vector<double> out(n);
    for (auto& x : out) x = d(rng);
    return out;
}

// Most recent T frames of view 0, repeating the oldest when the window is short.
std::vector<std::span<const double>> last_frames(const ObservationWindow& w, std::size_t T) {
    std::vector<std::span<const double>> out(T);
    for (std::size_t j = 0; j < T; ++j) {
        const std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(w.frames) - static_cast<std::ptrdiff_t>(T) +
                                   static_cast<std::ptrdiff_t>(j);
        out[j] = w.frame(0, static_cast<std::size_t>(std::max<std::ptrdiff_t>(idx, 0)));
    }
    return out;
}

void check_window(const ObservationWindow& w, std::size_t grid) {
    if (w.grid != grid) {
        throw std::invalid_argument("encoder built for a " + std::to_string(grid) + "-pixel grid got " +
                                    std::to_string(w.grid));
    }
    if (w.frames < 1 || w.pixels.size() != w.views * w.frames * w.frame_size()) {
        throw std::invalid_argument("observation window pixel count does not match its shape");
    }
}

}  // namespace

VlmProxy::VlmProxy(std::size_t cond_len, std::size_t cond_dim, std::uint64_t seed)
    : len_(cond_len), dim_(cond_dim), width_(std::max<std::size_t>(1, cond_dim / 4)), seed_(seed) {
    if (cond_len < 1 || cond_dim < 1) throw std::invalid_argument("vlm proxy: cond_len and cond_dim must be >= 1");
    squeeze_ = gaussian(derive_seed(seed, "vlm.squeeze"), width_ * 16, 1.0);
    const std::size_t image_tokens = len_ > 1 ? len_ - 1 : 1;
    expand_ = gaussian(derive_seed(seed, "vlm.expand"), image_tokens * dim_ * width_,
                       1.0 / std::sqrt(static_cast<double>(width_)));
}

std::size_t VlmProxy::winner_cell(const ObservationWindow& w) const {
    const auto f = w.current(0);
    const std::size_t P = w.grid;
    double pooled[16] = {};
    for (std::size_t r = 0; r < P; ++r) {
        for (std::size_t c = 0; c < P; ++c) pooled[(r * 4 / P) * 4 + (c * 4 / P)] += f[r * P + c];
    }
    return static_cast<std::size_t>(std::max_element(pooled, pooled + 16) - pooled);
}

std::vector<double> VlmProxy::bottleneck(const ObservationWindow& w) const {
    const std::size_t cell = winner_cell(w);
    std::vector<double> b(width_);
    for (std::size_t i = 0; i < width_; ++i) b[i] = std::tanh(squeeze_[i * 16 + cell]);
    return b;
}

std::vector<double> VlmProxy::encode_values(const ObservationWindow& w) const {
    const auto b = bottleneck(w);
    std::vector<double> out(len_ * dim_);
    const std::size_t image_tokens = len_ > 1 ? len_ - 1 : 1;
    for (std::size_t s = 0; s < image_tokens; ++s) {
        for (std::size_t d = 0; d < dim_; ++d) {
            double acc = 0;
            const double* e = &expand_[(s * dim_ + d) * width_];
            for (std::size_t i = 0; i < width_; ++i) acc += e[i] * b[i];
            out[s * dim_ + d] = std::tanh(acc);
        }
    }
    if (len_ > 1) {
        const auto instr = gaussian(derive_seed(seed_, "vlm.instruction." + w.instruction), dim_, 0.5);
        std::copy(instr.begin(), instr.end(), out.begin() + static_cast<std::ptrdiff_t>((len_ - 1) * dim_));
    }
    return out;
}

Tensor VlmProxy::encode(const ObservationWindow& w, DType dtype) const {
    return Tensor::from({len_, dim_}, encode_values(w), dtype);
}

AuxEncoder::AuxEncoder(const EncoderSpec& spec) : spec_(spec) {
    spec.validate();
    dim_ = spec.resolved_dim();
    const std::size_t pixels = spec.grid * spec.grid;
    const double fstd = 3.0 / std::sqrt(static_cast<double>(pixels));
    switch (spec.kind) {
        case EncoderKind::none:
        case EncoderKind::vlm_proxy:
            break;
        case EncoderKind::static_image: {
            const std::size_t width = 2 + kRandomFeatures;
            if (dim_ < width) throw std::invalid_argument("static encoder needs d_E >= " + std::to_string(width));
            features_ = gaussian(derive_seed(spec.seed, "static.features"), kRandomFeatures * pixels, fstd);
            for (std::size_t l = 0; l < kStaticTokens; ++l) {
                lifts_.push_back(orthonormal_columns(derive_seed(spec.seed, "static.lift" + std::to_string(l)), dim_,
                                                     width));
            }
            break;
        }
        case EncoderKind::temporal: {
            const std::size_t width = 2 + kRandomFeatures + 6 + kDiffFeatures;
            if (dim_ < width) throw std::invalid_argument("temporal encoder needs d_E >= " + std::to_string(width));
            features_ = gaussian(derive_seed(spec.seed, "temporal.features"), kRandomFeatures * pixels, fstd);
            diff_ = gaussian(derive_seed(spec.seed, "temporal.diff"), kDiffFeatures * pixels, fstd);
            lifts_.push_back(orthonormal_columns(derive_seed(spec.seed, "temporal.lift"), dim_, width));
            break;
        }
        case EncoderKind::combined: {
            EncoderSpec s = spec;
            s.kind = EncoderKind::static_image;
            s.window = 1;
            s.out_dim = dim_;
            s.seed = derive_seed(spec.seed, "combined.static");
            EncoderSpec t = spec;
            t.kind = EncoderKind::temporal;
            t.out_dim = dim_;
            t.seed = derive_seed(spec.seed, "combined.temporal");
            static_part_ = std::make_shared<AuxEncoder>(s);
            temporal_part_ = std::make_shared<AuxEncoder>(t);
            break;
        }
    }
}

AuxEncoder AuxEncoder::combine(const AuxEncoder& static_part, const AuxEncoder& temporal_part) {
    if (static_part.spec_.kind != EncoderKind::static_image || temporal_part.spec_.kind != EncoderKind::temporal) {
        throw std::invalid_argument("combine expects a static encoder followed by a temporal encoder");
    }
    if (static_part.dim_ != temporal_part.dim_) {
        throw std::invalid_argument("combined encoder: static d_E=" + std::to_string(static_part.dim_) +
                                    " differs from temporal d_E=" + std::to_string(temporal_part.dim_));
    }
    if (static_part.spec_.grid != temporal_part.spec_.grid) {
        throw std::invalid_argument("combined encoder: sub-encoders built for different grids");
    }
    AuxEncoder out;
    out.spec_ = EncoderSpec{EncoderKind::combined, temporal_part.spec_.window, static_part.dim_,
                            static_part.spec_.grid, static_part.spec_.seed};
    out.dim_ = static_part.dim_;
    out.static_part_ = std::make_shared<AuxEncoder>(static_part);
    out.temporal_part_ = std::make_shared<AuxEncoder>(temporal_part);
    return out;
}

std::size_t AuxEncoder::out_len() const { return spec_.out_len(); }

std::size_t AuxEncoder::parameter_count() const {
    std::size_t n = features_.size() + diff_.size();
    for (const auto& q : lifts_) n += q.size();
    if (static_part_) n += static_part_->parameter_count();
    if (temporal_part_) n += temporal_part_->parameter_count();
    return n;
}

std::vector<double> AuxEncoder::static_features(std::span<const double> frame, std::size_t grid) const {
    const std::size_t pixels = grid * grid;
    if (features_.size() != kRandomFeatures * pixels) throw std::logic_error("encoder has no static features");
    const auto [cx, cy] = centroid(frame, grid);
    std::vector<double> phi{cx, cy};
    for (std::size_t k = 0; k < kRandomFeatures; ++k) {
        double acc = 0;
        const double* w = &features_[k * pixels];
        for (std::size_t i = 0; i < pixels; ++i) acc += w[i] * frame[i];
        phi.push_back(std::tanh(acc));
    }
    return phi;
}

std::vector<double> AuxEncoder::lift(const std::vector<double>& q, std::span<const double> x) const {
    const std::size_t cols = x.size();
    std::vector<double> out(dim_, 0.0);
    for (std::size_t r = 0; r < dim_; ++r) {
        double acc = 0;
        for (std::size_t c = 0; c < cols; ++c) acc += q[r * cols + c] * x[c];
        out[r] = acc;
    }
    return out;
}

std::vector<double> AuxEncoder::encode_static(const ObservationWindow& w) const {
    const auto phi = static_features(w.current(0), w.grid);
    std::vector<double> out;
    out.reserve(kStaticTokens * dim_);
    for (const auto& q : lifts_) {
        const auto tok = lift(q, phi);
        out.insert(out.end(), tok.begin(), tok.end());
    }
    return out;
}

std::vector<double> AuxEncoder::encode_temporal(const ObservationWindow& w) const {
    const std::size_t T = spec_.window;
    const std::size_t pixels = w.frame_size();
    const auto frames = last_frames(w, T);
    std::vector<std::pair<double, double>> c(T);
    for (std::size_t j = 0; j < T; ++j) c[j] = centroid(frames[j], w.grid);
    const auto phi = static_features(frames[T - 1], w.grid);
    const double dlx = c[T - 1].first - c[T - 2].first;
    const double dly = c[T - 1].second - c[T - 2].second;
    const double mx = (c[T - 1].first - c[0].first) / static_cast<double>(T - 1);
    const double my = (c[T - 1].second - c[0].second) / static_cast<double>(T - 1);

    std::vector<double> out;
    out.reserve((T - 1) * dim_);
    std::vector<double> x;
    for (std::size_t j = 1; j < T; ++j) {
        x.assign(phi.begin(), phi.end());
        for (double v : {dlx, dly, mx, my, c[j].first - c[j - 1].first, c[j].second - c[j - 1].second}) {
            x.push_back(kMotionGain * v);
        }
        for (std::size_t k = 0; k < kDiffFeatures; ++k) {
            double acc = 0;
            const double* wd = &diff_[k * pixels];
            for (std::size_t i = 0; i < pixels; ++i) acc += wd[i] * (frames[j][i] - frames[j - 1][i]);
            x.push_back(std::tanh(acc));
        }
        const auto tok = lift(lifts_[0], x);
        out.insert(out.end(), tok.begin(), tok.end());
    }
    return out;
}

std::vector<double> AuxEncoder::static_component(const ObservationWindow& w) const {
    if (spec_.kind != EncoderKind::temporal) throw std::logic_error("static_component applies to temporal encoders");
    check_window(w, spec_.grid);
    auto x = static_features(w.current(0), w.grid);
    x.resize(lifts_[0].size() / dim_, 0.0);
    return lift(lifts_[0], x);
}

std::vector<double> AuxEncoder::encode_values(const ObservationWindow& w) const {
    check_window(w, spec_.grid);
    switch (spec_.kind) {
        case EncoderKind::static_image: return encode_static(w);
        case EncoderKind::temporal: return encode_temporal(w);
        case EncoderKind::combined: {
            auto out = static_part_->encode_values(w);
            const auto t = temporal_part_->encode_values(w);
            out.insert(out.end(), t.begin(), t.end());
            return out;
        }
        default: throw std::logic_error(std::string("encoder '") + encoder_name(spec_.kind) + "' produces no tokens");
    }
}

Tensor AuxEncoder::encode(const ObservationWindow& w, DType dtype) const {
    return Tensor::from({out_len(), dim_}, encode_values(w), dtype);
}

}  // namespace pvilab
