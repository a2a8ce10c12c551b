#pragma once

// Frozen synthetic encoders. Each is a fixed function of its construction
// seed; none of them owns parameters that any variant can train.
//
//   vlm proxy : current frame -> coarse 4x4 winner cell -> narrow bottleneck
//               -> expanded tokens + one instruction token
//   static    : current frame -> [centroid, random tanh features] -> L_s
//               orthonormal lifts
//   temporal  : last T frames -> per-step motion tokens (centroid deltas and
//               frame-difference features) -> T-1 tokens
//   combined  : static tokens followed by temporal tokens

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pvilab/observation.hpp"
#include "pvilab/tensor.hpp"

namespace pvilab {

enum class EncoderKind { none, vlm_proxy, static_image, temporal, combined };

EncoderKind parse_encoder(const std::string& name);
const char* encoder_name(EncoderKind kind);

inline constexpr std::size_t kStaticTokens = 2;
inline constexpr std::size_t kStaticDim = 56;
inline constexpr std::size_t kTemporalDim = 48;
inline constexpr std::size_t kRandomFeatures = 16;
inline constexpr std::size_t kDiffFeatures = 8;
// Motion channels are scaled so a full-horizon displacement is O(1).
inline constexpr double kMotionGain = 8.0;

struct EncoderSpec {
    EncoderKind kind = EncoderKind::none;
    std::size_t window = 1;   // T, frames consumed
    std::size_t out_dim = 0;  // d_E; 0 selects the kind's default
    std::size_t grid = 16;    // P, fixes the random feature sizes
    std::uint64_t seed = 0;

    std::size_t resolved_dim() const;
    std::size_t out_len() const;
    void validate() const;
};

// Intensity-weighted centre of a frame, in world units.
std::pair<double, double> centroid(std::span<const double> frame, std::size_t grid);

// Random matrix with orthonormal columns, rows x cols (rows >= cols), row-major.
std::vector<double> orthonormal_columns(std::uint64_t seed, std::size_t rows, std::size_t cols);

class VlmProxy {
public:
    VlmProxy(std::size_t cond_len, std::size_t cond_dim, std::uint64_t seed);

    std::size_t len() const { return len_; }
    std::size_t dim() const { return dim_; }
    std::size_t bottleneck_width() const { return width_; }

    // Index of the brightest coarse cell of the current frame.
    std::size_t winner_cell(const ObservationWindow& w) const;
    std::vector<double> bottleneck(const ObservationWindow& w) const;
    std::vector<double> encode_values(const ObservationWindow& w) const;  // S x cond_dim
    Tensor encode(const ObservationWindow& w, DType dtype = DType::f32) const;

    // Fixed random weights held by the proxy (all frozen).
    std::size_t parameter_count() const { return squeeze_.size() + expand_.size(); }

private:
    std::size_t len_, dim_, width_;
    std::uint64_t seed_;
    std::vector<double> squeeze_;  // width x 16
    std::vector<double> expand_;   // (len-1) x dim x width
};

class AuxEncoder {
public:
    explicit AuxEncoder(const EncoderSpec& spec);

    // Token-axis concatenation of a static and a temporal encoder.
    static AuxEncoder combine(const AuxEncoder& static_part, const AuxEncoder& temporal_part);

    const EncoderSpec& spec() const { return spec_; }
    std::size_t out_len() const;
    std::size_t out_dim() const { return dim_; }

    std::vector<double> encode_values(const ObservationWindow& w) const;  // L x d_E
    Tensor encode(const ObservationWindow& w, DType dtype = DType::f32) const;

    // [centroid x, centroid y, random tanh features] of one frame.
    std::vector<double> static_features(std::span<const double> frame, std::size_t grid) const;
    // Temporal tokens with every motion channel zeroed (one token, d_E wide).
    std::vector<double> static_component(const ObservationWindow& w) const;

    std::size_t parameter_count() const;

private:
    AuxEncoder() = default;
    std::vector<double> encode_static(const ObservationWindow& w) const;
    std::vector<double> encode_temporal(const ObservationWindow& w) const;
    std::vector<double> lift(const std::vector<double>& q, std::span<const double> x) const;

    EncoderSpec spec_;
    std::size_t dim_ = 0;
    std::vector<double> features_;  // kRandomFeatures x P*P
    std::vector<double> diff_;      // kDiffFeatures x P*P
    std::vector<std::vector<double>> lifts_;
    std::shared_ptr<const AuxEncoder> static_part_, temporal_part_;
};

}  // namespace pvilab
