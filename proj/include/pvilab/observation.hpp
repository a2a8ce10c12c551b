#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace pvilab {

// V views x T frames of P x P grayscale pixels in [0, 1], oldest frame first.
struct ObservationWindow {
    std::size_t views = 1;
    std::size_t frames = 1;
    std::size_t grid = 16;
    std::vector<double> pixels;
    std::vector<double> state;
    std::string instruction;  // task family name; read by the VLM proxy

    std::size_t frame_size() const { return grid * grid; }

    std::span<const double> frame(std::size_t view, std::size_t t) const {
        return std::span<const double>(pixels).subspan((view * frames + t) * frame_size(), frame_size());
    }
    std::span<const double> current(std::size_t view = 0) const { return frame(view, frames - 1); }
};

}  // namespace pvilab
