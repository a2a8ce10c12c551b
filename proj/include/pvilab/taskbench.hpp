#pragma once

// Synthetic manipulation-like task families with closed-form oracles.
//
// World coordinates: pixel column/row x maps to x / 4 - 2 units, so a
// 16-pixel grid spans [-2, 2). Actions are absolute effector positions for
// the next H ticks; the state is the current effector position.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pvilab/observation.hpp"

namespace pvilab {

enum class TaskFamily { reach, intercept, multiphase };

TaskFamily parse_family(const std::string& name);
const char* family_name(TaskFamily family);

struct TaskSpec {
    TaskFamily family = TaskFamily::reach;
    std::size_t grid = 16;            // P
    std::size_t horizon = 8;          // H
    std::size_t history = 16;         // rendered frames per window
    double noise_std = 0.0;           // demo action noise
    std::size_t n_demos = 512;
    std::size_t eval_rollouts = 400;
    double success_radius = 0.25;     // epsilon, world units
    double blob_sigma = 1.2;          // pixels
    double speed = 0.125;             // intercept target speed, units per tick
    double direction_mean = 0.0;      // radians
    double direction_spread = 6.283185307179586;  // full circle by default

    void validate() const;
    std::size_t action_dim() const { return 2; }
    std::size_t state_dim() const { return 2; }
};

struct SceneParams {
    double px = 0, py = 0;  // target position at the current tick
    double vx = 0, vy = 0;  // target velocity per tick
    int age = 0;            // ticks the target has been moving
    int phase = 0;          // multiphase cue: +1 or -1 (0 otherwise)
    double gx = 0, gy = 0;  // position the final action must reach
    double wx = 0, wy = 0;  // multiphase waypoint
};

struct Episode {
    TaskFamily family = TaskFamily::reach;
    std::uint64_t seed = 0;
    ObservationWindow window;
    SceneParams hidden;
    std::vector<double> oracle;  // H x 2, row-major
};

double pixel_to_world(double px);
double world_to_pixel(double u);

// Renders one frame with a blob centred at world position (x, y).
std::vector<double> render_blob(std::size_t grid, double sigma_px, double x, double y);

Episode gen_episode(const TaskSpec& spec, std::uint64_t seed);

// Intercept scene with an explicit velocity (used to pin degenerate cases).
Episode gen_intercept(const TaskSpec& spec, std::uint64_t seed, double vx, double vy, int age);

// Straight-line chunk from `from` to `to`, reaching `to` at step H.
std::vector<double> straight_line(double fx, double fy, double tx, double ty, std::size_t horizon);

// Closed-ball predicate over an H x 2 chunk.
bool success(std::span<const double> action, const Episode& episode, const TaskSpec& spec);

// Success probability of the best single-frame policy on intercept,
// estimated by Monte Carlo over the velocity prior.
double ambiguity_bound(const TaskSpec& spec, std::size_t draws = 200000, std::uint64_t seed = 7);

struct Demo {
    ObservationWindow window;
    std::vector<double> action;  // H x 2
};

struct Dataset {
    TaskSpec spec;
    std::uint64_t seed = 0;
    std::vector<Demo> demos;
};

Dataset make_dataset(const TaskSpec& spec, std::uint64_t seed);

// One JSON header line (spec, seed, count, record layout) followed by
// fixed-width little-endian f64 records: pixels, state, action.
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

std::string spec_to_json(const TaskSpec& spec);
TaskSpec spec_from_json(const std::string& text);

}  // namespace pvilab
