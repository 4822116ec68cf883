#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crl/rng.hpp"

namespace crl::envs {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const Vec2&) const = default;
};

inline double dist(Vec2 a, Vec2 b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

/// Grid of wall ('#') and free ('.') cells. Coordinates are maze-centered:
/// cell (r, c) has its center at ((c + 0.5 - cols/2), (r + 0.5 - rows/2))
/// times cell_size.
struct MazeLayout {
    std::string id;
    std::vector<std::string> grid;
    double cell_size = 1.0;

    int rows() const { return static_cast<int>(grid.size()); }
    int cols() const { return grid.empty() ? 0 : static_cast<int>(grid[0].size()); }
    bool wall(int r, int c) const;
    void validate() const;
    Vec2 cell_center(int r, int c) const;
    std::pair<int, int> cell_of(Vec2 p) const;
    std::vector<std::pair<int, int>> free_cells() const;

    /// The shipped layouts: "U" (5x5), "M" (8x8), "L" (12x9).
    static MazeLayout standard(const std::string& id);
};

enum class TaskTransform { N, IA, IO, PA, PO };

TaskTransform transform_from_string(const std::string& s);
std::string to_string(TaskTransform t);

/// Observation as the agent sees it (raw -> transformed).
std::vector<double> transform_obs(TaskTransform t, std::span<const double> raw);
/// Observation inverse (transformed -> raw).
std::vector<double> invert_obs(TaskTransform t, std::span<const double> obs);
/// Action the dynamics receive for the action the agent emitted.
std::array<double, 2> transform_action(TaskTransform t, std::array<double, 2> a);
/// Agent-frame action that maps to a desired dynamics action.
std::array<double, 2> inverse_action(TaskTransform t, std::array<double, 2> a);

/// (obs, action) -> (seen obs, dynamics action). Goals are never transformed.
std::pair<std::vector<double>, std::array<double, 2>> apply_transform(
    TaskTransform t, std::span<const double> obs, std::array<double, 2> action);

struct EnvState {
    Vec2 pos;
    Vec2 vel;
    Vec2 goal;
    int t = 0;
};

struct StepResult {
    EnvState state;
    double reward = 0.0;
    bool done = false;
};

/// Deterministic kinematic point agent in a maze with sparse goal reward.
/// step() is a pure function of (state, action); only reset() consumes
/// the env's rng stream.
class Env {
public:
    static constexpr double kVMax = 0.25;
    static constexpr double kGoalRadius = 0.5;
    static constexpr double kAgentRadius = 0.1;

    Env(MazeLayout layout, TaskTransform transform, int horizon, std::uint64_t seed);

    /// Draws a fresh (start, goal) pair uniformly over free cells.
    EnvState reset();

    StepResult step(const EnvState& state, std::array<double, 2> agent_action) const;

    /// Transformed observation (x, y, vx, vy).
    std::vector<double> observe(const EnvState& state) const;

    /// phi(s): the native (untransformed) position.
    Vec2 achieved(const EnvState& state) const { return state.pos; }

    bool position_free(Vec2 p) const;

    const MazeLayout& layout() const { return layout_; }
    TaskTransform transform() const { return transform_; }
    int horizon() const { return horizon_; }

private:
    MazeLayout layout_;
    TaskTransform transform_;
    int horizon_;
    Rng rng_;
    std::vector<std::pair<int, int>> free_cells_;
};

/// Exploration noise added to the expert controller's actions. A little
/// noise decorrelates actions from absolute positions, which keeps the
/// low-level imitation problem layout-agnostic.
inline constexpr double kExpertNoiseStd = 0.05;
inline constexpr double kExpertGain = 1.2;
inline constexpr double kExpertDamping = 0.5;
inline constexpr double kExpertLookahead = 0.8;  // in cells

int default_horizon(const std::string& layout_id);
int default_way_step(const std::string& layout_id);
double default_her_temperature(const std::string& layout_id);

struct Transition {
    std::vector<double> obs;        // transformed, size 4
    std::array<double, 2> action;   // agent frame
    double reward = 0.0;
    std::vector<double> next_obs;   // transformed, size 4
};

struct Episode {
    Vec2 goal;
    std::vector<Transition> steps;
    /// Native phi(s_t) for t = 0..T, derived from the stored observations.
    std::vector<Vec2> achieved;

    int length() const { return static_cast<int>(steps.size()); }
};

struct Dataset {
    int format_version = 1;
    std::string layout;
    std::string transform;
    std::uint64_t seed = 0;
    double noise_std = kExpertNoiseStd;
    std::vector<Episode> episodes;

    std::size_t transition_count() const;
    double mean_episode_length() const;
};

/// BFS cell path between two free cells; empty when unreachable.
std::vector<std::pair<int, int>> bfs_path(const MazeLayout& layout, std::pair<int, int> from,
                                          std::pair<int, int> to);

/// Pure-pursuit target the expert tracks from `pos` toward `goal`
/// (BFS polyline, replanned from the current cell).
Vec2 expert_waypoint(const MazeLayout& layout, Vec2 pos, Vec2 goal);

/// Plans with BFS and tracks waypoints with a proportional controller in
/// the native frame; transitions are recorded through the task transform.
/// Returns the episode even when the horizon ran out; callers check the
/// final reward. Throws when the goal cell is unreachable.
Episode expert_episode(const Env& env, const EnvState& start, Rng& rng,
                       double noise_std = kExpertNoiseStd);

/// n successful expert episodes; failed draws are rejected and resampled.
/// Episode i uses an env seeded with a splitmix-derived child seed of
/// `seed`, so generation order is reproducible.
Dataset gen_dataset(const MazeLayout& layout, TaskTransform transform, int horizon,
                    int n_episodes, std::uint64_t seed, double noise_std = kExpertNoiseStd);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace crl::envs
