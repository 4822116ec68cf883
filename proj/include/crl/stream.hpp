#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crl/envs.hpp"

namespace crl::stream {

/// One task of a stream: a maze, a transform, and where its dataset comes
/// from (a file or a generation recipe).
struct TaskSpec {
    std::string layout = "U";
    std::string transform = "N";
    std::optional<std::string> dataset_path;
    struct Generate {
        int episodes = 500;
        std::uint64_t seed = 0;
        double noise_std = envs::kExpertNoiseStd;
    };
    std::optional<Generate> generate;
    std::optional<int> horizon;
    std::optional<int> way_step;

    int horizon_or_default() const {
        return horizon ? *horizon : envs::default_horizon(layout);
    }
    int way_step_or_default() const {
        return way_step ? *way_step : envs::default_way_step(layout);
    }
    double her_temperature_default() const { return envs::default_her_temperature(layout); }
    envs::MazeLayout maze() const { return envs::MazeLayout::standard(layout); }
    envs::TaskTransform tf() const { return envs::transform_from_string(transform); }

    std::string label() const { return layout + "-" + transform; }
};

struct StreamSpec {
    std::string name;
    std::vector<TaskSpec> tasks;
};

/// Loads the referenced dataset file or generates one per the recipe.
envs::Dataset resolve_dataset(const TaskSpec& task);

}  // namespace crl::stream
