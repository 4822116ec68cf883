#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "crl/envs.hpp"
#include "crl/nnet.hpp"

namespace crl::gcrl {

constexpr int kObsDim = 4;
constexpr int kGoalDim = 2;
constexpr int kActionDim = 2;

/// Two-level policy. The high net maps (obs, goal) to a subgoal in goal
/// space; the low net maps (obs, subgoal) to an action. The flat (BC)
/// variant bypasses the high net and feeds the goal to the low net.
struct HierPolicy {
    nnet::ParamVector high;
    nnet::ParamVector low;
    int way_step = 3;
    bool hierarchical = true;
};

struct TrainConfig {
    int epochs = 20;
    int batch_size = 256;
    double lr = nnet::kDefaultLearningRate;
    double her_temperature = 100.0;
    double her_fraction = 0.8;
    std::uint64_t seed = 0;

    void validate() const;
};

nnet::NetShape make_shape(int input_dim, std::vector<int> hidden, int output_dim,
                          bool layernorm = true, double dropout = 0.1);

struct ModelShapes {
    nnet::NetShape high;
    nnet::NetShape low;
};

/// Offset sampled from {1..remaining} with probability proportional to
/// exp(-offset / temperature).
int her_offset(int remaining, double temperature, Rng& rng);

/// phi of a state strictly later in the same episode.
envs::Vec2 her_relabel(const envs::Episode& ep, int t, double temperature, Rng& rng);

/// Deterministic row constructors; index clamping happens here.
void high_row(const envs::Episode& ep, int t, int way_step, envs::Vec2 goal, double* input6,
              double* target2);
void low_row(const envs::Episode& ep, int t, int way_step, double* input6, double* target2);
void bc_row(const envs::Episode& ep, int t, envs::Vec2 goal, double* input6, double* target2);

nnet::Batch make_high_batch(const envs::Dataset& ds, int way_step, int n, double her_temperature,
                            double her_fraction, Rng& rng);
nnet::Batch make_low_batch(const envs::Dataset& ds, int way_step, int n, Rng& rng);
nnet::Batch make_bc_batch(const envs::Dataset& ds, int n, double her_temperature,
                          double her_fraction, Rng& rng);

/// Every transition once, original goals, no relabeling. Used for
/// deterministic full-dataset loss evaluation.
nnet::Batch all_high_rows(const envs::Dataset& ds, int way_step);
nnet::Batch all_low_rows(const envs::Dataset& ds, int way_step);
nnet::Batch all_bc_rows(const envs::Dataset& ds);

/// Minimizes the high and low imitation losses independently.
HierPolicy train_hbc(const envs::Dataset& ds, const nnet::NetShape& high_shape,
                     const nnet::NetShape& low_shape, int way_step, const TrainConfig& cfg);

/// Flat goal-conditioned BC on the same backbone.
HierPolicy train_bc(const envs::Dataset& ds, const nnet::NetShape& low_shape,
                    const TrainConfig& cfg);

/// Generic minibatch descent used by all trainers.
void train_net(nnet::ParamVector& params,
               const std::function<nnet::Batch(int, Rng&)>& sample_batch, std::size_t data_size,
               const TrainConfig& cfg, std::uint64_t rng_salt);

/// Cached subgoal between high-level refreshes during a rollout.
struct HierActorState {
    envs::Vec2 subgoal;
    bool has = false;
};

/// The subgoal refreshes every way_step steps or once the agent is within
/// 0.5 of it; actions are clipped to [-1, 1].
std::array<double, 2> hier_act(HierActorState& st, const HierPolicy& policy,
                               std::span<const double> obs, envs::Vec2 goal, envs::Vec2 achieved,
                               int t);

void save_policy(const HierPolicy& policy, const std::string& path);
HierPolicy load_policy(const std::string& path);

}  // namespace crl::gcrl
