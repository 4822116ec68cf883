#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "crl/envs.hpp"
#include "crl/gcrl.hpp"

namespace crl::metrics {

/// Anything that can drive an episode. reset() is called at each episode
/// start so stateful actors (cached subgoals) start clean.
class Actor {
public:
    virtual ~Actor() = default;
    virtual void reset() = 0;
    virtual std::array<double, 2> act(std::span<const double> obs, envs::Vec2 goal,
                                      envs::Vec2 achieved, int t) = 0;
};

class PolicyActor : public Actor {
public:
    explicit PolicyActor(const gcrl::HierPolicy& policy) : policy_(&policy) {}
    void reset() override { state_ = {}; }
    std::array<double, 2> act(std::span<const double> obs, envs::Vec2 goal, envs::Vec2 achieved,
                              int t) override {
        return gcrl::hier_act(state_, *policy_, obs, goal, achieved, t);
    }

private:
    const gcrl::HierPolicy* policy_;
    gcrl::HierActorState state_;
};

struct TaskEnvSpec {
    envs::MazeLayout layout;
    envs::TaskTransform transform = envs::TaskTransform::N;
    int horizon = 300;
};

/// Fraction of seeded rollouts that reach the goal within the horizon.
double success_rate(Actor& actor, const TaskEnvSpec& task, int n_episodes, std::uint64_t seed);

/// sigma(j, k): success on task k evaluated after task j (0-based, k <= j).
struct SuccessMatrix {
    int n_tasks = 0;
    std::vector<double> sigma;
    std::vector<double> ref_sigma;

    explicit SuccessMatrix(int n = 0);
    double& at(int j, int k);
    double at(int j, int k) const;
};

struct CrlMetrics {
    double per = 0.0;
    double bwt = 0.0;
    double fwt = 0.0;
    double mem = 0.0;
};

struct EvalSettings {
    int episodes = 100;
    std::uint64_t seed = 1234;
    std::vector<double> ref_sigma;  // from-scratch references; may be empty
};

struct EvalReport {
    SuccessMatrix matrix;
    CrlMetrics metrics;
    double stored_params = 0.0;
    double single_params = 0.0;
};

/// PER, BWT, FWT from the matrix; MEM as stored parameters over the
/// parameter count of a single policy.
CrlMetrics compute_metrics(const SuccessMatrix& m, double stored_params,
                           double single_policy_params);

}  // namespace crl::metrics
