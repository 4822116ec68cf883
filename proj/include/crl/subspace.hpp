#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "crl/gcrl.hpp"
#include "crl/metrics.hpp"
#include "crl/nnet.hpp"
#include "crl/rng.hpp"
#include "crl/stream.hpp"

namespace crl::subspace {

/// Weight-matrix slots inside a flat parameter vector; the anchor algebra
/// and low-rank factors are defined against this.
struct ParamLayout {
    std::size_t dim = 0;
    struct Block {
        std::size_t off = 0;
        int out = 0;
        int in = 0;
    };
    std::vector<Block> blocks;

    static ParamLayout for_shape(const nnet::NetShape& shape);
    static ParamLayout concat(const ParamLayout& a, const ParamLayout& b);
};

/// Per-block factor pairs A (out x r), B (r x in); the materialized anchor
/// is A*B on each weight block and zero elsewhere.
struct LoraFactors {
    int rank = 1;
    std::vector<std::vector<double>> a;
    std::vector<std::vector<double>> b;
};

struct Anchor {
    bool is_lora = false;
    std::vector<double> full;
    LoraFactors lora;

    std::size_t stored_param_count(const ParamLayout& layout) const;
};

Anchor make_full_anchor(std::vector<double> values);
/// A entries Xavier-style random, B zero, so the anchor starts at zero
/// contribution but B receives gradient immediately.
Anchor make_lora_anchor(const ParamLayout& layout, int rank, std::uint64_t seed);

std::vector<double> materialize(const Anchor& anchor, const ParamLayout& layout);

struct SimplexWeights {
    std::vector<double> alpha;
    void validate() const;  // nonnegative, sums to 1 within 1e-9
};

/// Symmetric Dirichlet(1,...,1) draw via stick-breaking.
SimplexWeights sample_simplex(int n, Rng& rng);

struct AnchorScores {
    std::vector<double> scores;
};

SimplexWeights softmax_weights(const AnchorScores& scores);

struct PacConfig {
    double d_epsilon = 0.2;
    double delta = 0.1;
};

struct SubspaceConfig {
    double epsilon = 0.1;
    int samples = 64;
    double weight_jitter_std = 0.1;
    std::optional<int> lora_rank;    // engaged for anchors 2+ when set
    std::optional<PacConfig> pac;

    void validate() const;
};

struct PolicySubspace {
    ParamLayout layout;
    std::vector<Anchor> anchors;               // anchor 1 always full
    std::vector<SimplexWeights> task_weights;  // one per learned task

    std::size_t anchor_count() const { return anchors.size(); }
    /// theta = sum_i alpha_i * materialize(anchor_i)
    std::vector<double> combine(const SimplexWeights& alpha) const;
    std::size_t stored_param_count() const;  // anchors + weight vectors
};

enum class Decision { prune, extend };

/// Prune iff l_prev <= (1 + epsilon) * l_curr; losses must be >= 0.
Decision adapt_decision(double l_prev, double l_curr, double epsilon);

/// Everything the subspace machinery needs to know about one task's loss:
/// minibatch gradients at a combined parameter vector, the deterministic
/// full-dataset loss, fresh anchor initialization, and the per-row
/// distances behind the PAC gate.
struct TaskAdapter {
    ParamLayout layout;
    std::size_t n_transitions = 0;
    std::function<std::vector<double>(std::uint64_t seed)> init_anchor;
    std::function<double(const std::vector<double>& theta, std::vector<double>& grad, Rng& rng)>
        batch_grad;
    std::function<double(const std::vector<double>& theta)> eval_loss;
    std::function<double(const std::vector<double>& theta, double d_eps)> fraction_within;
};

enum class LossKind { high, low };

TaskAdapter make_task_adapter(const envs::Dataset& ds, const nnet::NetShape& shape,
                              LossKind kind, int way_step, const gcrl::TrainConfig& cfg);

struct ExtendResult {
    Anchor candidate;
    AnchorScores scores;
    SimplexWeights alpha_curr;  // softmax of the final scores
    double l_curr = 0.0;        // full-dataset loss at alpha_curr
};

/// Algorithm step B.1/B.2: random candidate anchor, zero scores, minibatch
/// descent through combine() with jittered weights; previous anchors stay
/// frozen.
ExtendResult train_new_anchor(const PolicySubspace& sub, const TaskAdapter& task,
                              const SubspaceConfig& scfg, const gcrl::TrainConfig& tcfg,
                              std::uint64_t salt);

struct ExploreResult {
    SimplexWeights alpha;
    double loss = 0.0;
};

/// Algorithm step B.3: best of S Dirichlet draws plus every stored task
/// weight vector (so a previously solved task always rediscovers its own
/// weights).
ExploreResult explore_previous(const PolicySubspace& sub, const TaskAdapter& task, int samples,
                               Rng& rng);

struct PacResult {
    bool pass = false;
    SimplexWeights alpha;
    double fraction = 0.0;
};

/// Zero-shot gate: pass iff the best previous-subspace policy matches the
/// dataset within d_epsilon on at least a 1-delta fraction of pairs.
PacResult pac_gate(const PolicySubspace& sub, const TaskAdapter& task, const PacConfig& pac,
                   int samples, Rng& rng);

enum class SubspaceMode { hispo, hilow, cspo };

std::string to_string(SubspaceMode m);

using gcrl::ModelShapes;
using metrics::EvalSettings;
SubspaceMode mode_from_string(const std::string& s);

struct TaskRecord {
    std::string decision;  // "init", "prune", "extend", "pac"
    double l_prev = 0.0;
    double l_curr = 0.0;
    double pac_fraction = -1.0;
};

struct HispoModel {
    SubspaceMode mode = SubspaceMode::hispo;
    ModelShapes shapes;
    std::vector<int> way_steps;  // per task
    PolicySubspace high, low;    // hispo / hilow
    PolicySubspace joint;        // cspo
    std::vector<TaskRecord> records_high, records_low;

    std::size_t anchor_count_high() const;
    std::size_t anchor_count_low() const;
    std::size_t stored_param_count() const;
    std::size_t single_policy_count() const;
    /// Policy for task j from its stored weights.
    gcrl::HierPolicy policy_for_task(int task) const;
};

struct StreamResult {
    HispoModel model;
    metrics::EvalReport report;
};

/// Algorithm in full over a task stream, run independently for the high
/// and the low subspace (or once for the concatenated cspo variant).
StreamResult learn_stream(const stream::StreamSpec& spec, SubspaceMode mode,
                          const ModelShapes& shapes, const SubspaceConfig& scfg,
                          const gcrl::TrainConfig& tcfg, const EvalSettings& eval);

void save_model(const HispoModel& model, const std::string& path);
HispoModel load_model(const std::string& path);

}  // namespace crl::subspace
