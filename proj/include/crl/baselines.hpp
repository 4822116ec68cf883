#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crl/gcrl.hpp"
#include "crl/metrics.hpp"
#include "crl/stream.hpp"

namespace crl::baselines {

enum class StrategyKind { SC1, SCN, FT1, FTN, FZ, L2, EWC, PNN };

StrategyKind strategy_from_string(const std::string& s);
std::string to_string(StrategyKind k);
bool stores_per_task(StrategyKind k);

struct StrategyCfg {
    double lambda = 1.0;       // L2 / EWC regularization strength
    int fisher_samples = 1024; // EWC
};

/// One quadratic penalty term around a previous task's parameters.
struct RegPair {
    double lambda = 1.0;
    std::vector<double> theta_old;
    std::optional<std::vector<double>> fisher;  // EWC only
};

/// Penalty value and gradient. L2: lambda*||theta-old||^2.
/// EWC: lambda/2 * sum_i F_i (theta_i - old_i)^2.
std::pair<double, std::vector<double>> reg_penalty(StrategyKind kind,
                                                   const std::vector<double>& params,
                                                   const RegPair& state);

/// Continues training an existing policy on a new dataset, optionally
/// under quadratic penalties around previous parameters.
void finetune_policy(gcrl::HierPolicy& policy, const envs::Dataset& ds, int way_step,
                     const gcrl::TrainConfig& cfg, StrategyKind kind,
                     const std::vector<RegPair>& regs_high, const std::vector<RegPair>& regs_low);

/// Diagonal empirical Fisher: mean of the squared per-parameter gradient
/// of single-row losses over sampled rows.
std::vector<double> estimate_fisher(const nnet::ParamVector& params, const nnet::Batch& rows,
                                    int n_samples, Rng& rng);

/// Progressive network: one column per task, frozen once trained, with
/// dense lateral maps feeding each later layer from every previous
/// column's preceding activation.
struct PnnColumn {
    nnet::ParamVector own;
    // laterals[l][src]: (d_{l+1} x d_l) row-major, for layers l >= 1
    std::vector<std::vector<std::vector<double>>> laterals;
};

struct Pnn {
    nnet::NetShape shape;
    std::vector<PnnColumn> columns;

    std::size_t param_count() const;
};

void pnn_add_column(Pnn& net, std::uint64_t seed);

/// Forward through columns 0..upto_col inclusive, output from that column.
std::vector<double> pnn_forward(const Pnn& net, std::span<const double> input, int upto_col,
                                nnet::Mode mode = nnet::Mode::eval, Rng* rng = nullptr);

/// Minibatch loss + gradient for the newest column's parameters (own +
/// laterals, packed). Earlier columns are constants.
double pnn_grad_last(const Pnn& net, const nnet::Batch& batch, std::vector<double>& grad,
                     nnet::Mode mode = nnet::Mode::eval, Rng* rng = nullptr);

double pnn_loss(const Pnn& net, const nnet::Batch& batch, int upto_col);

/// Trains the newest column; previous columns stay bitwise frozen.
void pnn_train_last(Pnn& net, const std::function<nnet::Batch(int, Rng&)>& sample_batch,
                    std::size_t data_size, const gcrl::TrainConfig& cfg, std::uint64_t salt);

struct PolicyStore {
    bool per_task = false;
    std::vector<gcrl::HierPolicy> checkpoints;  // one per task, or a single final policy
};

struct PnnPolicy {
    Pnn high, low;
    std::vector<int> way_steps;
};

struct StrategyResult {
    StrategyKind kind = StrategyKind::SC1;
    PolicyStore store;
    PnnPolicy pnn;  // PNN only
    metrics::EvalReport report;
};

/// Runs one continual-learning strategy over the stream, evaluating every
/// earlier task after each task (per-task stores evaluate their own
/// checkpoints, single stores the current policy).
StrategyResult run_strategy(StrategyKind kind, const stream::StreamSpec& spec,
                            const gcrl::ModelShapes& shapes, const gcrl::TrainConfig& tcfg,
                            const StrategyCfg& strategy_cfg, const metrics::EvalSettings& eval);

void save_pnn_policy(const PnnPolicy& policy, const std::string& path);
PnnPolicy load_pnn_policy(const std::string& path);

}  // namespace crl::baselines
