#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "crl/baselines.hpp"
#include "crl/metrics.hpp"
#include "crl/stream.hpp"
#include "crl/subspace.hpp"

namespace crl::runner {

inline constexpr const char* kCodeVersion = "1.0.0";
inline constexpr double kLambdaSweep[] = {1e-2, 1e-1, 1.0, 1e1, 1e2};

struct RunConfig {
    stream::StreamSpec stream;
    std::string strategy = "hispo";  // hispo | hilow | cspo | sc1 | scn | ft1 | ftn | fz | l2 | ewc | pnn
    std::vector<std::uint64_t> seeds{1};
    gcrl::TrainConfig train;  // her_temperature <= 0 means per-layout default
    subspace::SubspaceConfig sub;
    baselines::StrategyCfg strategy_cfg;
    bool lambda_sweep = false;  // l2/ewc only: best PER over the grid
    std::vector<int> high_hidden{16, 16};
    std::vector<int> low_hidden{16, 16};
    double dropout = 0.1;
    bool layernorm = true;
    int eval_episodes = 100;
    std::uint64_t eval_seed = 1234;
    bool compute_refs = true;  // from-scratch references behind FWT
    std::string out_dir = "runs/out";

    gcrl::ModelShapes shapes() const;
    bool is_subspace_strategy() const;
    void validate() const;
};

nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

/// Canned streams: pm1, pm2, kin, topo. Episode counts scale by `scale`.
stream::StreamSpec canned_stream(const std::string& name, double scale = 1.0);

struct SeedOutcome {
    std::uint64_t seed = 0;
    metrics::EvalReport report;
    double lambda_used = 0.0;  // l2/ewc
    // subspace extras
    std::size_t anchors_high = 0, anchors_low = 0;
    std::vector<subspace::TaskRecord> records_high, records_low;
};

struct RunOutput {
    RunConfig config;
    std::vector<SeedOutcome> outcomes;
    std::vector<subspace::HispoModel> models;       // subspace strategies, per seed
    std::vector<baselines::StrategyResult> results;  // baseline strategies, per seed
};

/// from-scratch single-task references for the FWT column
std::vector<double> compute_references(const RunConfig& cfg, std::uint64_t seed);

RunOutput execute(const RunConfig& cfg);

/// Resolves the output directory (CRL_OUT overrides the root for relative
/// paths), writes report.csv, per-seed matrices, model files, and the
/// manifest. Returns the directory used.
std::string write_outputs(const RunOutput& out);

std::uint64_t config_hash(const RunConfig& cfg);

struct ReportRow {
    std::string strategy;
    std::string stream;
    std::uint64_t seed = 0;
    metrics::CrlMetrics metrics;
};

std::string report_csv(const RunOutput& out);
std::vector<ReportRow> read_report_csv(const std::string& path);
/// Aligned text table of PER/BWT/FWT/MEM as mean +- std per (strategy, stream).
std::string render_table(const std::vector<ReportRow>& rows);

}  // namespace crl::runner
