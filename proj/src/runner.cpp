#include "crl/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "crl/serialize.hpp"

namespace crl::runner {

using nlohmann::json;

namespace fs = std::filesystem;

gcrl::ModelShapes RunConfig::shapes() const {
    return {gcrl::make_shape(gcrl::kObsDim + gcrl::kGoalDim, high_hidden, gcrl::kGoalDim,
                             layernorm, dropout),
            gcrl::make_shape(gcrl::kObsDim + gcrl::kGoalDim, low_hidden, gcrl::kActionDim,
                             layernorm, dropout)};
}

bool RunConfig::is_subspace_strategy() const {
    return strategy == "hispo" || strategy == "hilow" || strategy == "cspo";
}

void RunConfig::validate() const {
    if (stream.tasks.empty()) throw std::invalid_argument("config: stream has no tasks");
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
    if (!is_subspace_strategy()) baselines::strategy_from_string(strategy);
    sub.validate();
    if (eval_episodes < 1) throw std::invalid_argument("config: eval episodes must be >= 1");
    for (const auto& t : stream.tasks) {
        envs::MazeLayout::standard(t.layout);
        envs::transform_from_string(t.transform);
    }
}

namespace {

json task_to_json(const stream::TaskSpec& t) {
    json j = {{"layout", t.layout}, {"transform", t.transform}};
    if (t.dataset_path) j["dataset"] = *t.dataset_path;
    if (t.generate)
        j["generate"] = {{"episodes", t.generate->episodes},
                         {"seed", t.generate->seed},
                         {"noise_std", t.generate->noise_std}};
    if (t.horizon) j["horizon"] = *t.horizon;
    if (t.way_step) j["way_step"] = *t.way_step;
    return j;
}

stream::TaskSpec task_from_json(const json& j) {
    stream::TaskSpec t;
    t.layout = j.at("layout").get<std::string>();
    t.transform = j.at("transform").get<std::string>();
    if (j.contains("dataset")) t.dataset_path = j.at("dataset").get<std::string>();
    if (j.contains("generate")) {
        stream::TaskSpec::Generate g;
        g.episodes = j.at("generate").value("episodes", 500);
        g.seed = j.at("generate").value("seed", 0ULL);
        g.noise_std = j.at("generate").value("noise_std", envs::kExpertNoiseStd);
        t.generate = g;
    }
    if (j.contains("horizon")) t.horizon = j.at("horizon").get<int>();
    if (j.contains("way_step")) t.way_step = j.at("way_step").get<int>();
    return t;
}

}  // namespace

json config_to_json(const RunConfig& cfg) {
    json tasks = json::array();
    for (const auto& t : cfg.stream.tasks) tasks.push_back(task_to_json(t));
    json j;
    j["stream"] = {{"name", cfg.stream.name}, {"tasks", std::move(tasks)}};
    j["strategy"] = cfg.strategy;
    j["seeds"] = cfg.seeds;
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},
                  {"her_temperature", cfg.train.her_temperature},
                  {"her_fraction", cfg.train.her_fraction}};
    j["subspace"] = {{"epsilon", cfg.sub.epsilon},
                     {"samples", cfg.sub.samples},
                     {"weight_jitter_std", cfg.sub.weight_jitter_std}};
    if (cfg.sub.lora_rank) j["subspace"]["lora_rank"] = *cfg.sub.lora_rank;
    if (cfg.sub.pac)
        j["subspace"]["pac"] = {{"d_epsilon", cfg.sub.pac->d_epsilon},
                                {"delta", cfg.sub.pac->delta}};
    j["strategy_cfg"] = {{"lambda", cfg.strategy_cfg.lambda},
                         {"fisher_samples", cfg.strategy_cfg.fisher_samples},
                         {"sweep", cfg.lambda_sweep}};
    j["nets"] = {{"high_hidden", cfg.high_hidden},
                 {"low_hidden", cfg.low_hidden},
                 {"dropout", cfg.dropout},
                 {"layernorm", cfg.layernorm}};
    j["eval"] = {{"episodes", cfg.eval_episodes},
                 {"seed", cfg.eval_seed},
                 {"refs", cfg.compute_refs}};
    j["out_dir"] = cfg.out_dir;
    return j;
}

RunConfig config_from_json(const json& j) {
    RunConfig cfg;
    cfg.stream.name = j.at("stream").value("name", "stream");
    for (const auto& t : j.at("stream").at("tasks")) cfg.stream.tasks.push_back(task_from_json(t));
    cfg.strategy = j.value("strategy", "hispo");
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.lr = t.value("lr", cfg.train.lr);
        cfg.train.her_temperature = t.value("her_temperature", 0.0);
        cfg.train.her_fraction = t.value("her_fraction", cfg.train.her_fraction);
    } else {
        cfg.train.her_temperature = 0.0;
    }
    if (j.contains("subspace")) {
        const auto& s = j.at("subspace");
        cfg.sub.epsilon = s.value("epsilon", cfg.sub.epsilon);
        cfg.sub.samples = s.value("samples", cfg.sub.samples);
        cfg.sub.weight_jitter_std = s.value("weight_jitter_std", cfg.sub.weight_jitter_std);
        if (s.contains("lora_rank") && !s.at("lora_rank").is_null())
            cfg.sub.lora_rank = s.at("lora_rank").get<int>();
        if (s.contains("pac") && !s.at("pac").is_null())
            cfg.sub.pac = subspace::PacConfig{s.at("pac").value("d_epsilon", 0.2),
                                              s.at("pac").value("delta", 0.1)};
    }
    if (j.contains("strategy_cfg")) {
        const auto& s = j.at("strategy_cfg");
        cfg.strategy_cfg.lambda = s.value("lambda", cfg.strategy_cfg.lambda);
        cfg.strategy_cfg.fisher_samples = s.value("fisher_samples", cfg.strategy_cfg.fisher_samples);
        cfg.lambda_sweep = s.value("sweep", false);
    }
    if (j.contains("nets")) {
        const auto& n = j.at("nets");
        cfg.high_hidden = n.value("high_hidden", cfg.high_hidden);
        cfg.low_hidden = n.value("low_hidden", cfg.low_hidden);
        cfg.dropout = n.value("dropout", cfg.dropout);
        cfg.layernorm = n.value("layernorm", cfg.layernorm);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        cfg.eval_episodes = e.value("episodes", cfg.eval_episodes);
        cfg.eval_seed = e.value("seed", cfg.eval_seed);
        cfg.compute_refs = e.value("refs", cfg.compute_refs);
    }
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return config_from_json(j);
}

stream::StreamSpec canned_stream(const std::string& name, double scale) {
    auto task = [&](const char* lay, const char* tf, std::uint64_t seed) {
        stream::TaskSpec t;
        t.layout = lay;
        t.transform = tf;
        t.generate = stream::TaskSpec::Generate{
            std::max(1, static_cast<int>(std::lround(500 * scale))), seed,
            envs::kExpertNoiseStd};
        return t;
    };
    stream::StreamSpec s;
    s.name = name;
    if (name == "pm1") {
        s.tasks = {task("U", "N", 101), task("L", "N", 102), task("U", "PO", 103),
                   task("M", "IO", 104)};
    } else if (name == "pm2") {
        s.tasks = {task("U", "PA", 201), task("M", "PO", 202), task("M", "N", 203),
                   task("M", "N", 203)};
    } else if (name == "kin") {
        s.tasks = {task("U", "N", 301), task("U", "IA", 302)};
    } else if (name == "topo") {
        s.tasks = {task("U", "N", 401), task("M", "N", 402)};
    } else {
        throw std::invalid_argument("unknown canned stream: " + name +
                                    " (available: pm1, pm2, kin, topo)");
    }
    return s;
}

std::vector<double> compute_references(const RunConfig& cfg, std::uint64_t seed) {
    const auto shapes = cfg.shapes();
    std::vector<double> refs;
    for (std::size_t k = 0; k < cfg.stream.tasks.size(); ++k) {
        const auto& task = cfg.stream.tasks[k];
        const auto ds = stream::resolve_dataset(task);
        gcrl::TrainConfig tcfg = cfg.train;
        if (tcfg.her_temperature <= 0.0) tcfg.her_temperature = task.her_temperature_default();
        tcfg.seed = Rng::derive(seed, 0xbe5e + k);
        const auto policy =
            gcrl::train_hbc(ds, shapes.high, shapes.low, task.way_step_or_default(), tcfg);
        metrics::PolicyActor actor(policy);
        metrics::TaskEnvSpec env_spec{task.maze(), task.tf(), task.horizon_or_default()};
        refs.push_back(metrics::success_rate(actor, env_spec, cfg.eval_episodes,
                                             Rng::derive(cfg.eval_seed, k)));
    }
    return refs;
}

RunOutput execute(const RunConfig& cfg) {
    cfg.validate();
    RunOutput out;
    out.config = cfg;
    const auto shapes = cfg.shapes();

    for (const std::uint64_t seed : cfg.seeds) {
        SeedOutcome outcome;
        outcome.seed = seed;

        metrics::EvalSettings eval;
        eval.episodes = cfg.eval_episodes;
        eval.seed = cfg.eval_seed;
        if (cfg.compute_refs) eval.ref_sigma = compute_references(cfg, seed);

        gcrl::TrainConfig tcfg = cfg.train;
        tcfg.seed = seed;

        if (cfg.is_subspace_strategy()) {
            const auto mode = subspace::mode_from_string(cfg.strategy);
            auto res = subspace::learn_stream(cfg.stream, mode, shapes, cfg.sub, tcfg, eval);
            outcome.report = res.report;
            outcome.anchors_high = res.model.anchor_count_high();
            outcome.anchors_low = res.model.anchor_count_low();
            outcome.records_high = res.model.records_high;
            outcome.records_low = res.model.records_low;
            out.models.push_back(std::move(res.model));
        } else {
            const auto kind = baselines::strategy_from_string(cfg.strategy);
            const bool sweep = cfg.lambda_sweep &&
                               (kind == baselines::StrategyKind::L2 ||
                                kind == baselines::StrategyKind::EWC);
            if (sweep) {
                bool have = false;
                baselines::StrategyResult best;
                double best_lambda = 0.0;
                for (const double lambda : kLambdaSweep) {
                    baselines::StrategyCfg scfg = cfg.strategy_cfg;
                    scfg.lambda = lambda;
                    auto res = baselines::run_strategy(kind, cfg.stream, shapes, tcfg, scfg, eval);
                    if (!have || res.report.metrics.per > best.report.metrics.per) {
                        best = std::move(res);
                        best_lambda = lambda;
                        have = true;
                    }
                }
                outcome.lambda_used = best_lambda;
                outcome.report = best.report;
                out.results.push_back(std::move(best));
            } else {
                auto res =
                    baselines::run_strategy(kind, cfg.stream, shapes, tcfg, cfg.strategy_cfg, eval);
                outcome.lambda_used = cfg.strategy_cfg.lambda;
                outcome.report = res.report;
                out.results.push_back(std::move(res));
            }
        }
        out.outcomes.push_back(std::move(outcome));
    }
    return out;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string report_csv(const RunOutput& out) {
    std::string csv = "strategy,stream,seed,per,bwt,fwt,mem\n";
    for (const auto& o : out.outcomes) {
        csv += out.config.strategy + "," + out.config.stream.name + "," +
               std::to_string(o.seed) + "," + fmt(o.report.metrics.per) + "," +
               fmt(o.report.metrics.bwt) + "," + fmt(o.report.metrics.fwt) + "," +
               fmt(o.report.metrics.mem) + "\n";
    }
    return csv;
}

std::uint64_t config_hash(const RunConfig& cfg) {
    const std::string dump = config_to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : dump) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string write_outputs(const RunOutput& out) {
    fs::path dir = out.config.out_dir;
    if (const char* root = std::getenv("CRL_OUT"); root && dir.is_relative())
        dir = fs::path(root) / dir;
    fs::create_directories(dir);

    {
        std::ofstream f(dir / "report.csv", std::ios::binary);
        f << report_csv(out);
    }
    {
        json manifest = {{"format_version", 1},
                         {"code_version", kCodeVersion},
                         {"config_hash", config_hash(out.config)},
                         {"seeds", out.config.seeds},
                         {"config", config_to_json(out.config)}};
        std::ofstream f(dir / "manifest.json", std::ios::binary);
        f << manifest.dump(2) << "\n";
    }

    for (std::size_t i = 0; i < out.outcomes.size(); ++i) {
        const auto& o = out.outcomes[i];
        json records = json::array();
        auto dump_records = [](const std::vector<subspace::TaskRecord>& recs) {
            json arr = json::array();
            for (const auto& r : recs)
                arr.push_back({{"decision", r.decision},
                               {"l_prev", r.l_prev},
                               {"l_curr", r.l_curr},
                               {"pac_fraction", r.pac_fraction}});
            return arr;
        };
        json sigma = json::array();
        for (int jj = 0; jj < o.report.matrix.n_tasks; ++jj) {
            json row = json::array();
            for (int k = 0; k <= jj; ++k) row.push_back(o.report.matrix.at(jj, k));
            sigma.push_back(std::move(row));
        }
        json refs = json::array();
        for (double r : o.report.matrix.ref_sigma)
            if (!std::isnan(r)) refs.push_back(r);
        json m = {{"strategy", out.config.strategy},
                  {"stream", out.config.stream.name},
                  {"seed", o.seed},
                  {"n_tasks", o.report.matrix.n_tasks},
                  {"sigma", std::move(sigma)},
                  {"ref_sigma", std::move(refs)},
                  {"stored_params", o.report.stored_params},
                  {"single_params", o.report.single_params},
                  {"per", o.report.metrics.per},
                  {"bwt", o.report.metrics.bwt},
                  {"fwt", o.report.metrics.fwt},
                  {"mem", o.report.metrics.mem}};
        if (out.config.is_subspace_strategy()) {
            m["anchors_high"] = o.anchors_high;
            m["anchors_low"] = o.anchors_low;
            m["records_high"] = dump_records(o.records_high);
            m["records_low"] = dump_records(o.records_low);
        }
        if (o.lambda_used > 0.0) m["lambda"] = o.lambda_used;
        std::ofstream f(dir / ("matrix_seed" + std::to_string(o.seed) + ".json"),
                        std::ios::binary);
        f << m.dump(2) << "\n";
    }

    for (std::size_t i = 0; i < out.models.size(); ++i)
        subspace::save_model(out.models[i],
                             (dir / ("model_seed" + std::to_string(out.outcomes[i].seed) + ".json"))
                                 .string());
    for (std::size_t i = 0; i < out.results.size(); ++i) {
        const auto& res = out.results[i];
        const std::string seed_tag = std::to_string(out.outcomes[i].seed);
        if (res.kind == baselines::StrategyKind::PNN) {
            baselines::save_pnn_policy(res.pnn, (dir / ("pnn_seed" + seed_tag + ".json")).string());
        } else if (res.store.per_task) {
            for (std::size_t k = 0; k < res.store.checkpoints.size(); ++k)
                gcrl::save_policy(res.store.checkpoints[k],
                                  (dir / ("policy_task" + std::to_string(k + 1) + "_seed" +
                                          seed_tag + ".json"))
                                      .string());
        } else {
            gcrl::save_policy(res.store.checkpoints.at(0),
                              (dir / ("policy_seed" + seed_tag + ".json")).string());
        }
    }
    return dir.string();
}

std::vector<ReportRow> read_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report: " + path);
    std::vector<ReportRow> rows;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            if (line != "strategy,stream,seed,per,bwt,fwt,mem")
                throw std::runtime_error(path + ": unrecognized report header");
            header = false;
            continue;
        }
        std::stringstream ss(line);
        std::string field;
        ReportRow row;
        std::getline(ss, row.strategy, ',');
        std::getline(ss, row.stream, ',');
        std::getline(ss, field, ',');
        row.seed = std::stoull(field);
        std::getline(ss, field, ',');
        row.metrics.per = std::stod(field);
        std::getline(ss, field, ',');
        row.metrics.bwt = std::stod(field);
        std::getline(ss, field, ',');
        row.metrics.fwt = std::stod(field);
        std::getline(ss, field, ',');
        row.metrics.mem = std::stod(field);
        rows.push_back(std::move(row));
    }
    if (header) throw std::runtime_error(path + ": empty report");
    return rows;
}

std::string render_table(const std::vector<ReportRow>& rows) {
    struct Agg {
        std::vector<metrics::CrlMetrics> entries;
    };
    std::map<std::pair<std::string, std::string>, Agg> groups;
    for (const auto& r : rows) groups[{r.strategy, r.stream}].entries.push_back(r.metrics);

    auto mean_std = [](const std::vector<metrics::CrlMetrics>& es, auto pick) {
        double mean = 0.0;
        for (const auto& e : es) mean += pick(e);
        mean /= static_cast<double>(es.size());
        double var = 0.0;
        for (const auto& e : es) var += (pick(e) - mean) * (pick(e) - mean);
        var /= static_cast<double>(es.size());
        return std::pair{mean, std::sqrt(var)};
    };

    std::string table;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-10s %-12s %5s %16s %16s %16s %16s\n", "strategy", "stream",
                  "runs", "PER", "BWT", "FWT", "MEM");
    table += buf;
    for (const auto& [key, agg] : groups) {
        auto [per_m, per_s] = mean_std(agg.entries, [](const auto& e) { return e.per; });
        auto [bwt_m, bwt_s] = mean_std(agg.entries, [](const auto& e) { return e.bwt; });
        auto [fwt_m, fwt_s] = mean_std(agg.entries, [](const auto& e) { return e.fwt; });
        auto [mem_m, mem_s] = mean_std(agg.entries, [](const auto& e) { return e.mem; });
        char cell[4][32];
        std::snprintf(cell[0], 32, "%.3f +- %.3f", per_m, per_s);
        std::snprintf(cell[1], 32, "%.3f +- %.3f", bwt_m, bwt_s);
        std::snprintf(cell[2], 32, "%.3f +- %.3f", fwt_m, fwt_s);
        std::snprintf(cell[3], 32, "%.3f +- %.3f", mem_m, mem_s);
        std::snprintf(buf, sizeof(buf), "%-10s %-12s %5zu %16s %16s %16s %16s\n",
                      key.first.c_str(), key.second.c_str(), agg.entries.size(), cell[0], cell[1],
                      cell[2], cell[3]);
        table += buf;
    }
    return table;
}

}  // namespace crl::runner
