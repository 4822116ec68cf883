// Command-line front end: dataset generation, strategy runs over task
// streams, report aggregation, and model inspection.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "crl/runner.hpp"
#include "crl/serialize.hpp"

using namespace crl;

namespace {

int cmd_gen_data(const std::string& layout, const std::string& transform, int episodes,
                 std::uint64_t seed, double noise, int horizon, const std::string& out_path) {
    const auto maze = envs::MazeLayout::standard(layout);
    const auto tf = envs::transform_from_string(transform);
    const int h = horizon > 0 ? horizon : envs::default_horizon(layout);
    const auto ds = envs::gen_dataset(maze, tf, h, episodes, seed, noise);
    envs::save_dataset(ds, out_path);
    std::printf("%s: %zu episodes, mean length %.1f, %zu transitions\n", out_path.c_str(),
                ds.episodes.size(), ds.mean_episode_length(), ds.transition_count());
    return 0;
}

int cmd_run(runner::RunConfig cfg, const std::string& out_dir_override) {
    if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;
    const auto out = runner::execute(cfg);
    const auto dir = runner::write_outputs(out);
    std::printf("run complete: %s x %zu seeds on stream '%s'\n", cfg.strategy.c_str(),
                cfg.seeds.size(), cfg.stream.name.c_str());
    for (const auto& o : out.outcomes) {
        std::printf("  seed %llu: PER %.3f BWT %.3f FWT %.3f MEM %.3f",
                    static_cast<unsigned long long>(o.seed), o.report.metrics.per,
                    o.report.metrics.bwt, o.report.metrics.fwt, o.report.metrics.mem);
        if (cfg.is_subspace_strategy())
            std::printf(" anchors %zu/%zu", o.anchors_high, o.anchors_low);
        std::printf("\n");
    }
    std::printf("outputs in %s\n", dir.c_str());
    return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& merged_out) {
    std::vector<runner::ReportRow> rows;
    for (const auto& d : dirs) {
        const auto path = std::filesystem::path(d) / "report.csv";
        for (auto& r : runner::read_report_csv(path.string())) rows.push_back(std::move(r));
    }
    if (!merged_out.empty()) {
        std::ofstream f(merged_out, std::ios::binary);
        f << "strategy,stream,seed,per,bwt,fwt,mem\n";
        char buf[256];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%llu,%.17g,%.17g,%.17g,%.17g\n",
                          r.strategy.c_str(), r.stream.c_str(),
                          static_cast<unsigned long long>(r.seed), r.metrics.per, r.metrics.bwt,
                          r.metrics.fwt, r.metrics.mem);
            f << buf;
        }
        std::printf("merged %zu rows into %s\n", rows.size(), merged_out.c_str());
    }
    std::fputs(runner::render_table(rows).c_str(), stdout);
    return 0;
}

int cmd_inspect(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    in >> j;

    if (j.contains("mode")) {
        const auto model = subspace::load_model(path);
        std::printf("subspace model (%s), %zu tasks\n", subspace::to_string(model.mode).c_str(),
                    model.way_steps.size());
        auto show = [](const char* name, const subspace::PolicySubspace& s) {
            std::printf("  %s subspace: %zu anchors (", name, s.anchors.size());
            for (std::size_t i = 0; i < s.anchors.size(); ++i) {
                if (i) std::printf(", ");
                if (s.anchors[i].is_lora)
                    std::printf("lora r=%d", s.anchors[i].lora.rank);
                else
                    std::printf("full");
            }
            std::printf("), %zu stored parameters\n", s.stored_param_count());
            for (std::size_t t = 0; t < s.task_weights.size(); ++t) {
                std::printf("    task %zu weights:", t + 1);
                for (double a : s.task_weights[t].alpha) std::printf(" %.4f", a);
                std::printf("\n");
            }
        };
        if (model.mode == subspace::SubspaceMode::cspo) {
            show("joint", model.joint);
        } else {
            show("high", model.high);
            show("low", model.low);
        }
        return 0;
    }
    if (j.contains("columns_h")) {
        const auto p = baselines::load_pnn_policy(path);
        std::printf("progressive network policy: %zu columns, %zu + %zu parameters\n",
                    p.high.columns.size(), p.high.param_count(), p.low.param_count());
        return 0;
    }
    if (j.contains("params_h")) {
        const auto p = gcrl::load_policy(path);
        std::printf("%s policy, way step %d, %zu + %zu parameters\n",
                    p.hierarchical ? "hierarchical" : "flat", p.way_step, p.high.values.size(),
                    p.low.values.size());
        return 0;
    }
    throw std::runtime_error(path + ": not a recognized model file");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual goal-conditioned maze workbench"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a scripted-expert dataset");
    std::string layout = "U", transform = "N", out_path = "dataset.jsonl";
    int episodes = 500, horizon = 0;
    std::uint64_t seed = 0;
    double noise = envs::kExpertNoiseStd;
    gen->add_option("--layout", layout, "maze layout: U, M, or L");
    gen->add_option("--transform", transform, "task transform: N, IA, IO, PA, PO");
    gen->add_option("--episodes", episodes, "number of expert episodes")->check(CLI::PositiveNumber);
    gen->add_option("--seed", seed, "master seed");
    gen->add_option("--noise", noise, "expert action noise std");
    gen->add_option("--horizon", horizon, "episode horizon (default per layout)");
    gen->add_option("--out", out_path, "output dataset path")->required();

    // run
    auto* run = app.add_subcommand("run", "run a strategy over a task stream");
    std::string config_path, manifest_path, canned, strategy_override, out_dir_override;
    std::vector<std::uint64_t> seeds_override;
    double episodes_scale = 1.0;
    run->add_option("--config", config_path, "run config (json)");
    run->add_option("--manifest", manifest_path, "rerun from a manifest");
    run->add_option("--stream", canned, "canned stream: pm1, pm2, kin, topo");
    run->add_option("--strategy", strategy_override, "strategy override");
    run->add_option("--seeds", seeds_override, "seed list override");
    run->add_option("--episodes-scale", episodes_scale, "scale canned episode counts");
    run->add_option("--out-dir", out_dir_override, "output directory override");

    // report
    auto* rep = app.add_subcommand("report", "merge run reports into a comparison table");
    std::vector<std::string> run_dirs;
    std::string merged_out;
    rep->add_option("dirs", run_dirs, "run directories")->required();
    rep->add_option("--out", merged_out, "write the merged csv here");

    // inspect-model
    auto* insp = app.add_subcommand("inspect-model", "describe a model file");
    std::string model_path;
    insp->add_option("file", model_path, "model file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(layout, transform, episodes, seed, noise, horizon, out_path);
        if (run->parsed()) {
            runner::RunConfig cfg;
            if (!manifest_path.empty()) {
                std::ifstream in(manifest_path);
                if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path);
                nlohmann::json m;
                in >> m;
                cfg = runner::config_from_json(m.at("config"));
            } else if (!config_path.empty()) {
                cfg = runner::load_config(config_path);
            } else if (!canned.empty()) {
                cfg.stream = runner::canned_stream(canned, episodes_scale);
                cfg.train.her_temperature = 0.0;
                cfg.train.epochs = 80;
                cfg.out_dir = "runs/" + canned;
            } else {
                std::fprintf(stderr, "run: need --config, --manifest, or --stream\n");
                return 2;
            }
            if (!strategy_override.empty()) cfg.strategy = strategy_override;
            if (!seeds_override.empty()) cfg.seeds = seeds_override;
            cfg.validate();
            return cmd_run(std::move(cfg), out_dir_override);
        }
        if (rep->parsed()) return cmd_report(run_dirs, merged_out);
        if (insp->parsed()) return cmd_inspect(model_path);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
