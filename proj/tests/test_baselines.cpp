#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "crl/baselines.hpp"

using namespace crl;
using namespace crl::baselines;
using envs::MazeLayout;
using envs::TaskTransform;
using gcrl::make_shape;
using gcrl::ModelShapes;
using gcrl::TrainConfig;

namespace {

stream::StreamSpec two_task_stream(const char* t2 = "IA", int episodes = 100) {
    stream::StreamSpec spec;
    spec.name = "test";
    stream::TaskSpec a;
    a.layout = "U";
    a.transform = "N";
    a.generate = stream::TaskSpec::Generate{episodes, 3, 0.1};
    a.way_step = 6;
    stream::TaskSpec b = a;
    b.transform = t2;
    b.generate = stream::TaskSpec::Generate{episodes, 4, 0.1};
    spec.tasks = {a, b};
    return spec;
}

}  // namespace

TEST_CASE("reg_penalty: zero at the anchor point") {
    std::vector<double> theta{1.0, -2.0, 0.5};
    RegPair reg{2.0, theta, std::nullopt};
    const auto [loss, grad] = reg_penalty(StrategyKind::L2, theta, reg);
    CHECK(loss == 0.0);
    for (double g : grad) CHECK(g == 0.0);
}

TEST_CASE("reg_penalty: L2 squared norm") {
    std::vector<double> old{0.0, 0.0, 0.0, 0.0};
    std::vector<double> theta{3.0, 4.0, 0.0, 0.0};
    RegPair reg{1.0, old, std::nullopt};
    const auto [loss, grad] = reg_penalty(StrategyKind::L2, theta, reg);
    CHECK(loss == doctest::Approx(25.0));
    CHECK(grad[0] == doctest::Approx(6.0));
    CHECK(grad[1] == doctest::Approx(8.0));
}

TEST_CASE("reg_penalty: EWC gradient matches finite differences") {
    Rng rng(5);
    std::vector<double> old(6), theta(6), fisher(6);
    for (int i = 0; i < 6; ++i) {
        old[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
        theta[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
        fisher[static_cast<std::size_t>(i)] = rng.uniform(0, 2);
    }
    RegPair reg{0.7, old, fisher};
    const auto [loss, grad] = reg_penalty(StrategyKind::EWC, theta, reg);
    const double h = 1e-6;
    for (int i = 0; i < 6; ++i) {
        auto tp = theta, tm = theta;
        tp[static_cast<std::size_t>(i)] += h;
        tm[static_cast<std::size_t>(i)] -= h;
        const double fd = (reg_penalty(StrategyKind::EWC, tp, reg).first -
                           reg_penalty(StrategyKind::EWC, tm, reg).first) /
                          (2 * h);
        CHECK(std::fabs(grad[static_cast<std::size_t>(i)] - fd) <
              1e-6 * std::max(1.0, std::fabs(fd)));
    }
    CHECK_THROWS(reg_penalty(StrategyKind::EWC, theta, RegPair{1.0, old, std::nullopt}));
}

TEST_CASE("EWC with uniform fisher equals L2 after factor normalization") {
    Rng rng(6);
    std::vector<double> old(8), theta(8);
    for (int i = 0; i < 8; ++i) {
        old[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
        theta[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
    }
    const double lambda = 0.35;
    // EWC at 2*lambda with F = 1 gives gradient 2*lambda*(theta-old), the
    // same as L2 at lambda
    RegPair ewc{2.0 * lambda, old, std::vector<double>(8, 1.0)};
    RegPair l2{lambda, old, std::nullopt};
    const auto ge = reg_penalty(StrategyKind::EWC, theta, ewc).second;
    const auto gl = reg_penalty(StrategyKind::L2, theta, l2).second;
    for (int i = 0; i < 8; ++i)
        CHECK(std::fabs(ge[static_cast<std::size_t>(i)] - gl[static_cast<std::size_t>(i)]) < 1e-9);
}

TEST_CASE("estimate_fisher: nonnegative, zero for a perfectly fit linear net") {
    nnet::NetShape s{.input_dim = 2, .hidden_dims = {}, .output_dim = 1};
    nnet::ParamVector p{{1.0, -1.0, 0.5}, s};
    nnet::Batch rows;
    rows.inputs = nnet::Matrix(6, 2);
    rows.targets = nnet::Matrix(6, 1);
    Rng rng(7);
    for (std::size_t r = 0; r < 6; ++r) {
        rows.inputs.at(r, 0) = rng.uniform(-1, 1);
        rows.inputs.at(r, 1) = rng.uniform(-1, 1);
        rows.targets.at(r, 0) = rows.inputs.at(r, 0) - rows.inputs.at(r, 1) + 0.5;
    }
    Rng frng(8);
    const auto fisher = estimate_fisher(p, rows, 64, frng);
    for (double f : fisher) {
        CHECK(f >= 0.0);
        CHECK(f < 1e-20);
    }
}

TEST_CASE("estimate_fisher: converges as samples double") {
    const auto ds = envs::gen_dataset(MazeLayout::standard("U"), TaskTransform::N, 300, 30, 3);
    const auto shape = make_shape(6, {8}, 2, true, 0.0);
    const auto p = nnet::init_params(shape, 4);
    const auto rows = gcrl::all_low_rows(ds, 3);
    auto norm_diff = [&](int n, std::uint64_t seed_a, std::uint64_t seed_b) {
        Rng ra(seed_a), rb(seed_b);
        const auto fa = estimate_fisher(p, rows, n, ra);
        const auto fb = estimate_fisher(p, rows, n, rb);
        double d = 0.0;
        for (std::size_t i = 0; i < fa.size(); ++i) d += (fa[i] - fb[i]) * (fa[i] - fb[i]);
        return std::sqrt(d);
    };
    // two independent estimates approach each other as samples grow
    const double d_small = norm_diff(32, 11, 22);
    const double d_big = norm_diff(1024, 33, 44);
    CHECK(d_big < d_small);
}

TEST_CASE("pnn: single column equals the plain MLP") {
    Pnn net;
    net.shape = make_shape(4, {6, 5}, 2, true, 0.0);
    pnn_add_column(net, 42);
    const nnet::ParamVector plain{net.columns[0].own.values, net.shape};
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
        std::vector<double> x(4);
        for (auto& v : x) v = rng.uniform(-1, 1);
        CHECK(pnn_forward(net, x, 0) == nnet::forward(plain, x));
    }
}

TEST_CASE("pnn: gradient of the newest column matches finite differences") {
    Pnn net;
    net.shape = make_shape(3, {4, 4}, 2, true, 0.0);
    pnn_add_column(net, 1);
    pnn_add_column(net, 2);

    nnet::Batch batch;
    batch.inputs = nnet::Matrix(3, 3);
    batch.targets = nnet::Matrix(3, 2);
    Rng rng(9);
    for (auto& v : batch.inputs.data) v = rng.uniform(-1, 1);
    for (auto& v : batch.targets.data) v = rng.uniform(-1, 1);

    std::vector<double> grad;
    pnn_grad_last(net, batch, grad);

    // finite differences over own params and one lateral block
    const double h = 1e-5;
    auto loss_at = [&]() { return pnn_loss(net, batch, 1); };
    double worst = 0.0;
    auto check_slot = [&](double* slot, std::size_t grad_idx) {
        const double orig = *slot;
        *slot = orig + h;
        const double lp = loss_at();
        *slot = orig - h;
        const double lm = loss_at();
        *slot = orig;
        const double fd = (lp - lm) / (2 * h);
        const double denom = std::max({1.0, std::fabs(fd), std::fabs(grad[grad_idx])});
        worst = std::max(worst, std::fabs(fd - grad[grad_idx]) / denom);
    };
    auto& col = net.columns.back();
    for (std::size_t i = 0; i < col.own.values.size(); i += 7) check_slot(&col.own.values[i], i);
    std::size_t off = col.own.values.size();
    for (auto& per_layer : col.laterals)
        for (auto& u : per_layer) {
            for (std::size_t i = 0; i < u.size(); i += 5) check_slot(&u[i], off + i);
            off += u.size();
        }
    CHECK(worst < 1e-4);
}

TEST_CASE("pnn: freezing and superlinear parameter growth") {
    Pnn net;
    net.shape = make_shape(6, {8, 8}, 2);
    pnn_add_column(net, 1);
    const std::size_t c1 = net.param_count();
    const auto frozen = net.columns[0].own.values;

    const auto ds = envs::gen_dataset(MazeLayout::standard("U"), TaskTransform::N, 300, 20, 3);
    pnn_add_column(net, 2);
    const std::size_t c2 = net.param_count();
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 5;
    cfg.her_temperature = 100.0;
    pnn_train_last(net, [&](int bs, Rng& rng) { return gcrl::make_low_batch(ds, 3, bs, rng); },
                   ds.transition_count(), cfg, 0x1);
    CHECK(net.columns[0].own.values == frozen);

    pnn_add_column(net, 3);
    const std::size_t c3 = net.param_count();
    // lateral blocks scale with the column index
    CHECK(c3 - c2 > c2 - c1);

    // closed-form tally: per column, own + (column index) * laterals
    std::size_t own = nnet::param_count(net.shape);
    std::size_t lat = 0;
    const auto views = nnet::layer_views(net.shape);
    for (std::size_t l = 1; l < views.size(); ++l)
        lat += static_cast<std::size_t>(views[l].out) * views[l].in;
    CHECK(c3 == 3 * own + (0 + 1 + 2) * lat);
}

TEST_CASE("run_strategy: FZ reuses the first policy verbatim") {
    const auto spec = two_task_stream("IA", 60);
    ModelShapes shapes{make_shape(6, {12}, 2), make_shape(6, {12}, 2)};
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.seed = 11;
    metrics::EvalSettings eval;
    eval.episodes = 20;

    const auto fz = run_strategy(StrategyKind::FZ, spec, shapes, cfg, {}, eval);
    REQUIRE(fz.store.checkpoints.size() == 1);

    stream::StreamSpec first_only = spec;
    first_only.tasks.resize(1);
    const auto solo = run_strategy(StrategyKind::FZ, first_only, shapes, cfg, {}, eval);
    CHECK(fz.store.checkpoints[0].high.values == solo.store.checkpoints[0].high.values);
    CHECK(fz.store.checkpoints[0].low.values == solo.store.checkpoints[0].low.values);
    CHECK(fz.report.metrics.bwt == 0.0);
    CHECK(fz.report.metrics.mem == 1.0);
}

TEST_CASE("run_strategy: per-task stores have exact zero backward transfer") {
    const auto spec = two_task_stream("IA", 60);
    ModelShapes shapes{make_shape(6, {12}, 2), make_shape(6, {12}, 2)};
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.seed = 12;
    metrics::EvalSettings eval;
    eval.episodes = 20;

    for (auto kind : {StrategyKind::SCN, StrategyKind::FTN, StrategyKind::PNN}) {
        const auto res = run_strategy(kind, spec, shapes, cfg, {}, eval);
        INFO("strategy ", to_string(kind));
        CHECK(res.report.metrics.bwt == 0.0);
        if (kind == StrategyKind::PNN) {
            CHECK(res.report.metrics.mem > 2.0);
        } else {
            CHECK(res.report.metrics.mem == 2.0);
            CHECK(res.store.checkpoints.size() == 2);
        }
    }
}

TEST_CASE("run_strategy: large lambda pins the parameters") {
    const auto spec = two_task_stream("IA", 80);
    ModelShapes shapes{make_shape(6, {12}, 2), make_shape(6, {12}, 2)};
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = 13;
    metrics::EvalSettings eval;
    eval.episodes = 10;

    auto displacement = [&](StrategyKind kind, double lambda) {
        StrategyCfg scfg;
        scfg.lambda = lambda;
        const auto res = run_strategy(kind, spec, shapes, cfg, scfg, eval);
        // distance of the final policy from a task-1-only run
        stream::StreamSpec first_only = spec;
        first_only.tasks.resize(1);
        const auto solo = run_strategy(StrategyKind::FZ, first_only, shapes, cfg, {}, eval);
        double d = 0.0;
        for (std::size_t i = 0; i < solo.store.checkpoints[0].low.values.size(); ++i) {
            const double e = res.store.checkpoints[0].low.values[i] -
                             solo.store.checkpoints[0].low.values[i];
            d += e * e;
        }
        return std::sqrt(d);
    };

    const double free_move = displacement(StrategyKind::L2, 1e-6);
    const double pinned = displacement(StrategyKind::L2, 1e4);
    CHECK(pinned < 0.01 * free_move);
}

TEST_CASE("pnn policy files round-trip") {
    PnnPolicy p;
    p.high.shape = make_shape(6, {8}, 2);
    p.low.shape = make_shape(6, {8}, 2);
    pnn_add_column(p.high, 1);
    pnn_add_column(p.high, 2);
    pnn_add_column(p.low, 3);
    pnn_add_column(p.low, 4);
    p.way_steps = {6, 6};
    const std::string path = "test_baselines_pnn.json";
    save_pnn_policy(p, path);
    const auto back = load_pnn_policy(path);
    CHECK(back.way_steps == p.way_steps);
    REQUIRE(back.high.columns.size() == 2);
    CHECK(back.high.columns[1].own.values == p.high.columns[1].own.values);
    CHECK(back.high.columns[1].laterals == p.high.columns[1].laterals);
    std::remove(path.c_str());
}
