#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "crl/subspace.hpp"

using namespace crl;
using namespace crl::subspace;
using envs::MazeLayout;
using envs::TaskTransform;
using gcrl::make_shape;
using gcrl::TrainConfig;

namespace {

PolicySubspace random_subspace(const nnet::NetShape& shape, int n_anchors, std::uint64_t seed) {
    PolicySubspace sub;
    sub.layout = ParamLayout::for_shape(shape);
    for (int i = 0; i < n_anchors; ++i)
        sub.anchors.push_back(make_full_anchor(nnet::init_params(shape, seed + static_cast<std::uint64_t>(i)).values));
    return sub;
}

}  // namespace

TEST_CASE("combine: one anchor with weight (1) is exactly that anchor") {
    const auto shape = make_shape(3, {4}, 2);
    auto sub = random_subspace(shape, 1, 5);
    CHECK(sub.combine({{1.0}}) == sub.anchors[0].full);
}

TEST_CASE("combine: identical anchors collapse to the anchor for any weights") {
    const auto shape = make_shape(2, {3}, 1);
    PolicySubspace sub;
    sub.layout = ParamLayout::for_shape(shape);
    const auto theta = nnet::init_params(shape, 9).values;
    sub.anchors.push_back(make_full_anchor(theta));
    sub.anchors.push_back(make_full_anchor(theta));
    const auto combo = sub.combine({{0.3, 0.7}});
    for (std::size_t i = 0; i < theta.size(); ++i)
        CHECK(combo[i] == doctest::Approx(theta[i]).epsilon(1e-12));
}

TEST_CASE("combine: matches the elementwise weighted-sum oracle") {
    const auto shape = make_shape(3, {5, 4}, 2, true, 0.0);
    auto sub = random_subspace(shape, 3, 21);
    Rng rng(3);
    auto w = sample_simplex(3, rng);
    const auto combo = sub.combine(w);
    for (std::size_t p = 0; p < combo.size(); ++p) {
        double expect = 0.0;
        for (int i = 0; i < 3; ++i)
            expect += w.alpha[static_cast<std::size_t>(i)] * sub.anchors[static_cast<std::size_t>(i)].full[p];
        CHECK(combo[p] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("combine: linear in the weights") {
    const auto shape = make_shape(2, {4}, 2);
    auto sub = random_subspace(shape, 3, 33);
    Rng rng(4);
    const auto a = sample_simplex(3, rng);
    const auto b = sample_simplex(3, rng);
    const double lam = 0.35;
    SimplexWeights mixed;
    for (int i = 0; i < 3; ++i)
        mixed.alpha.push_back(lam * a.alpha[static_cast<std::size_t>(i)] +
                              (1 - lam) * b.alpha[static_cast<std::size_t>(i)]);
    const auto lhs = sub.combine(mixed);
    const auto ca = sub.combine(a);
    const auto cb = sub.combine(b);
    for (std::size_t p = 0; p < lhs.size(); ++p)
        CHECK(std::fabs(lhs[p] - (lam * ca[p] + (1 - lam) * cb[p])) < 1e-9);
}

TEST_CASE("sample_simplex: degenerate, membership, and coordinate means") {
    Rng rng(7);
    CHECK(sample_simplex(1, rng).alpha == std::vector<double>{1.0});

    for (int i = 0; i < 1000; ++i) {
        const auto w = sample_simplex(1 + static_cast<int>(rng.uniform_int(7)), rng);
        double sum = 0.0;
        for (double a : w.alpha) {
            CHECK(a >= 0.0);
            sum += a;
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }

    const int draws = 100000;
    std::vector<double> mean(3, 0.0);
    for (int i = 0; i < draws; ++i) {
        const auto w = sample_simplex(3, rng);
        for (int c = 0; c < 3; ++c) mean[static_cast<std::size_t>(c)] += w.alpha[static_cast<std::size_t>(c)];
    }
    // Dirichlet(1,1,1) coordinate: mean 1/3, var = (1/3)(2/3)/4
    const double stderr_mean = std::sqrt((1.0 / 3.0) * (2.0 / 3.0) / 4.0 / draws);
    for (int c = 0; c < 3; ++c)
        CHECK(std::fabs(mean[static_cast<std::size_t>(c)] / draws - 1.0 / 3.0) < 3 * stderr_mean);
}

TEST_CASE("adapt_decision: criterion table") {
    CHECK(adapt_decision(0.9, 1.0, 0.1) == Decision::prune);
    CHECK(adapt_decision(2.0, 1.0, 0.1) == Decision::extend);
    CHECK(adapt_decision(1.05, 1.0, 0.1) == Decision::prune);
    CHECK(adapt_decision(1.1, 1.0, 0.1) == Decision::prune);     // boundary inclusive
    CHECK(adapt_decision(1.1 + 1e-9, 1.0, 0.1) == Decision::extend);
    CHECK(adapt_decision(0.0, 0.0, 0.1) == Decision::prune);
    CHECK_THROWS(adapt_decision(-0.1, 1.0, 0.1));
    CHECK_THROWS(adapt_decision(1.0, -0.5, 0.1));
}

TEST_CASE("softmax of zero scores is uniform") {
    const auto w = softmax_weights({{0.0, 0.0, 0.0}});
    for (double a : w.alpha) CHECK(a == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("lora anchors: zero at init, exact parameter accounting") {
    const auto shape = make_shape(6, {16, 16}, 2);
    const auto layout = ParamLayout::for_shape(shape);
    const int rank = 4;
    const auto anchor = make_lora_anchor(layout, rank, 11);

    const auto mat = materialize(anchor, layout);
    for (double v : mat) CHECK(v == 0.0);

    std::size_t expect = 0;
    for (const auto& blk : layout.blocks) expect += static_cast<std::size_t>(rank) * (blk.out + blk.in);
    CHECK(anchor.stored_param_count(layout) == expect);
    // strictly fewer than a full anchor when r < n*m/(n+m) holds per block
    CHECK(expect < layout.dim);
}

namespace {

struct QuadraticTask {
    // loss(theta) = 0.5*||theta - target||^2 / dim, a stand-in task with a
    // known optimum for exercising the extension machinery cheaply
    std::vector<double> target;
    TaskAdapter adapter(const ParamLayout& layout) const {
        TaskAdapter t;
        t.layout = layout;
        t.n_transitions = 256;
        auto tgt = target;
        t.init_anchor = [layout](std::uint64_t seed) {
            Rng r(seed);
            std::vector<double> v(layout.dim);
            for (auto& x : v) x = r.uniform(-0.5, 0.5);
            return v;
        };
        t.batch_grad = [tgt](const std::vector<double>& theta, std::vector<double>& grad, Rng&) {
            grad.resize(theta.size());
            double loss = 0.0;
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double e = theta[i] - tgt[i];
                grad[i] = e / static_cast<double>(theta.size());
                loss += 0.5 * e * e;
            }
            return loss / static_cast<double>(theta.size());
        };
        t.eval_loss = [tgt](const std::vector<double>& theta) {
            double loss = 0.0;
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double e = theta[i] - tgt[i];
                loss += 0.5 * e * e;
            }
            return loss / static_cast<double>(theta.size());
        };
        t.fraction_within = [](const std::vector<double>&, double) { return 0.0; };
        return t;
    }
};

}  // namespace

TEST_CASE("train_new_anchor: freezing, uniform initial weights, descent") {
    const auto shape = make_shape(2, {4}, 2, false, 0.0);
    auto sub = random_subspace(shape, 2, 55);
    const auto frozen0 = sub.anchors[0].full;
    const auto frozen1 = sub.anchors[1].full;
    sub.task_weights.push_back({{1.0, 0.0}});
    sub.task_weights.push_back({{0.0, 1.0}});

    QuadraticTask q;
    q.target.assign(sub.layout.dim, 0.7);
    const auto task = q.adapter(sub.layout);

    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.batch_size = 64;
    cfg.seed = 3;
    SubspaceConfig scfg;

    SUBCASE("zero scores give uniform alpha before any update") {
        const auto res = train_new_anchor(sub, task, scfg, cfg, 1);
        for (double a : res.alpha_curr.alpha) CHECK(a == doctest::Approx(1.0 / 3.0));
    }

    SUBCASE("training reduces the loss and never touches previous anchors") {
        cfg.epochs = 400;
        cfg.lr = 3e-3;
        const auto res = train_new_anchor(sub, task, scfg, cfg, 1);
        CHECK(sub.anchors[0].full == frozen0);
        CHECK(sub.anchors[1].full == frozen1);
        const double l_init = task.eval_loss(sub.combine({{0.5, 0.5}}));
        CHECK(res.l_curr < l_init);
    }
}

TEST_CASE("explore_previous: single anchor, stored weights, monotone in samples") {
    const auto shape = make_shape(2, {3}, 1, false, 0.0);

    SUBCASE("one anchor always yields weight (1)") {
        auto sub = random_subspace(shape, 1, 5);
        QuadraticTask q;
        q.target.assign(sub.layout.dim, 0.0);
        const auto task = q.adapter(sub.layout);
        Rng rng(9);
        const auto res = explore_previous(sub, task, 16, rng);
        CHECK(res.alpha.alpha == std::vector<double>{1.0});
    }

    SUBCASE("stored task weights are candidates, so their loss is an upper bound") {
        auto sub = random_subspace(shape, 3, 6);
        SimplexWeights stored{{0.2, 0.5, 0.3}};
        sub.task_weights.push_back(stored);
        QuadraticTask q;
        q.target = sub.combine(stored);  // stored weights are optimal here
        const auto task = q.adapter(sub.layout);
        Rng rng(10);
        const auto res = explore_previous(sub, task, 8, rng);
        CHECK(res.loss <= task.eval_loss(sub.combine(stored)) + 1e-15);
    }

    SUBCASE("more samples never increase the minimum on a shared stream") {
        auto sub = random_subspace(shape, 3, 7);
        QuadraticTask q;
        q.target.assign(sub.layout.dim, 0.1);
        const auto task = q.adapter(sub.layout);
        Rng r1(42), r64(42);
        const auto res1 = explore_previous(sub, task, 1, r1);
        const auto res64 = explore_previous(sub, task, 64, r64);
        CHECK(res64.loss <= res1.loss);
    }
}

TEST_CASE("pac_gate: exact self-consistency passes, d=0 fails") {
    const auto ds = envs::gen_dataset(MazeLayout::standard("U"), TaskTransform::N, 300, 30, 3);
    const auto shape = make_shape(6, {8}, 2, true, 0.0);
    TrainConfig cfg;
    cfg.her_temperature = 100.0;
    auto task = make_task_adapter(ds, shape, LossKind::low, 3, cfg);

    auto sub = random_subspace(shape, 1, 77);
    sub.task_weights.push_back({{1.0}});

    SUBCASE("dataset regenerated from the subspace's own outputs gives fraction 1") {
        // relabel every action with the policy's own prediction
        envs::Dataset self = ds;
        const nnet::ParamVector p{sub.anchors[0].full, shape};
        for (auto& ep : self.episodes) {
            for (int t = 0; t < ep.length(); ++t) {
                double in[6], tgt[2];
                gcrl::low_row(ep, t, 3, in, tgt);
                const auto out = nnet::forward(p, std::span<const double>(in, 6));
                ep.steps[static_cast<std::size_t>(t)].action = {out[0], out[1]};
            }
        }
        auto self_task = make_task_adapter(self, shape, LossKind::low, 3, cfg);
        Rng rng(5);
        const auto res = pac_gate(sub, self_task, {0.05, 0.1}, 8, rng);
        CHECK(res.fraction == 1.0);
        CHECK(res.pass);
    }

    SUBCASE("zero tolerance on continuous outputs fails") {
        Rng rng(5);
        const auto res = pac_gate(sub, task, {0.0, 0.1}, 8, rng);
        CHECK(res.fraction < 0.05);
        CHECK(!res.pass);
    }
}

TEST_CASE("model files round-trip bit-exactly") {
    const auto shape_h = make_shape(6, {8}, 2);
    const auto shape_l = make_shape(6, {6}, 2);
    HispoModel m;
    m.mode = SubspaceMode::hilow;
    m.shapes = {shape_h, shape_l};
    m.way_steps = {5, 5};
    m.high.layout = ParamLayout::for_shape(shape_h);
    m.low.layout = ParamLayout::for_shape(shape_l);
    m.high.anchors.push_back(make_full_anchor(nnet::init_params(shape_h, 1).values));
    m.high.task_weights.push_back({{1.0}});
    m.high.task_weights.push_back({{1.0}});
    m.low.anchors.push_back(make_full_anchor(nnet::init_params(shape_l, 2).values));
    auto lora = make_lora_anchor(m.low.layout, 2, 3);
    for (auto& blk : lora.lora.b)
        for (auto& v : blk) v = 0.01;
    m.low.anchors.push_back(lora);
    m.low.task_weights.push_back({{1.0, 0.0}});
    m.low.task_weights.push_back({{0.25, 0.75}});

    const std::string path = "test_subspace_model.json";
    save_model(m, path);
    const auto back = load_model(path);
    CHECK(back.mode == m.mode);
    CHECK(back.way_steps == m.way_steps);
    CHECK(back.high.anchors[0].full == m.high.anchors[0].full);
    CHECK(back.low.anchors[1].is_lora);
    CHECK(back.low.anchors[1].lora.a == m.low.anchors[1].lora.a);
    CHECK(back.low.anchors[1].lora.b == m.low.anchors[1].lora.b);
    CHECK(back.low.task_weights[1].alpha == m.low.task_weights[1].alpha);
    std::remove(path.c_str());

    // and the stored-parameter accounting that feeds MEM
    CHECK(m.stored_param_count() ==
          m.high.stored_param_count() + m.low.stored_param_count());
}

TEST_CASE("learn_stream: kinematic change extends the low subspace") {
    stream::StreamSpec spec;
    spec.name = "kin-smoke";
    stream::TaskSpec a;
    a.layout = "U";
    a.transform = "N";
    a.generate = stream::TaskSpec::Generate{150, 3, 0.1};
    a.way_step = 6;
    stream::TaskSpec b = a;
    b.transform = "IA";
    b.generate = stream::TaskSpec::Generate{150, 4, 0.1};
    spec.tasks = {a, b};

    ModelShapes shapes{gcrl::make_shape(6, {24, 24}, 2), gcrl::make_shape(6, {16, 16}, 2)};
    SubspaceConfig scfg;
    scfg.epsilon = 0.1;
    scfg.samples = 16;
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.seed = 5;
    EvalSettings eval;
    eval.episodes = 30;

    const auto res = learn_stream(spec, SubspaceMode::hispo, shapes, scfg, cfg, eval);

    // inverted actions force a new low anchor at any training budget
    CHECK(res.model.anchor_count_low() == 2);
    CHECK(res.model.records_low[1].decision == "extend");
    CHECK(res.model.records_low[1].l_prev > res.model.records_low[1].l_curr);
    // task-1 weights were zero-padded on extension and stay on the simplex
    CHECK(res.model.low.task_weights[0].alpha == std::vector<double>{1.0, 0.0});
    for (const auto& w : res.model.low.task_weights) w.validate();
    for (const auto& w : res.model.high.task_weights) w.validate();
    // anchor counts stay bounded by the task count
    CHECK(res.model.anchor_count_high() <= 2);
    // frozen per-task weights re-evaluated later: backward transfer is exactly zero
    CHECK(res.report.metrics.bwt == 0.0);
    CHECK(res.report.metrics.per >= 0.0);

    // prune keeps the parameter count, extend grows it by one anchor
    const std::size_t single_low = nnet::param_count(shapes.low);
    const std::size_t low_anchor_params =
        res.model.low.stored_param_count() -
        (res.model.low.task_weights[0].alpha.size() + res.model.low.task_weights[1].alpha.size());
    CHECK(low_anchor_params == 2 * single_low);
}

TEST_CASE("learn_stream: cspo keeps one joint subspace") {
    stream::StreamSpec spec;
    spec.name = "cspo-smoke";
    stream::TaskSpec a;
    a.layout = "U";
    a.transform = "N";
    a.generate = stream::TaskSpec::Generate{100, 3, 0.1};
    a.way_step = 6;
    stream::TaskSpec b = a;
    b.transform = "IA";
    b.generate = stream::TaskSpec::Generate{100, 4, 0.1};
    spec.tasks = {a, b};

    ModelShapes shapes{gcrl::make_shape(6, {16, 16}, 2), gcrl::make_shape(6, {16, 16}, 2)};
    SubspaceConfig scfg;
    scfg.samples = 8;
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = 6;
    EvalSettings eval;
    eval.episodes = 20;

    const auto res = learn_stream(spec, SubspaceMode::cspo, shapes, scfg, cfg, eval);
    CHECK(res.model.joint.anchor_count() >= 1);
    CHECK(res.model.joint.anchor_count() <= 2);
    CHECK(res.model.joint.task_weights.size() == 2);
    CHECK(res.report.metrics.bwt == 0.0);
    // one decision per task for the single subspace
    CHECK(res.model.records_high.size() == 2);
    CHECK(res.model.records_low.empty());
}
