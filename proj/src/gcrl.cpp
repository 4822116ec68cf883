#include "crl/gcrl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "crl/serialize.hpp"

namespace crl::gcrl {

using envs::Dataset;
using envs::Episode;
using envs::Vec2;
using nnet::Batch;
using nnet::Matrix;

void TrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (lr <= 0.0) throw std::invalid_argument("train: lr must be positive");
    if (her_temperature <= 0.0) throw std::invalid_argument("train: her_temperature must be positive");
    if (her_fraction < 0.0 || her_fraction > 1.0)
        throw std::invalid_argument("train: her_fraction must lie in [0,1]");
}

nnet::NetShape make_shape(int input_dim, std::vector<int> hidden, int output_dim, bool layernorm,
                          double dropout) {
    nnet::NetShape s;
    s.input_dim = input_dim;
    s.hidden_dims = std::move(hidden);
    s.output_dim = output_dim;
    s.use_layernorm = layernorm;
    s.dropout_rate = dropout;
    s.validate();
    return s;
}

int her_offset(int remaining, double temperature, Rng& rng) {
    if (remaining < 1) throw std::invalid_argument("her_offset: nothing ahead of t");
    if (remaining == 1) return 1;
    double total = 0.0;
    for (int d = 1; d <= remaining; ++d) total += std::exp(-d / temperature);
    double u = rng.uniform() * total;
    for (int d = 1; d <= remaining; ++d) {
        u -= std::exp(-d / temperature);
        if (u <= 0.0) return d;
    }
    return remaining;
}

Vec2 her_relabel(const Episode& ep, int t, double temperature, Rng& rng) {
    const int len = ep.length();
    if (t < 0 || t >= len) throw std::invalid_argument("her_relabel: t out of range");
    const int d = her_offset(len - t, temperature, rng);
    return ep.achieved[static_cast<std::size_t>(t + d)];
}

namespace {

inline Vec2 future_phi(const Episode& ep, int t, int way_step) {
    const int idx = std::min(t + way_step, ep.length());
    return ep.achieved[static_cast<std::size_t>(idx)];
}

inline void fill_input(const Episode& ep, int t, Vec2 tail, double* input6) {
    const auto& obs = ep.steps[static_cast<std::size_t>(t)].obs;
    std::copy(obs.begin(), obs.end(), input6);
    input6[kObsDim] = tail.x;
    input6[kObsDim + 1] = tail.y;
}

struct FlatIndex {
    std::vector<std::pair<int, int>> entries;  // (episode, t)

    static FlatIndex build(const Dataset& ds) {
        FlatIndex idx;
        idx.entries.reserve(ds.transition_count());
        for (int e = 0; e < static_cast<int>(ds.episodes.size()); ++e)
            for (int t = 0; t < ds.episodes[e].length(); ++t) idx.entries.emplace_back(e, t);
        if (idx.entries.empty()) throw std::invalid_argument("dataset has no transitions");
        return idx;
    }

    std::pair<int, int> sample(Rng& rng) const {
        return entries[rng.uniform_int(entries.size())];
    }
};

}  // namespace

void high_row(const Episode& ep, int t, int way_step, Vec2 goal, double* input6,
              double* target2) {
    fill_input(ep, t, goal, input6);
    const Vec2 tgt = future_phi(ep, t, way_step);
    target2[0] = tgt.x;
    target2[1] = tgt.y;
}

void low_row(const Episode& ep, int t, int way_step, double* input6, double* target2) {
    fill_input(ep, t, future_phi(ep, t, way_step), input6);
    const auto& a = ep.steps[static_cast<std::size_t>(t)].action;
    target2[0] = a[0];
    target2[1] = a[1];
}

void bc_row(const Episode& ep, int t, Vec2 goal, double* input6, double* target2) {
    fill_input(ep, t, goal, input6);
    const auto& a = ep.steps[static_cast<std::size_t>(t)].action;
    target2[0] = a[0];
    target2[1] = a[1];
}

namespace {

Batch alloc_batch(int n) {
    Batch b;
    b.inputs = Matrix(static_cast<std::size_t>(n), kObsDim + kGoalDim);
    b.targets = Matrix(static_cast<std::size_t>(n), 2);
    return b;
}

}  // namespace

nnet::Batch make_high_batch(const Dataset& ds, int way_step, int n, double her_temperature,
                            double her_fraction, Rng& rng) {
    const auto idx = FlatIndex::build(ds);
    Batch b = alloc_batch(n);
    for (int i = 0; i < n; ++i) {
        const auto [e, t] = idx.sample(rng);
        const auto& ep = ds.episodes[static_cast<std::size_t>(e)];
        Vec2 goal = ep.goal;
        if (rng.bernoulli(her_fraction)) goal = her_relabel(ep, t, her_temperature, rng);
        high_row(ep, t, way_step, goal, b.inputs.row(i), b.targets.row(i));
    }
    return b;
}

nnet::Batch make_low_batch(const Dataset& ds, int way_step, int n, Rng& rng) {
    const auto idx = FlatIndex::build(ds);
    Batch b = alloc_batch(n);
    for (int i = 0; i < n; ++i) {
        const auto [e, t] = idx.sample(rng);
        low_row(ds.episodes[static_cast<std::size_t>(e)], t, way_step, b.inputs.row(i),
                b.targets.row(i));
    }
    return b;
}

nnet::Batch make_bc_batch(const Dataset& ds, int n, double her_temperature, double her_fraction,
                          Rng& rng) {
    const auto idx = FlatIndex::build(ds);
    Batch b = alloc_batch(n);
    for (int i = 0; i < n; ++i) {
        const auto [e, t] = idx.sample(rng);
        const auto& ep = ds.episodes[static_cast<std::size_t>(e)];
        Vec2 goal = ep.goal;
        if (rng.bernoulli(her_fraction)) goal = her_relabel(ep, t, her_temperature, rng);
        bc_row(ep, t, goal, b.inputs.row(i), b.targets.row(i));
    }
    return b;
}

namespace {

Batch all_rows(const Dataset& ds, const std::function<void(const Episode&, int, double*, double*)>& fill) {
    const std::size_t n = ds.transition_count();
    if (n == 0) throw std::invalid_argument("dataset has no transitions");
    Batch b = alloc_batch(static_cast<int>(n));
    std::size_t i = 0;
    for (const auto& ep : ds.episodes)
        for (int t = 0; t < ep.length(); ++t, ++i) fill(ep, t, b.inputs.row(i), b.targets.row(i));
    return b;
}

}  // namespace

nnet::Batch all_high_rows(const Dataset& ds, int way_step) {
    return all_rows(ds, [way_step](const Episode& ep, int t, double* in, double* tgt) {
        high_row(ep, t, way_step, ep.goal, in, tgt);
    });
}

nnet::Batch all_low_rows(const Dataset& ds, int way_step) {
    return all_rows(ds, [way_step](const Episode& ep, int t, double* in, double* tgt) {
        low_row(ep, t, way_step, in, tgt);
    });
}

nnet::Batch all_bc_rows(const Dataset& ds) {
    return all_rows(ds, [](const Episode& ep, int t, double* in, double* tgt) {
        bc_row(ep, t, ep.goal, in, tgt);
    });
}

void train_net(nnet::ParamVector& params,
               const std::function<nnet::Batch(int, Rng&)>& sample_batch, std::size_t data_size,
               const TrainConfig& cfg, std::uint64_t rng_salt) {
    cfg.validate();
    Rng rng(Rng::derive(cfg.seed, rng_salt));
    nnet::AdamState adam(params.values.size());
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>(data_size / static_cast<std::size_t>(cfg.batch_size)));
    std::vector<double> g;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int s = 0; s < steps_per_epoch; ++s) {
            const Batch b = sample_batch(cfg.batch_size, rng);
            nnet::grad_with_loss(params, b, g, nnet::Mode::train, &rng);
            nnet::adam_step(adam, params.values, g, cfg.lr);
        }
    }
}

HierPolicy train_hbc(const Dataset& ds, const nnet::NetShape& high_shape,
                     const nnet::NetShape& low_shape, int way_step, const TrainConfig& cfg) {
    if (way_step < 1) throw std::invalid_argument("train_hbc: way_step must be >= 1");
    HierPolicy p;
    p.way_step = way_step;
    p.hierarchical = true;
    p.high = nnet::init_params(high_shape, Rng::derive(cfg.seed, 0x48));
    p.low = nnet::init_params(low_shape, Rng::derive(cfg.seed, 0x4c));
    const std::size_t n = ds.transition_count();
    train_net(
        p.high,
        [&](int bs, Rng& rng) {
            return make_high_batch(ds, way_step, bs, cfg.her_temperature, cfg.her_fraction, rng);
        },
        n, cfg, 0x68);
    train_net(p.low, [&](int bs, Rng& rng) { return make_low_batch(ds, way_step, bs, rng); }, n,
              cfg, 0x6c);
    return p;
}

HierPolicy train_bc(const Dataset& ds, const nnet::NetShape& low_shape, const TrainConfig& cfg) {
    HierPolicy p;
    p.hierarchical = false;
    p.way_step = 1;
    p.low = nnet::init_params(low_shape, Rng::derive(cfg.seed, 0x4c));
    p.high = nnet::ParamVector{};
    p.high.shape = low_shape;  // placeholder, unused
    p.high.values.clear();
    train_net(
        p.low,
        [&](int bs, Rng& rng) {
            return make_bc_batch(ds, bs, cfg.her_temperature, cfg.her_fraction, rng);
        },
        ds.transition_count(), cfg, 0x6c);
    return p;
}

std::array<double, 2> hier_act(HierActorState& st, const HierPolicy& policy,
                               std::span<const double> obs, Vec2 goal, Vec2 achieved, int t) {
    std::vector<double> input(obs.begin(), obs.end());
    input.push_back(goal.x);
    input.push_back(goal.y);

    if (policy.hierarchical) {
        if (t % policy.way_step == 0 || !st.has || envs::dist(st.subgoal, achieved) <= 0.5) {
            const auto sg = nnet::forward(policy.high, input);
            st.subgoal = {sg[0], sg[1]};
            st.has = true;
        }
        input[obs.size()] = st.subgoal.x;
        input[obs.size() + 1] = st.subgoal.y;
    }

    const auto out = nnet::forward(policy.low, input);
    return {std::clamp(out[0], -1.0, 1.0), std::clamp(out[1], -1.0, 1.0)};
}

void save_policy(const HierPolicy& policy, const std::string& path) {
    nlohmann::json j = {{"format_version", 1},
                        {"hierarchical", policy.hierarchical},
                        {"k", policy.way_step},
                        {"shape_h", policy.high.shape},
                        {"shape_l", policy.low.shape},
                        {"params_h", policy.high.values},
                        {"params_l", policy.low.values}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump() << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

HierPolicy load_policy(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    in >> j;
    HierPolicy p;
    p.hierarchical = j.at("hierarchical").get<bool>();
    p.way_step = j.at("k").get<int>();
    p.high.shape = j.at("shape_h").get<nnet::NetShape>();
    p.low.shape = j.at("shape_l").get<nnet::NetShape>();
    p.high.values = j.at("params_h").get<std::vector<double>>();
    p.low.values = j.at("params_l").get<std::vector<double>>();
    return p;
}

}  // namespace crl::gcrl
