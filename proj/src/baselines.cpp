#include "crl/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "crl/serialize.hpp"

namespace crl::baselines {

using envs::Dataset;
using gcrl::HierPolicy;
using gcrl::ModelShapes;
using gcrl::TrainConfig;
using nnet::Batch;
using nnet::Mode;
using nnet::NetShape;
using nnet::ParamVector;

StrategyKind strategy_from_string(const std::string& s) {
    if (s == "sc1") return StrategyKind::SC1;
    if (s == "scn") return StrategyKind::SCN;
    if (s == "ft1") return StrategyKind::FT1;
    if (s == "ftn") return StrategyKind::FTN;
    if (s == "fz") return StrategyKind::FZ;
    if (s == "l2") return StrategyKind::L2;
    if (s == "ewc") return StrategyKind::EWC;
    if (s == "pnn") return StrategyKind::PNN;
    throw std::invalid_argument("unknown strategy: " + s);
}

std::string to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::SC1: return "sc1";
        case StrategyKind::SCN: return "scn";
        case StrategyKind::FT1: return "ft1";
        case StrategyKind::FTN: return "ftn";
        case StrategyKind::FZ: return "fz";
        case StrategyKind::L2: return "l2";
        case StrategyKind::EWC: return "ewc";
        case StrategyKind::PNN: return "pnn";
    }
    return "?";
}

bool stores_per_task(StrategyKind k) {
    return k == StrategyKind::SCN || k == StrategyKind::FTN || k == StrategyKind::PNN;
}

std::pair<double, std::vector<double>> reg_penalty(StrategyKind kind,
                                                   const std::vector<double>& params,
                                                   const RegPair& state) {
    if (params.size() != state.theta_old.size())
        throw std::invalid_argument("reg_penalty: parameter sizes differ");
    std::vector<double> grad(params.size(), 0.0);
    double loss = 0.0;
    if (kind == StrategyKind::L2) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double d = params[i] - state.theta_old[i];
            loss += state.lambda * d * d;
            grad[i] = 2.0 * state.lambda * d;
        }
    } else if (kind == StrategyKind::EWC) {
        if (!state.fisher) throw std::invalid_argument("reg_penalty: EWC needs a fisher estimate");
        if (state.fisher->size() != params.size())
            throw std::invalid_argument("reg_penalty: fisher size mismatch");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double d = params[i] - state.theta_old[i];
            const double f = (*state.fisher)[i];
            loss += 0.5 * state.lambda * f * d * d;
            grad[i] = state.lambda * f * d;
        }
    } else {
        throw std::invalid_argument("reg_penalty: kind must be L2 or EWC");
    }
    return {loss, std::move(grad)};
}

std::vector<double> estimate_fisher(const ParamVector& params, const Batch& rows, int n_samples,
                                    Rng& rng) {
    if (rows.inputs.rows == 0) throw std::invalid_argument("estimate_fisher: empty rows");
    if (n_samples < 1) throw std::invalid_argument("estimate_fisher: n_samples must be >= 1");
    std::vector<double> fisher(params.values.size(), 0.0);
    Batch one;
    one.inputs = nnet::Matrix(1, rows.inputs.cols);
    one.targets = nnet::Matrix(1, rows.targets.cols);
    std::vector<double> g;
    for (int s = 0; s < n_samples; ++s) {
        const std::size_t r = rng.uniform_int(rows.inputs.rows);
        std::copy(rows.inputs.row(r), rows.inputs.row(r) + rows.inputs.cols, one.inputs.row(0));
        std::copy(rows.targets.row(r), rows.targets.row(r) + rows.targets.cols,
                  one.targets.row(0));
        nnet::grad_with_loss(params, one, g);
        for (std::size_t i = 0; i < fisher.size(); ++i) fisher[i] += g[i] * g[i];
    }
    for (auto& f : fisher) f /= static_cast<double>(n_samples);
    return fisher;
}

// ---------------------------------------------------------------------------
// progressive networks

namespace {

constexpr double kLnEps = 1e-5;

struct PnnRowCache {
    // per layer of the active column
    std::vector<std::vector<double>> input, z, xhat, act, mask;
    std::vector<double> inv_sigma;
    // per source column, per depth: activations feeding the laterals
    std::vector<std::vector<std::vector<double>>> src_h;
};

// forward for one column given the activations of all previous columns;
// returns per-depth activations (post dropout), out = final output
std::vector<std::vector<double>> column_forward(
    const Pnn& net, int col, std::span<const double> input,
    const std::vector<std::vector<std::vector<double>>>& prev_h, Mode mode, Rng* rng,
    PnnRowCache* cache, std::vector<double>& out) {
    const auto& column = net.columns[static_cast<std::size_t>(col)];
    const auto views = nnet::layer_views(net.shape);
    const auto& shape = net.shape;

    std::vector<std::vector<double>> hidden;  // activations at depths 0..L-1
    std::vector<double> cur(input.begin(), input.end());
    hidden.push_back(cur);

    if (cache) {
        cache->input.resize(views.size());
        cache->z.resize(views.size());
        cache->xhat.resize(views.size());
        cache->act.resize(views.size());
        cache->mask.resize(views.size());
        cache->inv_sigma.assign(views.size(), 0.0);
    }

    for (std::size_t l = 0; l < views.size(); ++l) {
        const auto& v = views[l];
        const bool is_output = (l + 1 == views.size());
        const double* w = column.own.values.data() + v.w_off;
        const double* b = column.own.values.data() + v.b_off;

        std::vector<double> z(static_cast<std::size_t>(v.out));
        for (int i = 0; i < v.out; ++i) {
            double s = b[i];
            const double* wrow = w + static_cast<std::size_t>(i) * v.in;
            for (int j = 0; j < v.in; ++j) s += wrow[j] * cur[static_cast<std::size_t>(j)];
            z[static_cast<std::size_t>(i)] = s;
        }
        if (l >= 1) {
            for (int src = 0; src < col; ++src) {
                const auto& U = column.laterals[l - 1][static_cast<std::size_t>(src)];
                const auto& h = prev_h[static_cast<std::size_t>(src)][l];
                for (int i = 0; i < v.out; ++i) {
                    double s = 0.0;
                    const double* urow = U.data() + static_cast<std::size_t>(i) * v.in;
                    for (int j = 0; j < v.in; ++j) s += urow[j] * h[static_cast<std::size_t>(j)];
                    z[static_cast<std::size_t>(i)] += s;
                }
            }
        }
        if (cache) {
            cache->input[l] = cur;
            cache->z[l] = z;
        }

        if (is_output) {
            out = std::move(z);
            return hidden;
        }

        std::vector<double> pre = z;
        if (v.has_layernorm) {
            double mean = 0.0;
            for (double e : z) mean += e;
            mean /= v.out;
            double var = 0.0;
            for (double e : z) var += (e - mean) * (e - mean);
            var /= v.out;
            const double inv_sigma = 1.0 / std::sqrt(var + kLnEps);
            const double* gamma = column.own.values.data() + v.gamma_off;
            const double* beta = column.own.values.data() + v.beta_off;
            std::vector<double> xhat(static_cast<std::size_t>(v.out));
            for (int i = 0; i < v.out; ++i) {
                xhat[static_cast<std::size_t>(i)] = (z[static_cast<std::size_t>(i)] - mean) * inv_sigma;
                pre[static_cast<std::size_t>(i)] =
                    gamma[i] * xhat[static_cast<std::size_t>(i)] + beta[i];
            }
            if (cache) {
                cache->xhat[l] = std::move(xhat);
                cache->inv_sigma[l] = inv_sigma;
            }
        }
        std::vector<double> act(static_cast<std::size_t>(v.out));
        for (int i = 0; i < v.out; ++i) act[static_cast<std::size_t>(i)] = std::tanh(pre[static_cast<std::size_t>(i)]);
        if (cache) cache->act[l] = act;

        if (mode == Mode::train && shape.dropout_rate > 0.0) {
            if (!rng) throw std::invalid_argument("pnn: rng required for dropout in train mode");
            const double keep = 1.0 - shape.dropout_rate;
            std::vector<double> mask(static_cast<std::size_t>(v.out));
            for (int i = 0; i < v.out; ++i) {
                mask[static_cast<std::size_t>(i)] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
                act[static_cast<std::size_t>(i)] *= mask[static_cast<std::size_t>(i)];
            }
            if (cache) cache->mask[l] = std::move(mask);
        }
        cur = act;
        hidden.push_back(cur);
    }
    return hidden;  // unreachable
}

// activations of all columns 0..upto; frozen columns always run in eval mode
std::vector<std::vector<std::vector<double>>> cascade(const Pnn& net, std::span<const double> input,
                                                      int upto, Mode mode, Rng* rng,
                                                      PnnRowCache* cache,
                                                      std::vector<double>& out) {
    std::vector<std::vector<std::vector<double>>> all_h;
    std::vector<double> tmp;
    for (int col = 0; col <= upto; ++col) {
        const bool active = (col == upto);
        all_h.push_back(column_forward(net, col, input, all_h, active ? mode : Mode::eval,
                                       active ? rng : nullptr, active ? cache : nullptr,
                                       active ? out : tmp));
    }
    if (cache) {
        cache->src_h = all_h;
        cache->src_h.pop_back();
    }
    return all_h;
}

std::size_t own_offset_end(const Pnn& net) { return nnet::param_count(net.shape); }

// flat trainable view of the newest column: [own, laterals by layer, source]
std::vector<double> pack_last(const Pnn& net) {
    const auto& c = net.columns.back();
    std::vector<double> flat = c.own.values;
    for (const auto& per_layer : c.laterals)
        for (const auto& u : per_layer) flat.insert(flat.end(), u.begin(), u.end());
    return flat;
}

void unpack_last(Pnn& net, const std::vector<double>& flat) {
    auto& c = net.columns.back();
    std::copy(flat.begin(), flat.begin() + static_cast<long>(c.own.values.size()),
              c.own.values.begin());
    std::size_t off = c.own.values.size();
    for (auto& per_layer : c.laterals)
        for (auto& u : per_layer) {
            std::copy(flat.begin() + static_cast<long>(off),
                      flat.begin() + static_cast<long>(off + u.size()), u.begin());
            off += u.size();
        }
}

}  // namespace

std::size_t Pnn::param_count() const {
    std::size_t n = 0;
    for (const auto& c : columns) {
        n += c.own.values.size();
        for (const auto& per_layer : c.laterals)
            for (const auto& u : per_layer) n += u.size();
    }
    return n;
}

void pnn_add_column(Pnn& net, std::uint64_t seed) {
    PnnColumn col;
    col.own = nnet::init_params(net.shape, seed);
    const auto views = nnet::layer_views(net.shape);
    Rng rng(Rng::derive(seed, 0x1a7));
    const int n_prev = static_cast<int>(net.columns.size());
    for (std::size_t l = 1; l < views.size(); ++l) {
        std::vector<std::vector<double>> per_layer;
        const auto& v = views[l];
        const double bound = std::sqrt(6.0 / (v.in + v.out));
        for (int src = 0; src < n_prev; ++src) {
            std::vector<double> u(static_cast<std::size_t>(v.out) * v.in);
            for (auto& x : u) x = rng.uniform(-bound, bound);
            per_layer.push_back(std::move(u));
        }
        col.laterals.push_back(std::move(per_layer));
    }
    net.columns.push_back(std::move(col));
}

std::vector<double> pnn_forward(const Pnn& net, std::span<const double> input, int upto_col,
                                Mode mode, Rng* rng) {
    if (net.columns.empty()) throw std::invalid_argument("pnn_forward: no columns");
    if (upto_col < 0 || upto_col >= static_cast<int>(net.columns.size()))
        throw std::invalid_argument("pnn_forward: column out of range");
    std::vector<double> out;
    cascade(net, input, upto_col, mode, rng, nullptr, out);
    return out;
}

double pnn_loss(const Pnn& net, const Batch& batch, int upto_col) {
    double total = 0.0;
    for (std::size_t r = 0; r < batch.inputs.rows; ++r) {
        const auto out = pnn_forward(
            net, std::span<const double>(batch.inputs.row(r), batch.inputs.cols), upto_col);
        for (std::size_t j = 0; j < batch.targets.cols; ++j) {
            const double e = out[j] - batch.targets.at(r, j);
            total += 0.5 * e * e;
        }
    }
    return total / static_cast<double>(batch.inputs.rows);
}

double pnn_grad_last(const Pnn& net, const Batch& batch, std::vector<double>& grad, Mode mode,
                     Rng* rng) {
    if (net.columns.empty()) throw std::invalid_argument("pnn_grad_last: no columns");
    const int col = static_cast<int>(net.columns.size()) - 1;
    const auto views = nnet::layer_views(net.shape);
    const auto& column = net.columns.back();

    grad.assign(pack_last(net).size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.inputs.rows);
    double total = 0.0;

    // offsets of each lateral block inside the flat gradient
    std::vector<std::vector<std::size_t>> u_off(column.laterals.size());
    {
        std::size_t off = own_offset_end(net);
        for (std::size_t l = 0; l < column.laterals.size(); ++l)
            for (std::size_t s = 0; s < column.laterals[l].size(); ++s) {
                u_off[l].push_back(off);
                off += column.laterals[l][s].size();
            }
    }

    PnnRowCache cache;
    std::vector<double> out;
    for (std::size_t r = 0; r < batch.inputs.rows; ++r) {
        cascade(net, std::span<const double>(batch.inputs.row(r), batch.inputs.cols), col, mode,
                rng, &cache, out);
        std::vector<double> d(batch.targets.cols);
        for (std::size_t j = 0; j < batch.targets.cols; ++j) {
            const double e = out[j] - batch.targets.at(r, j);
            total += 0.5 * e * e;
            d[j] = e * inv_n;
        }

        for (std::size_t li = views.size(); li-- > 0;) {
            const auto& v = views[li];
            const bool is_output = (li + 1 == views.size());
            if (!is_output) {
                if (!cache.mask[li].empty())
                    for (int i = 0; i < v.out; ++i) d[static_cast<std::size_t>(i)] *= cache.mask[li][static_cast<std::size_t>(i)];
                for (int i = 0; i < v.out; ++i) {
                    const double a = cache.act[li][static_cast<std::size_t>(i)];
                    d[static_cast<std::size_t>(i)] *= 1.0 - a * a;
                }
                if (v.has_layernorm) {
                    const double* gamma = column.own.values.data() + v.gamma_off;
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    std::vector<double> dxhat(static_cast<std::size_t>(v.out));
                    for (int i = 0; i < v.out; ++i) {
                        grad[v.gamma_off + static_cast<std::size_t>(i)] +=
                            d[static_cast<std::size_t>(i)] * cache.xhat[li][static_cast<std::size_t>(i)];
                        grad[v.beta_off + static_cast<std::size_t>(i)] += d[static_cast<std::size_t>(i)];
                        dxhat[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(i)] * gamma[i];
                        mean_dxhat += dxhat[static_cast<std::size_t>(i)];
                        mean_dxhat_xhat +=
                            dxhat[static_cast<std::size_t>(i)] * cache.xhat[li][static_cast<std::size_t>(i)];
                    }
                    mean_dxhat /= v.out;
                    mean_dxhat_xhat /= v.out;
                    for (int i = 0; i < v.out; ++i)
                        d[static_cast<std::size_t>(i)] =
                            cache.inv_sigma[li] * (dxhat[static_cast<std::size_t>(i)] - mean_dxhat -
                                                   cache.xhat[li][static_cast<std::size_t>(i)] * mean_dxhat_xhat);
                }
            }

            const double* w = column.own.values.data() + v.w_off;
            std::vector<double> dx(static_cast<std::size_t>(v.in), 0.0);
            for (int i = 0; i < v.out; ++i) {
                const double di = d[static_cast<std::size_t>(i)];
                double* gw = grad.data() + v.w_off + static_cast<std::size_t>(i) * v.in;
                const double* wrow = w + static_cast<std::size_t>(i) * v.in;
                for (int j = 0; j < v.in; ++j) {
                    gw[j] += di * cache.input[li][static_cast<std::size_t>(j)];
                    dx[static_cast<std::size_t>(j)] += di * wrow[j];
                }
                grad[v.b_off + static_cast<std::size_t>(i)] += di;
            }
            if (li >= 1) {
                for (int src = 0; src < col; ++src) {
                    double* gu = grad.data() + u_off[li - 1][static_cast<std::size_t>(src)];
                    const auto& h = cache.src_h[static_cast<std::size_t>(src)][li];
                    for (int i = 0; i < v.out; ++i) {
                        const double di = d[static_cast<std::size_t>(i)];
                        for (int j = 0; j < v.in; ++j)
                            gu[static_cast<std::size_t>(i) * v.in + j] += di * h[static_cast<std::size_t>(j)];
                    }
                }
            }
            d = std::move(dx);
        }
    }
    return total * inv_n;
}

void pnn_train_last(Pnn& net, const std::function<Batch(int, Rng&)>& sample_batch,
                    std::size_t data_size, const TrainConfig& cfg, std::uint64_t salt) {
    cfg.validate();
    Rng rng(Rng::derive(cfg.seed, salt));
    std::vector<double> flat = pack_last(net);
    nnet::AdamState adam(flat.size());
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>(data_size / static_cast<std::size_t>(cfg.batch_size)));
    std::vector<double> g;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch)
        for (int s = 0; s < steps_per_epoch; ++s) {
            const Batch b = sample_batch(cfg.batch_size, rng);
            pnn_grad_last(net, b, g, Mode::train, &rng);
            nnet::adam_step(adam, flat, g, cfg.lr);
            unpack_last(net, flat);
        }
}

// ---------------------------------------------------------------------------
// strategy runner

namespace {

TrainConfig resolve_cfg(const TrainConfig& base, const stream::TaskSpec& task,
                        std::uint64_t task_index) {
    TrainConfig cfg = base;
    if (cfg.her_temperature <= 0.0) cfg.her_temperature = task.her_temperature_default();
    cfg.seed = Rng::derive(base.seed, 9000 + task_index);
    return cfg;
}

void finetune_net(ParamVector& p, const std::function<Batch(int, Rng&)>& sample_batch,
                  std::size_t data_size, const TrainConfig& cfg, std::uint64_t salt,
                  StrategyKind kind, const std::vector<RegPair>& regs) {
    Rng rng(Rng::derive(cfg.seed, salt));
    nnet::AdamState adam(p.values.size());
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>(data_size / static_cast<std::size_t>(cfg.batch_size)));
    std::vector<double> g;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch)
        for (int s = 0; s < steps_per_epoch; ++s) {
            const Batch b = sample_batch(cfg.batch_size, rng);
            nnet::grad_with_loss(p, b, g, Mode::train, &rng);
            for (const auto& reg : regs) {
                const auto [pl, pg] = reg_penalty(kind, p.values, reg);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += pg[i];
            }
            nnet::adam_step(adam, p.values, g, cfg.lr);
        }
}

void finetune_policy_impl(HierPolicy& policy, const Dataset& ds, int way_step,
                          const TrainConfig& cfg, StrategyKind kind,
                          const std::vector<RegPair>& regs_high,
                          const std::vector<RegPair>& regs_low) {
    const std::size_t n = ds.transition_count();
    finetune_net(
        policy.high,
        [&](int bs, Rng& rng) {
            return gcrl::make_high_batch(ds, way_step, bs, cfg.her_temperature, cfg.her_fraction,
                                         rng);
        },
        n, cfg, 0x68, kind, regs_high);
    finetune_net(policy.low,
                 [&](int bs, Rng& rng) { return gcrl::make_low_batch(ds, way_step, bs, rng); }, n,
                 cfg, 0x6c, kind, regs_low);
    policy.way_step = way_step;
}

}  // namespace

void finetune_policy(HierPolicy& policy, const Dataset& ds, int way_step, const TrainConfig& cfg,
                     StrategyKind kind, const std::vector<RegPair>& regs_high,
                     const std::vector<RegPair>& regs_low) {
    finetune_policy_impl(policy, ds, way_step, cfg, kind, regs_high, regs_low);
}

namespace {

class PnnActor : public metrics::Actor {
public:
    PnnActor(const PnnPolicy& policy, int column)
        : policy_(&policy), column_(column), way_step_(policy.way_steps.at(static_cast<std::size_t>(column))) {}

    void reset() override { has_ = false; }

    std::array<double, 2> act(std::span<const double> obs, envs::Vec2 goal, envs::Vec2 achieved,
                              int t) override {
        std::vector<double> input(obs.begin(), obs.end());
        input.push_back(goal.x);
        input.push_back(goal.y);
        if (t % way_step_ == 0 || !has_ || envs::dist(subgoal_, achieved) <= 0.5) {
            const auto sg = pnn_forward(policy_->high, input, column_);
            subgoal_ = {sg[0], sg[1]};
            has_ = true;
        }
        input[obs.size()] = subgoal_.x;
        input[obs.size() + 1] = subgoal_.y;
        const auto out = pnn_forward(policy_->low, input, column_);
        return {std::clamp(out[0], -1.0, 1.0), std::clamp(out[1], -1.0, 1.0)};
    }

private:
    const PnnPolicy* policy_;
    int column_;
    int way_step_;
    envs::Vec2 subgoal_;
    bool has_ = false;
};

}  // namespace

StrategyResult run_strategy(StrategyKind kind, const stream::StreamSpec& spec,
                            const ModelShapes& shapes, const TrainConfig& tcfg,
                            const StrategyCfg& strategy_cfg, const metrics::EvalSettings& eval) {
    if (spec.tasks.empty()) throw std::invalid_argument("run_strategy: empty stream");
    const int n_tasks = static_cast<int>(spec.tasks.size());

    StrategyResult out;
    out.kind = kind;
    out.store.per_task = stores_per_task(kind);

    metrics::SuccessMatrix matrix(n_tasks);

    HierPolicy current;  // single-store strategies
    std::vector<RegPair> regs_high, regs_low;
    if (kind == StrategyKind::PNN) {
        out.pnn.high.shape = shapes.high;
        out.pnn.low.shape = shapes.low;
    }

    for (int j = 0; j < n_tasks; ++j) {
        const auto& task = spec.tasks[static_cast<std::size_t>(j)];
        try {
        const auto ds = stream::resolve_dataset(task);
        const int way_step = task.way_step_or_default();
        const TrainConfig cfg = resolve_cfg(tcfg, task, static_cast<std::uint64_t>(j));

        switch (kind) {
            case StrategyKind::SC1:
                current = gcrl::train_hbc(ds, shapes.high, shapes.low, way_step, cfg);
                break;
            case StrategyKind::SCN:
                out.store.checkpoints.push_back(
                    gcrl::train_hbc(ds, shapes.high, shapes.low, way_step, cfg));
                break;
            case StrategyKind::FZ:
                if (j == 0) current = gcrl::train_hbc(ds, shapes.high, shapes.low, way_step, cfg);
                break;
            case StrategyKind::FT1:
            case StrategyKind::L2:
            case StrategyKind::EWC: {
                if (j == 0) {
                    current = gcrl::train_hbc(ds, shapes.high, shapes.low, way_step, cfg);
                } else {
                    finetune_policy_impl(current, ds, way_step, cfg, kind, regs_high, regs_low);
                }
                if (kind == StrategyKind::L2) {
                    regs_high.assign(1, {strategy_cfg.lambda, current.high.values, std::nullopt});
                    regs_low.assign(1, {strategy_cfg.lambda, current.low.values, std::nullopt});
                } else if (kind == StrategyKind::EWC) {
                    Rng frng(Rng::derive(cfg.seed, 0xf13));
                    const auto rows_h = gcrl::all_high_rows(ds, way_step);
                    const auto rows_l = gcrl::all_low_rows(ds, way_step);
                    regs_high.push_back({strategy_cfg.lambda, current.high.values,
                                         estimate_fisher(current.high, rows_h,
                                                         strategy_cfg.fisher_samples, frng)});
                    regs_low.push_back({strategy_cfg.lambda, current.low.values,
                                        estimate_fisher(current.low, rows_l,
                                                        strategy_cfg.fisher_samples, frng)});
                }
                break;
            }
            case StrategyKind::FTN: {
                HierPolicy p = (j == 0)
                                   ? gcrl::train_hbc(ds, shapes.high, shapes.low, way_step, cfg)
                                   : out.store.checkpoints.back();
                if (j > 0) finetune_policy_impl(p, ds, way_step, cfg, kind, {}, {});
                out.store.checkpoints.push_back(std::move(p));
                break;
            }
            case StrategyKind::PNN: {
                pnn_add_column(out.pnn.high, Rng::derive(cfg.seed, 0x48));
                pnn_add_column(out.pnn.low, Rng::derive(cfg.seed, 0x4c));
                out.pnn.way_steps.push_back(way_step);
                const std::size_t n = ds.transition_count();
                pnn_train_last(
                    out.pnn.high,
                    [&](int bs, Rng& rng) {
                        return gcrl::make_high_batch(ds, way_step, bs, cfg.her_temperature,
                                                     cfg.her_fraction, rng);
                    },
                    n, cfg, 0x68);
                pnn_train_last(
                    out.pnn.low,
                    [&](int bs, Rng& rng) { return gcrl::make_low_batch(ds, way_step, bs, rng); },
                    n, cfg, 0x6c);
                break;
            }
        }
        } catch (const std::exception& e) {
            throw std::runtime_error("strategy " + to_string(kind) + ", task " +
                                     std::to_string(j + 1) + " (" + task.label() +
                                     "), training: " + e.what());
        }

        for (int k = 0; k <= j; ++k) {
            const auto& tk = spec.tasks[static_cast<std::size_t>(k)];
            metrics::TaskEnvSpec env_spec{tk.maze(), tk.tf(), tk.horizon_or_default()};
            const std::uint64_t eval_seed = Rng::derive(eval.seed, static_cast<std::uint64_t>(k));
            if (kind == StrategyKind::PNN) {
                PnnActor actor(out.pnn, k);
                matrix.at(j, k) = metrics::success_rate(actor, env_spec, eval.episodes, eval_seed);
            } else if (out.store.per_task) {
                metrics::PolicyActor actor(out.store.checkpoints[static_cast<std::size_t>(k)]);
                matrix.at(j, k) = metrics::success_rate(actor, env_spec, eval.episodes, eval_seed);
            } else {
                HierPolicy p = current;
                p.way_step = tk.way_step_or_default();
                metrics::PolicyActor actor(p);
                matrix.at(j, k) = metrics::success_rate(actor, env_spec, eval.episodes, eval_seed);
            }
        }
    }

    if (!out.store.per_task && kind != StrategyKind::PNN)
        out.store.checkpoints.assign(1, current);

    const double single = static_cast<double>(nnet::param_count(shapes.high) +
                                              nnet::param_count(shapes.low));
    double stored = single;
    if (kind == StrategyKind::PNN)
        stored = static_cast<double>(out.pnn.high.param_count() + out.pnn.low.param_count());
    else if (out.store.per_task)
        stored = single * n_tasks;

    if (eval.ref_sigma.size() == static_cast<std::size_t>(n_tasks))
        matrix.ref_sigma = eval.ref_sigma;

    out.report.matrix = matrix;
    out.report.stored_params = stored;
    out.report.single_params = single;
    out.report.metrics = metrics::compute_metrics(matrix, stored, single);
    return out;
}

void save_pnn_policy(const PnnPolicy& policy, const std::string& path) {
    nlohmann::json cols_h = nlohmann::json::array();
    nlohmann::json cols_l = nlohmann::json::array();
    for (const auto* net : {&policy.high, &policy.low}) {
        for (const auto& c : net->columns) {
            nlohmann::json jc = {{"own", c.own.values}, {"laterals", c.laterals}};
            (net == &policy.high ? cols_h : cols_l).push_back(std::move(jc));
        }
    }
    nlohmann::json j = {{"format_version", 1},
                        {"shape_h", policy.high.shape},
                        {"shape_l", policy.low.shape},
                        {"way_steps", policy.way_steps},
                        {"columns_h", std::move(cols_h)},
                        {"columns_l", std::move(cols_l)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump() << "\n";
}

PnnPolicy load_pnn_policy(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    in >> j;
    PnnPolicy p;
    p.high.shape = j.at("shape_h").get<NetShape>();
    p.low.shape = j.at("shape_l").get<NetShape>();
    p.way_steps = j.at("way_steps").get<std::vector<int>>();
    for (const auto* key : {"columns_h", "columns_l"}) {
        auto& net = (std::string(key) == "columns_h") ? p.high : p.low;
        for (const auto& jc : j.at(key)) {
            PnnColumn c;
            c.own.shape = net.shape;
            c.own.values = jc.at("own").get<std::vector<double>>();
            c.laterals = jc.at("laterals").get<std::vector<std::vector<std::vector<double>>>>();
            net.columns.push_back(std::move(c));
        }
    }
    return p;
}

}  // namespace crl::baselines
