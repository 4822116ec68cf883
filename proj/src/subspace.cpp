#include "crl/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "crl/serialize.hpp"

namespace crl::subspace {

using envs::Dataset;
using gcrl::TrainConfig;
using nnet::Batch;
using nnet::NetShape;
using nnet::ParamVector;

ParamLayout ParamLayout::for_shape(const NetShape& shape) {
    ParamLayout layout;
    layout.dim = nnet::param_count(shape);
    for (const auto& v : nnet::layer_views(shape))
        layout.blocks.push_back({v.w_off, v.out, v.in});
    return layout;
}

ParamLayout ParamLayout::concat(const ParamLayout& a, const ParamLayout& b) {
    ParamLayout layout = a;
    layout.dim = a.dim + b.dim;
    for (auto blk : b.blocks) {
        blk.off += a.dim;
        layout.blocks.push_back(blk);
    }
    return layout;
}

std::size_t Anchor::stored_param_count(const ParamLayout& layout) const {
    if (!is_lora) return layout.dim;
    std::size_t n = 0;
    for (const auto& blk : layout.blocks)
        n += static_cast<std::size_t>(lora.rank) * (blk.out + blk.in);
    return n;
}

Anchor make_full_anchor(std::vector<double> values) {
    Anchor a;
    a.is_lora = false;
    a.full = std::move(values);
    return a;
}

Anchor make_lora_anchor(const ParamLayout& layout, int rank, std::uint64_t seed) {
    if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
    Anchor a;
    a.is_lora = true;
    a.lora.rank = rank;
    Rng rng(seed);
    for (const auto& blk : layout.blocks) {
        std::vector<double> A(static_cast<std::size_t>(blk.out) * rank);
        const double bound = std::sqrt(6.0 / (blk.out + rank));
        for (auto& v : A) v = rng.uniform(-bound, bound);
        a.lora.a.push_back(std::move(A));
        a.lora.b.emplace_back(static_cast<std::size_t>(rank) * blk.in, 0.0);
    }
    return a;
}

std::vector<double> materialize(const Anchor& anchor, const ParamLayout& layout) {
    if (!anchor.is_lora) {
        if (anchor.full.size() != layout.dim)
            throw std::invalid_argument("anchor does not match layout");
        return anchor.full;
    }
    std::vector<double> out(layout.dim, 0.0);
    const int r = anchor.lora.rank;
    for (std::size_t bi = 0; bi < layout.blocks.size(); ++bi) {
        const auto& blk = layout.blocks[bi];
        const auto& A = anchor.lora.a[bi];
        const auto& B = anchor.lora.b[bi];
        for (int i = 0; i < blk.out; ++i)
            for (int j = 0; j < blk.in; ++j) {
                double s = 0.0;
                for (int p = 0; p < r; ++p)
                    s += A[static_cast<std::size_t>(i) * r + p] *
                         B[static_cast<std::size_t>(p) * blk.in + j];
                out[blk.off + static_cast<std::size_t>(i) * blk.in + j] = s;
            }
    }
    return out;
}

void SimplexWeights::validate() const {
    double sum = 0.0;
    for (double a : alpha) {
        if (a < 0.0) throw std::invalid_argument("simplex weight < 0");
        sum += a;
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw std::invalid_argument("simplex weights do not sum to 1");
}

SimplexWeights sample_simplex(int n, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_simplex: n must be >= 1");
    SimplexWeights w;
    w.alpha.resize(n);
    double remaining = 1.0;
    for (int i = 0; i + 1 < n; ++i) {
        // Beta(1, n-1-i) via inverse CDF
        const double b = static_cast<double>(n - 1 - i);
        const double v = 1.0 - std::pow(rng.uniform(), 1.0 / b);
        w.alpha[i] = remaining * v;
        remaining -= w.alpha[i];
    }
    w.alpha[n - 1] = remaining;
    return w;
}

SimplexWeights softmax_weights(const AnchorScores& scores) {
    SimplexWeights w;
    w.alpha.resize(scores.scores.size());
    double mx = -1e300;
    for (double s : scores.scores) mx = std::max(mx, s);
    double sum = 0.0;
    for (std::size_t i = 0; i < w.alpha.size(); ++i) {
        w.alpha[i] = std::exp(scores.scores[i] - mx);
        sum += w.alpha[i];
    }
    for (auto& a : w.alpha) a /= sum;
    return w;
}

void SubspaceConfig::validate() const {
    if (epsilon <= 0.0) throw std::invalid_argument("subspace: epsilon must be > 0");
    if (samples < 1) throw std::invalid_argument("subspace: samples must be >= 1");
    if (weight_jitter_std < 0.0) throw std::invalid_argument("subspace: jitter std must be >= 0");
    if (lora_rank && *lora_rank < 1) throw std::invalid_argument("subspace: lora rank must be >= 1");
    if (pac && (pac->d_epsilon < 0.0 || pac->delta <= 0.0 || pac->delta >= 1.0))
        throw std::invalid_argument("subspace: bad pac thresholds");
}

std::vector<double> PolicySubspace::combine(const SimplexWeights& alpha) const {
    if (alpha.alpha.size() != anchors.size())
        throw std::invalid_argument("combine: weight length != anchor count");
    alpha.validate();
    std::vector<double> theta(layout.dim, 0.0);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const auto mat = materialize(anchors[i], layout);
        const double a = alpha.alpha[i];
        for (std::size_t p = 0; p < theta.size(); ++p) theta[p] += a * mat[p];
    }
    return theta;
}

std::size_t PolicySubspace::stored_param_count() const {
    std::size_t n = 0;
    for (const auto& a : anchors) n += a.stored_param_count(layout);
    for (const auto& w : task_weights) n += w.alpha.size();
    return n;
}

Decision adapt_decision(double l_prev, double l_curr, double epsilon) {
    if (!(l_prev >= 0.0) || !(l_curr >= 0.0) || !std::isfinite(l_prev) || !std::isfinite(l_curr))
        throw std::invalid_argument("adapt_decision: losses must be finite and nonnegative");
    if (epsilon <= 0.0) throw std::invalid_argument("adapt_decision: epsilon must be > 0");
    return l_prev <= (1.0 + epsilon) * l_curr ? Decision::prune : Decision::extend;
}

namespace {

double fraction_within_rows(const ParamVector& params, const Batch& rows, double d_eps) {
    std::size_t hits = 0;
    for (std::size_t r = 0; r < rows.inputs.rows; ++r) {
        const auto out = nnet::forward(
            params, std::span<const double>(rows.inputs.row(r), rows.inputs.cols));
        double sq = 0.0;
        for (std::size_t j = 0; j < rows.targets.cols; ++j) {
            const double e = out[j] - rows.targets.at(r, j);
            sq += e * e;
        }
        if (std::sqrt(sq) <= d_eps) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(rows.inputs.rows);
}

}  // namespace

TaskAdapter make_task_adapter(const Dataset& ds, const NetShape& shape, LossKind kind,
                              int way_step, const TrainConfig& cfg) {
    TaskAdapter t;
    t.layout = ParamLayout::for_shape(shape);
    t.n_transitions = ds.transition_count();

    auto rows = std::make_shared<Batch>(kind == LossKind::high ? gcrl::all_high_rows(ds, way_step)
                                                               : gcrl::all_low_rows(ds, way_step));
    const Dataset* dsp = &ds;

    t.init_anchor = [shape](std::uint64_t seed) {
        return nnet::init_params(shape, seed).values;
    };
    if (kind == LossKind::high) {
        t.batch_grad = [dsp, shape, way_step, cfg](const std::vector<double>& theta,
                                                   std::vector<double>& grad, Rng& rng) {
            const Batch b = gcrl::make_high_batch(*dsp, way_step, cfg.batch_size,
                                                  cfg.her_temperature, cfg.her_fraction, rng);
            ParamVector p{theta, shape};
            return nnet::grad_with_loss(p, b, grad, nnet::Mode::train, &rng);
        };
    } else {
        t.batch_grad = [dsp, shape, way_step, cfg](const std::vector<double>& theta,
                                                   std::vector<double>& grad, Rng& rng) {
            const Batch b = gcrl::make_low_batch(*dsp, way_step, cfg.batch_size, rng);
            ParamVector p{theta, shape};
            return nnet::grad_with_loss(p, b, grad, nnet::Mode::train, &rng);
        };
    }
    t.eval_loss = [rows, shape](const std::vector<double>& theta) {
        return nnet::nll_loss(ParamVector{theta, shape}, *rows);
    };
    t.fraction_within = [rows, shape](const std::vector<double>& theta, double d_eps) {
        return fraction_within_rows(ParamVector{theta, shape}, *rows, d_eps);
    };
    return t;
}

namespace {

// cspo: one loss over the concatenated (high, low) parameter vector
TaskAdapter make_joint_adapter(const Dataset& ds, const ModelShapes& shapes, int way_step,
                               const TrainConfig& cfg) {
    TaskAdapter high = make_task_adapter(ds, shapes.high, LossKind::high, way_step, cfg);
    TaskAdapter low = make_task_adapter(ds, shapes.low, LossKind::low, way_step, cfg);
    const std::size_t dh = high.layout.dim;
    const std::size_t dl = low.layout.dim;

    TaskAdapter t;
    t.layout = ParamLayout::concat(high.layout, low.layout);
    t.n_transitions = ds.transition_count();
    t.init_anchor = [high, low, dh, dl](std::uint64_t seed) {
        auto vh = high.init_anchor(Rng::derive(seed, 0));
        auto vl = low.init_anchor(Rng::derive(seed, 1));
        vh.insert(vh.end(), vl.begin(), vl.end());
        return vh;
    };
    t.batch_grad = [high, low, dh, dl](const std::vector<double>& theta, std::vector<double>& grad,
                                       Rng& rng) {
        std::vector<double> th(theta.begin(), theta.begin() + dh);
        std::vector<double> tl(theta.begin() + dh, theta.end());
        std::vector<double> gh, gl;
        const double lh = high.batch_grad(th, gh, rng);
        const double ll = low.batch_grad(tl, gl, rng);
        grad = std::move(gh);
        grad.insert(grad.end(), gl.begin(), gl.end());
        return lh + ll;
    };
    t.eval_loss = [high, low, dh](const std::vector<double>& theta) {
        std::vector<double> th(theta.begin(), theta.begin() + dh);
        std::vector<double> tl(theta.begin() + dh, theta.end());
        return high.eval_loss(th) + low.eval_loss(tl);
    };
    t.fraction_within = [high, low, dh](const std::vector<double>& theta, double d_eps) {
        std::vector<double> th(theta.begin(), theta.begin() + dh);
        std::vector<double> tl(theta.begin() + dh, theta.end());
        // pooled over both row sets
        return 0.5 * (high.fraction_within(th, d_eps) + low.fraction_within(tl, d_eps));
    };
    return t;
}

SimplexWeights jitter_weights(const SimplexWeights& alpha, double std_dev, Rng& rng) {
    if (std_dev <= 0.0) return alpha;
    SimplexWeights out = alpha;
    double sum = 0.0;
    for (auto& a : out.alpha) {
        a = std::max(0.0, a + std_dev * rng.normal());
        sum += a;
    }
    if (sum <= 1e-12) return alpha;
    for (auto& a : out.alpha) a /= sum;
    return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

ExtendResult train_new_anchor(const PolicySubspace& sub, const TaskAdapter& task,
                              const SubspaceConfig& scfg, const TrainConfig& tcfg,
                              std::uint64_t salt) {
    scfg.validate();
    tcfg.validate();
    const std::size_t n_prev = sub.anchors.size();
    if (n_prev == 0) throw std::invalid_argument("train_new_anchor: empty subspace");

    std::vector<std::vector<double>> mats;
    mats.reserve(n_prev);
    for (const auto& a : sub.anchors) mats.push_back(materialize(a, sub.layout));

    ExtendResult res;
    if (scfg.lora_rank) {
        res.candidate = make_lora_anchor(sub.layout, *scfg.lora_rank,
                                         Rng::derive(tcfg.seed, salt ^ 0xa11c));
    } else {
        res.candidate = make_full_anchor(task.init_anchor(Rng::derive(tcfg.seed, salt ^ 0xa11c)));
    }
    res.scores.scores.assign(n_prev + 1, 0.0);

    // flat view of the trainable candidate parameters
    auto pack_candidate = [&]() {
        if (!res.candidate.is_lora) return res.candidate.full;
        std::vector<double> flat;
        for (const auto& A : res.candidate.lora.a) flat.insert(flat.end(), A.begin(), A.end());
        for (const auto& B : res.candidate.lora.b) flat.insert(flat.end(), B.begin(), B.end());
        return flat;
    };
    auto unpack_candidate = [&](const std::vector<double>& flat) {
        if (!res.candidate.is_lora) {
            res.candidate.full = flat;
            return;
        }
        std::size_t off = 0;
        for (auto& A : res.candidate.lora.a) {
            std::copy(flat.begin() + off, flat.begin() + off + A.size(), A.begin());
            off += A.size();
        }
        for (auto& B : res.candidate.lora.b) {
            std::copy(flat.begin() + off, flat.begin() + off + B.size(), B.begin());
            off += B.size();
        }
    };

    std::vector<double> cand_flat = pack_candidate();
    nnet::AdamState adam_anchor(cand_flat.size());

    Rng rng(Rng::derive(tcfg.seed, salt));
    const int steps_per_epoch = std::max<int>(
        1, static_cast<int>(task.n_transitions / static_cast<std::size_t>(tcfg.batch_size)));

    std::vector<double> theta(sub.layout.dim), grad, cand_grad(cand_flat.size()),
        dl_dalpha(n_prev + 1), score_grad(n_prev + 1);

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        for (int step = 0; step < steps_per_epoch; ++step) {
            const SimplexWeights alpha = softmax_weights(res.scores);
            const SimplexWeights mixed = jitter_weights(alpha, scfg.weight_jitter_std, rng);
            const auto cand_mat = materialize(res.candidate, sub.layout);

            std::fill(theta.begin(), theta.end(), 0.0);
            for (std::size_t i = 0; i < n_prev; ++i) {
                const double a = mixed.alpha[i];
                for (std::size_t p = 0; p < theta.size(); ++p) theta[p] += a * mats[i][p];
            }
            const double ac = mixed.alpha[n_prev];
            for (std::size_t p = 0; p < theta.size(); ++p) theta[p] += ac * cand_mat[p];

            task.batch_grad(theta, grad, rng);

            // scores: d loss / d alpha_i = <grad, anchor_i>, straight-through
            // the jitter, softmax jacobian at softmax(scores)
            for (std::size_t i = 0; i < n_prev; ++i) dl_dalpha[i] = dot(grad, mats[i]);
            dl_dalpha[n_prev] = dot(grad, cand_mat);
            double inner = 0.0;
            for (std::size_t i = 0; i <= n_prev; ++i) inner += alpha.alpha[i] * dl_dalpha[i];
            for (std::size_t i = 0; i <= n_prev; ++i)
                score_grad[i] = alpha.alpha[i] * (dl_dalpha[i] - inner);
            // scores follow the plain gradient step; Adam's per-coordinate
            // normalization would cap their drift at lr per step and the
            // mixture could never settle on an already-good anchor
            for (std::size_t i = 0; i <= n_prev; ++i)
                res.scores.scores[i] -= tcfg.lr * score_grad[i];

            // candidate anchor
            if (!res.candidate.is_lora) {
                for (std::size_t p = 0; p < cand_flat.size(); ++p) cand_grad[p] = ac * grad[p];
            } else {
                std::size_t off = 0;
                const int r = res.candidate.lora.rank;
                for (std::size_t bi = 0; bi < sub.layout.blocks.size(); ++bi) {
                    const auto& blk = sub.layout.blocks[bi];
                    const auto& B = res.candidate.lora.b[bi];
                    // dA = ac * Gw * B^T
                    for (int i = 0; i < blk.out; ++i)
                        for (int p = 0; p < r; ++p) {
                            double s = 0.0;
                            for (int j = 0; j < blk.in; ++j)
                                s += grad[blk.off + static_cast<std::size_t>(i) * blk.in + j] *
                                     B[static_cast<std::size_t>(p) * blk.in + j];
                            cand_grad[off + static_cast<std::size_t>(i) * r + p] = ac * s;
                        }
                    off += static_cast<std::size_t>(blk.out) * r;
                }
                for (std::size_t bi = 0; bi < sub.layout.blocks.size(); ++bi) {
                    const auto& blk = sub.layout.blocks[bi];
                    const auto& A = res.candidate.lora.a[bi];
                    // dB = ac * A^T * Gw
                    for (int p = 0; p < r; ++p)
                        for (int j = 0; j < blk.in; ++j) {
                            double s = 0.0;
                            for (int i = 0; i < blk.out; ++i)
                                s += A[static_cast<std::size_t>(i) * r + p] *
                                     grad[blk.off + static_cast<std::size_t>(i) * blk.in + j];
                            cand_grad[off + static_cast<std::size_t>(p) * blk.in + j] = ac * s;
                        }
                    off += static_cast<std::size_t>(r) * blk.in;
                }
            }
            nnet::adam_step(adam_anchor, cand_flat, cand_grad, tcfg.lr);
            unpack_candidate(cand_flat);
        }
    }

    res.alpha_curr = softmax_weights(res.scores);
    const auto cand_mat = materialize(res.candidate, sub.layout);
    std::fill(theta.begin(), theta.end(), 0.0);
    for (std::size_t i = 0; i < n_prev; ++i)
        for (std::size_t p = 0; p < theta.size(); ++p)
            theta[p] += res.alpha_curr.alpha[i] * mats[i][p];
    for (std::size_t p = 0; p < theta.size(); ++p)
        theta[p] += res.alpha_curr.alpha[n_prev] * cand_mat[p];
    res.l_curr = task.eval_loss(theta);
    return res;
}

ExploreResult explore_previous(const PolicySubspace& sub, const TaskAdapter& task, int samples,
                               Rng& rng) {
    if (sub.anchors.empty()) throw std::invalid_argument("explore_previous: empty subspace");
    if (samples < 1) throw std::invalid_argument("explore_previous: samples must be >= 1");
    const int n = static_cast<int>(sub.anchors.size());

    std::vector<std::vector<double>> mats;
    for (const auto& a : sub.anchors) mats.push_back(materialize(a, sub.layout));

    std::vector<SimplexWeights> candidates;
    candidates.reserve(static_cast<std::size_t>(samples) + sub.task_weights.size());
    for (int s = 0; s < samples; ++s) candidates.push_back(sample_simplex(n, rng));
    for (const auto& w : sub.task_weights) candidates.push_back(w);

    ExploreResult best;
    best.loss = std::numeric_limits<double>::infinity();
    std::vector<double> theta(sub.layout.dim);
    for (const auto& cand : candidates) {
        std::fill(theta.begin(), theta.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const double a = cand.alpha[static_cast<std::size_t>(i)];
            for (std::size_t p = 0; p < theta.size(); ++p) theta[p] += a * mats[static_cast<std::size_t>(i)][p];
        }
        const double loss = task.eval_loss(theta);
        if (loss < best.loss) {
            best.loss = loss;
            best.alpha = cand;
        }
    }
    return best;
}

PacResult pac_gate(const PolicySubspace& sub, const TaskAdapter& task, const PacConfig& pac,
                   int samples, Rng& rng) {
    const auto explored = explore_previous(sub, task, samples, rng);
    PacResult res;
    res.alpha = explored.alpha;
    res.fraction = task.fraction_within(sub.combine(explored.alpha), pac.d_epsilon);
    res.pass = res.fraction >= 1.0 - pac.delta;
    return res;
}

std::string to_string(SubspaceMode m) {
    switch (m) {
        case SubspaceMode::hispo: return "hispo";
        case SubspaceMode::hilow: return "hilow";
        case SubspaceMode::cspo: return "cspo";
    }
    return "?";
}

SubspaceMode mode_from_string(const std::string& s) {
    if (s == "hispo") return SubspaceMode::hispo;
    if (s == "hilow") return SubspaceMode::hilow;
    if (s == "cspo") return SubspaceMode::cspo;
    throw std::invalid_argument("unknown subspace mode: " + s);
}

std::size_t HispoModel::anchor_count_high() const {
    return mode == SubspaceMode::cspo ? joint.anchor_count() : high.anchor_count();
}

std::size_t HispoModel::anchor_count_low() const {
    return mode == SubspaceMode::cspo ? joint.anchor_count() : low.anchor_count();
}

std::size_t HispoModel::stored_param_count() const {
    if (mode == SubspaceMode::cspo) return joint.stored_param_count();
    return high.stored_param_count() + low.stored_param_count();
}

std::size_t HispoModel::single_policy_count() const {
    return nnet::param_count(shapes.high) + nnet::param_count(shapes.low);
}

gcrl::HierPolicy HispoModel::policy_for_task(int task) const {
    gcrl::HierPolicy p;
    p.hierarchical = true;
    p.way_step = way_steps.at(static_cast<std::size_t>(task));
    if (mode == SubspaceMode::cspo) {
        const auto theta = joint.combine(joint.task_weights.at(static_cast<std::size_t>(task)));
        const std::size_t dh = nnet::param_count(shapes.high);
        p.high = ParamVector{{theta.begin(), theta.begin() + dh}, shapes.high};
        p.low = ParamVector{{theta.begin() + dh, theta.end()}, shapes.low};
    } else {
        p.high = ParamVector{high.combine(high.task_weights.at(static_cast<std::size_t>(task))),
                             shapes.high};
        p.low = ParamVector{low.combine(low.task_weights.at(static_cast<std::size_t>(task))),
                            shapes.low};
    }
    return p;
}

namespace {

struct SidePlan {
    PolicySubspace* sub;
    std::vector<TaskRecord>* records;
    LossKind kind;
};

void learn_side_task(PolicySubspace& sub, std::vector<TaskRecord>& records,
                     const TaskAdapter& adapter, const SubspaceConfig& scfg,
                     const TrainConfig& tcfg, std::uint64_t salt) {
    double gate_fraction = -1.0;
    if (scfg.pac) {
        Rng pac_rng(Rng::derive(tcfg.seed, salt ^ 0x9ac));
        const auto gate = pac_gate(sub, adapter, *scfg.pac, scfg.samples, pac_rng);
        gate_fraction = gate.fraction;
        if (gate.pass) {
            sub.task_weights.push_back(gate.alpha);
            records.push_back({"pac", 0.0, 0.0, gate.fraction});
            return;
        }
    }

    const auto extend = train_new_anchor(sub, adapter, scfg, tcfg, salt);
    Rng explore_rng(Rng::derive(tcfg.seed, salt ^ 0xd17));
    const auto previous = explore_previous(sub, adapter, scfg.samples, explore_rng);

    TaskRecord rec;
    rec.l_prev = previous.loss;
    rec.l_curr = extend.l_curr;
    rec.pac_fraction = gate_fraction;
    if (adapt_decision(previous.loss, extend.l_curr, scfg.epsilon) == Decision::prune) {
        sub.task_weights.push_back(previous.alpha);
        rec.decision = "prune";
    } else {
        sub.anchors.push_back(extend.candidate);
        for (auto& w : sub.task_weights) w.alpha.push_back(0.0);
        sub.task_weights.push_back(extend.alpha_curr);
        rec.decision = "extend";
    }
    records.push_back(rec);
}

TrainConfig task_train_config(const TrainConfig& base, const stream::TaskSpec& task) {
    TrainConfig cfg = base;
    if (cfg.her_temperature <= 0.0) cfg.her_temperature = task.her_temperature_default();
    return cfg;
}

}  // namespace

StreamResult learn_stream(const stream::StreamSpec& spec, SubspaceMode mode,
                          const ModelShapes& shapes, const SubspaceConfig& scfg,
                          const TrainConfig& tcfg, const EvalSettings& eval) {
    if (spec.tasks.empty()) throw std::invalid_argument("learn_stream: empty stream");
    scfg.validate();

    const int n_tasks = static_cast<int>(spec.tasks.size());
    StreamResult out;
    HispoModel& model = out.model;
    model.mode = mode;
    model.shapes = shapes;

    const ParamLayout layout_h = ParamLayout::for_shape(shapes.high);
    const ParamLayout layout_l = ParamLayout::for_shape(shapes.low);
    model.high.layout = layout_h;
    model.low.layout = layout_l;
    model.joint.layout = ParamLayout::concat(layout_h, layout_l);

    metrics::SuccessMatrix matrix(n_tasks);

    for (int j = 0; j < n_tasks; ++j) {
        const auto& task_spec = spec.tasks[static_cast<std::size_t>(j)];
        const auto ds = stream::resolve_dataset(task_spec);
        const int way_step = task_spec.way_step_or_default();
        model.way_steps.push_back(way_step);
        TrainConfig cfg = task_train_config(tcfg, task_spec);
        cfg.seed = Rng::derive(tcfg.seed, 7000 + static_cast<std::uint64_t>(j));

        try {
            if (j == 0) {
                const auto policy = gcrl::train_hbc(ds, shapes.high, shapes.low, way_step, cfg);
                if (mode == SubspaceMode::cspo) {
                    std::vector<double> theta = policy.high.values;
                    theta.insert(theta.end(), policy.low.values.begin(), policy.low.values.end());
                    model.joint.anchors.push_back(make_full_anchor(std::move(theta)));
                    model.joint.task_weights.push_back({{1.0}});
                    model.records_high.push_back({"init", 0.0, 0.0, -1.0});
                } else {
                    model.high.anchors.push_back(make_full_anchor(policy.high.values));
                    model.high.task_weights.push_back({{1.0}});
                    model.low.anchors.push_back(make_full_anchor(policy.low.values));
                    model.low.task_weights.push_back({{1.0}});
                    model.records_high.push_back({"init", 0.0, 0.0, -1.0});
                    model.records_low.push_back({"init", 0.0, 0.0, -1.0});
                }
            } else if (mode == SubspaceMode::cspo) {
                const auto adapter = make_joint_adapter(ds, shapes, way_step, cfg);
                learn_side_task(model.joint, model.records_high, adapter, scfg, cfg,
                                3000 + static_cast<std::uint64_t>(j));
            } else {
                const auto high_adapter =
                    make_task_adapter(ds, shapes.high, LossKind::high, way_step, cfg);
                learn_side_task(model.high, model.records_high, high_adapter, scfg, cfg,
                                1000 + static_cast<std::uint64_t>(j));
                const auto low_adapter =
                    make_task_adapter(ds, shapes.low, LossKind::low, way_step, cfg);
                learn_side_task(model.low, model.records_low, low_adapter, scfg, cfg,
                                2000 + static_cast<std::uint64_t>(j));
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("stream " + spec.name + ", task " + std::to_string(j + 1) +
                                     " (" + task_spec.label() + "): " + e.what());
        }

        // per-task evaluation after each task
        for (int k = 0; k <= j; ++k) {
            const auto& tk = spec.tasks[static_cast<std::size_t>(k)];
            const auto policy = model.policy_for_task(k);
            metrics::PolicyActor actor(policy);
            metrics::TaskEnvSpec env_spec{tk.maze(), tk.tf(), tk.horizon_or_default()};
            matrix.at(j, k) = metrics::success_rate(actor, env_spec, eval.episodes,
                                                    Rng::derive(eval.seed, static_cast<std::uint64_t>(k)));
        }
    }

    if (eval.ref_sigma.size() == static_cast<std::size_t>(n_tasks))
        matrix.ref_sigma = eval.ref_sigma;

    out.report.matrix = matrix;
    out.report.stored_params = static_cast<double>(model.stored_param_count());
    out.report.single_params = static_cast<double>(model.single_policy_count());
    out.report.metrics =
        metrics::compute_metrics(matrix, out.report.stored_params, out.report.single_params);
    return out;
}

namespace {

using nlohmann::json;

json anchor_to_json(const Anchor& a) {
    if (!a.is_lora) return {{"kind", "full"}, {"values", a.full}};
    return {{"kind", "lora"}, {"rank", a.lora.rank}, {"a", a.lora.a}, {"b", a.lora.b}};
}

Anchor anchor_from_json(const json& j) {
    Anchor a;
    if (j.at("kind") == "full") {
        a.is_lora = false;
        a.full = j.at("values").get<std::vector<double>>();
    } else {
        a.is_lora = true;
        a.lora.rank = j.at("rank").get<int>();
        a.lora.a = j.at("a").get<std::vector<std::vector<double>>>();
        a.lora.b = j.at("b").get<std::vector<std::vector<double>>>();
    }
    return a;
}

json subspace_to_json(const PolicySubspace& s) {
    json anchors = json::array();
    for (const auto& a : s.anchors) anchors.push_back(anchor_to_json(a));
    json weights = json::array();
    for (const auto& w : s.task_weights) weights.push_back(w.alpha);
    return {{"anchors", anchors}, {"task_weights", weights}};
}

void subspace_from_json(const json& j, PolicySubspace& s) {
    for (const auto& a : j.at("anchors")) s.anchors.push_back(anchor_from_json(a));
    for (const auto& w : j.at("task_weights"))
        s.task_weights.push_back({w.get<std::vector<double>>()});
}

}  // namespace

void save_model(const HispoModel& model, const std::string& path) {
    json j = {{"format_version", 1},
              {"mode", to_string(model.mode)},
              {"shape_h", model.shapes.high},
              {"shape_l", model.shapes.low},
              {"way_steps", model.way_steps},
              {"task_count", model.way_steps.size()}};
    if (model.mode == SubspaceMode::cspo) {
        j["joint"] = subspace_to_json(model.joint);
    } else {
        j["high"] = subspace_to_json(model.high);
        j["low"] = subspace_to_json(model.low);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump() << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

HispoModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    json j;
    in >> j;
    HispoModel m;
    m.mode = mode_from_string(j.at("mode").get<std::string>());
    m.shapes.high = j.at("shape_h").get<NetShape>();
    m.shapes.low = j.at("shape_l").get<NetShape>();
    m.way_steps = j.at("way_steps").get<std::vector<int>>();
    const ParamLayout lh = ParamLayout::for_shape(m.shapes.high);
    const ParamLayout ll = ParamLayout::for_shape(m.shapes.low);
    m.high.layout = lh;
    m.low.layout = ll;
    m.joint.layout = ParamLayout::concat(lh, ll);
    if (m.mode == SubspaceMode::cspo) {
        subspace_from_json(j.at("joint"), m.joint);
    } else {
        subspace_from_json(j.at("high"), m.high);
        subspace_from_json(j.at("low"), m.low);
    }
    return m;
}

}  // namespace crl::subspace
