#include "crl/nnet.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace crl::nnet {

namespace {
constexpr double kLayerNormEps = 1e-5;
}

void NetShape::validate() const {
    if (input_dim < 1 || output_dim < 1)
        throw std::invalid_argument("NetShape: dims must be >= 1");
    for (int h : hidden_dims)
        if (h < 1) throw std::invalid_argument("NetShape: hidden dims must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw std::invalid_argument("NetShape: dropout_rate must lie in [0,1)");
}

std::vector<LayerView> layer_views(const NetShape& shape) {
    shape.validate();
    std::vector<int> sizes;
    sizes.push_back(shape.input_dim);
    for (int h : shape.hidden_dims) sizes.push_back(h);
    sizes.push_back(shape.output_dim);

    std::vector<LayerView> views;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        LayerView v;
        v.in = sizes[l];
        v.out = sizes[l + 1];
        const bool hidden = l + 2 < sizes.size();
        v.has_layernorm = hidden && shape.use_layernorm;
        v.w_off = off;
        off += static_cast<std::size_t>(v.in) * v.out;
        v.b_off = off;
        off += v.out;
        if (v.has_layernorm) {
            v.gamma_off = off;
            off += v.out;
            v.beta_off = off;
            off += v.out;
        }
        views.push_back(v);
    }
    return views;
}

std::size_t param_count(const NetShape& shape) {
    std::size_t n = 0;
    for (const auto& v : layer_views(shape)) {
        n += static_cast<std::size_t>(v.in) * v.out + v.out;
        if (v.has_layernorm) n += 2 * static_cast<std::size_t>(v.out);
    }
    return n;
}

ParamVector init_params(const NetShape& shape, std::uint64_t seed) {
    ParamVector p;
    p.shape = shape;
    p.values.assign(param_count(shape), 0.0);
    Rng rng(seed);
    for (const auto& v : layer_views(shape)) {
        const double bound = std::sqrt(6.0 / (v.in + v.out));
        for (int i = 0; i < v.out * v.in; ++i)
            p.values[v.w_off + i] = rng.uniform(-bound, bound);
        // biases stay zero
        if (v.has_layernorm)
            for (int i = 0; i < v.out; ++i) p.values[v.gamma_off + i] = 1.0;
    }
    return p;
}

namespace {

// Per-layer forward caches for one sample.
struct LayerCache {
    std::vector<double> input;    // activation entering the layer
    std::vector<double> z;        // W*x + b
    std::vector<double> xhat;     // normalized pre-activation (layernorm)
    double inv_sigma = 0.0;       // 1/sqrt(var+eps)
    std::vector<double> act;      // tanh output (before dropout)
    std::vector<double> mask;     // dropout keep mask scaled by 1/(1-p)
};

void layer_forward(const ParamVector& params, const LayerView& v, const NetShape& shape,
                   bool is_output, std::span<const double> x, Mode mode, Rng* rng,
                   LayerCache* cache, std::vector<double>& out) {
    const double* w = params.values.data() + v.w_off;
    const double* b = params.values.data() + v.b_off;

    std::vector<double> z(v.out);
    for (int i = 0; i < v.out; ++i) {
        double s = b[i];
        const double* wrow = w + static_cast<std::size_t>(i) * v.in;
        for (int j = 0; j < v.in; ++j) s += wrow[j] * x[j];
        z[i] = s;
    }
    if (cache) {
        cache->input.assign(x.begin(), x.end());
        cache->z = z;
    }

    if (is_output) {
        out = std::move(z);
        return;
    }

    std::vector<double> pre = z;
    if (v.has_layernorm) {
        double mean = 0.0;
        for (double e : z) mean += e;
        mean /= v.out;
        double var = 0.0;
        for (double e : z) var += (e - mean) * (e - mean);
        var /= v.out;
        const double inv_sigma = 1.0 / std::sqrt(var + kLayerNormEps);
        const double* gamma = params.values.data() + v.gamma_off;
        const double* beta = params.values.data() + v.beta_off;
        std::vector<double> xhat(v.out);
        for (int i = 0; i < v.out; ++i) {
            xhat[i] = (z[i] - mean) * inv_sigma;
            pre[i] = gamma[i] * xhat[i] + beta[i];
        }
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->inv_sigma = inv_sigma;
        }
    }

    out.resize(v.out);
    for (int i = 0; i < v.out; ++i) out[i] = std::tanh(pre[i]);
    if (cache) cache->act = out;

    if (mode == Mode::train && shape.dropout_rate > 0.0) {
        if (!rng) throw std::invalid_argument("forward: rng required for dropout in train mode");
        const double keep = 1.0 - shape.dropout_rate;
        std::vector<double> mask(v.out);
        for (int i = 0; i < v.out; ++i) {
            mask[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
            out[i] *= mask[i];
        }
        if (cache) cache->mask = std::move(mask);
    }
}

std::vector<double> run_forward(const ParamVector& params, std::span<const double> input,
                                Mode mode, Rng* rng, std::vector<LayerCache>* caches) {
    const auto views = layer_views(params.shape);
    if (params.values.size() != param_count(params.shape))
        throw std::invalid_argument("forward: parameter vector does not match shape");
    if (input.size() != static_cast<std::size_t>(params.shape.input_dim))
        throw std::invalid_argument("forward: input size " + std::to_string(input.size()) +
                                    " != input_dim " + std::to_string(params.shape.input_dim));
    if (caches) caches->resize(views.size());

    std::vector<double> cur(input.begin(), input.end());
    std::vector<double> next;
    for (std::size_t l = 0; l < views.size(); ++l) {
        const bool is_output = (l + 1 == views.size());
        layer_forward(params, views[l], params.shape, is_output, cur, mode, rng,
                      caches ? &(*caches)[l] : nullptr, next);
        cur = std::move(next);
    }
    return cur;
}

// Accumulates per-sample gradient given dL/d(output). Returns dL/d(input)
// in `dx` as a side product (used nowhere yet but cheap to produce).
void run_backward(const ParamVector& params, const std::vector<LayerCache>& caches,
                  std::span<const double> dout, std::vector<double>& grad_acc) {
    const auto views = layer_views(params.shape);
    std::vector<double> d(dout.begin(), dout.end());

    for (std::size_t li = views.size(); li-- > 0;) {
        const auto& v = views[li];
        const auto& c = caches[li];
        const bool is_output = (li + 1 == views.size());

        if (!is_output) {
            // dropout
            if (!c.mask.empty())
                for (int i = 0; i < v.out; ++i) d[i] *= c.mask[i];
            // tanh
            for (int i = 0; i < v.out; ++i) d[i] *= 1.0 - c.act[i] * c.act[i];
            // layernorm
            if (v.has_layernorm) {
                const double* gamma = params.values.data() + v.gamma_off;
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                std::vector<double> dxhat(v.out);
                for (int i = 0; i < v.out; ++i) {
                    grad_acc[v.gamma_off + i] += d[i] * c.xhat[i];
                    grad_acc[v.beta_off + i] += d[i];
                    dxhat[i] = d[i] * gamma[i];
                    mean_dxhat += dxhat[i];
                    mean_dxhat_xhat += dxhat[i] * c.xhat[i];
                }
                mean_dxhat /= v.out;
                mean_dxhat_xhat /= v.out;
                for (int i = 0; i < v.out; ++i)
                    d[i] = c.inv_sigma * (dxhat[i] - mean_dxhat - c.xhat[i] * mean_dxhat_xhat);
            }
        }

        const double* w = params.values.data() + v.w_off;
        std::vector<double> dx(v.in, 0.0);
        for (int i = 0; i < v.out; ++i) {
            const double di = d[i];
            double* gw = grad_acc.data() + v.w_off + static_cast<std::size_t>(i) * v.in;
            const double* wrow = w + static_cast<std::size_t>(i) * v.in;
            for (int j = 0; j < v.in; ++j) {
                gw[j] += di * c.input[j];
                dx[j] += di * wrow[j];
            }
            grad_acc[v.b_off + i] += di;
        }
        d = std::move(dx);
    }
}

void check_batch(const ParamVector& params, const Batch& batch) {
    if (batch.inputs.rows == 0) throw std::invalid_argument("batch is empty");
    if (batch.inputs.rows != batch.targets.rows)
        throw std::invalid_argument("batch row counts differ");
    if (batch.inputs.cols != static_cast<std::size_t>(params.shape.input_dim) ||
        batch.targets.cols != static_cast<std::size_t>(params.shape.output_dim))
        throw std::invalid_argument("batch dims do not match shape");
}

}  // namespace

std::vector<double> forward(const ParamVector& params, std::span<const double> input,
                            Mode mode, Rng* rng) {
    return run_forward(params, input, mode, rng, nullptr);
}

double nll_loss(const ParamVector& params, const Batch& batch) {
    check_batch(params, batch);
    double total = 0.0;
    for (std::size_t r = 0; r < batch.inputs.rows; ++r) {
        const auto out = run_forward(
            params, std::span<const double>(batch.inputs.row(r), batch.inputs.cols),
            Mode::eval, nullptr, nullptr);
        for (std::size_t j = 0; j < batch.targets.cols; ++j) {
            const double e = out[j] - batch.targets.at(r, j);
            total += 0.5 * e * e;
        }
    }
    return total / static_cast<double>(batch.inputs.rows);
}

double grad_with_loss(const ParamVector& params, const Batch& batch,
                      std::vector<double>& out_grad, Mode mode, Rng* rng) {
    check_batch(params, batch);
    out_grad.assign(params.values.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.inputs.rows);
    std::vector<LayerCache> caches;
    std::vector<double> dout(batch.targets.cols);
    double total = 0.0;
    for (std::size_t r = 0; r < batch.inputs.rows; ++r) {
        const auto out = run_forward(
            params, std::span<const double>(batch.inputs.row(r), batch.inputs.cols), mode, rng,
            &caches);
        for (std::size_t j = 0; j < batch.targets.cols; ++j) {
            const double e = out[j] - batch.targets.at(r, j);
            total += 0.5 * e * e;
            dout[j] = e * inv_n;
        }
        run_backward(params, caches, dout, out_grad);
    }
    return total * inv_n;
}

std::vector<double> grad(const ParamVector& params, const Batch& batch, Mode mode, Rng* rng) {
    std::vector<double> g;
    grad_with_loss(params, batch, g, mode, rng);
    return g;
}

void adam_step(AdamState& state, std::vector<double>& params, std::span<const double> g,
               double lr) {
    if (state.m.size() != params.size()) {
        if (state.m.empty() && state.t == 0) {
            state.m.assign(params.size(), 0.0);
            state.v.assign(params.size(), 0.0);
        } else {
            throw std::invalid_argument("adam_step: state size does not match params");
        }
    }
    if (g.size() != params.size())
        throw std::invalid_argument("adam_step: gradient size does not match params");
    for (double gi : g)
        if (!std::isfinite(gi)) throw std::invalid_argument("adam_step: non-finite gradient");

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

}  // namespace crl::nnet
