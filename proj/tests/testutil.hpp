#pragma once

// Shared helpers for the test suites. Oracles here intentionally avoid the
// library's forward/backward code paths so they stay independent checks.

#include <cmath>
#include <vector>

#include "crl/nnet.hpp"
#include "crl/rng.hpp"

namespace testutil {

// Plain MLP forward (tanh hidden, linear output, no layernorm, no dropout)
// written against the documented flat layout, independent arithmetic.
inline std::vector<double> naive_forward(const crl::nnet::NetShape& shape,
                                         const std::vector<double>& params,
                                         std::vector<double> x) {
    std::vector<int> sizes;
    sizes.push_back(shape.input_dim);
    for (int h : shape.hidden_dims) sizes.push_back(h);
    sizes.push_back(shape.output_dim);

    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const int in = sizes[l], out = sizes[l + 1];
        std::vector<double> y(out);
        for (int i = 0; i < out; ++i) {
            double s = params[off + static_cast<std::size_t>(out) * in + i];  // bias
            for (int j = 0; j < in; ++j) s += params[off + static_cast<std::size_t>(i) * in + j] * x[j];
            y[i] = (l + 2 < sizes.size()) ? std::tanh(s) : s;
        }
        off += static_cast<std::size_t>(out) * in + out;
        x = std::move(y);
    }
    return x;
}

// Central finite differences of nll_loss, h = 1e-5.
inline std::vector<double> fd_gradient(const crl::nnet::ParamVector& params,
                                       const crl::nnet::Batch& batch, double h = 1e-5) {
    crl::nnet::ParamVector p = params;
    std::vector<double> g(p.values.size());
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        const double orig = p.values[i];
        p.values[i] = orig + h;
        const double lp = crl::nnet::nll_loss(p, batch);
        p.values[i] = orig - h;
        const double lm = crl::nnet::nll_loss(p, batch);
        p.values[i] = orig;
        g[i] = (lp - lm) / (2.0 * h);
    }
    return g;
}

// Componentwise |a-b| / max(1, |a|, |b|).
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({1.0, std::fabs(a[i]), std::fabs(b[i])});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

inline crl::nnet::Batch random_batch(const crl::nnet::NetShape& shape, std::size_t rows,
                                     crl::Rng& rng) {
    crl::nnet::Batch b;
    b.inputs = crl::nnet::Matrix(rows, shape.input_dim);
    b.targets = crl::nnet::Matrix(rows, shape.output_dim);
    for (auto& v : b.inputs.data) v = rng.uniform(-1.5, 1.5);
    for (auto& v : b.targets.data) v = rng.uniform(-1.5, 1.5);
    return b;
}

inline crl::nnet::NetShape random_small_shape(crl::Rng& rng) {
    crl::nnet::NetShape s;
    s.input_dim = 1 + static_cast<int>(rng.uniform_int(8));
    s.output_dim = 1 + static_cast<int>(rng.uniform_int(8));
    const int layers = static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < layers; ++i) s.hidden_dims.push_back(1 + static_cast<int>(rng.uniform_int(8)));
    s.use_layernorm = !s.hidden_dims.empty() && rng.bernoulli(0.5);
    s.dropout_rate = 0.0;
    return s;
}

// Max relative error of analytic vs finite-difference gradients over
// `instances` random (shape, params, batch) draws. Shared with the
// acceptance suite.
inline double gradient_check(int instances, std::uint64_t seed) {
    crl::Rng rng(seed);
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const auto shape = random_small_shape(rng);
        auto params = crl::nnet::init_params(shape, rng.next_u64());
        for (auto& v : params.values) v += 0.05 * rng.normal();  // move biases off zero
        const auto batch = random_batch(shape, 1 + rng.uniform_int(6), rng);
        const auto analytic = crl::nnet::grad(params, batch);
        const auto fd = fd_gradient(params, batch);
        worst = std::max(worst, max_rel_err(analytic, fd));
    }
    return worst;
}

}  // namespace testutil
