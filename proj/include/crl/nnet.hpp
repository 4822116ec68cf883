#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "crl/rng.hpp"

namespace crl::nnet {

struct Matrix {
    std::vector<double> data;
    std::size_t rows = 0, cols = 0;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : data(r * c, 0.0), rows(r), cols(c) {}

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }
    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// Dense feed-forward architecture description. Hidden layers use tanh,
/// optionally preceded by layer normalization and followed by inverted
/// dropout (training mode only). The output layer is linear.
struct NetShape {
    int input_dim = 1;
    std::vector<int> hidden_dims;
    int output_dim = 1;
    bool use_layernorm = false;
    double dropout_rate = 0.0;

    void validate() const;
    bool operator==(const NetShape&) const = default;
};

/// Location of one linear layer's blocks inside the flat parameter vector.
struct LayerView {
    std::size_t w_off = 0;      // weight matrix, row-major (out x in)
    std::size_t b_off = 0;      // bias
    std::size_t gamma_off = 0;  // layernorm gain (hidden layers only)
    std::size_t beta_off = 0;   // layernorm offset
    int in = 0;
    int out = 0;
    bool has_layernorm = false;
};

std::vector<LayerView> layer_views(const NetShape& shape);
std::size_t param_count(const NetShape& shape);

struct ParamVector {
    std::vector<double> values;
    NetShape shape;
};

/// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero,
/// layernorm gains one and offsets zero.
ParamVector init_params(const NetShape& shape, std::uint64_t seed);

enum class Mode { train, eval };

/// Single-sample forward pass. In train mode with dropout_rate > 0 an rng
/// must be supplied for the dropout masks.
std::vector<double> forward(const ParamVector& params, std::span<const double> input,
                            Mode mode = Mode::eval, Rng* rng = nullptr);

struct Batch {
    Matrix inputs;   // batch x input_dim
    Matrix targets;  // batch x output_dim
};

/// Mean over rows of 0.5 * ||forward(x) - y||^2 (Gaussian likelihood with
/// unit variance, additive constant dropped). Always evaluated without
/// dropout.
double nll_loss(const ParamVector& params, const Batch& batch);

/// Gradient of nll_loss over the batch with respect to every parameter.
/// In train mode each row draws a fresh dropout mask that is shared
/// between the forward and backward pass of that row.
std::vector<double> grad(const ParamVector& params, const Batch& batch,
                         Mode mode = Mode::eval, Rng* rng = nullptr);

/// Same as grad() but also reports the (mask-dependent) batch loss.
double grad_with_loss(const ParamVector& params, const Batch& batch,
                      std::vector<double>& out_grad, Mode mode = Mode::eval,
                      Rng* rng = nullptr);

inline constexpr double kDefaultLearningRate = 3e-4;

struct AdamState {
    std::vector<double> m, v;
    long long t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One Adam update with bias correction, in place.
void adam_step(AdamState& state, std::vector<double>& params, std::span<const double> g,
               double lr = kDefaultLearningRate);

}  // namespace crl::nnet
