// SPDX-License-Identifier: Apache-2.0

#include "pipefill/kfac/kfac.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pipefill::kfac {
namespace {

constexpr int kFisherDimGuard = 2048;  // max d_in*d_out materialized densely

void check_shapes(const TinyMlp& mlp, const Batch& batch) {
    if (mlp.weights.empty()) throw std::invalid_argument("network has no layers");
    if (mlp.activations.size() != mlp.weights.size())
        throw std::invalid_argument("one activation per layer required");
    if (batch.inputs.cols() < 1) throw std::invalid_argument("batch is empty");
    if (batch.inputs.rows() != mlp.weights.front().cols())
        throw std::invalid_argument("input width does not match first layer");
    for (std::size_t l = 1; l < mlp.weights.size(); ++l)
        if (mlp.weights[l].cols() != mlp.weights[l - 1].rows())
            throw std::invalid_argument("layer shapes do not compose");
    if (batch.targets.rows() != mlp.weights.back().rows() ||
        batch.targets.cols() != batch.inputs.cols())
        throw std::invalid_argument("target shape mismatch");
}

Matrix apply_activation(const Matrix& z, Activation act) {
    if (act == Activation::Identity) return z;
    Matrix out = z;
    for (auto& v : out.data()) v = std::tanh(v);
    return out;
}

// Elementwise derivative of the activation at pre-activation z.
Matrix activation_grad(const Matrix& z, Activation act) {
    Matrix out = z;
    if (act == Activation::Identity) {
        for (auto& v : out.data()) v = 1.0;
    } else {
        for (auto& v : out.data()) {
            const double t = std::tanh(v);
            v = 1.0 - t * t;
        }
    }
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] *= b.data()[i];
    return out;
}

Matrix softmax_columns(const Matrix& z) {
    Matrix out = z;
    for (int c = 0; c < z.cols(); ++c) {
        double mx = z(0, c);
        for (int r = 1; r < z.rows(); ++r) mx = std::max(mx, z(r, c));
        double sum = 0.0;
        for (int r = 0; r < z.rows(); ++r) {
            out(r, c) = std::exp(z(r, c) - mx);
            sum += out(r, c);
        }
        for (int r = 0; r < z.rows(); ++r) out(r, c) /= sum;
    }
    return out;
}

}  // namespace

ForwardBackwardResult forward_backward(const TinyMlp& mlp, const Batch& batch) {
    check_shapes(mlp, batch);
    const int layers = static_cast<int>(mlp.weights.size());
    const int batch_size = batch.inputs.cols();
    const double inv_b = 1.0 / batch_size;

    ForwardBackwardResult out;
    out.tape.batch_size = batch_size;
    out.tape.layer_inputs.resize(layers);
    out.tape.layer_errors.resize(layers);

    std::vector<Matrix> pre(layers);  // z_l
    Matrix a = batch.inputs;
    for (int l = 0; l < layers; ++l) {
        out.tape.layer_inputs[l] = a;
        pre[l] = matmul(mlp.weights[l], a);
        a = apply_activation(pre[l], mlp.activations[l]);
    }

    Matrix grad_output(a.rows(), a.cols());  // dL/da_L, includes 1/|B|
    if (mlp.loss == LossKind::MeanSquaredError) {
        double loss = 0.0;
        for (int c = 0; c < a.cols(); ++c)
            for (int r = 0; r < a.rows(); ++r) {
                const double diff = a(r, c) - batch.targets(r, c);
                loss += 0.5 * diff * diff;
                grad_output(r, c) = diff * inv_b;
            }
        out.loss = loss * inv_b;
    } else {
        const Matrix p = softmax_columns(a);
        double loss = 0.0;
        for (int c = 0; c < a.cols(); ++c)
            for (int r = 0; r < a.rows(); ++r) {
                if (batch.targets(r, c) > 0.0)
                    loss -= batch.targets(r, c) * std::log(std::max(p(r, c), 1e-300));
                grad_output(r, c) = (p(r, c) - batch.targets(r, c)) * inv_b;
            }
        out.loss = loss * inv_b;
    }

    out.gradients.resize(layers);
    Matrix e = grad_output;
    for (int l = layers - 1; l >= 0; --l) {
        e = hadamard(e, activation_grad(pre[l], mlp.activations[l]));
        out.tape.layer_errors[l] = e;
        out.gradients[l] = matmul(e, out.tape.layer_inputs[l].transposed());
        if (l > 0) e = matmul(mlp.weights[l].transposed(), e);
    }
    return out;
}

std::pair<Matrix, Matrix> curvature_factors(const BatchTape& tape, int layer) {
    const Matrix& a = tape.layer_inputs.at(layer);
    const Matrix& e = tape.layer_errors.at(layer);
    const double inv_b = 1.0 / tape.batch_size;
    return {matmul(a, a.transposed()).scaled(inv_b),
            matmul(e, e.transposed()).scaled(inv_b)};
}

Matrix precondition(const Matrix& grad, const Matrix& a_inv, const Matrix& b_inv) {
    if (b_inv.cols() != grad.rows() || grad.cols() != a_inv.rows())
        throw std::invalid_argument("precondition: shape mismatch");
    return matmul(matmul(b_inv, grad), a_inv);
}

Matrix empirical_fisher_block(const BatchTape& tape, int layer) {
    const Matrix& a = tape.layer_inputs.at(layer);
    const Matrix& e = tape.layer_errors.at(layer);
    const int d_in = a.rows();
    const int d_out = e.rows();
    const int p = d_in * d_out;
    if (p > kFisherDimGuard) throw std::length_error("fisher block too large to materialize");

    Matrix f(p, p);
    const double inv_b = 1.0 / tape.batch_size;
    std::vector<double> v(static_cast<std::size_t>(p));
    for (int i = 0; i < tape.batch_size; ++i) {
        // vec-grad = a (x) e, column-major vec of e a^T
        for (int j = 0; j < d_in; ++j)
            for (int k = 0; k < d_out; ++k)
                v[static_cast<std::size_t>(j) * d_out + k] = a(j, i) * e(k, i);
        for (int r = 0; r < p; ++r)
            for (int c = 0; c < p; ++c) f(r, c) += v[r] * v[c] * inv_b;
    }
    return f;
}

KfacState::KfacState(int layers)
    : factor_a(layers), factor_b(layers), inv_a(layers), inv_b(layers),
      staleness(layers, 0), refreshed_this_step(layers, 0) {}

bool KfacState::has_inverses(int layer) const {
    return inv_a.at(layer).rows() > 0 && inv_b.at(layer).rows() > 0;
}

void KfacState::update_factors(const BatchTape& tape) {
    const int layers = static_cast<int>(factor_a.size());
    for (int l = 0; l < layers; ++l)
        std::tie(factor_a[l], factor_b[l]) = curvature_factors(tape, l);
}

void KfacState::refresh_inverses() {
    const int layers = static_cast<int>(factor_a.size());
    for (int l = 0; l < layers; ++l) {
        if (factor_a[l].rows() == 0) continue;
        inv_a[l] = cholesky_spd_inverse(factor_a[l], damping);
        inv_b[l] = cholesky_spd_inverse(factor_b[l], damping);
        staleness[l] = 0;
        refreshed_this_step[l] = 1;
    }
}

NgdStepResult ngd_step(TinyMlp& mlp, KfacState& state, const std::vector<Matrix>& gradients) {
    if (gradients.size() != mlp.weights.size())
        throw std::invalid_argument("one gradient per layer required");
    NgdStepResult out;
    const int layers = static_cast<int>(mlp.weights.size());
    for (int l = 0; l < layers; ++l) {
        Matrix direction = state.has_inverses(l)
                               ? precondition(gradients[l], state.inv_a[l], state.inv_b[l])
                               : gradients[l];
        if (!state.has_inverses(l)) out.used_plain_gradient = true;
        mlp.weights[l] = subtract(mlp.weights[l], direction.scaled(state.learning_rate));
        state.staleness[l] = (state.refreshed_this_step[l] ? 0 : state.staleness[l]) + 1;
        state.refreshed_this_step[l] = 0;
    }
    return out;
}

std::vector<Matrix> block_diag_split_factor(const Matrix& m, int k) {
    if (m.rows() != m.cols()) throw std::invalid_argument("factor must be square");
    if (k < 1 || m.rows() % k != 0)
        throw std::invalid_argument("K must divide the factor dimension");
    const int block = m.rows() / k;
    std::vector<Matrix> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int b = 0; b < k; ++b) {
        Matrix piece(block, block);
        for (int r = 0; r < block; ++r)
            for (int c = 0; c < block; ++c) piece(r, c) = m(b * block + r, b * block + c);
        out.push_back(std::move(piece));
    }
    return out;
}

double inversion_flops(int dim) {
    return (2.0 / 3.0) * static_cast<double>(dim) * dim * dim;
}

double block_diag_inversion_flops(int dim, int k) {
    if (k < 1 || dim % k != 0) throw std::invalid_argument("K must divide the dimension");
    return k * inversion_flops(dim / k);
}

std::uint64_t SplitMix64::next() {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double SplitMix64::symmetric() { return 2.0 * uniform() - 1.0; }

ToyResult train_toy(const ToyConfig& config) {
    if (config.layer_dims.size() < 2) throw std::invalid_argument("need at least one layer");
    if (config.steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (config.refresh_period < 1) throw std::invalid_argument("refresh period must be >= 1");

    const int layers = static_cast<int>(config.layer_dims.size()) - 1;
    const int d_in = config.layer_dims.front();
    const int d_out = config.layer_dims.back();

    SplitMix64 rng(config.data_seed);

    // Inputs with a geometric spread of per-dimension scales; the input
    // second-moment matrix gets a condition number near config.condition_number.
    Batch batch{Matrix(d_in, config.samples), Matrix(d_out, config.samples)};
    std::vector<double> scale(static_cast<std::size_t>(d_in), 1.0);
    for (int j = 0; j < d_in; ++j)
        scale[static_cast<std::size_t>(j)] =
            d_in > 1 ? std::pow(config.condition_number, -0.5 * j / (d_in - 1)) : 1.0;
    for (int i = 0; i < config.samples; ++i)
        for (int j = 0; j < d_in; ++j)
            batch.inputs(j, i) = rng.symmetric() * scale[static_cast<std::size_t>(j)];

    Matrix teacher(d_out, d_in);
    for (auto& v : teacher.data()) v = rng.symmetric();
    batch.targets = matmul(teacher, batch.inputs);

    TinyMlp mlp;
    for (int l = 0; l < layers; ++l) {
        Matrix w(config.layer_dims[l + 1], config.layer_dims[l]);
        for (auto& v : w.data()) v = 0.5 * rng.symmetric();
        mlp.weights.push_back(std::move(w));
        mlp.activations.push_back(l + 1 < layers ? config.hidden_activation
                                                 : Activation::Identity);
    }
    mlp.loss = config.loss;

    KfacState state(layers);
    state.damping = config.damping;
    state.learning_rate = config.learning_rate;

    ToyResult result;
    for (int step = 0; step < config.steps; ++step) {
        auto fb = forward_backward(mlp, batch);
        result.losses.push_back(fb.loss);
        if (!std::isfinite(fb.loss)) {
            result.diverged = true;
            result.divergence_step = step;
            break;
        }
        if (config.optimizer == ToyOptimizer::Kfac) {
            if (step % config.refresh_period == 0) {
                state.update_factors(fb.tape);
                state.refresh_inverses();
            }
            ngd_step(mlp, state, fb.gradients);
            result.max_staleness.push_back(
                *std::max_element(state.staleness.begin(), state.staleness.end()));
        } else {
            for (int l = 0; l < layers; ++l)
                mlp.weights[l] = subtract(mlp.weights[l],
                                          fb.gradients[l].scaled(config.learning_rate));
        }
    }
    return result;
}

int steps_to_loss(const std::vector<double>& losses, double target) {
    for (std::size_t i = 0; i < losses.size(); ++i)
        if (losses[i] <= target) return static_cast<int>(i);
    return -1;
}

}  // namespace pipefill::kfac
