// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pipefill/kfac/matrix.hpp"

namespace pipefill::kfac {

enum class Activation { Identity, Tanh };
enum class LossKind { MeanSquaredError, SoftmaxCrossEntropy };

/// Fully-connected network without biases; weights[l] maps d_in_l -> d_out_l
/// and consecutive shapes compose.
struct TinyMlp {
    std::vector<Matrix> weights;
    std::vector<Activation> activations;  // applied to each layer's output
    LossKind loss = LossKind::MeanSquaredError;
};

/// Examples are columns: inputs is d_in x batch, targets d_out x batch.
struct Batch {
    Matrix inputs;
    Matrix targets;
};

/// Per-layer inputs a_l and output-gradients e_l for every example. The
/// errors carry the 1/|B| mini-batch averaging factor, so
/// G_l = e_l * a_l^T without further scaling.
struct BatchTape {
    std::vector<Matrix> layer_inputs;  // a_l: d_in_l x batch
    std::vector<Matrix> layer_errors;  // e_l: d_out_l x batch
    int batch_size = 0;
};

struct ForwardBackwardResult {
    double loss = 0.0;
    std::vector<Matrix> gradients;  // dL/dtheta_l, shape of weights[l]
    BatchTape tape;
};

ForwardBackwardResult forward_backward(const TinyMlp& mlp, const Batch& batch);

/// A_l = avg_i a a^T and B_l = avg_i e e^T for one layer.
std::pair<Matrix, Matrix> curvature_factors(const BatchTape& tape, int layer);

/// B_inv * G * A_inv, the Kronecker-factored natural-gradient direction.
Matrix precondition(const Matrix& grad, const Matrix& a_inv, const Matrix& b_inv);

/// Dense per-layer Fisher estimate avg_i vec-grad vec-grad^T with
/// vec-grad = a (x) e in column-major convention. Oracle-sized; throws
/// std::length_error beyond the materialization guard.
Matrix empirical_fisher_block(const BatchTape& tape, int layer);

/// Per-layer Kronecker factors, their damped inverses, and staleness
/// counters (steps since the inverses were computed).
struct KfacState {
    std::vector<Matrix> factor_a, factor_b;
    std::vector<Matrix> inv_a, inv_b;
    std::vector<int> staleness;
    std::vector<char> refreshed_this_step;
    double damping = 0.0;
    double learning_rate = 0.0;

    explicit KfacState(int layers = 0);
    bool has_inverses(int layer) const;
    void update_factors(const BatchTape& tape);
    /// Invert the damped factors of every layer; resets staleness to 0.
    void refresh_inverses();
};

struct NgdStepResult {
    bool used_plain_gradient = false;  // inverses missing on a first-ever step
};

/// theta_l <- theta_l - eta * B_inv G_l A_inv per layer. Staleness counters
/// advance by one; layers refreshed this step restart their count.
NgdStepResult ngd_step(TinyMlp& mlp, KfacState& state, const std::vector<Matrix>& gradients);

/// K principal diagonal blocks of size d/K; throws std::invalid_argument
/// when K does not divide d.
std::vector<Matrix> block_diag_split_factor(const Matrix& m, int k);

/// Cost of inverting one d x d factor, and of inverting its K-block-diagonal
/// approximation (K times a (d/K)^3 job, i.e. a K^2 reduction).
double inversion_flops(int dim);
double block_diag_inversion_flops(int dim, int k);

/// Deterministic uniform stream for seeded fixtures.
struct SplitMix64 {
    std::uint64_t state;
    explicit SplitMix64(std::uint64_t seed) : state(seed) {}
    std::uint64_t next();
    double uniform();           // [0, 1)
    double symmetric();         // [-1, 1)
};

enum class ToyOptimizer { Kfac, GradientDescent };

/// Seeded ill-conditioned linear-regression training run.
struct ToyConfig {
    std::vector<int> layer_dims{8, 1};  // d_in, then each layer's output width
    Activation hidden_activation = Activation::Identity;
    LossKind loss = LossKind::MeanSquaredError;
    std::uint64_t data_seed = 42;
    int samples = 32;
    double condition_number = 1e3;  // spread of input second moments
    int steps = 100;
    double learning_rate = 1e-3;
    double damping = 1e-3;
    int refresh_period = 1;
    ToyOptimizer optimizer = ToyOptimizer::Kfac;
};

struct ToyResult {
    std::vector<double> losses;          // loss before each step's update
    std::vector<int> max_staleness;      // per step, K-FAC only
    bool diverged = false;
    int divergence_step = -1;
};

ToyResult train_toy(const ToyConfig& config);

/// First step index whose loss is at or below `target`, or -1.
int steps_to_loss(const std::vector<double>& losses, double target);

}  // namespace pipefill::kfac
