#pragma once

#include <span>
#include <utility>

#include "merging/autodiff.hpp"
#include "merging/calibration.hpp"
#include "merging/task_vectors.hpp"

namespace merging {

// One trainable coefficient per (expert, mergeable unit) plus the prior the
// regularizer anchors to.
struct LayerCoefficients {
    Tensor alpha;               // [K, U]
    std::vector<double> prior;  // one per expert

    std::size_t experts() const { return alpha.rows(); }
    std::size_t units() const { return alpha.cols(); }

    static LayerCoefficients constant(std::size_t experts, std::size_t units, double value);
};

struct AlignConfig {
    double temperature = 1.0;
    // hidden-alignment block set; empty selects the middle block n_blocks/2
    std::vector<std::size_t> hidden_blocks;
    // task weights beta_k; empty selects all ones
    std::vector<double> task_weights;
    double reg_weight = 0.8;  // gamma
    double step_size = 1e-2;
    std::size_t steps = 200;
    std::uint64_t seed = 1;
    std::size_t snapshot_interval = 0;  // 0 disables coefficient snapshots
    bool use_hidden_loss = true;
    bool use_logit_loss = true;
};

struct StepRecord {
    double total = 0.0;      // alignment + gamma * regularizer
    double alignment = 0.0;  // sum_k beta_k (hidden_k + logit_k)
    double reg = 0.0;        // regularizer value before gamma
    std::vector<double> hidden_per_task;
    std::vector<double> logit_per_task;
};

struct TrainLog {
    std::vector<StepRecord> steps;  // objective before each update
    StepRecord final_record;        // after the last update
    std::size_t snapshot_interval = 0;
    std::vector<Tensor> snapshots;
};

// theta_base^u + sum_k alpha[k][u] * tau_k^u per unit. Units whose
// coefficients are all zero keep the base tensor bitwise.
ModelParams apply_coefficients(const ModelParams& base, std::span<const TaskVector> tvs,
                               const LayerCoefficients& coeffs);

// Full objective: sum_k beta_k (hidden_k + logit_k) + gamma * mean_|alpha -
// prior|. Differentiable with respect to the coefficient matrix only (one
// registered leaf).
DifferentiableScalar alignment_loss(const LayerCoefficients& coeffs, const ModelParams& base,
                                    std::span<const TaskVector> tvs,
                                    std::span<const ModelParams> experts,
                                    const CalibrationSet& calib, const AlignConfig& cfg);

// Gradient-based minimization of the alignment objective from `init`.
// Deterministic given identical inputs; aborts with a NumericError naming
// the step and offending term if the loss turns non-finite.
std::pair<LayerCoefficients, TrainLog> fit(const ModelParams& base,
                                           std::span<const TaskVector> tvs,
                                           std::span<const ModelParams> experts,
                                           const CalibrationSet& calib, const AlignConfig& cfg,
                                           const LayerCoefficients& init);

// Evaluates the alignment terms (regularizer excluded) for each uniform
// lambda in the grid and returns constant coefficients at the argmin, with
// the prior set to that lambda.
LayerCoefficients ta_grid_init(const ModelParams& base, std::span<const TaskVector> tvs,
                               std::span<const ModelParams> experts, const CalibrationSet& calib,
                               const AlignConfig& cfg, std::span<const double> lambda_grid);

}  // namespace merging
