#pragma once

// Shared machinery behind fit and fit_pp: a validated problem instance with
// cached expert targets, a mixer mapping trainable values to merged units on
// a tape, and the deterministic evaluate/minimize loop. Library-internal.

#include <memory>

#include "merging/expert_merging.hpp"

namespace merging::align {

struct Problem {
    const ModelParams* base = nullptr;
    std::span<const TaskVector> tvs;
    std::span<const ModelParams> experts;
    const CalibrationSet* calib = nullptr;
    AlignConfig cfg;  // defaults resolved (hidden blocks, task weights)
    // cached expert traces, [task][sample]; constants of the optimization
    std::vector<std::vector<ForwardTrace>> targets;

    std::size_t tasks() const { return tvs.size(); }
};

Problem make_problem(const ModelParams& base, std::span<const TaskVector> tvs,
                     std::span<const ModelParams> experts, const CalibrationSet& calib,
                     const AlignConfig& cfg);

// Maps the flat trainable tensor to one merged Var per unit.
class Mixer {
public:
    virtual ~Mixer() = default;
    virtual std::vector<std::size_t> trainable_shape() const = 0;
    virtual std::vector<Var> mixed_units(Tape& tape, Var trainable) const = 0;
    virtual const Tensor& reg_anchor() const = 0;
    virtual double reg_inv_scale() const = 0;
};

// Layer-wise mixer: trainable is the [K, U] coefficient matrix.
class LayerMixer : public Mixer {
public:
    LayerMixer(const ModelParams& base, std::span<const TaskVector> tvs,
               std::span<const double> prior);
    std::vector<std::size_t> trainable_shape() const override;
    std::vector<Var> mixed_units(Tape& tape, Var trainable) const override;
    const Tensor& reg_anchor() const override { return anchor_; }
    double reg_inv_scale() const override { return inv_scale_; }

private:
    const ModelParams* base_;
    std::span<const TaskVector> tvs_;
    Tensor anchor_;
    double inv_scale_;
};

struct Evaluation {
    double total = 0.0;
    double alignment = 0.0;
    double reg = 0.0;
    std::vector<double> hidden_per_task;
    std::vector<double> logit_per_task;
    Tensor grad;  // w.r.t. the trainable tensor
};

// Per-(task, sample) losses and gradients are evaluated on independent
// tapes (in parallel when enabled) and reduced in (task, sample) index
// order, so results do not depend on scheduling.
Evaluation evaluate(const Problem& problem, const Mixer& mixer, const Tensor& trainable,
                    bool include_reg = true);

StepRecord to_record(const Evaluation& e);

std::pair<Tensor, TrainLog> minimize(const Problem& problem, const Mixer& mixer,
                                     Tensor init);

}  // namespace merging::align
