#pragma once

#include <array>
#include <span>

#include "merging/expert_merging.hpp"

namespace merging {

// Normalized per-unit importance with its factor breakdown and the
// stage/submodule aggregates used by the reporting tables.
struct ImportanceReport {
    std::vector<double> importance;         // I per unit, sums to 1
    Tensor factor_contrib;                  // [K, U]: |alpha| * s per expert
    std::vector<std::size_t> param_counts;  // n per unit
    std::vector<UnitId> schema;
    std::size_t n_blocks = 0;

    // aggregates: summed importance by submodule kind, by stage, and the
    // stage x kind grid (indexes follow UnitKind / Stage enum order)
    std::array<double, 12> kind_share{};
    std::array<double, 4> stage_share{};
    std::array<std::array<double, 12>, 4> stage_kind{};
};

struct ChunkPlan {
    double budget = 0.0;     // B
    double steepness = 0.0;  // kappa
    std::vector<std::size_t> chunk_counts;         // m per unit
    std::vector<std::vector<std::size_t>> bounds;  // per unit: m+1 flat offsets, empty if m==0

    std::size_t total_chunks() const;
    bool operator==(const ChunkPlan&) const = default;
};

// Ragged chunk coefficients for units with m >= 1 and frozen scalars for
// units with m == 0. Frozen scalars never change during fit_pp.
struct ChunkCoefficients {
    std::vector<std::vector<std::vector<double>>> chunk;  // [k][unit][s]
    Tensor frozen;                                        // [K, U]
    std::vector<double> prior;                            // one per expert

    std::size_t experts() const { return frozen.rows(); }
    std::size_t units() const { return frozen.cols(); }
};

// raw_u = sum_k |alpha[k][u]| * s_k[u] * n_u, then l1-normalized.
ImportanceReport compute_importance(const ModelConfig& cfg, const LayerCoefficients& coeffs,
                                    std::span<const UnitStats> stats);

// m_u = floor(B * I_u^kappa / sum_j I_j^kappa), with 0^0 = 1. Units with
// m == 0 are frozen; others get near-equal contiguous flat splits.
ChunkPlan allocate_chunks(const ImportanceReport& report, double budget, double steepness);

// Plan assigning the same chunk count to every unit (the uniform-chunking
// ablation); the recorded budget is chunks_per_unit * units.
ChunkPlan uniform_chunk_plan(std::span<const std::size_t> unit_sizes,
                             std::size_t chunks_per_unit, double steepness = 0.0);

ModelParams apply_chunk_coefficients(const ModelParams& base, std::span<const TaskVector> tvs,
                                     const ChunkPlan& plan, const ChunkCoefficients& coeffs);

struct ChunkFitResult {
    ChunkPlan plan;
    ChunkCoefficients coeffs;
    TrainLog log;
};

// Stage 2: builds the importance report from the stage-1 coefficients,
// allocates chunks, initializes every chunk (and frozen scalar) from the
// stage-1 values, then minimizes the alignment objective with the
// chunk-aware regularizer (1/(B K)) sum |alpha_chunk - prior|.
ChunkFitResult fit_pp(const ModelParams& base, std::span<const TaskVector> tvs,
                      std::span<const ModelParams> experts, const CalibrationSet& calib,
                      const AlignConfig& cfg, const LayerCoefficients& stage1, double budget,
                      double steepness);

// Same refinement under an explicitly supplied plan.
ChunkFitResult fit_pp_with_plan(const ModelParams& base, std::span<const TaskVector> tvs,
                                std::span<const ModelParams> experts,
                                const CalibrationSet& calib, const AlignConfig& cfg,
                                const LayerCoefficients& stage1, ChunkPlan plan);

}  // namespace merging
