#pragma once

#include <span>
#include <string>
#include <vector>

#include "merging/transformer.hpp"

namespace merging {

// Per-unit parameter deltas of one expert relative to the shared base,
// with fingerprints of both source models for provenance checks.
struct TaskVector {
    std::string expert_id;
    std::vector<Tensor> deltas;  // canonical unit order
    std::uint64_t base_fingerprint = 0;
    std::uint64_t expert_fingerprint = 0;

    std::size_t unit_count() const noexcept { return deltas.size(); }
};

// Per-unit statistics of one task vector.
struct UnitStats {
    std::vector<double> mean_abs;           // raw mean(|tau|) per unit
    std::vector<double> weight;             // normalized to sum 1 across units
    std::vector<std::size_t> param_counts;  // scalar count per unit
};

TaskVector compute_task_vector(const ModelParams& base, const ModelParams& expert,
                               std::string expert_id = "");

// Throws NumericError when the task vector is entirely zero (the
// normalization is undefined).
UnitStats unit_stats(const TaskVector& tv);

// Shared validation: schemas line up and every task vector was built from
// this base (by fingerprint).
void check_task_vectors(const ModelParams& base, std::span<const TaskVector> tvs);

}  // namespace merging
