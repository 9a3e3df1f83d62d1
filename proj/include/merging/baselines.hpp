#pragma once

#include <span>

#include "merging/task_vectors.hpp"

namespace merging {

struct TAConfig {
    std::vector<double> lambdas;  // one per expert
};

struct DareConfig {
    double drop_prob = 0.5;  // must stay below 1
    std::uint64_t seed = 0;
};

struct TiesConfig {
    double keep_fraction = 0.2;  // trim keeps this fraction per unit, in (0,1]
    double scale = 1.0;          // final lambda on the merged vector
};

// theta_base + (1/K) sum_k tau_k
ModelParams merge_weight_average(const ModelParams& base, std::span<const TaskVector> tvs);

// theta_base + sum_k lambda_k tau_k
ModelParams merge_task_arithmetic(const ModelParams& base, std::span<const TaskVector> tvs,
                                  const TAConfig& cfg);

// Drop-and-rescale: each delta survives with probability 1-p and survivors
// are scaled by 1/(1-p), keeping the expectation. Per-unit RNG streams are
// derived as seed ^ hash(unit name), so results do not depend on
// parallel scheduling.
TaskVector dare_preprocess(const TaskVector& tv, const DareConfig& cfg);

// Trim / elect sign / disjoint merge. Per unit: each expert keeps its
// top keep_fraction entries by magnitude; per position the elected sign is
// the sign of the sum of kept values; the merged entry is the mean of kept
// values agreeing with that sign (0 when the sum is exactly 0 or nothing
// agrees). Result is theta_base + scale * tau_merged.
ModelParams merge_ties(const ModelParams& base, std::span<const TaskVector> tvs,
                       const TiesConfig& cfg);

}  // namespace merging
