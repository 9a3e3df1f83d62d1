#include "merging/expert_merging_pp.hpp"

#include <cmath>

#include "merging/align_engine.hpp"
#include "merging/kernels.hpp"

namespace merging {

std::size_t ChunkPlan::total_chunks() const {
    std::size_t n = 0;
    for (auto m : chunk_counts) n += m;
    return n;
}

ImportanceReport compute_importance(const ModelConfig& cfg, const LayerCoefficients& coeffs,
                                    std::span<const UnitStats> stats) {
    const auto schema = unit_schema(cfg);
    const std::size_t units = schema.size();
    const std::size_t experts = coeffs.experts();
    if (coeffs.units() != units)
        throw ConfigError("importance: coefficient matrix does not match the unit schema");
    if (stats.size() != experts)
        throw ConfigError("importance: need per-expert unit statistics");
    for (const auto& st : stats)
        if (st.weight.size() != units)
            throw ConfigError("importance: unit statistics do not match the schema");

    ImportanceReport rep;
    rep.schema = schema;
    rep.n_blocks = cfg.n_blocks;
    rep.factor_contrib = Tensor({experts, units});
    rep.param_counts.reserve(units);
    rep.importance.assign(units, 0.0);

    double total = 0.0;
    for (std::size_t u = 0; u < units; ++u) {
        const double n = static_cast<double>(param_count(cfg, schema[u]));
        rep.param_counts.push_back(static_cast<std::size_t>(n));
        double raw = 0.0;
        for (std::size_t k = 0; k < experts; ++k) {
            const double contrib = std::fabs(coeffs.alpha.at(k, u)) * stats[k].weight[u];
            rep.factor_contrib.at(k, u) = contrib;
            raw += contrib;
        }
        rep.importance[u] = raw * n;
        total += rep.importance[u];
    }
    if (total == 0.0)
        throw NumericError("importance: all-zero raw importance, normalization undefined");
    for (auto& v : rep.importance) v /= total;

    for (std::size_t u = 0; u < units; ++u) {
        const auto stage = static_cast<std::size_t>(unit_stage(schema[u], cfg.n_blocks));
        const auto kind = static_cast<std::size_t>(schema[u].kind);
        rep.kind_share[kind] += rep.importance[u];
        rep.stage_share[stage] += rep.importance[u];
        rep.stage_kind[stage][kind] += rep.importance[u];
    }
    return rep;
}

namespace {

std::vector<std::size_t> near_equal_bounds(std::size_t n, std::size_t m) {
    // first (n mod m) chunks are one element longer
    std::vector<std::size_t> bounds(m + 1, 0);
    const std::size_t small = n / m, rem = n % m;
    for (std::size_t s = 0; s < m; ++s)
        bounds[s + 1] = bounds[s] + small + (s < rem ? 1 : 0);
    return bounds;
}

}  // namespace

ChunkPlan allocate_chunks(const ImportanceReport& report, double budget, double steepness) {
    if (!(budget > 0.0)) throw ConfigError("chunk allocation: budget must be positive");
    if (!(steepness >= 0.0)) throw ConfigError("chunk allocation: steepness must be >= 0");
    const std::size_t units = report.importance.size();

    ChunkPlan plan;
    plan.budget = budget;
    plan.steepness = steepness;
    plan.chunk_counts.resize(units);
    plan.bounds.resize(units);

    double denom = 0.0;
    std::vector<double> w(units);
    for (std::size_t u = 0; u < units; ++u) {
        // pow(0,0) = 1, so steepness 0 yields uniform weights
        w[u] = std::pow(report.importance[u], steepness);
        denom += w[u];
    }
    std::size_t assigned = 0;
    for (std::size_t u = 0; u < units; ++u) {
        const double share = budget * w[u] / denom;
        plan.chunk_counts[u] = static_cast<std::size_t>(std::floor(share));
        assigned += plan.chunk_counts[u];
    }
    // floating-point drift guard; shares mathematically sum to the budget
    while (static_cast<double>(assigned) > budget) {
        std::size_t victim = units;
        for (std::size_t u = 0; u < units; ++u) {
            if (plan.chunk_counts[u] == 0) continue;
            if (victim == units || report.importance[u] < report.importance[victim]) victim = u;
        }
        if (victim == units) break;
        --plan.chunk_counts[victim];
        --assigned;
    }

    for (std::size_t u = 0; u < units; ++u)
        if (plan.chunk_counts[u] >= 1)
            plan.bounds[u] = near_equal_bounds(report.param_counts[u], plan.chunk_counts[u]);
    return plan;
}

ChunkPlan uniform_chunk_plan(std::span<const std::size_t> unit_sizes,
                             std::size_t chunks_per_unit, double steepness) {
    if (chunks_per_unit == 0)
        throw ConfigError("uniform chunk plan: chunk count must be >= 1");
    ChunkPlan plan;
    plan.budget = static_cast<double>(chunks_per_unit * unit_sizes.size());
    plan.steepness = steepness;
    plan.chunk_counts.assign(unit_sizes.size(), chunks_per_unit);
    plan.bounds.reserve(unit_sizes.size());
    for (std::size_t n : unit_sizes) plan.bounds.push_back(near_equal_bounds(n, chunks_per_unit));
    return plan;
}

namespace {

void check_plan_coeffs(const ModelParams& base, std::span<const TaskVector> tvs,
                       const ChunkPlan& plan, const ChunkCoefficients& coeffs) {
    const std::size_t units = base.unit_count();
    if (plan.chunk_counts.size() != units || plan.bounds.size() != units)
        throw ConfigError("chunk plan does not match the unit schema");
    if (coeffs.experts() != tvs.size() || coeffs.units() != units)
        throw ConfigError("chunk coefficients do not match experts/units");
    if (coeffs.chunk.size() != tvs.size())
        throw ConfigError("chunk coefficients: missing per-expert entries");
    for (std::size_t u = 0; u < units; ++u) {
        const std::size_t m = plan.chunk_counts[u];
        if (m == 0) {
            if (!plan.bounds[u].empty())
                throw ConfigError("chunk plan: frozen unit with bounds");
            continue;
        }
        if (plan.bounds[u].size() != m + 1 || plan.bounds[u].front() != 0 ||
            plan.bounds[u].back() != base.unit(u).size())
            throw ConfigError("chunk plan: bounds do not partition unit " +
                              unit_name(base.schema()[u]));
        for (std::size_t s = 0; s < m; ++s)
            if (plan.bounds[u][s] > plan.bounds[u][s + 1])
                throw ConfigError("chunk plan: decreasing bounds");
        for (std::size_t k = 0; k < tvs.size(); ++k)
            if (coeffs.chunk[k][u].size() != m)
                throw ConfigError("chunk coefficients: wrong chunk count for unit " +
                                  unit_name(base.schema()[u]));
    }
}

}  // namespace

ModelParams apply_chunk_coefficients(const ModelParams& base, std::span<const TaskVector> tvs,
                                     const ChunkPlan& plan, const ChunkCoefficients& coeffs) {
    check_task_vectors(base, tvs);
    check_plan_coeffs(base, tvs, plan, coeffs);
    coeffs.frozen.ensure_finite("frozen coefficients");

    ModelParams merged = base;
    const std::size_t units = base.unit_count();
#pragma omp parallel for schedule(static)
    for (std::size_t u = 0; u < units; ++u) {
        Tensor delta(base.unit(u).shape());
        bool touched = false;
        const std::size_t m = plan.chunk_counts[u];
        for (std::size_t k = 0; k < tvs.size(); ++k) {
            const Tensor& tau = tvs[k].deltas[u];
            if (m == 0) {
                const double a = coeffs.frozen.at(k, u);
                if (a != 0.0) {
                    kernels::serial::axpy(a, tau.data(), delta.data(), delta.size());
                    touched = true;
                }
            } else {
                for (std::size_t s = 0; s < m; ++s) {
                    const double a = coeffs.chunk[k][u][s];
                    const std::size_t lo = plan.bounds[u][s], hi = plan.bounds[u][s + 1];
                    if (a != 0.0 && hi > lo) {
                        kernels::serial::axpy(a, tau.data() + lo, delta.data() + lo, hi - lo);
                        touched = true;
                    }
                }
            }
        }
        if (touched)
            kernels::serial::add(base.unit(u).data(), delta.data(), merged.unit(u).data(),
                                 delta.size());
    }
    for (std::size_t u = 0; u < units; ++u) merged.unit(u).ensure_finite("merged unit");
    return merged;
}

namespace {

// Trainable layout: units in canonical order; within a unit, chunk-major
// then expert: packed[offset_u + s*K + k].
class ChunkMixer : public align::Mixer {
public:
    ChunkMixer(const ModelParams& base, std::span<const TaskVector> tvs, const ChunkPlan& plan,
               const Tensor& frozen, std::span<const double> prior)
        : base_(&base), tvs_(tvs), plan_(&plan) {
        const std::size_t experts = tvs.size();
        offsets_.resize(base.unit_count(), 0);
        std::size_t total = 0;
        for (std::size_t u = 0; u < base.unit_count(); ++u) {
            offsets_[u] = total;
            total += plan.chunk_counts[u] * experts;
        }
        size_ = total;

        anchor_ = Tensor({total});
        std::size_t pos = 0;
        for (std::size_t u = 0; u < base.unit_count(); ++u)
            for (std::size_t s = 0; s < plan.chunk_counts[u]; ++s)
                for (std::size_t k = 0; k < experts; ++k) anchor_[pos++] = prior[k];
        inv_scale_ = 1.0 / (plan.budget * static_cast<double>(experts));

        // merged tensors of frozen units are constants of the optimization
        frozen_merged_.resize(base.unit_count());
        for (std::size_t u = 0; u < base.unit_count(); ++u) {
            if (plan.chunk_counts[u] != 0) continue;
            Tensor t = base.unit(u);
            for (std::size_t k = 0; k < experts; ++k) {
                const double a = frozen.at(k, u);
                if (a != 0.0)
                    kernels::serial::axpy(a, tvs[k].deltas[u].data(), t.data(), t.size());
            }
            frozen_merged_[u] = std::move(t);
        }
    }

    std::size_t packed_size() const { return size_; }
    std::span<const std::size_t> offsets() const { return offsets_; }

    std::vector<std::size_t> trainable_shape() const override { return {size_}; }

    std::vector<Var> mixed_units(Tape& tape, Var trainable) const override {
        std::vector<Var> units;
        units.reserve(base_->unit_count());
        std::vector<const Tensor*> taus(tvs_.size());
        for (std::size_t u = 0; u < base_->unit_count(); ++u) {
            if (plan_->chunk_counts[u] == 0) {
                units.push_back(tape.constant(frozen_merged_[u]));
                continue;
            }
            for (std::size_t k = 0; k < tvs_.size(); ++k) taus[k] = &tvs_[k].deltas[u];
            units.push_back(tape.mix_unit_chunked(trainable, offsets_[u], plan_->bounds[u],
                                                  base_->unit(u), taus));
        }
        return units;
    }

    const Tensor& reg_anchor() const override { return anchor_; }
    double reg_inv_scale() const override { return inv_scale_; }

private:
    const ModelParams* base_;
    std::span<const TaskVector> tvs_;
    const ChunkPlan* plan_;
    std::vector<std::size_t> offsets_;
    std::vector<Tensor> frozen_merged_;
    Tensor anchor_;
    double inv_scale_ = 0.0;
    std::size_t size_ = 0;
};

Tensor pack_from_stage1(const ChunkMixer& mixer, const ChunkPlan& plan,
                        const LayerCoefficients& stage1) {
    Tensor packed({mixer.packed_size()});
    std::size_t pos = 0;
    for (std::size_t u = 0; u < plan.chunk_counts.size(); ++u)
        for (std::size_t s = 0; s < plan.chunk_counts[u]; ++s)
            for (std::size_t k = 0; k < stage1.experts(); ++k)
                packed[pos++] = stage1.alpha.at(k, u);
    return packed;
}

ChunkCoefficients unpack(const Tensor& packed, const ChunkPlan& plan, const Tensor& frozen,
                         std::vector<double> prior) {
    const std::size_t experts = frozen.rows();
    ChunkCoefficients out;
    out.frozen = frozen;
    out.prior = std::move(prior);
    out.chunk.assign(experts, std::vector<std::vector<double>>(plan.chunk_counts.size()));
    std::size_t pos = 0;
    for (std::size_t u = 0; u < plan.chunk_counts.size(); ++u) {
        for (std::size_t k = 0; k < experts; ++k)
            out.chunk[k][u].resize(plan.chunk_counts[u]);
        for (std::size_t s = 0; s < plan.chunk_counts[u]; ++s)
            for (std::size_t k = 0; k < experts; ++k) out.chunk[k][u][s] = packed[pos++];
    }
    return out;
}

}  // namespace

ChunkFitResult fit_pp_with_plan(const ModelParams& base, std::span<const TaskVector> tvs,
                                std::span<const ModelParams> experts,
                                const CalibrationSet& calib, const AlignConfig& cfg,
                                const LayerCoefficients& stage1, ChunkPlan plan) {
    align::Problem problem = align::make_problem(base, tvs, experts, calib, cfg);
    if (stage1.experts() != tvs.size() || stage1.units() != base.unit_count())
        throw ConfigError("fit_pp: stage-1 coefficient shape mismatch");
    if (plan.chunk_counts.size() != base.unit_count())
        throw ConfigError("fit_pp: chunk plan does not match the unit schema");

    ChunkMixer mixer(base, tvs, plan, stage1.alpha, stage1.prior);
    Tensor init = pack_from_stage1(mixer, plan, stage1);
    auto [x, log] = align::minimize(problem, mixer, std::move(init));

    ChunkFitResult result;
    result.coeffs = unpack(x, plan, stage1.alpha, stage1.prior);
    result.plan = std::move(plan);
    result.log = std::move(log);
    return result;
}

ChunkFitResult fit_pp(const ModelParams& base, std::span<const TaskVector> tvs,
                      std::span<const ModelParams> experts, const CalibrationSet& calib,
                      const AlignConfig& cfg, const LayerCoefficients& stage1, double budget,
                      double steepness) {
    std::vector<UnitStats> stats;
    stats.reserve(tvs.size());
    for (const auto& tv : tvs) stats.push_back(unit_stats(tv));
    ImportanceReport report = compute_importance(base.config(), stage1, stats);
    ChunkPlan plan = allocate_chunks(report, budget, steepness);
    return fit_pp_with_plan(base, tvs, experts, calib, cfg, stage1, std::move(plan));
}

}  // namespace merging
