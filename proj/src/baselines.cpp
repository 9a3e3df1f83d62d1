#include "merging/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "merging/kernels.hpp"
#include "merging/rng.hpp"

namespace merging {

namespace {

// theta = base + sum_k scale(k) * tau_k, unit by unit. Units where every
// scale is zero keep base bitwise.
template <class ScaleFn>
ModelParams accumulate_merge(const ModelParams& base, std::span<const TaskVector> tvs,
                             ScaleFn&& scale_of) {
    ModelParams merged = base;
    const std::size_t units = base.unit_count();
#pragma omp parallel for schedule(static)
    for (std::size_t u = 0; u < units; ++u) {
        Tensor delta(base.unit(u).shape());
        bool touched = false;
        for (std::size_t k = 0; k < tvs.size(); ++k) {
            const double s = scale_of(k, u);
            if (s != 0.0) {
                kernels::serial::axpy(s, tvs[k].deltas[u].data(), delta.data(), delta.size());
                touched = true;
            }
        }
        if (touched)
            kernels::serial::add(base.unit(u).data(), delta.data(), merged.unit(u).data(),
                                 delta.size());
    }
    for (std::size_t u = 0; u < units; ++u) merged.unit(u).ensure_finite("merge result");
    return merged;
}

}  // namespace

ModelParams merge_weight_average(const ModelParams& base, std::span<const TaskVector> tvs) {
    check_task_vectors(base, tvs);
    const double inv = 1.0 / static_cast<double>(tvs.size());
    return accumulate_merge(base, tvs, [inv](std::size_t, std::size_t) { return inv; });
}

ModelParams merge_task_arithmetic(const ModelParams& base, std::span<const TaskVector> tvs,
                                  const TAConfig& cfg) {
    check_task_vectors(base, tvs);
    if (cfg.lambdas.size() != tvs.size())
        throw ConfigError("task arithmetic: need one lambda per expert, got " +
                          std::to_string(cfg.lambdas.size()) + " for " +
                          std::to_string(tvs.size()));
    for (double l : cfg.lambdas)
        if (!std::isfinite(l)) throw ConfigError("task arithmetic: non-finite lambda");
    return accumulate_merge(base, tvs,
                            [&](std::size_t k, std::size_t) { return cfg.lambdas[k]; });
}

TaskVector dare_preprocess(const TaskVector& tv, const DareConfig& cfg) {
    if (!(cfg.drop_prob >= 0.0 && cfg.drop_prob < 1.0))
        throw ConfigError("dare: drop probability must lie in [0,1)");
    TaskVector out = tv;
    if (cfg.drop_prob == 0.0) return out;
    const double rescale = 1.0 / (1.0 - cfg.drop_prob);
    const std::size_t units = tv.unit_count();
#pragma omp parallel for schedule(static)
    for (std::size_t u = 0; u < units; ++u) {
        Rng rng(cfg.seed ^ fnv1a("dare-unit-" + std::to_string(u)));
        Tensor& d = out.deltas[u];
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (rng.uniform() < cfg.drop_prob)
                d[i] = 0.0;
            else
                d[i] *= rescale;
        }
    }
    return out;
}

ModelParams merge_ties(const ModelParams& base, std::span<const TaskVector> tvs,
                       const TiesConfig& cfg) {
    check_task_vectors(base, tvs);
    if (!(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0))
        throw ConfigError("ties: keep fraction must lie in (0,1]");
    const std::size_t experts = tvs.size();
    ModelParams merged = base;
    const std::size_t units = base.unit_count();
#pragma omp parallel for schedule(static)
    for (std::size_t u = 0; u < units; ++u) {
        const std::size_t n = base.unit(u).size();
        const std::size_t keep =
            std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(
                                         cfg.keep_fraction * static_cast<double>(n))));

        // trim per expert: indices sorted by magnitude (desc), index breaks ties
        std::vector<std::vector<double>> trimmed(experts, std::vector<double>(n, 0.0));
        std::vector<std::size_t> order(n);
        for (std::size_t k = 0; k < experts; ++k) {
            const Tensor& d = tvs[k].deltas[u];
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return std::fabs(d[a]) > std::fabs(d[b]);
            });
            for (std::size_t i = 0; i < keep; ++i) trimmed[k][order[i]] = d[order[i]];
        }

        // elect sign and merge agreeing values
        Tensor tau(base.unit(u).shape());
        bool touched = false;
        for (std::size_t i = 0; i < n; ++i) {
            double total = 0.0;
            for (std::size_t k = 0; k < experts; ++k) total += trimmed[k][i];
            if (total == 0.0) continue;  // exact-zero vote, entry stays 0
            const double elected = total > 0.0 ? 1.0 : -1.0;
            double acc = 0.0;
            std::size_t count = 0;
            for (std::size_t k = 0; k < experts; ++k) {
                const double v = trimmed[k][i];
                if ((elected > 0.0 && v > 0.0) || (elected < 0.0 && v < 0.0)) {
                    acc += v;
                    ++count;
                }
            }
            if (count > 0) {
                tau[i] = acc / static_cast<double>(count);
                touched = true;
            }
        }
        if (touched && cfg.scale != 0.0) {
            Tensor scaled(tau.shape());
            kernels::serial::scale(tau.data(), cfg.scale, scaled.data(), tau.size());
            kernels::serial::add(base.unit(u).data(), scaled.data(), merged.unit(u).data(),
                                 scaled.size());
        }
    }
    for (std::size_t u = 0; u < units; ++u) merged.unit(u).ensure_finite("ties result");
    return merged;
}

}  // namespace merging
