#include "merging/task_vectors.hpp"

#include "merging/kernels.hpp"

namespace merging {

TaskVector compute_task_vector(const ModelParams& base, const ModelParams& expert,
                               std::string expert_id) {
    if (!base.same_schema(expert))
        throw ConfigError("task vector: base and expert have different unit schemas");
    TaskVector tv;
    tv.expert_id = std::move(expert_id);
    tv.base_fingerprint = base.fingerprint();
    tv.expert_fingerprint = expert.fingerprint();
    tv.deltas.reserve(base.unit_count());
    for (std::size_t u = 0; u < base.unit_count(); ++u) {
        Tensor d(base.unit(u).shape());
        kernels::sub(expert.unit(u).data(), base.unit(u).data(), d.data(), d.size());
        tv.deltas.push_back(std::move(d));
    }
    return tv;
}

UnitStats unit_stats(const TaskVector& tv) {
    if (tv.deltas.empty()) throw ConfigError("unit_stats on empty task vector");
    UnitStats st;
    st.mean_abs.reserve(tv.unit_count());
    st.param_counts.reserve(tv.unit_count());
    double total = 0.0;
    for (const auto& d : tv.deltas) {
        const double m = kernels::abs_mean(d.data(), d.size());
        st.mean_abs.push_back(m);
        st.param_counts.push_back(d.size());
        total += m;
    }
    if (total == 0.0)
        throw NumericError("unit_stats: all-zero task vector, weight normalization undefined");
    st.weight.reserve(tv.unit_count());
    for (double m : st.mean_abs) st.weight.push_back(m / total);
    return st;
}

void check_task_vectors(const ModelParams& base, std::span<const TaskVector> tvs) {
    if (tvs.empty()) throw ConfigError("at least one task vector is required");
    const std::uint64_t fp = base.fingerprint();
    for (const auto& tv : tvs) {
        if (tv.unit_count() != base.unit_count())
            throw ConfigError("task vector unit schema does not match the base model");
        for (std::size_t u = 0; u < tv.unit_count(); ++u)
            if (!tv.deltas[u].same_shape(base.unit(u)))
                throw ConfigError("task vector unit " + unit_name(base.schema()[u]) +
                                  " has a mismatched shape");
        if (tv.base_fingerprint != fp)
            throw ConfigError("task vector for '" + tv.expert_id +
                              "' was built from a different base model");
    }
}

}  // namespace merging
