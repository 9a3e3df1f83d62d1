#pragma once

// Small model fixtures shared across test suites.

#include "merging/task_vectors.hpp"

namespace fixtures {

inline merging::ModelConfig tiny_config(std::size_t blocks = 2) {
    merging::ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = blocks;
    cfg.d_mlp = 12;
    cfg.max_seq_len = 10;
    return cfg;
}

inline merging::ModelParams random_model(const merging::ModelConfig& cfg, std::uint64_t seed) {
    return merging::ModelParams::random_init(cfg, seed, 0.3);
}

// base plus K random experts derived from it
struct Family {
    merging::ModelParams base;
    std::vector<merging::ModelParams> experts;
    std::vector<merging::TaskVector> tvs;
};

inline Family make_family(const merging::ModelConfig& cfg, std::size_t experts,
                          std::uint64_t seed) {
    Family f{random_model(cfg, seed), {}, {}};
    for (std::size_t k = 0; k < experts; ++k) {
        merging::ModelParams e = merging::ModelParams::random_init(cfg, seed + 100 + k, 0.3);
        // keep experts near the base, like fine-tuning would
        for (std::size_t u = 0; u < e.unit_count(); ++u)
            for (std::size_t i = 0; i < e.unit(u).size(); ++i)
                e.unit(u)[i] = f.base.unit(u)[i] + 0.2 * e.unit(u)[i];
        f.experts.push_back(std::move(e));
    }
    for (std::size_t k = 0; k < experts; ++k)
        f.tvs.push_back(merging::compute_task_vector(f.base, f.experts[k],
                                                     "expert" + std::to_string(k)));
    return f;
}

}  // namespace fixtures
