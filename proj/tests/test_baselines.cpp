#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "merging/baselines.hpp"
#include "merging/rng.hpp"
#include "oracles.hpp"

using namespace merging;

TEST_CASE("weight average") {
    auto cfg = fixtures::tiny_config();
    SUBCASE("average of one is the expert") {
        auto f = fixtures::make_family(cfg, 1, 1);
        ModelParams m = merge_weight_average(f.base, f.tvs);
        for (std::size_t u = 0; u < m.unit_count(); ++u)
            for (std::size_t i = 0; i < m.unit(u).size(); ++i)
                CHECK(std::fabs(m.unit(u)[i] - f.experts[0].unit(u)[i]) <= 1e-15);
    }
    SUBCASE("opposite vectors cancel back to the base") {
        auto f = fixtures::make_family(cfg, 1, 2);
        TaskVector neg = f.tvs[0];
        neg.expert_id = "neg";
        for (auto& d : neg.deltas)
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = -d[i];
        const TaskVector tvs[] = {f.tvs[0], neg};
        ModelParams m = merge_weight_average(f.base, tvs);
        for (std::size_t u = 0; u < m.unit_count(); ++u) CHECK(m.unit(u) == f.base.unit(u));
    }
    SUBCASE("three experts against the elementwise oracle") {
        auto f = fixtures::make_family(cfg, 3, 3);
        ModelParams m = merge_weight_average(f.base, f.tvs);
        const double inv = 1.0 / 3.0;
        for (std::size_t u = 0; u < m.unit_count(); ++u)
            for (std::size_t i = 0; i < m.unit(u).size(); ++i) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 3; ++k) acc += inv * f.tvs[k].deltas[u][i];
                CHECK(m.unit(u)[i] == f.base.unit(u)[i] + acc);
            }
    }
}

TEST_CASE("task arithmetic") {
    auto cfg = fixtures::tiny_config();
    auto f = fixtures::make_family(cfg, 2, 4);
    SUBCASE("all-zero lambdas reproduce the base exactly") {
        ModelParams m = merge_task_arithmetic(f.base, f.tvs, {{0.0, 0.0}});
        for (std::size_t u = 0; u < m.unit_count(); ++u) CHECK(m.unit(u) == f.base.unit(u));
        const std::vector<int> toks{1, 5, 2};
        CHECK(forward(m, toks).logits == forward(f.base, toks).logits);
    }
    SUBCASE("single expert at lambda 1 is the expert") {
        auto f1 = fixtures::make_family(cfg, 1, 5);
        ModelParams m = merge_task_arithmetic(f1.base, f1.tvs, {{1.0}});
        for (std::size_t u = 0; u < m.unit_count(); ++u)
            for (std::size_t i = 0; i < m.unit(u).size(); ++i)
                CHECK(std::fabs(m.unit(u)[i] - f1.experts[0].unit(u)[i]) <= 1e-15);
    }
    SUBCASE("half-half equals the two-expert weight average bitwise") {
        ModelParams ta = merge_task_arithmetic(f.base, f.tvs, {{0.5, 0.5}});
        ModelParams wa = merge_weight_average(f.base, f.tvs);
        for (std::size_t u = 0; u < ta.unit_count(); ++u) CHECK(ta.unit(u) == wa.unit(u));
    }
    SUBCASE("linearity by superposition") {
        ModelParams a = merge_task_arithmetic(f.base, f.tvs, {{0.3, 0.0}});
        ModelParams b = merge_task_arithmetic(f.base, f.tvs, {{0.0, 0.9}});
        ModelParams ab = merge_task_arithmetic(f.base, f.tvs, {{0.3, 0.9}});
        for (std::size_t u = 0; u < ab.unit_count(); ++u)
            for (std::size_t i = 0; i < ab.unit(u).size(); ++i) {
                const double sup = a.unit(u)[i] + b.unit(u)[i] - f.base.unit(u)[i];
                CHECK(ab.unit(u)[i] == doctest::Approx(sup).epsilon(1e-12));
            }
    }
    SUBCASE("lambda count mismatch") {
        CHECK_THROWS_AS((void)merge_task_arithmetic(f.base, f.tvs, {{1.0}}), ConfigError);
    }
}

TEST_CASE("dare preprocessing") {
    auto cfg = fixtures::tiny_config();
    auto f = fixtures::make_family(cfg, 1, 6);
    SUBCASE("p = 0 is the identity") {
        TaskVector out = dare_preprocess(f.tvs[0], {0.0, 42});
        for (std::size_t u = 0; u < out.unit_count(); ++u)
            CHECK(out.deltas[u] == f.tvs[0].deltas[u]);
    }
    SUBCASE("fixed seed is reproducible") {
        TaskVector a = dare_preprocess(f.tvs[0], {0.5, 7});
        TaskVector b = dare_preprocess(f.tvs[0], {0.5, 7});
        for (std::size_t u = 0; u < a.unit_count(); ++u) CHECK(a.deltas[u] == b.deltas[u]);
    }
    SUBCASE("survivors are rescaled, drops are exact zeros") {
        TaskVector out = dare_preprocess(f.tvs[0], {0.5, 11});
        const double rescale = 2.0;
        for (std::size_t u = 0; u < out.unit_count(); ++u)
            for (std::size_t i = 0; i < out.deltas[u].size(); ++i) {
                const double v = out.deltas[u][i];
                CHECK((v == 0.0 || v == f.tvs[0].deltas[u][i] * rescale));
            }
    }
    SUBCASE("exact zeros are preserved") {
        TaskVector tv = f.tvs[0];
        for (auto& d : tv.deltas)
            for (std::size_t i = 0; i < d.size(); i += 3) d[i] = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            TaskVector out = dare_preprocess(tv, {0.5, seed});
            for (std::size_t u = 0; u < out.unit_count(); ++u)
                for (std::size_t i = 0; i < out.deltas[u].size(); i += 3)
                    CHECK(out.deltas[u][i] == 0.0);
        }
    }
    SUBCASE("per-element mean over 1000 seeds stays near the original") {
        // small vector: the mean of 1000 Bernoulli draws has stddev
        // |tau|/sqrt(1000), so 5% is ~1.6 sigma per element
        TaskVector tv;
        tv.deltas = {Tensor({6}, {0.8, -1.3, 0.45, 2.2, -0.9, 0.0})};
        std::vector<double> mean(6, 0.0);
        for (std::uint64_t s = 0; s < 1000; ++s) {
            TaskVector out = dare_preprocess(tv, {0.5, 11000 + s});
            for (std::size_t i = 0; i < 6; ++i) mean[i] += out.deltas[0][i];
        }
        for (std::size_t i = 0; i < 6; ++i) {
            mean[i] /= 1000.0;
            if (std::fabs(tv.deltas[0][i]) > 1e-6)
                CHECK(std::fabs(mean[i] - tv.deltas[0][i]) / std::fabs(tv.deltas[0][i]) <=
                      0.05);
            else
                CHECK(mean[i] == 0.0);
        }
    }
    SUBCASE("drop probability bounds") {
        CHECK_THROWS_AS((void)dare_preprocess(f.tvs[0], {1.0, 0}), ConfigError);
        CHECK_THROWS_AS((void)dare_preprocess(f.tvs[0], {-0.1, 0}), ConfigError);
    }
}

namespace {

// independent step-by-step trim / elect sign / disjoint merge
ModelParams ties_oracle(const ModelParams& base, std::span<const TaskVector> tvs, double rho,
                        double lambda) {
    ModelParams out = base;
    for (std::size_t u = 0; u < base.unit_count(); ++u) {
        const std::size_t n = base.unit(u).size();
        const auto keep = std::min<std::size_t>(
            n, static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n))));
        std::vector<std::vector<double>> kept(tvs.size(), std::vector<double>(n, 0.0));
        for (std::size_t k = 0; k < tvs.size(); ++k) {
            std::vector<std::size_t> idx(n);
            std::iota(idx.begin(), idx.end(), 0);
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                const double fa = std::fabs(tvs[k].deltas[u][a]);
                const double fb = std::fabs(tvs[k].deltas[u][b]);
                if (fa != fb) return fa > fb;
                return a < b;
            });
            for (std::size_t i = 0; i < keep; ++i)
                kept[k][idx[i]] = tvs[k].deltas[u][idx[i]];
        }
        for (std::size_t i = 0; i < n; ++i) {
            double vote = 0.0;
            for (std::size_t k = 0; k < tvs.size(); ++k) vote += kept[k][i];
            double merged = 0.0;
            if (vote != 0.0) {
                const double sign = vote > 0.0 ? 1.0 : -1.0;
                double acc = 0.0;
                std::size_t cnt = 0;
                for (std::size_t k = 0; k < tvs.size(); ++k) {
                    if (kept[k][i] * sign > 0.0) {
                        acc += kept[k][i];
                        ++cnt;
                    }
                }
                if (cnt) merged = acc / static_cast<double>(cnt);
            }
            if (merged != 0.0) out.unit(u)[i] = base.unit(u)[i] + lambda * merged;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("ties merging") {
    auto cfg = fixtures::tiny_config(1);
    SUBCASE("single expert with full keep passes through") {
        auto f = fixtures::make_family(cfg, 1, 7);
        ModelParams m = merge_ties(f.base, f.tvs, {1.0, 1.0});
        for (std::size_t u = 0; u < m.unit_count(); ++u)
            for (std::size_t i = 0; i < m.unit(u).size(); ++i)
                CHECK(std::fabs(m.unit(u)[i] - f.experts[0].unit(u)[i]) <= 1e-15);
    }
    SUBCASE("perfect conflict collapses to the base") {
        auto f = fixtures::make_family(cfg, 1, 8);
        TaskVector neg = f.tvs[0];
        for (auto& d : neg.deltas)
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = -d[i];
        const TaskVector tvs[] = {f.tvs[0], neg};
        ModelParams m = merge_ties(f.base, tvs, {1.0, 1.0});
        for (std::size_t u = 0; u < m.unit_count(); ++u) CHECK(m.unit(u) == f.base.unit(u));
    }
    SUBCASE("three random experts match the step-by-step oracle exactly") {
        // small units so a unit stays under 100 elements
        ModelConfig small;
        small.vocab_size = 4;
        small.d_model = 4;
        small.n_heads = 2;
        small.n_blocks = 1;
        small.d_mlp = 5;
        small.max_seq_len = 6;
        for (std::uint64_t seed = 20; seed < 26; ++seed) {
            auto f = fixtures::make_family(small, 3, seed);
            for (double rho : {0.2, 0.5, 1.0}) {
                ModelParams got = merge_ties(f.base, f.tvs, {rho, 0.7});
                ModelParams want = ties_oracle(f.base, f.tvs, rho, 0.7);
                for (std::size_t u = 0; u < got.unit_count(); ++u)
                    CHECK(got.unit(u) == want.unit(u));
            }
        }
    }
    SUBCASE("zero-sum positions keep the base value") {
        auto f = fixtures::make_family(cfg, 1, 9);
        TaskVector a = f.tvs[0];
        TaskVector b = f.tvs[0];
        for (auto& d : b.deltas)
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = -d[i];
        // a third expert with zeros everywhere cannot break the ties
        TaskVector c = f.tvs[0];
        for (auto& d : c.deltas)
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.0;
        const TaskVector tvs[] = {a, b, c};
        ModelParams m = merge_ties(f.base, tvs, {1.0, 2.5});
        for (std::size_t u = 0; u < m.unit_count(); ++u) CHECK(m.unit(u) == f.base.unit(u));
    }
    SUBCASE("merged sign agrees with the elected sign") {
        auto f = fixtures::make_family(cfg, 3, 10);
        ModelParams m = merge_ties(f.base, f.tvs, {0.4, 1.0});
        for (std::size_t u = 0; u < m.unit_count(); ++u) {
            const std::size_t n = m.unit(u).size();
            const auto keep = static_cast<std::size_t>(
                std::ceil(0.4 * static_cast<double>(n)));
            // recompute trimmed vote per position
            std::vector<double> vote(n, 0.0);
            for (std::size_t k = 0; k < 3; ++k) {
                std::vector<std::size_t> idx(n);
                std::iota(idx.begin(), idx.end(), 0);
                std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
                    return std::fabs(f.tvs[k].deltas[u][x]) > std::fabs(f.tvs[k].deltas[u][y]);
                });
                for (std::size_t i = 0; i < keep && i < n; ++i)
                    vote[idx[i]] += f.tvs[k].deltas[u][idx[i]];
            }
            for (std::size_t i = 0; i < n; ++i) {
                const double merged = m.unit(u)[i] - f.base.unit(u)[i];
                if (merged > 0.0) CHECK(vote[i] > 0.0);
                if (merged < 0.0) CHECK(vote[i] < 0.0);
            }
        }
    }
    SUBCASE("config validation") {
        auto f = fixtures::make_family(cfg, 1, 11);
        CHECK_THROWS_AS((void)merge_ties(f.base, f.tvs, {0.0, 1.0}), ConfigError);
        CHECK_THROWS_AS((void)merge_ties(f.base, f.tvs, {1.5, 1.0}), ConfigError);
        CHECK_THROWS_AS((void)merge_ties(f.base, {}, {0.5, 1.0}), ConfigError);
    }
}
