#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "fixtures.hpp"
#include "merging/reporting.hpp"
#include "merging/rng.hpp"

using namespace merging;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

ImportanceReport uniform_block_report(const ModelConfig& cfg) {
    // all mass spread uniformly over block units, none on specials
    ImportanceReport rep;
    rep.schema = unit_schema(cfg);
    rep.n_blocks = cfg.n_blocks;
    const std::size_t block_units = cfg.n_blocks * 9;
    for (const auto& id : rep.schema) {
        rep.param_counts.push_back(param_count(cfg, id));
        rep.importance.push_back(id.block >= 0 ? 1.0 / static_cast<double>(block_units)
                                               : 0.0);
    }
    rep.factor_contrib = Tensor({1, rep.schema.size()});
    for (std::size_t u = 0; u < rep.schema.size(); ++u) {
        const auto stage = static_cast<std::size_t>(unit_stage(rep.schema[u], cfg.n_blocks));
        const auto kind = static_cast<std::size_t>(rep.schema[u].kind);
        rep.kind_share[kind] += rep.importance[u];
        rep.stage_share[stage] += rep.importance[u];
        rep.stage_kind[stage][kind] += rep.importance[u];
    }
    return rep;
}

double cell(const Table& t, const std::string& row_label, const std::string& column) {
    std::size_t col = t.columns.size();
    for (std::size_t c = 0; c < t.columns.size(); ++c)
        if (t.columns[c] == column) col = c;
    REQUIRE(col < t.columns.size());
    for (const auto& row : t.rows)
        if (row[0] == row_label) return std::stod(row[col]);
    REQUIRE(false);
    return 0.0;
}

EvalResult make_result(std::vector<std::pair<std::string, double>> accs) {
    EvalResult r;
    double total = 0.0;
    for (auto& [task, acc] : accs) {
        r.per_task.push_back({task, acc, 64});
        total += acc;
    }
    r.macro_average = total / static_cast<double>(accs.size());
    return r;
}

}  // namespace

TEST_CASE("stage table for a uniform block distribution") {
    ModelConfig cfg;  // 4 blocks: early 1, middle 1, late 2
    ImportanceReport rep = uniform_block_report(cfg);
    ImportanceTables tables = importance_tables(rep);

    CHECK(cell(tables.by_stage, "early", "total") == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(cell(tables.by_stage, "middle", "total") == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(cell(tables.by_stage, "late", "total") == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(cell(tables.by_stage, "special", "total") == doctest::Approx(0.0));
    CHECK(cell(tables.by_stage, "total", "total") == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("point mass lands in the late stage") {
    ModelConfig cfg;
    ImportanceReport rep;
    rep.schema = unit_schema(cfg);
    rep.n_blocks = cfg.n_blocks;
    for (const auto& id : rep.schema) {
        rep.param_counts.push_back(param_count(cfg, id));
        rep.importance.push_back(0.0);
    }
    // all importance on the last block's down-projection
    for (std::size_t u = 0; u < rep.schema.size(); ++u)
        if (rep.schema[u].block == 3 && rep.schema[u].kind == UnitKind::mlp_down)
            rep.importance[u] = 1.0;
    rep.factor_contrib = Tensor({1, rep.schema.size()});
    for (std::size_t u = 0; u < rep.schema.size(); ++u) {
        const auto stage = static_cast<std::size_t>(unit_stage(rep.schema[u], cfg.n_blocks));
        const auto kind = static_cast<std::size_t>(rep.schema[u].kind);
        rep.stage_share[stage] += rep.importance[u];
        rep.kind_share[kind] += rep.importance[u];
        rep.stage_kind[stage][kind] += rep.importance[u];
    }

    ImportanceTables tables = importance_tables(rep);
    CHECK(cell(tables.by_stage, "late", "total") == doctest::Approx(1.0));
    CHECK(cell(tables.by_stage, "late", "mlp.down") == doctest::Approx(1.0));
    CHECK(cell(tables.by_stage, "early", "total") == doctest::Approx(0.0));
}

TEST_CASE("results table") {
    SUBCASE("single method single task") {
        std::vector<std::pair<std::string, EvalResult>> rows{
            {"base", make_result({{"modadd", 0.5}})}};
        Table t = results_table(rows);
        REQUIRE(t.columns == std::vector<std::string>{"method", "modadd", "avg"});
        REQUIRE(t.rows.size() == 1);
        CHECK(t.rows[0][1] == t.rows[0][2]);
    }
    SUBCASE("avg column equals the unweighted mean") {
        // full-precision table: cells round-trip exactly
        std::vector<std::pair<std::string, EvalResult>> rows{
            {"a", make_result({{"t0", 0.125}, {"t1", 0.75}, {"t2", 0.6}})}};
        Table t = results_table(rows, /*raw=*/true);
        const double avg = std::stod(t.rows[0][4]);
        CHECK(std::fabs(avg - (0.125 + 0.75 + 0.6) / 3.0) <= 1e-12);
        // default 6-significant-digit table agrees to formatting precision
        Table t6 = results_table(rows);
        CHECK(std::fabs(std::stod(t6.rows[0][4]) - (0.125 + 0.75 + 0.6) / 3.0) <= 1e-6);
    }
    SUBCASE("mismatched task sets are rejected") {
        std::vector<std::pair<std::string, EvalResult>> rows{
            {"a", make_result({{"t0", 0.5}})},
            {"b", make_result({{"t0", 0.5}, {"t1", 0.5}})}};
        CHECK_THROWS_AS((void)results_table(rows), ConfigError);
    }
}

TEST_CASE("number formatting is locale independent") {
    CHECK(format_number(0.125) == "0.125");
    CHECK(format_number(1234567.0) == "1.23457e+06");
    CHECK(format_number(1.0 / 3.0) == "0.333333");
    CHECK(format_number(1.0 / 3.0, true) == "0.3333333333333333");
    CHECK(format_number(-41.5) == "-41.5");
    CHECK(format_number(0.0) == "0");
}

TEST_CASE("emission is byte-identical across runs") {
    const std::string dir = (std::filesystem::temp_directory_path() /
                             ("report_test_" + std::to_string(::getpid())))
                                .string();
    std::filesystem::create_directories(dir);

    ModelConfig cfg;
    ImportanceReport rep = uniform_block_report(cfg);
    auto paths1 = emit_importance_tables(rep, dir);
    std::vector<std::string> first;
    for (const auto& p : paths1) first.push_back(slurp(p));
    auto paths2 = emit_importance_tables(rep, dir);
    for (std::size_t i = 0; i < paths2.size(); ++i) CHECK(slurp(paths2[i]) == first[i]);

    std::vector<std::pair<std::string, EvalResult>> rows{
        {"base", make_result({{"modadd", 0.25}, {"parity", 0.5}})},
        {"merged", make_result({{"modadd", 0.75}, {"parity", 0.875}})}};
    auto r1 = emit_results_table(rows, dir);
    const std::string csv = slurp(r1[0]);
    const std::string txt = slurp(r1[1]);
    auto r2 = emit_results_table(rows, dir);
    CHECK(slurp(r2[0]) == csv);
    CHECK(slurp(r2[1]) == txt);
    CHECK(csv.find(',') != std::string::npos);
    CHECK(csv.find("0.875") != std::string::npos);

    std::filesystem::remove_all(dir);
}

TEST_CASE("train log table covers every step plus the final row") {
    TrainLog log;
    log.steps.resize(3);
    for (std::size_t s = 0; s < 3; ++s) {
        log.steps[s].total = static_cast<double>(s);
        log.steps[s].hidden_per_task = {0.1, 0.2};
        log.steps[s].logit_per_task = {0.3, 0.4};
    }
    log.final_record = log.steps.back();
    Table t = train_log_table(log);
    CHECK(t.rows.size() == 4);
    CHECK(t.rows.back()[0] == "final");
    CHECK(t.columns.size() == 4 + 4);
}
