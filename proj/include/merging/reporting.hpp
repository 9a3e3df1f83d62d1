#pragma once

#include <string>
#include <utility>
#include <vector>

#include "merging/expert_merging_pp.hpp"
#include "merging/task_suite.hpp"

namespace merging {

// Locale-independent formatting: '.' decimal separator, no grouping.
// Six significant digits by default; raw emits the shortest round-trip form.
std::string format_number(double v, bool raw = false);

struct Table {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
};

std::string to_csv(const Table& table);
// aligned columns for terminal output
std::string to_text(const Table& table);

struct ImportanceTables {
    Table by_stage;  // stage x submodule grid of summed normalized importance
    Table per_unit;  // raw per-unit dump with factor breakdown
};
ImportanceTables importance_tables(const ImportanceReport& report, bool raw = false);

// rows = methods, columns = tasks plus the unweighted macro average
Table results_table(std::span<const std::pair<std::string, EvalResult>> results,
                    bool raw = false);

Table train_log_table(const TrainLog& log, bool raw = false);

// atomic write via temp file + rename
void write_text_file(const std::string& path, const std::string& content);

// Convenience emitters; return the written paths.
std::vector<std::string> emit_importance_tables(const ImportanceReport& report,
                                                const std::string& out_dir, bool raw = false);
std::vector<std::string> emit_results_table(
    std::span<const std::pair<std::string, EvalResult>> results, const std::string& out_dir,
    const std::string& stem = "results", bool raw = false);

}  // namespace merging
