#include "merging/reporting.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace merging {

std::string format_number(double v, bool raw) {
    char buf[64];
    std::to_chars_result r =
        raw ? std::to_chars(buf, buf + sizeof buf, v)
            : std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 6);
    return std::string(buf, r.ptr);
}

namespace {

std::string csv_escape(const std::string& cell) {
    if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

}  // namespace

std::string to_csv(const Table& table) {
    std::string out;
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
        if (c) out.push_back(',');
        out += csv_escape(table.columns[c]);
    }
    out.push_back('\n');
    for (const auto& row : table.rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out.push_back(',');
            out += csv_escape(row[c]);
        }
        out.push_back('\n');
    }
    return out;
}

std::string to_text(const Table& table) {
    std::vector<std::size_t> width(table.columns.size(), 0);
    for (std::size_t c = 0; c < table.columns.size(); ++c)
        width[c] = table.columns[c].size();
    for (const auto& row : table.rows)
        for (std::size_t c = 0; c < row.size() && c < width.size(); ++c)
            width[c] = std::max(width[c], row[c].size());

    std::string out;
    const auto emit_row = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < width.size(); ++c) {
            const std::string& cell = c < row.size() ? row[c] : std::string();
            out += cell;
            if (c + 1 < width.size()) out.append(width[c] - cell.size() + 2, ' ');
        }
        out.push_back('\n');
    };
    emit_row(table.columns);
    std::vector<std::string> rule(width.size());
    for (std::size_t c = 0; c < width.size(); ++c) rule[c] = std::string(width[c], '-');
    emit_row(rule);
    for (const auto& row : table.rows) emit_row(row);
    return out;
}

ImportanceTables importance_tables(const ImportanceReport& report, bool raw) {
    ImportanceTables t;

    t.by_stage.name = "importance_by_stage";
    t.by_stage.columns = {"stage"};
    for (int k = 0; k < 12; ++k)
        t.by_stage.columns.push_back(unit_kind_name(static_cast<UnitKind>(k)));
    t.by_stage.columns.push_back("total");
    const Stage stages[] = {Stage::early, Stage::middle, Stage::late, Stage::special_};
    std::vector<double> col_total(12, 0.0);
    for (Stage s : stages) {
        std::vector<std::string> row{stage_name(s)};
        double total = 0.0;
        for (int k = 0; k < 12; ++k) {
            const double v = report.stage_kind[static_cast<std::size_t>(s)][k];
            col_total[k] += v;
            total += v;
            row.push_back(format_number(v, raw));
        }
        row.push_back(format_number(total, raw));
        t.by_stage.rows.push_back(std::move(row));
    }
    std::vector<std::string> totals{"total"};
    double grand = 0.0;
    for (int k = 0; k < 12; ++k) {
        totals.push_back(format_number(col_total[k], raw));
        grand += col_total[k];
    }
    totals.push_back(format_number(grand, raw));
    t.by_stage.rows.push_back(std::move(totals));

    t.per_unit.name = "importance_units";
    t.per_unit.columns = {"unit", "stage", "kind", "importance", "param_count"};
    const std::size_t experts = report.factor_contrib.size() ? report.factor_contrib.rows() : 0;
    for (std::size_t k = 0; k < experts; ++k)
        t.per_unit.columns.push_back("coeff_weight_expert" + std::to_string(k));
    for (std::size_t u = 0; u < report.schema.size(); ++u) {
        std::vector<std::string> row{
            unit_name(report.schema[u]),
            stage_name(unit_stage(report.schema[u], report.n_blocks)),
            unit_kind_name(report.schema[u].kind),
            format_number(report.importance[u], raw),
            std::to_string(report.param_counts[u]),
        };
        for (std::size_t k = 0; k < experts; ++k)
            row.push_back(format_number(report.factor_contrib.at(k, u), raw));
        t.per_unit.rows.push_back(std::move(row));
    }
    return t;
}

Table results_table(std::span<const std::pair<std::string, EvalResult>> results, bool raw) {
    if (results.empty()) throw ConfigError("results table: no results");
    Table t;
    t.name = "results";
    t.columns = {"method"};
    for (const auto& acc : results.front().second.per_task) t.columns.push_back(acc.task);
    t.columns.push_back("avg");
    for (const auto& [method, result] : results) {
        if (result.per_task.size() != results.front().second.per_task.size())
            throw ConfigError("results table: task sets differ between methods");
        std::vector<std::string> row{method};
        for (std::size_t i = 0; i < result.per_task.size(); ++i) {
            if (result.per_task[i].task != results.front().second.per_task[i].task)
                throw ConfigError("results table: task order differs between methods");
            row.push_back(format_number(result.per_task[i].accuracy, raw));
        }
        row.push_back(format_number(result.macro_average, raw));
        t.rows.push_back(std::move(row));
    }
    return t;
}

Table train_log_table(const TrainLog& log, bool raw) {
    Table t;
    t.name = "train_log";
    const std::size_t tasks = log.steps.empty() ? log.final_record.hidden_per_task.size()
                                                : log.steps.front().hidden_per_task.size();
    t.columns = {"step", "total", "alignment", "regularizer"};
    for (std::size_t k = 0; k < tasks; ++k) {
        t.columns.push_back("hidden_task" + std::to_string(k));
        t.columns.push_back("logit_task" + std::to_string(k));
    }
    const auto emit = [&](const std::string& label, const StepRecord& r) {
        std::vector<std::string> row{label, format_number(r.total, raw),
                                     format_number(r.alignment, raw),
                                     format_number(r.reg, raw)};
        for (std::size_t k = 0; k < tasks; ++k) {
            row.push_back(format_number(r.hidden_per_task[k], raw));
            row.push_back(format_number(r.logit_per_task[k], raw));
        }
        t.rows.push_back(std::move(row));
    };
    for (std::size_t s = 0; s < log.steps.size(); ++s) emit(std::to_string(s), log.steps[s]);
    emit("final", log.final_record);
    return t;
}

void write_text_file(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("short write to '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

std::vector<std::string> emit_importance_tables(const ImportanceReport& report,
                                                const std::string& out_dir, bool raw) {
    ImportanceTables tables = importance_tables(report, raw);
    const std::string stage_path = out_dir + "/importance_by_stage.csv";
    const std::string unit_path = out_dir + "/importance_units.csv";
    write_text_file(stage_path, to_csv(tables.by_stage));
    write_text_file(unit_path, to_csv(tables.per_unit));
    return {stage_path, unit_path};
}

std::vector<std::string> emit_results_table(
    std::span<const std::pair<std::string, EvalResult>> results, const std::string& out_dir,
    const std::string& stem, bool raw) {
    Table t = results_table(results, raw);
    const std::string csv_path = out_dir + "/" + stem + ".csv";
    const std::string txt_path = out_dir + "/" + stem + ".txt";
    write_text_file(csv_path, to_csv(t));
    write_text_file(txt_path, to_text(t));
    return {csv_path, txt_path};
}

}  // namespace merging
