// Command-line front end wiring the pipeline: task generation, base and
// expert training, merging, importance analysis, evaluation, reporting.
// Every stage writes its outputs plus a <stage>.config.json provenance
// record into the run directory and is skipped when rerun with an
// identical configuration.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "merging/baselines.hpp"
#include "merging/checkpoint.hpp"
#include "merging/expert_merging.hpp"
#include "merging/expert_merging_pp.hpp"
#include "merging/kernels.hpp"
#include "merging/reporting.hpp"
#include "merging/rng.hpp"
#include "merging/task_suite.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace merging;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// run-directory plumbing

struct RunDir {
    fs::path dir;

    std::string file(const std::string& name) const { return (dir / name).string(); }
    bool has(const std::string& name) const { return fs::exists(dir / name); }

    void ensure() const {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create run directory '" + dir.string() + "'");
    }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

std::uint64_t file_fingerprint(const std::string& path) {
    return fnv1a(slurp(path));
}

// A stage is cached when its recorded config matches and all its outputs
// still exist.
bool stage_cached(const RunDir& run, const std::string& stage, const json& config,
                  const std::vector<std::string>& outputs) {
    const std::string cfg_path = run.file(stage + ".config.json");
    if (!fs::exists(cfg_path)) return false;
    if (slurp(cfg_path) != config.dump(2) + "\n") return false;
    for (const auto& out : outputs)
        if (!run.has(out)) return false;
    return true;
}

void stage_done(const RunDir& run, const std::string& stage, const json& config) {
    write_text_file(run.file(stage + ".config.json"), config.dump(2) + "\n");
    std::error_code ec;
    fs::remove(run.dir / (stage + ".failed"), ec);
}

void stage_failed(const RunDir& run, const std::string& stage, const std::string& line) {
    std::error_code ec;
    fs::create_directories(run.dir, ec);
    if (!ec) {
        std::ofstream out(run.file(stage + ".failed"), std::ios::trunc);
        out << line << "\n";
    }
}

// ---------------------------------------------------------------------------
// task persistence

const char* kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::modular_addition: return "modular_addition";
        case TaskKind::string_reversal: return "string_reversal";
        case TaskKind::bit_parity: return "bit_parity";
    }
    return "?";
}

TaskKind kind_from(const std::string& name) {
    if (name == "modular_addition") return TaskKind::modular_addition;
    if (name == "string_reversal") return TaskKind::string_reversal;
    if (name == "bit_parity") return TaskKind::bit_parity;
    throw ConfigError("unknown task kind '" + name + "'");
}

json task_to_json(const TaskSpec& t) {
    return json{{"id", t.id},           {"kind", kind_name(t.kind)},
                {"modulus", t.modulus}, {"length", t.length},
                {"alphabet", t.alphabet}, {"width", t.width},
                {"bit_one_prob", t.bit_one_prob}};
}

std::vector<TaskSpec> load_tasks(const RunDir& run) {
    if (!run.has("tasks.json"))
        throw ConfigError("no tasks.json in '" + run.dir.string() +
                          "'; run gen-tasks first");
    json j;
    try {
        j = json::parse(slurp(run.file("tasks.json")));
    } catch (const json::exception& e) {
        throw IoError("tasks.json is malformed: " + std::string(e.what()));
    }
    std::vector<TaskSpec> tasks;
    for (const auto& tj : j.at("tasks")) {
        TaskSpec t;
        t.id = tj.at("id").get<std::string>();
        t.kind = kind_from(tj.at("kind").get<std::string>());
        t.modulus = tj.at("modulus").get<std::size_t>();
        t.length = tj.at("length").get<std::size_t>();
        t.alphabet = tj.at("alphabet").get<std::size_t>();
        t.width = tj.at("width").get<std::size_t>();
        t.bit_one_prob = tj.at("bit_one_prob").get<double>();
        tasks.push_back(std::move(t));
    }
    if (tasks.empty()) throw ConfigError("tasks.json lists no tasks");
    return tasks;
}

// ---------------------------------------------------------------------------
// shared option bundles

struct TrainFlags {
    std::size_t steps = 2500;
    double lr = 2e-3;
    std::size_t batch = 16;
    std::size_t dataset_size = 512;
    std::uint64_t seed = 1;
    double threshold = 0.9;
    std::size_t restarts = 3;

    TrainHyper hyper() const {
        TrainHyper h;
        h.steps = steps;
        h.lr = lr;
        h.batch = batch;
        h.dataset_size = dataset_size;
        h.seed = seed;
        h.expert_threshold = threshold;
        h.max_restarts = restarts;
        return h;
    }
    json to_json() const {
        return json{{"steps", steps},     {"lr", lr},
                    {"batch", batch},     {"dataset_size", dataset_size},
                    {"seed", seed},       {"threshold", threshold},
                    {"restarts", restarts}};
    }
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--steps", f.steps, "optimizer steps")->capture_default_str();
    cmd->add_option("--lr", f.lr, "peak step size (linear decay to zero)")
        ->capture_default_str();
    cmd->add_option("--batch", f.batch, "sequences per step")->capture_default_str();
    cmd->add_option("--dataset-size", f.dataset_size, "training sequences drawn")
        ->capture_default_str();
    cmd->add_option("--seed", f.seed, "training seed")->capture_default_str();
}

struct MergeFlags {
    std::string method;
    std::vector<double> lambdas;
    double rho = 0.2;
    double ties_scale = 1.0;
    std::vector<double> ties_scale_grid;
    double dare_p = 0.5;
    double gamma = 0.8;
    double temperature = 1.0;
    std::vector<std::string> beta;
    std::size_t samples = 5;
    std::size_t steps = 200;
    double lr = 1e-2;
    std::uint64_t seed = 1;
    std::vector<std::size_t> hidden_layers;
    double alpha_prior = 0.3;
    std::vector<double> init_grid{0.1, 0.3, 0.5, 1.0};
    bool no_grid_init = false;
    bool no_hidden_loss = false;
    bool no_logit_loss = false;
    bool no_regularizer = false;
    double budget_factor = 1.1;
    double kappa = 1.2;
    std::size_t chunk_all = 0;
    std::size_t snapshot_interval = 0;
};

std::vector<double> parse_betas(const std::vector<std::string>& kv,
                                const std::vector<TaskSpec>& tasks) {
    std::vector<double> betas(tasks.size(), 1.0);
    for (const auto& pair : kv) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--beta expects k=v entries, got '" + pair + "'");
        const std::string key = pair.substr(0, eq);
        const double value = std::stod(pair.substr(eq + 1));
        std::size_t idx = tasks.size();
        for (std::size_t k = 0; k < tasks.size(); ++k)
            if (tasks[k].id == key) idx = k;
        if (idx == tasks.size()) {
            try {
                idx = std::stoul(key);
            } catch (...) {
                idx = tasks.size();
            }
        }
        if (idx >= tasks.size())
            throw ConfigError("--beta key '" + key + "' matches no task");
        betas[idx] = value;
    }
    return betas;
}

// ---------------------------------------------------------------------------
// artifact loading helpers

ModelParams load_base(const RunDir& run) {
    if (!run.has("base.emck"))
        throw ConfigError("no base.emck in '" + run.dir.string() + "'; run train-base first");
    return load_model(run.file("base.emck"));
}

struct Ensemble {
    ModelParams base;
    std::vector<TaskSpec> tasks;
    std::vector<ModelParams> experts;
    std::vector<TaskVector> tvs;
};

Ensemble load_ensemble(const RunDir& run) {
    Ensemble e{load_base(run), load_tasks(run), {}, {}};
    for (const auto& task : e.tasks) {
        const std::string file = "expert_" + task.id + ".emck";
        if (!run.has(file))
            throw ConfigError("missing " + file + "; run train-expert --task " + task.id);
        e.experts.push_back(load_model(run.file(file)));
    }
    for (std::size_t k = 0; k < e.tasks.size(); ++k)
        e.tvs.push_back(compute_task_vector(e.base, e.experts[k], e.tasks[k].id));
    return e;
}

json ensemble_fingerprints(const RunDir& run, const Ensemble& e) {
    json fp;
    fp["base"] = file_fingerprint(run.file("base.emck"));
    for (const auto& task : e.tasks)
        fp["expert_" + task.id] = file_fingerprint(run.file("expert_" + task.id + ".emck"));
    fp["tasks"] = file_fingerprint(run.file("tasks.json"));
    return fp;
}

void write_eval_json(const RunDir& run, const std::string& name, const EvalResult& r) {
    json j;
    j["method"] = name;
    json tasks = json::array(), acc = json::array(), n = json::array();
    for (const auto& t : r.per_task) {
        tasks.push_back(t.task);
        acc.push_back(t.accuracy);
        n.push_back(t.samples);
    }
    j["tasks"] = tasks;
    j["accuracy"] = acc;
    j["samples"] = n;
    j["macro_average"] = r.macro_average;
    write_text_file(run.file("eval_" + name + ".json"), j.dump(2) + "\n");
}

EvalResult read_eval_json(const std::string& path, std::string* method = nullptr) {
    json j = json::parse(slurp(path));
    EvalResult r;
    for (std::size_t i = 0; i < j.at("tasks").size(); ++i)
        r.per_task.push_back({j.at("tasks")[i].get<std::string>(),
                              j.at("accuracy")[i].get<double>(),
                              j.at("samples")[i].get<std::size_t>()});
    r.macro_average = j.at("macro_average").get<double>();
    if (method) *method = j.at("method").get<std::string>();
    return r;
}

// ---------------------------------------------------------------------------
// merge stage

AlignConfig align_config(const MergeFlags& mf, const std::vector<TaskSpec>& tasks) {
    AlignConfig cfg;
    cfg.temperature = mf.temperature;
    cfg.hidden_blocks = mf.hidden_layers;
    cfg.task_weights = parse_betas(mf.beta, tasks);
    cfg.reg_weight = mf.no_regularizer ? 0.0 : mf.gamma;
    cfg.step_size = mf.lr;
    cfg.steps = mf.steps;
    cfg.seed = mf.seed;
    cfg.snapshot_interval = mf.snapshot_interval;
    cfg.use_hidden_loss = !mf.no_hidden_loss;
    cfg.use_logit_loss = !mf.no_logit_loss;
    return cfg;
}

json merge_config_json(const MergeFlags& mf) {
    return json{{"method", mf.method},
                {"lambda", mf.lambdas},
                {"rho", mf.rho},
                {"ties_scale", mf.ties_scale},
                {"ties_scale_grid", mf.ties_scale_grid},
                {"dare_p", mf.dare_p},
                {"gamma", mf.gamma},
                {"temp", mf.temperature},
                {"beta", mf.beta},
                {"samples", mf.samples},
                {"steps", mf.steps},
                {"lr", mf.lr},
                {"seed", mf.seed},
                {"hidden_layers", mf.hidden_layers},
                {"alpha_prior", mf.alpha_prior},
                {"init_grid", mf.init_grid},
                {"no_grid_init", mf.no_grid_init},
                {"no_hidden_loss", mf.no_hidden_loss},
                {"no_logit_loss", mf.no_logit_loss},
                {"no_regularizer", mf.no_regularizer},
                {"budget_factor", mf.budget_factor},
                {"kappa", mf.kappa},
                {"chunk_all", mf.chunk_all},
                {"snapshot_interval", mf.snapshot_interval}};
}

// stage-1 coefficient learning; shared by `merge expert` and `merge expert-pp`
LayerCoefficients ensure_layer_coefficients(const RunDir& run, const Ensemble& e,
                                            const MergeFlags& mf, const json& provenance) {
    json config = merge_config_json(mf);
    config["stage"] = "expert-coefficients";
    config["inputs"] = provenance;
    // the chunk-stage flags do not affect stage 1
    config.erase("budget_factor");
    config.erase("kappa");
    config.erase("chunk_all");
    config["method"] = "expert";

    const std::vector<std::string> outputs{"coeffs_layer.emck", "train_log_expert.csv"};
    if (stage_cached(run, "merge-expert-coeffs", config, outputs)) {
        std::cout << "merge-expert coefficients: cached\n";
        return load_layer_coefficients(run.file("coeffs_layer.emck"));
    }

    CalibrationSet calib = make_calibration(e.tasks, mf.samples, mf.seed);
    AlignConfig cfg = align_config(mf, e.tasks);

    LayerCoefficients init =
        mf.no_grid_init
            ? LayerCoefficients::constant(e.tvs.size(), e.base.unit_count(), mf.alpha_prior)
            : ta_grid_init(e.base, e.tvs, e.experts, calib, cfg, mf.init_grid);
    auto [coeffs, log] = fit(e.base, e.tvs, e.experts, calib, cfg, init);

    save_layer_coefficients(coeffs, e.base.config(), run.file("coeffs_layer.emck"),
                            {{"run_config", config.dump()}});
    write_text_file(run.file("train_log_expert.csv"), to_csv(train_log_table(log)));
    stage_done(run, "merge-expert-coeffs", config);
    std::cout << "coefficients fitted (objective "
              << format_number(log.steps.empty() ? log.final_record.total
                                                 : log.steps.front().total)
              << " -> " << format_number(log.final_record.total) << ")\n";
    return coeffs;
}

double tune_ties_scale(const Ensemble& e, const MergeFlags& mf) {
    if (mf.ties_scale_grid.empty()) return mf.ties_scale;
    // pick the scale whose merged model maximizes macro accuracy on a
    // held-out seeded dev set (baseline tuning, like the lambda grids)
    double best_scale = mf.ties_scale_grid.front();
    double best_acc = -1.0;
    for (double scale : mf.ties_scale_grid) {
        ModelParams merged = merge_ties(e.base, e.tvs, {mf.rho, scale});
        EvalResult r = evaluate(merged, e.tasks, 32, mf.seed ^ fnv1a("ties-grid"));
        if (r.macro_average > best_acc) {
            best_acc = r.macro_average;
            best_scale = scale;
        }
    }
    return best_scale;
}

int run_merge(const RunDir& run, MergeFlags& mf) {
    run.ensure();
    Ensemble e = load_ensemble(run);
    const json provenance = ensemble_fingerprints(run, e);

    json config = merge_config_json(mf);
    config["inputs"] = provenance;
    const std::string stage = "merge-" + mf.method;
    const std::string model_out = "merged_" + mf.method + ".emck";

    if (mf.method == "expert" || mf.method == "expert-pp") {
        LayerCoefficients stage1 = ensure_layer_coefficients(run, e, mf, provenance);
        if (mf.method == "expert") {
            if (stage_cached(run, stage, config, {model_out})) {
                std::cout << stage << ": cached\n";
                return 0;
            }
            ModelParams merged = apply_coefficients(e.base, e.tvs, stage1);
            save_model(merged, run.file(model_out), {{"run_config", config.dump()}});
            stage_done(run, stage, config);
            std::cout << "merged model written to " << run.file(model_out) << "\n";
            return 0;
        }
        // chunk-wise refinement consumes the stage-1 coefficients
        const std::vector<std::string> outputs{model_out, "coeffs_chunk.emck",
                                               "train_log_expert_pp.csv"};
        if (stage_cached(run, stage, config, outputs)) {
            std::cout << stage << ": cached\n";
            return 0;
        }
        CalibrationSet calib = make_calibration(e.tasks, mf.samples, mf.seed);
        AlignConfig cfg = align_config(mf, e.tasks);
        ChunkFitResult r;
        if (mf.chunk_all > 0) {
            std::vector<std::size_t> sizes;
            for (std::size_t u = 0; u < e.base.unit_count(); ++u)
                sizes.push_back(e.base.unit(u).size());
            r = fit_pp_with_plan(e.base, e.tvs, e.experts, calib, cfg, stage1,
                                 uniform_chunk_plan(sizes, mf.chunk_all));
        } else {
            r = fit_pp(e.base, e.tvs, e.experts, calib, cfg, stage1,
                       mf.budget_factor * static_cast<double>(e.base.unit_count()),
                       mf.kappa);
        }
        ModelParams merged = apply_chunk_coefficients(e.base, e.tvs, r.plan, r.coeffs);
        save_model(merged, run.file(model_out), {{"run_config", config.dump()}});
        save_chunk_coefficients(r.plan, r.coeffs, e.base.config(),
                                run.file("coeffs_chunk.emck"),
                                {{"run_config", config.dump()}});
        write_text_file(run.file("train_log_expert_pp.csv"), to_csv(train_log_table(r.log)));
        stage_done(run, stage, config);
        std::cout << "merged model written to " << run.file(model_out) << " ("
                  << r.plan.total_chunks() << " trainable chunks)\n";
        return 0;
    }

    // training-free baselines
    if (stage_cached(run, stage, config, {model_out})) {
        std::cout << stage << ": cached\n";
        return 0;
    }
    ModelParams merged = e.base;
    const auto lambdas_or_default = [&] {
        return mf.lambdas.empty() ? std::vector<double>(e.tvs.size(), mf.alpha_prior)
                                  : mf.lambdas;
    };
    if (mf.method == "average") {
        merged = merge_weight_average(e.base, e.tvs);
    } else if (mf.method == "ta") {
        merged = merge_task_arithmetic(e.base, e.tvs, {lambdas_or_default()});
    } else if (mf.method == "ties" || mf.method == "dare-ties") {
        std::vector<TaskVector> tvs = e.tvs;
        if (mf.method == "dare-ties")
            for (std::size_t k = 0; k < tvs.size(); ++k)
                tvs[k] = dare_preprocess(tvs[k], {mf.dare_p, mf.seed + k});
        const double scale = tune_ties_scale(e, mf);
        merged = merge_ties(e.base, tvs, {mf.rho, scale});
    } else if (mf.method == "dare-ta") {
        std::vector<TaskVector> tvs = e.tvs;
        for (std::size_t k = 0; k < tvs.size(); ++k)
            tvs[k] = dare_preprocess(tvs[k], {mf.dare_p, mf.seed + k});
        merged = merge_task_arithmetic(e.base, tvs, {lambdas_or_default()});
    } else {
        throw ConfigError("unknown merge method '" + mf.method + "'");
    }
    save_model(merged, run.file(model_out), {{"run_config", config.dump()}});
    stage_done(run, stage, config);
    std::cout << "merged model written to " << run.file(model_out) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale expert-model merging toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read options from an INI/TOML file (flags override)");

    std::string out_dir = "run";
    bool serial = false;
    int threads = 0;
    app.add_option("--out", out_dir, "run directory for all artifacts")
        ->capture_default_str();
    app.add_flag("--serial", serial, "disable the OpenMP kernels");
    app.add_option("--threads", threads, "OpenMP thread count (0 = library default)")
        ->capture_default_str();

    // ---- gen-tasks ----
    auto* gen = app.add_subcommand("gen-tasks", "write the task suite definition");
    std::vector<std::string> task_ids{"modadd", "reverse", "parity"};
    std::size_t modulus = 5, rev_length = 3, rev_alphabet = 6, parity_width = 4;
    double bit_one_prob = 0.3;
    std::uint64_t gen_seed = 1;
    gen->add_option("--tasks", task_ids, "task ids (modadd, reverse, parity)")
        ->delimiter(',')
        ->capture_default_str();
    gen->add_option("--modulus", modulus, "modular-addition modulus")->capture_default_str();
    gen->add_option("--rev-length", rev_length, "reversal string length")
        ->capture_default_str();
    gen->add_option("--rev-alphabet", rev_alphabet, "reversal alphabet size (<= 8)")
        ->capture_default_str();
    gen->add_option("--parity-width", parity_width, "parity word width")
        ->capture_default_str();
    gen->add_option("--bit-one-prob", bit_one_prob, "parity bit bias")->capture_default_str();
    gen->add_option("--seed", gen_seed, "dataset seed recorded for downstream stages")
        ->capture_default_str();

    // ---- train-base ----
    auto* tb = app.add_subcommand("train-base", "pretrain the shared base model");
    ModelConfig model_cfg;
    TrainFlags base_flags;
    {
        const TrainHyper h = base_pretrain_hyper(1);
        base_flags.steps = h.steps;
        base_flags.lr = h.lr;
        base_flags.batch = h.batch;
    }
    tb->add_option("--vocab-size", model_cfg.vocab_size)->capture_default_str();
    tb->add_option("--d-model", model_cfg.d_model)->capture_default_str();
    tb->add_option("--n-heads", model_cfg.n_heads)->capture_default_str();
    tb->add_option("--n-blocks", model_cfg.n_blocks)->capture_default_str();
    tb->add_option("--d-mlp", model_cfg.d_mlp)->capture_default_str();
    tb->add_option("--max-seq-len", model_cfg.max_seq_len)->capture_default_str();
    add_train_flags(tb, base_flags);

    // ---- train-expert ----
    auto* te = app.add_subcommand("train-expert", "fine-tune one expert");
    std::string expert_task;
    TrainFlags expert_flags;
    te->add_option("--task", expert_task, "task id to specialize on")->required();
    add_train_flags(te, expert_flags);
    te->add_option("--threshold", expert_flags.threshold, "required own-task accuracy")
        ->capture_default_str();
    te->add_option("--restarts", expert_flags.restarts,
                   "extra reshuffled attempts when below threshold")
        ->capture_default_str();

    // ---- train-mixture ----
    auto* tm = app.add_subcommand("train-mixture", "fine-tune on the union of all tasks");
    TrainFlags mixture_flags;
    add_train_flags(tm, mixture_flags);

    // ---- merge ----
    auto* mg = app.add_subcommand("merge", "merge the experts into one model");
    MergeFlags mf;
    mg->add_option("--method", mf.method,
                   "average | ta | ties | dare-ta | dare-ties | expert | expert-pp")
        ->required();
    mg->add_option("--lambda", mf.lambdas, "task-arithmetic coefficients, one per expert")->delimiter(',');
    mg->add_option("--rho", mf.rho, "ties trim keep-fraction")->capture_default_str();
    mg->add_option("--ties-scale", mf.ties_scale, "ties final scale")->capture_default_str();
    mg->add_option("--ties-scale-grid", mf.ties_scale_grid,
                   "tune the ties scale by dev-set accuracy over this grid")->delimiter(',');
    mg->add_option("--dare-p", mf.dare_p, "dare drop probability")->capture_default_str();
    mg->add_option("--gamma", mf.gamma, "coefficient regularizer weight")
        ->capture_default_str();
    mg->add_option("--temp", mf.temperature, "logit-alignment temperature")
        ->capture_default_str();
    mg->add_option("--beta", mf.beta, "task weights as id=value or index=value pairs")->delimiter(',');
    mg->add_option("--samples", mf.samples, "calibration samples per task")
        ->capture_default_str();
    mg->add_option("--steps", mf.steps, "coefficient optimization steps")
        ->capture_default_str();
    mg->add_option("--lr", mf.lr, "coefficient step size")->capture_default_str();
    mg->add_option("--seed", mf.seed, "calibration/optimization seed")->capture_default_str();
    mg->add_option("--hidden-layers", mf.hidden_layers,
                   "blocks for hidden-state alignment (default: middle block)")->delimiter(',');
    mg->add_option("--alpha-prior", mf.alpha_prior,
                   "coefficient prior (and constant init with --no-grid-init)")
        ->capture_default_str();
    mg->add_option("--init-grid", mf.init_grid,
                   "lambda grid for the task-arithmetic-validated init")
        ->delimiter(',')
        ->capture_default_str();
    mg->add_flag("--no-grid-init", mf.no_grid_init,
                 "initialize at --alpha-prior instead of the grid argmin");
    mg->add_flag("--no-hidden-loss", mf.no_hidden_loss, "drop the hidden-state term");
    mg->add_flag("--no-logit-loss", mf.no_logit_loss, "drop the logit term");
    mg->add_flag("--no-regularizer", mf.no_regularizer, "drop the coefficient regularizer");
    mg->add_option("--budget-factor", mf.budget_factor,
                   "chunk budget as a multiple of the unit count")
        ->capture_default_str();
    mg->add_option("--kappa", mf.kappa, "chunk allocation steepness")->capture_default_str();
    mg->add_option("--chunk-all", mf.chunk_all,
                   "ablation: give every unit this many chunks uniformly");
    mg->add_option("--snapshot-interval", mf.snapshot_interval,
                   "record coefficient snapshots every N steps (0 = off)")
        ->capture_default_str();

    // ---- analyze-importance ----
    auto* ai = app.add_subcommand("analyze-importance",
                                  "unit importance from the learned coefficients");
    bool importance_raw = false;
    ai->add_flag("--raw", importance_raw, "full-precision numbers in the tables");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "exact-match accuracy of a model");
    std::string eval_model;
    std::size_t eval_n = 64;
    std::uint64_t eval_seed = 99;
    ev->add_option("--model", eval_model,
                   "model name in the run directory (base, expert_<task>, mixture, "
                   "merged_<method>) or a checkpoint path")
        ->required();
    ev->add_option("--n", eval_n, "samples per task")->capture_default_str();
    ev->add_option("--seed", eval_seed, "evaluation seed")->capture_default_str();

    // ---- report ----
    auto* rp = app.add_subcommand("report", "compose saved evaluations into tables");
    bool report_raw = false;
    rp->add_flag("--raw", report_raw, "full-precision numbers");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << "ERROR CONFIG: " << e.what() << "\n";
        return 1;
    }

    if (serial) kernels::set_parallel(false);
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif

    const RunDir run{fs::path(out_dir)};
    std::string active_stage = "run";
    try {
        if (gen->parsed()) {
            active_stage = "gen-tasks";
            run.ensure();
            std::vector<TaskSpec> tasks;
            for (const auto& id : task_ids) {
                bool found = false;
                for (auto t : default_tasks()) {
                    if (t.id != id) continue;
                    t.modulus = modulus;
                    if (t.kind == TaskKind::string_reversal) {
                        t.length = rev_length;
                        t.alphabet = rev_alphabet;
                    }
                    if (t.kind == TaskKind::bit_parity) {
                        t.width = parity_width;
                        t.bit_one_prob = bit_one_prob;
                    }
                    tasks.push_back(std::move(t));
                    found = true;
                }
                if (!found) throw ConfigError("unknown task id '" + id + "'");
            }
            json j;
            j["seed"] = gen_seed;
            json arr = json::array();
            for (const auto& t : tasks) arr.push_back(task_to_json(t));
            j["tasks"] = arr;
            const json config{{"stage", "gen-tasks"}, {"content", j}};
            if (stage_cached(run, "gen-tasks", config, {"tasks.json"})) {
                std::cout << "gen-tasks: cached\n";
                return 0;
            }
            write_text_file(run.file("tasks.json"), j.dump(2) + "\n");
            stage_done(run, "gen-tasks", config);
            std::cout << "wrote " << run.file("tasks.json") << " (" << tasks.size()
                      << " tasks)\n";
        } else if (tb->parsed()) {
            active_stage = "train-base";
            run.ensure();
            auto tasks = load_tasks(run);
            json config = base_flags.to_json();
            config["stage"] = "train-base";
            config["model"] = {{"vocab_size", model_cfg.vocab_size},
                               {"d_model", model_cfg.d_model},
                               {"n_heads", model_cfg.n_heads},
                               {"n_blocks", model_cfg.n_blocks},
                               {"d_mlp", model_cfg.d_mlp},
                               {"max_seq_len", model_cfg.max_seq_len}};
            config["inputs"] = {{"tasks", file_fingerprint(run.file("tasks.json"))}};
            if (stage_cached(run, "train-base", config, {"base.emck"})) {
                std::cout << "train-base: cached\n";
                return 0;
            }
            std::vector<double> curve;
            ModelParams base = train_base(model_cfg, tasks, base_flags.hyper(), &curve);
            save_model(base, run.file("base.emck"), {{"run_config", config.dump()}});
            stage_done(run, "train-base", config);
            std::cout << "base trained: loss " << format_number(curve.front()) << " -> "
                      << format_number(curve.back()) << "\n";
        } else if (te->parsed()) {
            active_stage = "train-expert";
            run.ensure();
            auto tasks = load_tasks(run);
            const TaskSpec* task = nullptr;
            for (const auto& t : tasks)
                if (t.id == expert_task) task = &t;
            if (!task) throw ConfigError("task '" + expert_task + "' not in tasks.json");

            json config = expert_flags.to_json();
            config["stage"] = "train-expert";
            config["task"] = expert_task;
            config["inputs"] = {{"tasks", file_fingerprint(run.file("tasks.json"))},
                                {"base", file_fingerprint(run.file("base.emck"))}};
            const std::string out_file = "expert_" + expert_task + ".emck";
            if (stage_cached(run, "train-expert-" + expert_task, config, {out_file})) {
                std::cout << "train-expert " << expert_task << ": cached\n";
                return 0;
            }
            ModelParams base = load_base(run);
            ModelParams expert = train_expert(base, *task, expert_flags.hyper());
            save_model(expert, run.file(out_file), {{"run_config", config.dump()}});
            stage_done(run, "train-expert-" + expert_task, config);
            const TaskSpec own[] = {*task};
            EvalResult r = evaluate(expert, own, 128, expert_flags.seed ^ fnv1a("report"));
            std::cout << "expert " << expert_task << " trained: own-task accuracy "
                      << format_number(r.per_task[0].accuracy) << "\n";
        } else if (tm->parsed()) {
            active_stage = "train-mixture";
            run.ensure();
            auto tasks = load_tasks(run);
            json config = mixture_flags.to_json();
            config["stage"] = "train-mixture";
            config["inputs"] = {{"tasks", file_fingerprint(run.file("tasks.json"))},
                                {"base", file_fingerprint(run.file("base.emck"))}};
            if (stage_cached(run, "train-mixture", config, {"mixture.emck"})) {
                std::cout << "train-mixture: cached\n";
                return 0;
            }
            ModelParams base = load_base(run);
            ModelParams mixture = train_mixture(base, tasks, mixture_flags.hyper());
            save_model(mixture, run.file("mixture.emck"), {{"run_config", config.dump()}});
            stage_done(run, "train-mixture", config);
            std::cout << "mixture model written to " << run.file("mixture.emck") << "\n";
        } else if (mg->parsed()) {
            active_stage = "merge-" + mf.method;
            return run_merge(run, mf);
        } else if (ai->parsed()) {
            active_stage = "analyze-importance";
            run.ensure();
            if (!run.has("coeffs_layer.emck"))
                throw ConfigError("no coeffs_layer.emck; run merge --method expert first");
            Ensemble e = load_ensemble(run);
            json config{{"stage", "analyze-importance"},
                        {"raw", importance_raw},
                        {"inputs",
                         {{"coeffs", file_fingerprint(run.file("coeffs_layer.emck"))},
                          {"base", file_fingerprint(run.file("base.emck"))}}}};
            const std::vector<std::string> outputs{
                "importance.emck", "importance_by_stage.csv", "importance_units.csv"};
            if (stage_cached(run, "analyze-importance", config, outputs)) {
                std::cout << "analyze-importance: cached\n";
                ImportanceReport rep = load_importance(run.file("importance.emck"));
                std::cout << to_text(importance_tables(rep, importance_raw).by_stage);
                return 0;
            }
            LayerCoefficients coeffs =
                load_layer_coefficients(run.file("coeffs_layer.emck"));
            std::vector<UnitStats> stats;
            for (const auto& tv : e.tvs) stats.push_back(unit_stats(tv));
            ImportanceReport rep = compute_importance(e.base.config(), coeffs, stats);
            save_importance(rep, e.base.config(), run.file("importance.emck"),
                            {{"run_config", config.dump()}});
            emit_importance_tables(rep, run.dir.string(), importance_raw);
            stage_done(run, "analyze-importance", config);
            std::cout << to_text(importance_tables(rep, importance_raw).by_stage);
        } else if (ev->parsed()) {
            active_stage = "eval";
            run.ensure();
            auto tasks = load_tasks(run);
            std::string model_path = eval_model;
            std::string name = eval_model;
            if (!fs::exists(model_path)) {
                model_path = run.file(eval_model + ".emck");
                if (!fs::exists(model_path))
                    throw IoError("model '" + eval_model + "' not found (tried '" +
                                  model_path + "')");
            } else {
                name = fs::path(model_path).stem().string();
            }
            json config{{"stage", "eval"},
                        {"model", name},
                        {"n", eval_n},
                        {"seed", eval_seed},
                        {"inputs",
                         {{"model", file_fingerprint(model_path)},
                          {"tasks", file_fingerprint(run.file("tasks.json"))}}}};
            const std::string out_file = "eval_" + name + ".json";
            if (stage_cached(run, "eval-" + name, config, {out_file})) {
                std::cout << "eval " << name << ": cached\n";
            } else {
                ModelParams model = load_model(model_path);
                EvalResult r = evaluate(model, tasks, eval_n, eval_seed);
                write_eval_json(run, name, r);
                stage_done(run, "eval-" + name, config);
            }
            const std::pair<std::string, EvalResult> row{
                name, read_eval_json(run.file(out_file))};
            std::cout << to_text(results_table({&row, 1}));
        } else if (rp->parsed()) {
            active_stage = "report";
            run.ensure();
            std::vector<std::string> eval_files;
            for (const auto& entry : fs::directory_iterator(run.dir)) {
                const std::string fname = entry.path().filename().string();
                if (fname.rfind("eval_", 0) == 0 && entry.path().extension() == ".json")
                    eval_files.push_back(entry.path().string());
            }
            std::sort(eval_files.begin(), eval_files.end());
            if (eval_files.empty())
                throw ConfigError("no eval_*.json results in '" + run.dir.string() + "'");
            std::vector<std::pair<std::string, EvalResult>> rows;
            for (const auto& path : eval_files) {
                std::string method;
                EvalResult r = read_eval_json(path, &method);
                rows.emplace_back(std::move(method), std::move(r));
            }
            emit_results_table(rows, run.dir.string(), "results", report_raw);
            std::cout << to_text(results_table(rows, report_raw));
            if (run.has("importance.emck")) {
                ImportanceReport rep = load_importance(run.file("importance.emck"));
                emit_importance_tables(rep, run.dir.string(), report_raw);
                std::cout << "\n" << to_text(importance_tables(rep, report_raw).by_stage);
            }
        }
    } catch (const Error& e) {
        std::cerr << "ERROR " << error_class_name(e.error_class()) << ": " << e.what()
                  << "\n";
        stage_failed(run, active_stage,
                     std::string("ERROR ") + error_class_name(e.error_class()) + ": " +
                         e.what());
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "ERROR IO: " << e.what() << "\n";
        stage_failed(run, active_stage, std::string("ERROR IO: ") + e.what());
        return 1;
    }
    return 0;
}
