#include "merging/task_suite.hpp"

#include <functional>

#include <cmath>

#include "merging/kernels.hpp"
#include "merging/optimizer.hpp"
#include "merging/rng.hpp"

namespace merging {

void TaskSpec::validate(const ModelConfig& cfg) const {
    if (id.empty()) throw ConfigError("task spec: empty id");
    switch (kind) {
        case TaskKind::modular_addition:
            if (modulus < 2 || modulus > 10)
                throw ConfigError("task '" + id + "': modulus must be in [2,10]");
            break;
        case TaskKind::string_reversal:
            if (length < 1 || alphabet < 1 || alphabet > 8)
                throw ConfigError("task '" + id + "': bad length/alphabet");
            break;
        case TaskKind::bit_parity:
            if (width < 1) throw ConfigError("task '" + id + "': width must be >= 1");
            if (!(bit_one_prob > 0.0 && bit_one_prob < 1.0))
                throw ConfigError("task '" + id + "': bit_one_prob must lie in (0,1)");
            break;
    }
    const std::size_t prompt_len = kind == TaskKind::modular_addition ? 5
                                   : kind == TaskKind::string_reversal ? length + 3
                                                                       : width + 3;
    if (prompt_len + answer_length() > cfg.max_seq_len)
        throw ConfigError("task '" + id + "': prompt plus answer exceeds max_seq_len");
}

std::size_t TaskSpec::answer_length() const {
    switch (kind) {
        case TaskKind::modular_addition: return 1;
        case TaskKind::string_reversal: return length;
        case TaskKind::bit_parity: return 1;
    }
    return 1;
}

namespace {

Example make_example(const TaskSpec& spec, Rng& rng) {
    Example ex;
    switch (spec.kind) {
        case TaskKind::modular_addition: {
            const auto a = static_cast<std::size_t>(rng.below(spec.modulus));
            const auto b = static_cast<std::size_t>(rng.below(spec.modulus));
            ex.prompt = {vocab::kBos, vocab::digit(a), vocab::kPlus, vocab::digit(b),
                         vocab::kEquals};
            ex.answer = {vocab::digit((a + b) % spec.modulus)};
            break;
        }
        case TaskKind::string_reversal: {
            ex.prompt = {vocab::kBos, vocab::kReverseMarker};
            for (std::size_t i = 0; i < spec.length; ++i)
                ex.prompt.push_back(vocab::letter(rng.below(spec.alphabet)));
            ex.prompt.push_back(vocab::kEquals);
            for (std::size_t i = 0; i < spec.length; ++i)
                ex.answer.push_back(ex.prompt[2 + spec.length - 1 - i]);
            break;
        }
        case TaskKind::bit_parity: {
            std::size_t ones = 0;
            ex.prompt = {vocab::kBos, vocab::kParityMarker};
            for (std::size_t i = 0; i < spec.width; ++i) {
                const std::size_t bit = rng.uniform() < spec.bit_one_prob ? 1 : 0;
                ones += bit;
                ex.prompt.push_back(vocab::digit(bit));
            }
            ex.prompt.push_back(vocab::kEquals);
            ex.answer = {ones % 2 ? vocab::kOdd : vocab::kEven};
            break;
        }
    }
    return ex;
}

}  // namespace

std::vector<Example> gen_dataset(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
    if (n < 1) throw ConfigError("gen_dataset: n must be >= 1");
    Rng rng(seed);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_example(spec, rng));
    return out;
}

CalibrationSet make_calibration(std::span<const TaskSpec> tasks, std::size_t per_task,
                                std::uint64_t seed) {
    if (per_task < 1) throw ConfigError("calibration: need at least one sample per task");
    CalibrationSet calib;
    calib.prompts.reserve(tasks.size());
    for (const auto& task : tasks) {
        auto examples = gen_dataset(task, per_task, seed ^ fnv1a("calib-" + task.id));
        std::vector<std::vector<int>> prompts;
        prompts.reserve(examples.size());
        for (auto& ex : examples) prompts.push_back(std::move(ex.prompt));
        calib.prompts.push_back(std::move(prompts));
    }
    return calib;
}

namespace {

struct TrainSeq {
    std::vector<int> tokens;
    std::vector<unsigned char> mask;  // per target row (tokens.size() - 1)
};

TrainSeq labeled_sequence(const Example& ex) {
    TrainSeq seq;
    seq.tokens = ex.prompt;
    seq.tokens.insert(seq.tokens.end(), ex.answer.begin(), ex.answer.end());
    seq.mask.assign(seq.tokens.size() - 1, 0);
    for (std::size_t i = ex.prompt.size() - 1; i < seq.mask.size(); ++i) seq.mask[i] = 1;
    return seq;
}

TrainSeq prompt_sequence(std::vector<int> prompt) {
    TrainSeq seq;
    seq.tokens = std::move(prompt);
    seq.mask.assign(seq.tokens.size() - 1, 1);
    return seq;
}

ModelParams train_on(ModelParams params, std::span<const TrainSeq> data,
                     const TrainHyper& hyper, const char* what,
                     std::vector<double>* loss_curve,
                     const std::function<bool(const ModelParams&)>& good_enough = {}) {
    if (data.empty()) throw ConfigError(std::string(what) + ": empty training data");
    if (loss_curve) loss_curve->clear();
    AdamOptimizer opt;
    const std::size_t units = params.unit_count();
    std::vector<Tensor*> unit_ptrs(units);
    for (std::size_t u = 0; u < units; ++u) unit_ptrs[u] = &params.unit(u);

    for (std::size_t step = 0; step < hyper.steps; ++step) {
        if (good_enough && hyper.early_stop_interval && step &&
            step % hyper.early_stop_interval == 0 && good_enough(params))
            break;
        Tape tape;
        std::vector<Var> unit_vars;
        unit_vars.reserve(units);
        for (std::size_t u = 0; u < units; ++u) unit_vars.push_back(tape.leaf(params.unit(u)));

        std::vector<Var> losses;
        losses.reserve(hyper.batch);
        for (std::size_t j = 0; j < hyper.batch; ++j) {
            const TrainSeq& seq = data[(step * hyper.batch + j) % data.size()];
            const std::span<const int> inputs(seq.tokens.data(), seq.tokens.size() - 1);
            const std::span<const int> targets(seq.tokens.data() + 1, seq.tokens.size() - 1);
            TraceVars trace = forward_on_tape(tape, params.config(), unit_vars, inputs);
            losses.push_back(tape.cross_entropy(trace.logits, targets, seq.mask));
        }
        Var total = tape.scale(tape.sum_scalars(losses),
                               1.0 / static_cast<double>(hyper.batch));
        const double loss = tape.value(total)[0];
        if (!std::isfinite(loss))
            throw NumericError(std::string(what) + ": loss diverged at step " +
                               std::to_string(step));
        if (loss_curve) loss_curve->push_back(loss);

        DifferentiableScalar ds = tape.backward(total);
        const double lr = hyper.lr *
                          (1.0 - static_cast<double>(step) / static_cast<double>(hyper.steps));
        opt.step(unit_ptrs, ds.gradients(), lr);
    }
    return params;
}

}  // namespace

ModelParams train_base(const ModelConfig& cfg, std::span<const TaskSpec> tasks,
                       const TrainHyper& hyper, std::vector<double>* loss_curve) {
    cfg.validate();
    if (tasks.empty()) throw ConfigError("train_base: no tasks");
    for (const auto& t : tasks) t.validate(cfg);

    // Prompt formats from every task, no answers, plus random sequences.
    // Prompts are packed back to back up to the context length, the way
    // pretraining corpora pack documents, so every position, including the
    // answer slot after '=', carries a live prediction target. The random
    // slot draws a short motif and repeats it: pure iid noise would teach
    // the model to ignore content tokens outright, which makes later
    // fine-tuning on answers needlessly hard.
    Rng rng(hyper.seed ^ fnv1a("base-data"));
    std::vector<TrainSeq> data;
    data.reserve(hyper.dataset_size);
    const std::size_t slots = tasks.size() + 1;
    for (std::size_t i = 0; i < hyper.dataset_size; ++i) {
        const std::size_t slot = i % slots;
        if (slot == tasks.size()) {
            const std::size_t motif_len = 1 + rng.below(4);
            std::vector<int> motif(motif_len);
            for (auto& t : motif) t = 2 + static_cast<int>(rng.below(vocab::kSize - 2));
            const std::size_t len = 6 + rng.below(9);
            std::vector<int> tokens{vocab::kBos};
            for (std::size_t t = 0; t < len; ++t) tokens.push_back(motif[t % motif_len]);
            data.push_back(prompt_sequence(std::move(tokens)));
        } else {
            std::vector<int> tokens;
            while (true) {
                const std::vector<int> prompt = make_example(tasks[slot], rng).prompt;
                if (tokens.size() + prompt.size() > cfg.max_seq_len) break;
                tokens.insert(tokens.end(), prompt.begin(), prompt.end());
                if (tokens.size() >= cfg.max_seq_len - 4) break;
            }
            data.push_back(prompt_sequence(std::move(tokens)));
        }
    }

    ModelParams init = ModelParams::random_init(cfg, hyper.seed, hyper.init_stddev);
    return train_on(std::move(init), data, hyper, "train_base", loss_curve);
}

ModelParams train_expert(const ModelParams& base, const TaskSpec& task,
                         const TrainHyper& hyper, std::vector<double>* loss_curve) {
    task.validate(base.config());
    const TaskSpec own[] = {task};

    double best_accuracy = -1.0;
    ModelParams best = base;
    std::vector<double> best_curve;
    for (std::size_t attempt = 0; attempt <= hyper.max_restarts; ++attempt) {
        const std::uint64_t attempt_seed =
            hyper.seed ^ (attempt * 0x9e3779b97f4a7c15ull);
        auto examples =
            gen_dataset(task, hyper.dataset_size, attempt_seed ^ fnv1a("sft-" + task.id));
        std::vector<TrainSeq> data;
        data.reserve(examples.size());
        for (const auto& ex : examples) data.push_back(labeled_sequence(ex));

        const auto good_enough = [&](const ModelParams& current) {
            if (hyper.early_stop_accuracy <= 0.0) return false;
            EvalResult probe = evaluate(current, own, 64,
                                        hyper.seed ^ fnv1a("expert-stop-" + task.id));
            return probe.per_task[0].accuracy >= hyper.early_stop_accuracy;
        };
        std::vector<double> curve;
        ModelParams expert =
            train_on(base, data, hyper, "train_expert", &curve, good_enough);
        EvalResult r =
            evaluate(expert, own, 128, hyper.seed ^ fnv1a("expert-check-" + task.id));
        if (r.per_task[0].accuracy > best_accuracy) {
            best_accuracy = r.per_task[0].accuracy;
            best = std::move(expert);
            best_curve = std::move(curve);
        }
        if (best_accuracy >= hyper.expert_threshold) break;
    }
    if (loss_curve) *loss_curve = best_curve;
    if (best_accuracy < hyper.expert_threshold)
        throw ThresholdError("expert for task '" + task.id + "' reached accuracy " +
                             std::to_string(best_accuracy) + " below threshold " +
                             std::to_string(hyper.expert_threshold) + " after " +
                             std::to_string(hyper.max_restarts + 1) + " attempts");
    return best;
}

ModelParams train_mixture(const ModelParams& base, std::span<const TaskSpec> tasks,
                          const TrainHyper& hyper, std::vector<double>* loss_curve) {
    if (tasks.empty()) throw ConfigError("train_mixture: no tasks");
    for (const auto& t : tasks) t.validate(base.config());

    // round-robin union of the per-task datasets
    const std::size_t per_task = (hyper.dataset_size + tasks.size() - 1) / tasks.size();
    std::vector<std::vector<Example>> pools;
    pools.reserve(tasks.size());
    for (const auto& task : tasks)
        pools.push_back(gen_dataset(task, per_task, hyper.seed ^ fnv1a("sft-" + task.id)));
    std::vector<TrainSeq> data;
    data.reserve(hyper.dataset_size);
    for (std::size_t i = 0; i < hyper.dataset_size; ++i)
        data.push_back(labeled_sequence(pools[i % tasks.size()][i / tasks.size()]));

    return train_on(base, data, hyper, "train_mixture", loss_curve);
}

EvalResult evaluate(const ModelParams& params, std::span<const TaskSpec> tasks,
                    std::size_t per_task, std::uint64_t seed) {
    if (tasks.empty()) throw ConfigError("evaluate: no tasks");
    for (const auto& t : tasks) t.validate(params.config());

    EvalResult result;
    result.per_task.reserve(tasks.size());
    const bool parallel = kernels::parallel_enabled();
    for (const auto& task : tasks) {
        const auto examples = gen_dataset(task, per_task, seed ^ fnv1a("eval-" + task.id));
        std::vector<unsigned char> match(examples.size(), 0);
        std::vector<std::string> errors(examples.size());
#pragma omp parallel for schedule(dynamic) if (parallel)
        for (std::size_t s = 0; s < examples.size(); ++s) {
            try {
                std::vector<int> tokens = examples[s].prompt;
                bool ok = true;
                for (std::size_t i = 0; i < examples[s].answer.size(); ++i) {
                    const ForwardTrace trace = forward(params, tokens);
                    const std::size_t last = tokens.size() - 1;
                    int best = 0;
                    double best_v = trace.logits.at(last, 0);
                    for (std::size_t v = 1; v < params.config().vocab_size; ++v) {
                        if (trace.logits.at(last, v) > best_v) {
                            best_v = trace.logits.at(last, v);
                            best = static_cast<int>(v);
                        }
                    }
                    tokens.push_back(best);
                    if (best != examples[s].answer[i]) ok = false;
                }
                match[s] = ok ? 1 : 0;
            } catch (const std::exception& e) {
                errors[s] = e.what();
            }
        }
        for (std::size_t s = 0; s < examples.size(); ++s)
            if (!errors[s].empty())
                throw NumericError("evaluate failed on task '" + task.id + "' sample " +
                                   std::to_string(s) + ": " + errors[s]);
        std::size_t hits = 0;
        for (auto m : match) hits += m;
        result.per_task.push_back(
            {task.id, static_cast<double>(hits) / static_cast<double>(examples.size()),
             examples.size()});
    }
    double total = 0.0;
    for (const auto& t : result.per_task) total += t.accuracy;
    result.macro_average = total / static_cast<double>(result.per_task.size());
    return result;
}

std::vector<TaskSpec> default_tasks() {
    TaskSpec modadd;
    modadd.id = "modadd";
    modadd.kind = TaskKind::modular_addition;
    modadd.modulus = 5;

    TaskSpec reverse;
    reverse.id = "reverse";
    reverse.kind = TaskKind::string_reversal;
    reverse.length = 3;
    reverse.alphabet = 6;

    TaskSpec parity;
    parity.id = "parity";
    parity.kind = TaskKind::bit_parity;
    parity.width = 4;

    return {modadd, reverse, parity};
}

}  // namespace merging
