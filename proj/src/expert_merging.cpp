#include "merging/expert_merging.hpp"

#include <cmath>

#include "merging/align_engine.hpp"
#include "merging/kernels.hpp"
#include "merging/optimizer.hpp"

namespace merging {

void AdamOptimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                         double lr) {
    if (params.size() != grads.size())
        throw ConfigError("optimizer: parameter/gradient count mismatch");
    if (m_.empty()) {
        for (const Tensor* p : params) {
            m_.emplace_back(p->shape());
            v_.emplace_back(p->shape());
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& x = *params[p];
        const Tensor& g = grads[p];
        Tensor& m = m_[p];
        Tensor& v = v_[p];
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            x[i] -= lr * mh / (std::sqrt(vh) + eps_);
        }
    }
}

LayerCoefficients LayerCoefficients::constant(std::size_t experts, std::size_t units,
                                              double value) {
    LayerCoefficients c;
    c.alpha = Tensor::filled({experts, units}, value);
    c.prior.assign(experts, value);
    return c;
}

ModelParams apply_coefficients(const ModelParams& base, std::span<const TaskVector> tvs,
                               const LayerCoefficients& coeffs) {
    check_task_vectors(base, tvs);
    if (coeffs.experts() != tvs.size() || coeffs.units() != base.unit_count())
        throw ConfigError("apply_coefficients: coefficient matrix is " +
                          coeffs.alpha.shape_string() + ", expected [" +
                          std::to_string(tvs.size()) + "x" +
                          std::to_string(base.unit_count()) + "]");
    coeffs.alpha.ensure_finite("coefficients");

    ModelParams merged = base;
    const std::size_t units = base.unit_count();
#pragma omp parallel for schedule(static)
    for (std::size_t u = 0; u < units; ++u) {
        Tensor delta(base.unit(u).shape());
        bool touched = false;
        for (std::size_t k = 0; k < tvs.size(); ++k) {
            const double a = coeffs.alpha.at(k, u);
            if (a != 0.0) {
                kernels::serial::axpy(a, tvs[k].deltas[u].data(), delta.data(), delta.size());
                touched = true;
            }
        }
        if (touched)
            kernels::serial::add(base.unit(u).data(), delta.data(), merged.unit(u).data(),
                                 delta.size());
    }
    for (std::size_t u = 0; u < units; ++u) merged.unit(u).ensure_finite("merged unit");
    return merged;
}

namespace align {

Problem make_problem(const ModelParams& base, std::span<const TaskVector> tvs,
                     std::span<const ModelParams> experts, const CalibrationSet& calib,
                     const AlignConfig& cfg) {
    check_task_vectors(base, tvs);
    if (experts.size() != tvs.size())
        throw ConfigError("alignment: expert count does not match task-vector count");
    for (std::size_t k = 0; k < experts.size(); ++k) {
        if (!experts[k].same_schema(base))
            throw ConfigError("alignment: expert schema does not match the base");
        if (experts[k].fingerprint() != tvs[k].expert_fingerprint)
            throw ConfigError("alignment: expert " + std::to_string(k) +
                              " is not the model its task vector was built from");
    }
    if (calib.tasks() != tvs.size())
        throw ConfigError("alignment: calibration set has " + std::to_string(calib.tasks()) +
                          " tasks, expected " + std::to_string(tvs.size()));
    for (const auto& task : calib.prompts)
        if (task.empty()) throw ConfigError("alignment: empty calibration set for a task");

    Problem p;
    p.base = &base;
    p.tvs = tvs;
    p.experts = experts;
    p.calib = &calib;
    p.cfg = cfg;

    const std::size_t n_blocks = base.config().n_blocks;
    if (p.cfg.hidden_blocks.empty()) p.cfg.hidden_blocks = {n_blocks / 2};
    for (std::size_t b : p.cfg.hidden_blocks)
        if (b >= n_blocks)
            throw ConfigError("alignment: hidden block " + std::to_string(b) +
                              " outside [0," + std::to_string(n_blocks) + ")");
    if (p.cfg.task_weights.empty()) p.cfg.task_weights.assign(tvs.size(), 1.0);
    if (p.cfg.task_weights.size() != tvs.size())
        throw ConfigError("alignment: need one task weight per expert");
    for (double b : p.cfg.task_weights)
        if (!(b >= 0.0)) throw ConfigError("alignment: task weights must be nonnegative");
    if (!(p.cfg.temperature > 0.0))
        throw ConfigError("alignment: temperature must be positive");
    if (!(p.cfg.reg_weight >= 0.0))
        throw ConfigError("alignment: regularizer weight must be nonnegative");
    if (!p.cfg.use_hidden_loss && !p.cfg.use_logit_loss)
        throw ConfigError("alignment: at least one alignment term must stay enabled");

    // expert-side targets are constants of the optimization; computed once
    p.targets.resize(tvs.size());
    for (std::size_t k = 0; k < tvs.size(); ++k) {
        p.targets[k].reserve(calib.prompts[k].size());
        for (const auto& prompt : calib.prompts[k])
            p.targets[k].push_back(forward(experts[k], prompt));
    }
    return p;
}

LayerMixer::LayerMixer(const ModelParams& base, std::span<const TaskVector> tvs,
                       std::span<const double> prior)
    : base_(&base), tvs_(tvs) {
    if (prior.size() != tvs.size())
        throw ConfigError("layer coefficients: one prior per expert required");
    anchor_ = Tensor({tvs.size(), base.unit_count()});
    for (std::size_t k = 0; k < tvs.size(); ++k)
        for (std::size_t u = 0; u < base.unit_count(); ++u) anchor_.at(k, u) = prior[k];
    inv_scale_ = 1.0 / (static_cast<double>(tvs.size()) *
                        static_cast<double>(base.unit_count()));
}

std::vector<std::size_t> LayerMixer::trainable_shape() const {
    return {tvs_.size(), base_->unit_count()};
}

std::vector<Var> LayerMixer::mixed_units(Tape& tape, Var trainable) const {
    std::vector<Var> units;
    units.reserve(base_->unit_count());
    std::vector<const Tensor*> taus(tvs_.size());
    for (std::size_t u = 0; u < base_->unit_count(); ++u) {
        for (std::size_t k = 0; k < tvs_.size(); ++k) taus[k] = &tvs_[k].deltas[u];
        units.push_back(tape.mix_unit(trainable, u, base_->unit(u), taus));
    }
    return units;
}

namespace {

struct SampleResult {
    double weighted = 0.0;
    double hidden_raw = 0.0;
    double logit_raw = 0.0;
    Tensor grad;
    std::string error;
};

SampleResult evaluate_sample(const Problem& p, const Mixer& mixer, const Tensor& trainable,
                             std::size_t task, std::size_t sample) {
    SampleResult r;
    const auto& prompt = p.calib->prompts[task][sample];
    const ForwardTrace& target = p.targets[task][sample];

    Tape tape;
    Var leaf = tape.leaf(trainable);
    std::vector<Var> units = mixer.mixed_units(tape, leaf);
    TraceVars trace = forward_on_tape(tape, p.base->config(), units, prompt);

    std::vector<Var> parts;
    if (p.cfg.use_hidden_loss) {
        // hidden alignment averages over the hidden dimension as well, so
        // the term lives on the same scale as the logit KL
        const double inv_width = 1.0 / static_cast<double>(p.base->config().d_model);
        for (std::size_t b : p.cfg.hidden_blocks) {
            Var term = tape.scale(
                tape.sq_l2_distance(trace.hidden_states[b],
                                    tape.constant(target.hidden_states[b])),
                inv_width);
            r.hidden_raw += tape.value(term)[0];
            parts.push_back(term);
        }
    }
    if (p.cfg.use_logit_loss) {
        Var term = tape.softmax_kl(tape.constant(target.logits), trace.logits,
                                   p.cfg.temperature);
        r.logit_raw = tape.value(term)[0];
        parts.push_back(term);
    }
    const double w = p.cfg.task_weights[task] /
                     static_cast<double>(p.calib->prompts[task].size());
    Var weighted = tape.scale(tape.sum_scalars(parts), w);
    DifferentiableScalar ds = tape.backward(weighted);
    r.weighted = ds.value();
    r.grad = ds.gradient(0);
    return r;
}

}  // namespace

Evaluation evaluate(const Problem& p, const Mixer& mixer, const Tensor& trainable,
                    bool include_reg) {
    trainable.ensure_finite("trainable coefficients");
    const std::size_t tasks = p.tasks();

    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t k = 0; k < tasks; ++k)
        for (std::size_t i = 0; i < p.calib->prompts[k].size(); ++i) jobs.emplace_back(k, i);

    std::vector<SampleResult> results(jobs.size());
    const bool parallel = kernels::parallel_enabled();
#pragma omp parallel for schedule(dynamic) if (parallel)
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        try {
            results[j] = evaluate_sample(p, mixer, trainable, jobs[j].first, jobs[j].second);
        } catch (const std::exception& e) {
            results[j].error = e.what();
        }
    }
    for (std::size_t j = 0; j < jobs.size(); ++j)
        if (!results[j].error.empty())
            throw NumericError("alignment evaluation failed on task " +
                               std::to_string(jobs[j].first) + " sample " +
                               std::to_string(jobs[j].second) + ": " + results[j].error);

    Evaluation e;
    e.hidden_per_task.assign(tasks, 0.0);
    e.logit_per_task.assign(tasks, 0.0);
    e.grad = Tensor(trainable.shape());
    // reduction in (task, sample) order
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        const std::size_t k = jobs[j].first;
        const double inv_n = 1.0 / static_cast<double>(p.calib->prompts[k].size());
        e.alignment += results[j].weighted;
        e.hidden_per_task[k] += results[j].hidden_raw * inv_n;
        e.logit_per_task[k] += results[j].logit_raw * inv_n;
        kernels::add(e.grad.data(), results[j].grad.data(), e.grad.data(), e.grad.size());
    }

    e.total = e.alignment;
    if (include_reg && p.cfg.reg_weight > 0.0) {
        Tape tape;
        Var leaf = tape.leaf(trainable);
        Var reg = tape.abs_deviation(leaf, mixer.reg_anchor(), mixer.reg_inv_scale());
        DifferentiableScalar ds = tape.backward(tape.scale(reg, p.cfg.reg_weight));
        e.reg = tape.value(reg)[0];
        e.total += ds.value();
        kernels::add(e.grad.data(), ds.gradient(0).data(), e.grad.data(), e.grad.size());
    } else if (include_reg) {
        // gamma == 0: report the regularizer value, contribute nothing
        Tape tape;
        Var leaf = tape.leaf(trainable);
        e.reg = tape.value(tape.abs_deviation(leaf, mixer.reg_anchor(),
                                              mixer.reg_inv_scale()))[0];
    }
    return e;
}

StepRecord to_record(const Evaluation& e) {
    StepRecord r;
    r.total = e.total;
    r.alignment = e.alignment;
    r.reg = e.reg;
    r.hidden_per_task = e.hidden_per_task;
    r.logit_per_task = e.logit_per_task;
    return r;
}

namespace {

void check_finite_record(const Evaluation& e, std::size_t step) {
    const auto bad = [&](const char* term) {
        throw NumericError("fit aborted at step " + std::to_string(step) +
                           ": non-finite " + term);
    };
    for (std::size_t k = 0; k < e.hidden_per_task.size(); ++k) {
        if (!std::isfinite(e.hidden_per_task[k]))
            bad(("hidden loss, task " + std::to_string(k)).c_str());
        if (!std::isfinite(e.logit_per_task[k]))
            bad(("logit loss, task " + std::to_string(k)).c_str());
    }
    if (!std::isfinite(e.reg)) bad("regularizer");
    if (!std::isfinite(e.total)) bad("total loss");
}

}  // namespace

std::pair<Tensor, TrainLog> minimize(const Problem& p, const Mixer& mixer, Tensor init) {
    init.ensure_finite("initial coefficients");
    TrainLog log;
    log.snapshot_interval = p.cfg.snapshot_interval;

    Tensor x = std::move(init);
    if (x.size() == 0 || p.cfg.steps == 0) {
        // nothing trainable or no-op training: the result is the init
        Evaluation e = evaluate(p, mixer, x);
        log.final_record = to_record(e);
        return {std::move(x), std::move(log)};
    }

    AdamOptimizer opt;
    Tensor* params[] = {&x};
    for (std::size_t step = 0; step < p.cfg.steps; ++step) {
        Evaluation e = [&] {
            try {
                return evaluate(p, mixer, x);
            } catch (const NumericError& err) {
                throw NumericError("fit aborted at step " + std::to_string(step) + ": " +
                                   err.what());
            }
        }();
        check_finite_record(e, step);
        log.steps.push_back(to_record(e));
        if (log.snapshot_interval && step % log.snapshot_interval == 0)
            log.snapshots.push_back(x);
        // linear step-size decay to zero across the run
        const double lr = p.cfg.step_size *
                          (1.0 - static_cast<double>(step) / static_cast<double>(p.cfg.steps));
        const Tensor grads[] = {e.grad};
        opt.step(params, grads, lr);
    }
    Evaluation e = evaluate(p, mixer, x);
    check_finite_record(e, p.cfg.steps);
    log.final_record = to_record(e);
    if (log.snapshot_interval) log.snapshots.push_back(x);
    return {std::move(x), std::move(log)};
}

}  // namespace align

DifferentiableScalar alignment_loss(const LayerCoefficients& coeffs, const ModelParams& base,
                                    std::span<const TaskVector> tvs,
                                    std::span<const ModelParams> experts,
                                    const CalibrationSet& calib, const AlignConfig& cfg) {
    align::Problem problem = align::make_problem(base, tvs, experts, calib, cfg);
    if (coeffs.experts() != tvs.size() || coeffs.units() != base.unit_count())
        throw ConfigError("alignment_loss: coefficient shape mismatch");
    align::LayerMixer mixer(base, tvs, coeffs.prior);
    align::Evaluation e = align::evaluate(problem, mixer, coeffs.alpha);
    return DifferentiableScalar(e.total, {e.grad});
}

std::pair<LayerCoefficients, TrainLog> fit(const ModelParams& base,
                                           std::span<const TaskVector> tvs,
                                           std::span<const ModelParams> experts,
                                           const CalibrationSet& calib, const AlignConfig& cfg,
                                           const LayerCoefficients& init) {
    align::Problem problem = align::make_problem(base, tvs, experts, calib, cfg);
    if (init.experts() != tvs.size() || init.units() != base.unit_count())
        throw ConfigError("fit: initial coefficient shape mismatch");
    align::LayerMixer mixer(base, tvs, init.prior);
    auto [x, log] = align::minimize(problem, mixer, init.alpha);
    LayerCoefficients out;
    out.alpha = std::move(x);
    out.prior = init.prior;
    return {std::move(out), std::move(log)};
}

LayerCoefficients ta_grid_init(const ModelParams& base, std::span<const TaskVector> tvs,
                               std::span<const ModelParams> experts, const CalibrationSet& calib,
                               const AlignConfig& cfg, std::span<const double> lambda_grid) {
    if (lambda_grid.empty()) throw ConfigError("ta_grid_init: empty lambda grid");
    align::Problem problem = align::make_problem(base, tvs, experts, calib, cfg);

    double best_loss = 0.0;
    std::size_t best = 0;
    for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
        LayerCoefficients c =
            LayerCoefficients::constant(tvs.size(), base.unit_count(), lambda_grid[i]);
        align::LayerMixer mixer(base, tvs, c.prior);
        // regularizer excluded: candidates are compared on alignment only
        align::Evaluation e = align::evaluate(problem, mixer, c.alpha, /*include_reg=*/false);
        if (i == 0 || e.alignment < best_loss) {
            best_loss = e.alignment;
            best = i;
        }
    }
    return LayerCoefficients::constant(tvs.size(), base.unit_count(), lambda_grid[best]);
}

}  // namespace merging
