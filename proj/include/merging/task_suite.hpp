#pragma once

#include <span>
#include <string>
#include <vector>

#include "merging/calibration.hpp"
#include "merging/transformer.hpp"

namespace merging {

// Fixed 32-token vocabulary shared by every task.
namespace vocab {
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kDigit0 = 2;  // '0'..'9' at 2..11
inline constexpr int kPlus = 12;
inline constexpr int kEquals = 13;
inline constexpr int kReverseMarker = 14;
inline constexpr int kParityMarker = 15;
inline constexpr int kLetterA = 16;  // 'a'..'h' at 16..23
inline constexpr int kEven = 24;     // parity answers get their own tokens
inline constexpr int kOdd = 25;
inline constexpr int kNoise0 = 26;   // 26..31 appear only in pretraining noise
inline constexpr int kSize = 32;

inline int digit(std::size_t d) { return kDigit0 + static_cast<int>(d); }
inline int letter(std::size_t i) { return kLetterA + static_cast<int>(i); }
}  // namespace vocab

enum class TaskKind { modular_addition, string_reversal, bit_parity };

struct TaskSpec {
    std::string id;
    TaskKind kind = TaskKind::modular_addition;
    std::size_t modulus = 7;    // modular_addition: answers are single digits, so <= 10
    std::size_t length = 4;     // string_reversal: string length
    std::size_t alphabet = 6;   // string_reversal: letters drawn from a..(a+alphabet-1), <= 8
    std::size_t width = 6;      // bit_parity: number of bits
    // bit_parity draw probability of a 1-bit. Uniform bits make parity a
    // gradient-free plateau at this scale; a mild bias keeps it learnable.
    double bit_one_prob = 0.3;

    void validate(const ModelConfig& cfg) const;
    std::size_t answer_length() const;
};

struct Example {
    std::vector<int> prompt;
    std::vector<int> answer;
};

// Reproducible labeled examples; prompts include the leading BOS token.
std::vector<Example> gen_dataset(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

// Unlabeled prompts, one collection per task (what the merging losses see).
CalibrationSet make_calibration(std::span<const TaskSpec> tasks, std::size_t per_task,
                                std::uint64_t seed);

struct TrainHyper {
    std::size_t steps = 2500;
    double lr = 2e-3;
    std::size_t batch = 16;
    std::size_t dataset_size = 512;
    std::uint64_t seed = 1;
    double init_stddev = 0.08;      // base initialization scale
    double expert_threshold = 0.9;  // required own-task accuracy after SFT
    // Failed threshold checks retry with a derived data-order seed; small
    // transformers occasionally sit on an optimization plateau and a
    // reshuffle reliably escapes it. Deterministic given `seed`.
    std::size_t max_restarts = 3;
    // Stop fine-tuning once the own-task accuracy reaches this level,
    // checked every early_stop_interval steps. Keeps the weight
    // displacement (and with it cross-expert interference) small.
    // 0 disables the check.
    double early_stop_accuracy = 0.97;
    std::size_t early_stop_interval = 150;
};

// Recommended base pretraining settings. The step count balances two
// failure modes: an undertrained base anchors nothing (task vectors blow
// up and merging degenerates), an overtrained one entrenches the
// format-prediction objective and slows answer fine-tuning.
inline constexpr std::size_t kBasePretrainSteps = 2000;

inline TrainHyper base_pretrain_hyper(std::uint64_t seed) {
    TrainHyper h;
    h.seed = seed;
    h.steps = kBasePretrainSteps;
    h.lr = 0.01;
    h.batch = 8;
    return h;
}

// Next-token pretraining on task-format prompts (no answers) mixed with
// random sequences. Aborts with a NumericError if the loss turns
// non-finite. Deterministic given the seed.
ModelParams train_base(const ModelConfig& cfg, std::span<const TaskSpec> tasks,
                       const TrainHyper& hyper, std::vector<double>* loss_curve = nullptr);

// Full-weight SFT on one task, loss on answer tokens only. Reports a
// ThresholdError if the expert misses hyper.expert_threshold on its task.
ModelParams train_expert(const ModelParams& base, const TaskSpec& task,
                         const TrainHyper& hyper, std::vector<double>* loss_curve = nullptr);

// SFT on the union of all task datasets; the supervised comparator.
ModelParams train_mixture(const ModelParams& base, std::span<const TaskSpec> tasks,
                          const TrainHyper& hyper, std::vector<double>* loss_curve = nullptr);

struct TaskAccuracy {
    std::string task;
    double accuracy = 0.0;
    std::size_t samples = 0;
};

struct EvalResult {
    std::vector<TaskAccuracy> per_task;
    double macro_average = 0.0;  // unweighted mean across tasks
};

// Greedy argmax decoding of exactly answer_length tokens per prompt, exact
// match against the ground truth. Deterministic; samples evaluated in
// parallel with ordered collection.
EvalResult evaluate(const ModelParams& params, std::span<const TaskSpec> tasks,
                    std::size_t per_task, std::uint64_t seed);

// The 3-task suite used throughout: modular addition, string reversal,
// bit parity.
std::vector<TaskSpec> default_tasks();

}  // namespace merging
