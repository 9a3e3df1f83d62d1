#pragma once

#include <vector>

namespace merging {

// Unlabeled token sequences, one collection per task, aligned by index with
// the task-vector/expert order. Prompts only; answer tokens never enter.
struct CalibrationSet {
    std::vector<std::vector<std::vector<int>>> prompts;

    std::size_t tasks() const noexcept { return prompts.size(); }
};

}  // namespace merging
