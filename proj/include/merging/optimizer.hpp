#pragma once

#include <span>

#include "merging/tensor.hpp"

namespace merging {

// Adam with bias correction; moment decay 0.9/0.999, eps 1e-8. The caller
// supplies the (possibly decayed) step size per call.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace merging
