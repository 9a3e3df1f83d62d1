#pragma once

#include <span>

#include "merging/tensor.hpp"

namespace merging::nnops {

// Forward math shared by the plain transformer forward and the tape ops,
// so both paths produce bitwise-identical values. Activations are
// row-major [positions, features].

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu_mul(const Tensor& gate, const Tensor& up);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);
Tensor rope(const Tensor& x, std::size_t n_heads);
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t n_heads);
Tensor embed_rows(const Tensor& table, std::span<const int> tokens);

// numerically stable softmax of one row; output sums to 1
void softmax_row(const double* in, double* out, std::size_t n);
// log-softmax of one row
void log_softmax_row(const double* in, double* out, std::size_t n);

// mean over rows of the squared Euclidean distance between matching rows
double sq_l2_distance(const Tensor& a, const Tensor& b);
// T^2-scaled KL(softmax(target/T) || softmax(model/T)), mean over rows
double softmax_kl(const Tensor& target_logits, const Tensor& model_logits,
                  double temperature);
// mean negative log-likelihood over rows where mask != 0
double cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const unsigned char> mask);

}  // namespace merging::nnops
