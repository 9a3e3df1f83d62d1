#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "merging/tensor.hpp"

namespace merging {

// Handle into a Tape. Valid only for the tape that created it.
struct Var {
    std::uint32_t id = 0;
};

// Scalar result of a backward pass: the objective value plus one gradient
// tensor per registered leaf, in registration order. Immutable; building
// it twice from the same computation yields identical contents.
class DifferentiableScalar {
public:
    DifferentiableScalar(double value, std::vector<Tensor> leaf_gradients)
        : value_(value), grads_(std::move(leaf_gradients)) {}

    double value() const noexcept { return value_; }
    std::size_t leaf_count() const noexcept { return grads_.size(); }
    const Tensor& gradient(std::size_t leaf_index) const { return grads_.at(leaf_index); }
    const std::vector<Tensor>& gradients() const noexcept { return grads_; }

private:
    double value_;
    std::vector<Tensor> grads_;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// iteration is a topological order and backward is deterministic. A tape
// is confined to one thread; values are immutable once recorded.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var leaf(Tensor value);
    Var constant(Tensor value);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    std::size_t leaf_count() const noexcept { return leaves_.size(); }

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var matmul(Var a, Var b);
    Var silu_mul(Var gate, Var up);
    Var rms_norm(Var x, Var gain, double eps);
    Var rope(Var x, std::size_t n_heads);
    Var causal_attention(Var q, Var k, Var v, std::size_t n_heads);
    Var embed_rows(Var table, std::span<const int> tokens);

    // scalar-valued; gradient flows only through `a`
    Var sq_l2_distance(Var a, Var b);
    // scalar-valued; gradient flows only through `model_logits`
    Var softmax_kl(Var target_logits, Var model_logits, double temperature);
    Var cross_entropy(Var logits, std::span<const int> targets,
                      std::span<const unsigned char> loss_mask);
    // inv_scale * sum_i |x_i - anchor_i|, subgradient 0 at ties
    Var abs_deviation(Var x, Tensor anchor, double inv_scale);
    Var sum_scalars(std::span<const Var> xs);

    // out = base + sum_k coeffs[k, unit_index] * taus[k]; coeffs is [K, U].
    // `taus` entries must outlive the tape.
    Var mix_unit(Var coeffs, std::size_t unit_index, const Tensor& base,
                 std::span<const Tensor* const> taus);
    // Chunked variant: `packed` is the flat trainable-coefficient vector and
    // chunk s of the flattened unit spans [bounds[s], bounds[s+1]); the
    // coefficient of (chunk s, expert k) sits at packed[offset + s*K + k].
    Var mix_unit_chunked(Var packed, std::size_t packed_offset,
                         std::span<const std::size_t> bounds, const Tensor& base,
                         std::span<const Tensor* const> taus);

    // Runs reverse accumulation from a scalar output. Repeatable: calling
    // twice returns identical gradients.
    DifferentiableScalar backward(Var scalar_output);

private:
    struct Node {
        Tensor value;
        bool needs_grad = false;
        std::function<void(Tape&, const Tensor&)> back;
    };

    Var push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> back);
    bool tracked(Var v) const { return grad_enabled_ && nodes_[v.id].needs_grad; }
    void accumulate(std::uint32_t id, const Tensor& g);
    void accumulate_scaled(std::uint32_t id, const Tensor& g, double s);
    Tensor& grad_buffer(std::uint32_t id);

    // deque keeps value references stable while new nodes are appended
    std::deque<Node> nodes_;
    std::vector<std::uint32_t> leaves_;
    std::vector<Tensor> grads_;
    std::vector<unsigned char> grad_live_;
    bool grad_enabled_;
};

// Compares analytic gradients of `f` against central finite differences at
// `point`, perturbing every scalar of every leaf by +-epsilon. Returns the
// worst relative error, |a - fd| / max(|a| + |fd|, floor) with a floor
// scaled to the magnitude of f to absorb finite-difference noise on
// genuinely zero gradients.
double grad_check(const std::function<DifferentiableScalar(std::span<const Tensor>)>& f,
                  std::span<const Tensor> point, double epsilon);

}  // namespace merging
