#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "merging/autodiff.hpp"
#include "merging/tensor.hpp"

namespace merging {

struct ModelConfig {
    std::size_t vocab_size = 32;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t n_blocks = 4;
    std::size_t d_mlp = 64;
    std::size_t max_seq_len = 24;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// RMS normalization epsilon; an architecture constant, not a parameter.
inline constexpr double kRmsEps = 1e-6;

enum class UnitKind : std::uint8_t {
    embed,
    norm1,
    attn_q,
    attn_k,
    attn_v,
    attn_o,
    norm2,
    mlp_gate,
    mlp_up,
    mlp_down,
    final_norm,
    head,
};

// One mergeable unit: a single named parameter tensor. Block-local kinds
// carry the block index; embed/final_norm/head use block = -1.
struct UnitId {
    int block = -1;
    UnitKind kind = UnitKind::embed;
    bool operator==(const UnitId&) const = default;
};

const char* unit_kind_name(UnitKind kind);
std::string unit_name(const UnitId& id);
std::vector<std::size_t> unit_shape(const ModelConfig& cfg, const UnitId& id);
// number of scalar parameters in one unit
std::size_t param_count(const ModelConfig& cfg, const UnitId& id);
// all units in canonical order: embed, per-block
// [norm1, attn.q, attn.k, attn.v, attn.o, norm2, mlp.gate, mlp.up, mlp.down],
// final_norm, head
std::vector<UnitId> unit_schema(const ModelConfig& cfg);

enum class Stage { early, middle, late, special_ };
// blocks partitioned into thirds by index, remainder assigned to late
Stage unit_stage(const UnitId& id, std::size_t n_blocks);
const char* stage_name(Stage s);

// Full parameter set of one model, stored per unit in canonical order.
class ModelParams {
public:
    explicit ModelParams(ModelConfig cfg);
    static ModelParams random_init(const ModelConfig& cfg, std::uint64_t seed,
                                   double stddev = 0.08);

    const ModelConfig& config() const noexcept { return cfg_; }
    std::size_t unit_count() const noexcept { return tensors_.size(); }
    const std::vector<UnitId>& schema() const noexcept { return schema_; }

    Tensor& unit(std::size_t index) { return tensors_[index]; }
    const Tensor& unit(std::size_t index) const { return tensors_[index]; }
    const Tensor& unit(const UnitId& id) const { return tensors_[index_of(id)]; }
    std::span<const Tensor> units() const noexcept { return tensors_; }
    std::size_t index_of(const UnitId& id) const;

    std::size_t total_param_count() const;
    bool same_schema(const ModelParams& other) const;
    std::uint64_t fingerprint() const;

private:
    ModelConfig cfg_;
    std::vector<UnitId> schema_;
    std::vector<Tensor> tensors_;
};

struct ForwardTrace {
    std::vector<Tensor> hidden_states;  // post-block residual stream, one per block
    Tensor logits;                      // [T, vocab]
};

// Causal decoder forward pass: pre-norm blocks, RoPE positions, gated MLP,
// greedy-friendly deterministic arithmetic. Pure function.
ForwardTrace forward(const ModelParams& params, std::span<const int> tokens);

struct TraceVars {
    std::vector<Var> hidden_states;
    Var logits;
};

// Same computation against a tape; `units` follow the canonical schema.
TraceVars forward_on_tape(Tape& tape, const ModelConfig& cfg, std::span<const Var> units,
                          std::span<const int> tokens);

}  // namespace merging
