#include "merging/transformer.hpp"

#include <cstring>

#include "merging/nnops.hpp"
#include "merging/rng.hpp"

namespace merging {

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_blocks < 1 || d_mlp < 1 ||
        max_seq_len < 1)
        throw ConfigError("model config: all counts must be >= 1");
    if (d_model % n_heads != 0)
        throw ConfigError("model config: d_model must be divisible by n_heads");
}

const char* unit_kind_name(UnitKind kind) {
    switch (kind) {
        case UnitKind::embed: return "embed";
        case UnitKind::norm1: return "norm1";
        case UnitKind::attn_q: return "attn.q";
        case UnitKind::attn_k: return "attn.k";
        case UnitKind::attn_v: return "attn.v";
        case UnitKind::attn_o: return "attn.o";
        case UnitKind::norm2: return "norm2";
        case UnitKind::mlp_gate: return "mlp.gate";
        case UnitKind::mlp_up: return "mlp.up";
        case UnitKind::mlp_down: return "mlp.down";
        case UnitKind::final_norm: return "final_norm";
        case UnitKind::head: return "head";
    }
    return "?";
}

std::string unit_name(const UnitId& id) {
    if (id.block < 0) return unit_kind_name(id.kind);
    return "block" + std::to_string(id.block) + "." + unit_kind_name(id.kind);
}

std::vector<std::size_t> unit_shape(const ModelConfig& cfg, const UnitId& id) {
    switch (id.kind) {
        case UnitKind::embed: return {cfg.vocab_size, cfg.d_model};
        case UnitKind::head: return {cfg.d_model, cfg.vocab_size};
        case UnitKind::norm1:
        case UnitKind::norm2:
        case UnitKind::final_norm: return {cfg.d_model};
        case UnitKind::attn_q:
        case UnitKind::attn_k:
        case UnitKind::attn_v:
        case UnitKind::attn_o: return {cfg.d_model, cfg.d_model};
        case UnitKind::mlp_gate:
        case UnitKind::mlp_up: return {cfg.d_model, cfg.d_mlp};
        case UnitKind::mlp_down: return {cfg.d_mlp, cfg.d_model};
    }
    throw ConfigError("unknown unit kind");
}

std::size_t param_count(const ModelConfig& cfg, const UnitId& id) {
    const auto s = unit_shape(cfg, id);
    return shape_size(s);
}

std::vector<UnitId> unit_schema(const ModelConfig& cfg) {
    std::vector<UnitId> schema;
    schema.reserve(cfg.n_blocks * 9 + 3);
    schema.push_back({-1, UnitKind::embed});
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const int bi = static_cast<int>(b);
        schema.push_back({bi, UnitKind::norm1});
        schema.push_back({bi, UnitKind::attn_q});
        schema.push_back({bi, UnitKind::attn_k});
        schema.push_back({bi, UnitKind::attn_v});
        schema.push_back({bi, UnitKind::attn_o});
        schema.push_back({bi, UnitKind::norm2});
        schema.push_back({bi, UnitKind::mlp_gate});
        schema.push_back({bi, UnitKind::mlp_up});
        schema.push_back({bi, UnitKind::mlp_down});
    }
    schema.push_back({-1, UnitKind::final_norm});
    schema.push_back({-1, UnitKind::head});
    return schema;
}

Stage unit_stage(const UnitId& id, std::size_t n_blocks) {
    if (id.block < 0) return Stage::special_;
    const std::size_t third = n_blocks / 3;
    const auto b = static_cast<std::size_t>(id.block);
    if (b < third) return Stage::early;
    if (b < 2 * third) return Stage::middle;
    return Stage::late;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::early: return "early";
        case Stage::middle: return "middle";
        case Stage::late: return "late";
        case Stage::special_: return "special";
    }
    return "?";
}

ModelParams::ModelParams(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    schema_ = unit_schema(cfg_);
    tensors_.reserve(schema_.size());
    for (const auto& id : schema_) tensors_.emplace_back(unit_shape(cfg_, id));
}

ModelParams ModelParams::random_init(const ModelConfig& cfg, std::uint64_t seed,
                                     double stddev) {
    ModelParams p(cfg);
    Rng rng(seed);
    for (std::size_t u = 0; u < p.schema_.size(); ++u) {
        const UnitKind kind = p.schema_[u].kind;
        Tensor& t = p.tensors_[u];
        if (kind == UnitKind::norm1 || kind == UnitKind::norm2 ||
            kind == UnitKind::final_norm) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
        } else {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
        }
    }
    return p;
}

std::size_t ModelParams::index_of(const UnitId& id) const {
    for (std::size_t u = 0; u < schema_.size(); ++u)
        if (schema_[u] == id) return u;
    throw ConfigError("unknown unit " + unit_name(id));
}

std::size_t ModelParams::total_param_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

bool ModelParams::same_schema(const ModelParams& other) const {
    return cfg_ == other.cfg_;
}

std::uint64_t ModelParams::fingerprint() const {
    std::uint64_t h = fnv1a("model-params");
    h = fnv1a(&cfg_, sizeof(cfg_), h);
    for (std::size_t u = 0; u < tensors_.size(); ++u) {
        h = fnv1a(unit_name(schema_[u]), h);
        const Tensor& t = tensors_[u];
        h = fnv1a(t.data(), t.size() * sizeof(double), h);
    }
    return h;
}

namespace {

struct PlainPolicy {
    using Value = Tensor;
    std::size_t n_heads;
    Tensor embed(const Tensor& table, std::span<const int> toks) const {
        return nnops::embed_rows(table, toks);
    }
    Tensor matmul(const Tensor& a, const Tensor& b) const { return nnops::matmul(a, b); }
    Tensor add(const Tensor& a, const Tensor& b) const { return nnops::add(a, b); }
    Tensor rms_norm(const Tensor& x, const Tensor& g) const {
        return nnops::rms_norm(x, g, kRmsEps);
    }
    Tensor rope(const Tensor& x) const { return nnops::rope(x, n_heads); }
    Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) const {
        return nnops::causal_attention(q, k, v, n_heads);
    }
    Tensor silu_mul(const Tensor& g, const Tensor& u) const { return nnops::silu_mul(g, u); }
};

struct TapePolicy {
    using Value = Var;
    Tape* tape;
    std::size_t n_heads;
    Var embed(Var table, std::span<const int> toks) const {
        return tape->embed_rows(table, toks);
    }
    Var matmul(Var a, Var b) const { return tape->matmul(a, b); }
    Var add(Var a, Var b) const { return tape->add(a, b); }
    Var rms_norm(Var x, Var g) const { return tape->rms_norm(x, g, kRmsEps); }
    Var rope(Var x) const { return tape->rope(x, n_heads); }
    Var attention(Var q, Var k, Var v) const {
        return tape->causal_attention(q, k, v, n_heads);
    }
    Var silu_mul(Var g, Var u) const { return tape->silu_mul(g, u); }
};

template <class Policy>
struct TraceOf {
    std::vector<typename Policy::Value> hidden_states;
    typename Policy::Value logits;
};

template <class Policy>
TraceOf<Policy> run_forward(const Policy& p, const ModelConfig& cfg,
                            std::span<const typename Policy::Value> units,
                            std::span<const int> tokens) {
    if (tokens.empty()) throw ConfigError("forward on empty token sequence");
    if (tokens.size() > cfg.max_seq_len)
        throw ConfigError("sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw ConfigError("token " + std::to_string(t) + " outside vocabulary");

    // canonical schema offsets
    const auto block_unit = [&](std::size_t b, std::size_t slot) {
        return units[1 + b * 9 + slot];
    };
    TraceOf<Policy> trace;
    trace.hidden_states.reserve(cfg.n_blocks);

    auto x = p.embed(units[0], tokens);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        auto h = p.rms_norm(x, block_unit(b, 0));
        auto q = p.rope(p.matmul(h, block_unit(b, 1)));
        auto k = p.rope(p.matmul(h, block_unit(b, 2)));
        auto v = p.matmul(h, block_unit(b, 3));
        x = p.add(x, p.matmul(p.attention(q, k, v), block_unit(b, 4)));
        auto h2 = p.rms_norm(x, block_unit(b, 5));
        auto gated = p.silu_mul(p.matmul(h2, block_unit(b, 6)), p.matmul(h2, block_unit(b, 7)));
        x = p.add(x, p.matmul(gated, block_unit(b, 8)));
        trace.hidden_states.push_back(x);
    }
    const std::size_t n_units = cfg.n_blocks * 9 + 3;
    auto fin = p.rms_norm(x, units[n_units - 2]);
    trace.logits = p.matmul(fin, units[n_units - 1]);
    return trace;
}

}  // namespace

ForwardTrace forward(const ModelParams& params, std::span<const int> tokens) {
    PlainPolicy p{params.config().n_heads};
    auto trace = run_forward(p, params.config(), params.units(), tokens);
    return ForwardTrace{std::move(trace.hidden_states), std::move(trace.logits)};
}

TraceVars forward_on_tape(Tape& tape, const ModelConfig& cfg, std::span<const Var> units,
                          std::span<const int> tokens) {
    if (units.size() != cfg.n_blocks * 9 + 3)
        throw ConfigError("forward_on_tape unit count does not match config");
    TapePolicy p{&tape, cfg.n_heads};
    auto trace = run_forward(p, cfg, units, tokens);
    return TraceVars{std::move(trace.hidden_states), trace.logits};
}

}  // namespace merging
