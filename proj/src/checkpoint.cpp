#include "merging/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace merging {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'E', 'M', 'C', 'K'};
constexpr unsigned char kVersion = 1;

struct NamedTensor {
    std::string name;
    const Tensor* tensor;
};

json config_to_json(const ModelConfig& cfg) {
    return json{{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},
                {"n_heads", cfg.n_heads},       {"n_blocks", cfg.n_blocks},
                {"d_mlp", cfg.d_mlp},           {"max_seq_len", cfg.max_seq_len}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.n_blocks = j.at("n_blocks").get<std::size_t>();
    cfg.d_mlp = j.at("d_mlp").get<std::size_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    cfg.validate();
    return cfg;
}

void append_le_doubles(std::string& out, const Tensor& t) {
    static_assert(sizeof(double) == 8);
    if constexpr (std::endian::native == std::endian::little) {
        out.append(reinterpret_cast<const char*>(t.data()), t.size() * 8);
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, &t.data()[i], 8);
            for (int b = 0; b < 8; ++b)
                out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
    }
}

void read_le_doubles(const std::string& payload, std::size_t offset, Tensor& t) {
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(t.data(), payload.data() + offset, t.size() * 8);
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(
                            static_cast<unsigned char>(payload[offset + i * 8 + b]))
                        << (8 * b);
            double v;
            std::memcpy(&v, &bits, 8);
            t.data()[i] = v;
        }
    }
}

void write_file(const std::string& path, const std::string& type, const ModelConfig& cfg,
                const std::vector<NamedTensor>& tensors, const json& extra,
                const Metadata& metadata) {
    json units = json::array();
    std::string payload;
    std::size_t offset = 0;
    for (const auto& nt : tensors) {
        units.push_back(json{{"name", nt.name},
                             {"offset", offset},
                             {"shape", nt.tensor->shape()}});
        append_le_doubles(payload, *nt.tensor);
        offset += nt.tensor->size() * 8;
    }

    json header{{"config", config_to_json(cfg)},
                {"extra", extra},
                {"metadata", metadata},
                {"payload_bytes", payload.size()},
                {"type", type},
                {"units", units}};
    const std::string header_text = header.dump();
    if (header_text.size() > 0xffffffffull) throw IoError("checkpoint header too large");

    std::string blob;
    blob.reserve(9 + header_text.size() + payload.size());
    blob.append(kMagic, 4);
    blob.push_back(static_cast<char>(kVersion));
    const auto hlen = static_cast<std::uint32_t>(header_text.size());
    for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((hlen >> (8 * b)) & 0xff));
    blob += header_text;
    blob += payload;

    // atomic publish via temp file + rename
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw IoError("short write to '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

struct Loaded {
    json header;
    std::string payload;
};

Loaded read_file(const std::string& path, const std::string& expect_type) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (blob.size() < 9 || std::memcmp(blob.data(), kMagic, 4) != 0)
        throw IoError("'" + path + "': bad magic, not a checkpoint file");
    if (static_cast<unsigned char>(blob[4]) != kVersion)
        throw IoError("'" + path + "': unknown format version " +
                      std::to_string(static_cast<unsigned>(blob[4])));
    std::uint32_t hlen = 0;
    for (int b = 0; b < 4; ++b)
        hlen |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[5 + b])) << (8 * b);
    if (blob.size() < 9 + static_cast<std::size_t>(hlen))
        throw IoError("'" + path + "': truncated header");

    Loaded loaded;
    try {
        loaded.header = json::parse(blob.substr(9, hlen));
    } catch (const json::exception& e) {
        throw IoError("'" + path + "': malformed header: " + e.what());
    }
    loaded.payload = blob.substr(9 + hlen);

    const auto declared = loaded.header.at("payload_bytes").get<std::size_t>();
    if (loaded.payload.size() < declared)
        throw IoError("'" + path + "': truncated payload (" +
                      std::to_string(loaded.payload.size()) + " of " +
                      std::to_string(declared) + " bytes)");
    if (loaded.payload.size() > declared)
        throw IoError("'" + path + "': trailing bytes after payload");

    const auto type = loaded.header.at("type").get<std::string>();
    if (type != expect_type)
        throw IoError("'" + path + "': type is '" + type + "', expected '" + expect_type +
                      "'");
    return loaded;
}

// validates header-declared units against expectations and pulls tensors out
std::vector<Tensor> extract_units(const Loaded& loaded, const std::string& path,
                                  const std::vector<std::pair<std::string,
                                                              std::vector<std::size_t>>>& want) {
    const json& units = loaded.header.at("units");
    if (units.size() != want.size())
        throw IoError("'" + path + "': header declares " + std::to_string(units.size()) +
                      " tensors, expected " + std::to_string(want.size()));
    std::vector<Tensor> out;
    out.reserve(want.size());
    std::size_t expect_offset = 0;
    for (std::size_t i = 0; i < want.size(); ++i) {
        const auto name = units[i].at("name").get<std::string>();
        const auto offset = units[i].at("offset").get<std::size_t>();
        const auto shape = units[i].at("shape").get<std::vector<std::size_t>>();
        if (name != want[i].first || shape != want[i].second)
            throw IoError("'" + path + "': tensor " + std::to_string(i) + " is '" + name +
                          "' " + Tensor(shape).shape_string() + ", expected '" +
                          want[i].first + "'");
        if (offset != expect_offset)
            throw IoError("'" + path + "': tensor '" + name + "' offset " +
                          std::to_string(offset) + " breaks header order");
        Tensor t(shape);
        if (offset + t.size() * 8 > loaded.payload.size())
            throw IoError("'" + path + "': tensor '" + name +
                          "' extends beyond the payload");
        read_le_doubles(loaded.payload, offset, t);
        out.push_back(std::move(t));
        expect_offset = offset + out.back().size() * 8;
    }
    if (expect_offset != loaded.payload.size())
        throw IoError("'" + path + "': payload length does not match declared tensors");
    return out;
}

Metadata metadata_from_header(const json& header) {
    Metadata md;
    for (const auto& [k, v] : header.at("metadata").items()) md[k] = v.get<std::string>();
    return md;
}

}  // namespace

void save_model(const ModelParams& params, const std::string& path, const Metadata& metadata) {
    std::vector<NamedTensor> tensors;
    tensors.reserve(params.unit_count());
    for (std::size_t u = 0; u < params.unit_count(); ++u)
        tensors.push_back({unit_name(params.schema()[u]), &params.unit(u)});
    write_file(path, "model_params", params.config(), tensors, json::object(), metadata);
}

ModelParams load_model(const std::string& path, Metadata* metadata) {
    Loaded loaded = read_file(path, "model_params");
    const ModelConfig cfg = config_from_json(loaded.header.at("config"));

    ModelParams params(cfg);
    std::vector<std::pair<std::string, std::vector<std::size_t>>> want;
    for (const auto& id : params.schema()) want.emplace_back(unit_name(id), unit_shape(cfg, id));
    std::vector<Tensor> tensors = extract_units(loaded, path, want);
    for (std::size_t u = 0; u < tensors.size(); ++u) {
        tensors[u].ensure_finite("loaded model unit");
        params.unit(u) = std::move(tensors[u]);
    }
    if (metadata) *metadata = metadata_from_header(loaded.header);
    return params;
}

void save_layer_coefficients(const LayerCoefficients& coeffs, const ModelConfig& cfg,
                             const std::string& path, const Metadata& metadata) {
    Tensor prior({coeffs.prior.size()},
                 std::vector<double>(coeffs.prior.begin(), coeffs.prior.end()));
    std::vector<NamedTensor> tensors{{"alpha", &coeffs.alpha}, {"alpha_prior", &prior}};
    write_file(path, "layer_coefficients", cfg, tensors, json::object(), metadata);
}

LayerCoefficients load_layer_coefficients(const std::string& path, ModelConfig* cfg_out,
                                          Metadata* metadata) {
    Loaded loaded = read_file(path, "layer_coefficients");
    const ModelConfig cfg = config_from_json(loaded.header.at("config"));
    const std::size_t units = unit_schema(cfg).size();

    const json& u0 = loaded.header.at("units").at(0);
    const auto alpha_shape = u0.at("shape").get<std::vector<std::size_t>>();
    if (alpha_shape.size() != 2 || alpha_shape[1] != units)
        throw IoError("'" + path + "': alpha shape does not match the unit schema");
    const std::size_t experts = alpha_shape[0];

    std::vector<Tensor> tensors = extract_units(
        loaded, path, {{"alpha", {experts, units}}, {"alpha_prior", {experts}}});
    LayerCoefficients out;
    out.alpha = std::move(tensors[0]);
    out.alpha.ensure_finite("loaded coefficients");
    out.prior.assign(tensors[1].data(), tensors[1].data() + experts);
    if (cfg_out) *cfg_out = cfg;
    if (metadata) *metadata = metadata_from_header(loaded.header);
    return out;
}

void save_chunk_coefficients(const ChunkPlan& plan, const ChunkCoefficients& coeffs,
                             const ModelConfig& cfg, const std::string& path,
                             const Metadata& metadata) {
    const std::size_t experts = coeffs.experts();
    // canonical packing: unit-major, chunk, then expert
    std::vector<double> packed;
    packed.reserve(plan.total_chunks() * experts);
    for (std::size_t u = 0; u < plan.chunk_counts.size(); ++u)
        for (std::size_t s = 0; s < plan.chunk_counts[u]; ++s)
            for (std::size_t k = 0; k < experts; ++k) packed.push_back(coeffs.chunk[k][u][s]);
    Tensor packed_t({packed.size()}, packed);
    Tensor prior({coeffs.prior.size()},
                 std::vector<double>(coeffs.prior.begin(), coeffs.prior.end()));

    json extra{{"budget", plan.budget},
               {"steepness", plan.steepness},
               {"chunk_counts", plan.chunk_counts},
               {"bounds", plan.bounds}};
    std::vector<NamedTensor> tensors{
        {"packed", &packed_t}, {"frozen", &coeffs.frozen}, {"alpha_prior", &prior}};
    write_file(path, "chunk_coefficients", cfg, tensors, extra, metadata);
}

ChunkCheckpoint load_chunk_coefficients(const std::string& path, ModelConfig* cfg_out,
                                        Metadata* metadata) {
    Loaded loaded = read_file(path, "chunk_coefficients");
    const ModelConfig cfg = config_from_json(loaded.header.at("config"));
    const std::size_t units = unit_schema(cfg).size();

    ChunkCheckpoint out;
    const json& extra = loaded.header.at("extra");
    out.plan.budget = extra.at("budget").get<double>();
    out.plan.steepness = extra.at("steepness").get<double>();
    out.plan.chunk_counts = extra.at("chunk_counts").get<std::vector<std::size_t>>();
    out.plan.bounds = extra.at("bounds").get<std::vector<std::vector<std::size_t>>>();
    if (out.plan.chunk_counts.size() != units || out.plan.bounds.size() != units)
        throw IoError("'" + path + "': chunk plan does not match the unit schema");

    const json& u1 = loaded.header.at("units").at(1);
    const auto frozen_shape = u1.at("shape").get<std::vector<std::size_t>>();
    if (frozen_shape.size() != 2 || frozen_shape[1] != units)
        throw IoError("'" + path + "': frozen coefficient shape mismatch");
    const std::size_t experts = frozen_shape[0];
    const std::size_t total = out.plan.total_chunks() * experts;

    std::vector<Tensor> tensors =
        extract_units(loaded, path,
                      {{"packed", {total}}, {"frozen", {experts, units}},
                       {"alpha_prior", {experts}}});
    out.coeffs.frozen = std::move(tensors[1]);
    out.coeffs.prior.assign(tensors[2].data(), tensors[2].data() + experts);
    out.coeffs.chunk.assign(experts, std::vector<std::vector<double>>(units));
    std::size_t pos = 0;
    for (std::size_t u = 0; u < units; ++u) {
        for (std::size_t k = 0; k < experts; ++k)
            out.coeffs.chunk[k][u].resize(out.plan.chunk_counts[u]);
        for (std::size_t s = 0; s < out.plan.chunk_counts[u]; ++s)
            for (std::size_t k = 0; k < experts; ++k)
                out.coeffs.chunk[k][u][s] = tensors[0][pos++];
    }
    if (cfg_out) *cfg_out = cfg;
    if (metadata) *metadata = metadata_from_header(loaded.header);
    return out;
}

void save_importance(const ImportanceReport& report, const ModelConfig& cfg,
                     const std::string& path, const Metadata& metadata) {
    Tensor importance({report.importance.size()},
                      std::vector<double>(report.importance.begin(), report.importance.end()));
    std::vector<NamedTensor> tensors{{"importance", &importance},
                                     {"factor_contrib", &report.factor_contrib}};
    write_file(path, "importance_report", cfg, tensors, json::object(), metadata);
}

ImportanceReport load_importance(const std::string& path, ModelConfig* cfg_out,
                                 Metadata* metadata) {
    Loaded loaded = read_file(path, "importance_report");
    const ModelConfig cfg = config_from_json(loaded.header.at("config"));
    const auto schema = unit_schema(cfg);
    const std::size_t units = schema.size();

    const json& u1 = loaded.header.at("units").at(1);
    const auto fc_shape = u1.at("shape").get<std::vector<std::size_t>>();
    if (fc_shape.size() != 2 || fc_shape[1] != units)
        throw IoError("'" + path + "': factor_contrib shape mismatch");
    const std::size_t experts = fc_shape[0];

    std::vector<Tensor> tensors = extract_units(
        loaded, path, {{"importance", {units}}, {"factor_contrib", {experts, units}}});

    ImportanceReport rep;
    rep.importance.assign(tensors[0].data(), tensors[0].data() + units);
    rep.factor_contrib = std::move(tensors[1]);
    rep.schema = schema;
    rep.n_blocks = cfg.n_blocks;
    for (std::size_t u = 0; u < units; ++u) {
        rep.param_counts.push_back(param_count(cfg, schema[u]));
        const auto stage = static_cast<std::size_t>(unit_stage(schema[u], cfg.n_blocks));
        const auto kind = static_cast<std::size_t>(schema[u].kind);
        rep.kind_share[kind] += rep.importance[u];
        rep.stage_share[stage] += rep.importance[u];
        rep.stage_kind[stage][kind] += rep.importance[u];
    }
    if (cfg_out) *cfg_out = cfg;
    if (metadata) *metadata = metadata_from_header(loaded.header);
    return rep;
}

std::string checkpoint_type(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    char head[9];
    in.read(head, 9);
    if (in.gcount() != 9 || std::memcmp(head, kMagic, 4) != 0)
        throw IoError("'" + path + "': bad magic, not a checkpoint file");
    if (static_cast<unsigned char>(head[4]) != kVersion)
        throw IoError("'" + path + "': unknown format version");
    std::uint32_t hlen = 0;
    for (int b = 0; b < 4; ++b)
        hlen |= static_cast<std::uint32_t>(static_cast<unsigned char>(head[5 + b])) << (8 * b);
    std::string header_text(hlen, '\0');
    in.read(header_text.data(), hlen);
    if (in.gcount() != static_cast<std::streamsize>(hlen))
        throw IoError("'" + path + "': truncated header");
    try {
        return json::parse(header_text).at("type").get<std::string>();
    } catch (const json::exception& e) {
        throw IoError("'" + path + "': malformed header: " + e.what());
    }
}

}  // namespace merging
