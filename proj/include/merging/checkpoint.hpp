#pragma once

#include <map>
#include <string>

#include "merging/expert_merging_pp.hpp"

namespace merging {

// String metadata carried verbatim in the checkpoint header (run configs,
// provenance). Keys are stored sorted; round-trips byte-identically.
using Metadata = std::map<std::string, std::string>;

// Container format (little-endian, fixed widths, no platform fields):
//   bytes 0..3   magic "EMCK"
//   byte  4      format version (1)
//   bytes 5..8   header length, uint32 LE
//   header       canonical UTF-8 JSON, keys sorted
//   payload      raw float64 tensors, row-major, in header unit order
// The header declares the type tag, the model config, per-tensor
// name/shape/offset, optional type-specific fields, and the metadata map.

void save_model(const ModelParams& params, const std::string& path,
                const Metadata& metadata = {});
ModelParams load_model(const std::string& path, Metadata* metadata = nullptr);

void save_layer_coefficients(const LayerCoefficients& coeffs, const ModelConfig& cfg,
                             const std::string& path, const Metadata& metadata = {});
LayerCoefficients load_layer_coefficients(const std::string& path, ModelConfig* cfg = nullptr,
                                          Metadata* metadata = nullptr);

void save_chunk_coefficients(const ChunkPlan& plan, const ChunkCoefficients& coeffs,
                             const ModelConfig& cfg, const std::string& path,
                             const Metadata& metadata = {});
struct ChunkCheckpoint {
    ChunkPlan plan;
    ChunkCoefficients coeffs;
};
ChunkCheckpoint load_chunk_coefficients(const std::string& path, ModelConfig* cfg = nullptr,
                                        Metadata* metadata = nullptr);

void save_importance(const ImportanceReport& report, const ModelConfig& cfg,
                     const std::string& path, const Metadata& metadata = {});
ImportanceReport load_importance(const std::string& path, ModelConfig* cfg = nullptr,
                                 Metadata* metadata = nullptr);

// type tag stored in a checkpoint header without loading the payload
std::string checkpoint_type(const std::string& path);

}  // namespace merging
