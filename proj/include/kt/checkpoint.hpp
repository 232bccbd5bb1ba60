#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "kt/model.hpp"

// Checkpoint layout (version 1, all integers little-endian):
//
//   "KTCK"            4-byte magic
//   u32 version
//   u64 n, n bytes    model config as JSON
//   u64 count         number of tensors
//   count times:
//     u32 n, n bytes  parameter name
//     u32 rank, rank x u64 dims
//     product(dims) x f64 values (IEEE-754 bit patterns)
//
// No timestamps or host data are stored, so identical models produce
// identical files.
namespace kt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& config);
// Missing keys take their defaults. Throws ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

std::string encode_checkpoint(const KtModel& model);
// Throws Error for a bad header or truncation and DimensionError when a
// tensor does not match the config.
KtModel decode_checkpoint(std::string_view bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const KtModel& model);
KtModel load_checkpoint(const std::filesystem::path& path);

}  // namespace kt
