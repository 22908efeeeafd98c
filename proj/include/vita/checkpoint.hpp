#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vita/model.hpp"

namespace vita {

// Layout (all integers little-endian):
//   "VITA" | u32 version = 1 | u32 len + config JSON (UTF-8) | u32 tensor count |
//   per tensor: u32 len + name, u32 rank, u64 dims[rank], f32 values[prod(dims)]

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor<float>> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& config,
                                            const ParameterSet<float>& params);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

void save_checkpoint(const AmodalSegmenter<float>& model, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);
AmodalSegmenter<float> load_checkpoint(const std::filesystem::path& path);

/// Installs checkpoint tensors into a model built from the same config.
void apply_checkpoint(const Checkpoint& ckpt, AmodalSegmenter<float>& model);

}  // namespace vita
