#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "v2i/detr.hpp"

namespace v2i {

// Single-file container: magic, a JSON header (role, model config, config
// hash, seed, metrics), the named float32 tensors and a trailing FNV-1a
// checksum over everything before it.
struct CheckpointHeader {
    std::string role;
    detr::ModelConfig model;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    nlohmann::json metrics = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header, torch::nn::Module& module);

struct Checkpoint {
    CheckpointHeader header;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;
};

// Throws IoError on missing, truncated or corrupted files.
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies tensors into the module's parameters. Names and shapes must match
// exactly, otherwise ConfigError.
void load_into(const Checkpoint& ckpt, torch::nn::Module& module);

// Builds a detector from the stored config and loads its weights.
detr::Detector load_detector(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

// Order-sensitive hash of all parameter bytes.
std::uint64_t parameter_checksum(torch::nn::Module& module);

}  // namespace v2i
