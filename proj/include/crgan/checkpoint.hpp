#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <torch/torch.h>

namespace crgan {

/// Serialized training state. Tensor names are slash-separated paths such as
/// `G/input.weight` or `adam/D/exp_avg/trunk.stem.weight`.
struct Checkpoint {
    int64_t step = 0;
    std::uint64_t fingerprint = 0;
    std::map<std::string, std::string> meta;
    std::map<std::string, torch::Tensor> tensors;
};

/// Writes `manifest.txt` plus one little-endian float32 file per tensor.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);

/// Reads a checkpoint directory. A fingerprint mismatch throws ConfigError.
Checkpoint load_checkpoint(const std::filesystem::path& dir, std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

/// Copies every parameter of `module` into `checkpoint.tensors` under `prefix/`.
void store_module(Checkpoint& checkpoint, const std::string& prefix, const torch::nn::Module& module);
/// Restores parameters from `prefix/`; missing names or shape mismatches throw ConfigError.
void restore_module(const Checkpoint& checkpoint, const std::string& prefix, torch::nn::Module& module);

std::string hex64(std::uint64_t value);
std::uint64_t parse_hex64(const std::string& text);

} // namespace crgan
