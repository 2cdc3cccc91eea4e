#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "crgan/core.hpp"

namespace crgan {

/// [-1, 1] -> [0, 255] with round-half-up.
std::uint8_t to_byte(float value);
float from_byte(std::uint8_t byte);

/// Reads an 8-bit PNG (gray, RGB or with alpha) as a [3, H, W] tensor in [-1, 1].
torch::Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

} // namespace crgan
