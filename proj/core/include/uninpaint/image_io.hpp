#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "uninpaint/corruption.hpp"

namespace uninpaint {

// Decodes a PNG or JPEG file into a float32 [C, H, W] tensor in [0, 1].
// Grayscale inputs yield C = 1, color inputs C = 3; alpha is dropped.
torch::Tensor read_image(const std::filesystem::path& path);

// Writes a [C, H, W] tensor (C = 1 or 3) as an 8-bit PNG. Values are clamped
// to [0, 1] and rounded to the nearest level.
void write_png(const torch::Tensor& image, const std::filesystem::path& path);

// Masks are stored as 1-bit grayscale PNG (white = observed).
void write_mask_png(const Mask& mask, const std::filesystem::path& path);
Mask read_mask_png(const std::filesystem::path& path);

} // namespace uninpaint
