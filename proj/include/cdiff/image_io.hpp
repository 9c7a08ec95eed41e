#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace cdiff {

// 8-bit PNG I/O. RGB images are float [3, H, W] in [0, 1]; grayscale planes
// are float [H, W] in [0, 1]. Values are rounded to the nearest 1/255 step on
// write; reading returns value / 255 exactly.
void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor read_png_rgb(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const torch::Tensor& plane);
torch::Tensor read_png_gray(const std::filesystem::path& path);

} // namespace cdiff
