// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace gridnerf {

// Interleaved RGB image with channel values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0.0f) {}

  float& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
};

// 8-bit PNG I/O. Values are quantized with round(v * 255) after clamping to [0, 1]
// and decoded as byte / 255.
void write_png(const std::filesystem::path& path, const Image& image);
void write_png_gray(const std::filesystem::path& path, std::size_t width, std::size_t height,
                    std::span<const std::uint8_t> pixels);
Image read_png(const std::filesystem::path& path);

std::uint8_t quantize(float v);

}  // namespace gridnerf
