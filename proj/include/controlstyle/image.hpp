#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace controlstyle {

/// 8-bit interleaved (HWC) image, the in-memory twin of a PNG file.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int c, uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

/// Reads an 8-bit gray, RGB or RGBA PNG. RGBA drops alpha.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// [C,H,W] float32 tensor with values in [-1, 1].
torch::Tensor to_tensor(const Image& image);
/// Inverse of to_tensor: clamps to [-1, 1] and rounds to 8 bits. Accepts [C,H,W].
Image from_tensor(const torch::Tensor& chw);
/// Stacks same-sized images into [B,C,H,W].
torch::Tensor to_batch(std::span<const Image> images);

/// Lays images out row-major in a grid with `cols` columns.
Image tile(std::span<const Image> images, int cols);

}  // namespace controlstyle
