#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace octet {

/// Planar RGB image with float channels in [0, 1], stored channel-major (CHW).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(3) * h * w, 0.0f) {}

  float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }

  bool operator==(const Image&) const = default;
};

/// [3, H, W] float32 tensor sharing no storage with the image.
torch::Tensor to_tensor(const Image& img);
/// Accepts [3, H, W] or [1, 3, H, W]; values are clamped to [0, 1].
Image from_tensor(const torch::Tensor& t);
/// Stacks images into a [N, 3, H, W] batch. All images must share dims.
torch::Tensor stack_images(const std::vector<Image>& images);

std::vector<uint8_t> encode_png(const Image& img);
Image decode_png(const std::vector<uint8_t>& bytes);
void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// Single-channel 8-bit PNG, used for label grids and heatmaps.
std::vector<uint8_t> encode_png_gray(const std::vector<uint8_t>& pixels, int height, int width);

/// Tiles a [N, 3, H, W] batch into a grid image with `cols` columns.
Image make_grid(const torch::Tensor& batch, int cols);

}  // namespace octet
