#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include "controlstyle/autoencoder.hpp"
#include "controlstyle/unet.hpp"

namespace testutil {

/// 64x64 images, factor 8, four upsample blocks, narrow channels.
inline controlstyle::AutoencoderConfig small_ae_config() {
  controlstyle::AutoencoderConfig c;
  c.base_channels = 8;
  return c;
}

inline controlstyle::UNetConfig small_unet_config() {
  controlstyle::UNetConfig c;
  c.channels = {16, 24, 32};
  c.time_dim = 32;
  c.text_dim = 16;
  c.heads = 2;
  c.groups = 4;
  return c;
}

/// Perturbs every parameter so zero-initialised layers stop being trivial.
inline void jitter_parameters(torch::nn::Module& m, double scale, uint64_t seed) {
  torch::NoGradGuard g;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& p : m.parameters()) p.add_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).abs().max().item<double>();
}

inline bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("controlstyle_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
