#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "controlstyle/unet.hpp"

namespace controlstyle {

enum class BranchKind { Style, Edge };
std::string branch_kind_name(BranchKind k);
BranchKind parse_branch_kind(const std::string& name);

struct ModulationConfig {
  BranchKind kind = BranchKind::Style;
  int64_t condition_channels = 3;  // 3 for style images, 1 for edge maps
  int64_t hint_channels = 32;
  int64_t image_size = 64;
  int64_t downsample_factor = 8;

  static ModulationConfig style(int64_t image_size = 64, int64_t factor = 8);
  static ModulationConfig edge(int64_t image_size = 64, int64_t factor = 8);
  nlohmann::json to_json() const;
  static ModulationConfig from_json(const nlohmann::json& j);
};

/// 1x1 convolution whose weight and bias start at exactly zero.
class ZeroConvImpl : public torch::nn::Module {
 public:
  ZeroConvImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x) { return conv_(x); }
  torch::nn::Conv2d& conv() { return conv_; }

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(ZeroConv);

/// Strided convolution stack taking a full-resolution condition image down
/// to latent resolution (one stride-2 stage per factor of two).
class ConditionEmbedderImpl : public torch::nn::Module {
 public:
  explicit ConditionEmbedderImpl(const ModulationConfig& cfg);
  torch::Tensor forward(const torch::Tensor& condition);

 private:
  ModulationConfig cfg_;
  std::vector<torch::nn::Conv2d> stages_;
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(ConditionEmbedder);

/// Trainable copy of the U-Net encoder and middle block, the input zero
/// convolution psi0, one output zero convolution psi1_j per tap and the
/// condition embedding network.
class ModulationNetworkImpl : public torch::nn::Module {
 public:
  ModulationNetworkImpl(const UNetConfig& unet_cfg, const ModulationConfig& cfg);

  /// Embedded condition at latent resolution, before psi0.
  torch::Tensor embed_condition(const torch::Tensor& condition);
  /// Outputs of the copied encoder levels and middle block, before psi1.
  Taps branch_features(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text,
                       const torch::Tensor& condition);
  /// psi1_j applied to branch_features: what gets added to the frozen decoder.
  Taps taps(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text,
            const torch::Tensor& condition);
  Taps apply_output_zero_convs(const Taps& features);

  UNetEncoder& copy() { return copy_; }
  ConditionEmbedder& embedder() { return embedder_; }
  ZeroConv& input_zero() { return input_zero_; }
  std::vector<ZeroConv>& output_zero() { return output_zero_; }
  const ModulationConfig& config() const { return cfg_; }
  const UNetConfig& unet_config() const { return unet_cfg_; }

  /// Named parameter groups: "copy", "input_zero", "output_zero", "embedder".
  std::vector<std::pair<std::string, std::vector<torch::Tensor>>> parameter_groups();

 private:
  UNetConfig unet_cfg_;
  ModulationConfig cfg_;
  UNetEncoder copy_{nullptr};
  ConditionEmbedder embedder_{nullptr};
  ZeroConv input_zero_{nullptr};
  std::vector<ZeroConv> output_zero_;
};
TORCH_MODULE(ModulationNetwork);

/// Copies the base encoder + middle block bit-for-bit and zero-initialises
/// every psi layer. Throws std::invalid_argument on an architecture mismatch.
ModulationNetwork init_modulation(UNet& base, const ModulationConfig& cfg);

/// Style map at latent resolution (the embedder output).
torch::Tensor style_embed(ModulationNetwork& mod, const torch::Tensor& c_style);

/// Frozen U-Net decoder driven by base skips plus the modulation taps.
torch::Tensor modulated_forward(UNet& base, ModulationNetwork& mod, const torch::Tensor& z_t, const torch::Tensor& t,
                                const torch::Tensor& text, const torch::Tensor& condition);

struct ControlBranch {
  ModulationNetwork net{nullptr};
  torch::Tensor condition;
  double weight = 1.0;
};

/// Per-tap weighted sum over branches: sum_b weight_b * psi1_{j,b}(features_b).
Taps fuse_taps(std::span<ControlBranch> branches, const torch::Tensor& z_t, const torch::Tensor& t,
               const torch::Tensor& text);
torch::Tensor fuse_controls(std::span<ControlBranch> branches, const torch::Tensor& z_t, const torch::Tensor& t,
                            const torch::Tensor& text, UNet& base);

}  // namespace controlstyle
