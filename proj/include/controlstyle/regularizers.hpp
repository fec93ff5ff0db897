#pragma once

#include <functional>
#include <vector>

#include <torch/torch.h>

#include "controlstyle/autoencoder.hpp"
#include "controlstyle/config.hpp"

namespace controlstyle {

/// Per-sample, per-channel spatial statistics. mu and sigma are [B, C];
/// sigma = sqrt(population variance + eps).
struct ChannelStats {
  torch::Tensor mu;
  torch::Tensor sigma;
};

struct RegConfig {
  std::vector<int64_t> style_blocks = {1, 2, 3};  // 1-based upsample blocks
  int64_t content_block = 3;
  double eps = 1e-8;

  /// Throws std::invalid_argument unless every block index lies in [1, n_blocks].
  void validate(int64_t n_blocks) const;
  static RegConfig from_config(const Config& cfg);
};

/// Throws std::invalid_argument for a map with an empty spatial extent.
ChannelStats channel_stats(const torch::Tensor& features, double eps = 1e-8);

/// Decoder-feature statistics of a style latent, treated as a constant target.
struct StyleTarget {
  std::vector<torch::Tensor> mean;      // one [B, C] per style block
  std::vector<torch::Tensor> variance;  // sigma^2, same layout
};

StyleTarget style_target_from_latent(Autoencoder& ae, const torch::Tensor& z_style, const RegConfig& cfg);
/// Encodes c_style with the frozen encoder, then collects its block statistics.
StyleTarget style_target(Autoencoder& ae, const torch::Tensor& c_style, const RegConfig& cfg);

/// Mean over the batch of (1/|S|) sum_j ( ||mu_j(a) - mu_j(b)||^2 + ||sigma_j(a)^2 - sigma_j(b)^2||^2 ).
torch::Tensor style_reg_from_stack(const FeatureStack& stack, const StyleTarget& target, const RegConfig& cfg);
/// Style regularization of z0_hat against the style image.
torch::Tensor style_reg(Autoencoder& ae, const torch::Tensor& z0_hat, const torch::Tensor& c_style,
                        const RegConfig& cfg);
/// Style regularization between two latents (the second is the constant target).
torch::Tensor style_reg_latents(Autoencoder& ae, const torch::Tensor& z_a, const torch::Tensor& z_b,
                                const RegConfig& cfg);

/// Mean squared difference of block-J decoder features; z0 is a constant target.
torch::Tensor content_reg(Autoencoder& ae, const torch::Tensor& z0_hat, const torch::Tensor& z0, const RegConfig& cfg);
torch::Tensor content_reg_from_features(const torch::Tensor& features_hat, const torch::Tensor& features_target);

struct InversionOptions {
  double lr = 0.05;
  int patience = 50;  // consecutive increasing steps before declaring divergence
  /// Called every step with (step, loss); step 0 is the starting point.
  std::function<void(int, double)> on_step;
  /// Called with (step, latent) every `image_every` steps when > 0.
  int image_every = 0;
  std::function<void(int, const torch::Tensor&)> on_image;
};

struct InversionResult {
  torch::Tensor latent;
  std::vector<double> losses;  // losses[0] is the loss at z_init
  double initial_grad_norm = 0;
  bool diverged = false;
};

/// Gradient descent (Adam) on a latent so that its decoder-feature statistics
/// match those of c_style over cfg.style_blocks.
InversionResult invert_style_latent(Autoencoder& ae, const torch::Tensor& z_init, const torch::Tensor& c_style,
                                    int steps, const RegConfig& cfg, const InversionOptions& opts = {});

}  // namespace controlstyle
