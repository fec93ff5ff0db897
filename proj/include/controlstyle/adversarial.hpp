#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "controlstyle/config.hpp"

namespace controlstyle {

/// Conditional patch discriminator: the candidate image is concatenated
/// channel-wise with the conditioning style image and mapped to a grid of
/// real/fake logits.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(int64_t image_channels = 3, int64_t base_channels = 32);
  /// candidate, condition: [B,C,H,W] -> logits [B,1,h,w].
  torch::Tensor forward(const torch::Tensor& candidate, const torch::Tensor& condition);

 private:
  int64_t image_channels_;
  torch::nn::Conv2d c1_{nullptr}, c2_{nullptr}, c3_{nullptr}, c4_{nullptr};
};
TORCH_MODULE(Discriminator);

struct AugmentConfig {
  double scale_min = 0.7;  // crop side as a fraction of the image side
  double scale_max = 1.0;
  double flip_prob = 0.5;
  double jitter = 0.1;  // per-channel additive offset bound, [-1, 1] pixel scale

  static AugmentConfig identity() { return {1.0, 1.0, 0.0, 0.0}; }
  static AugmentConfig from_config(const Config& cfg);
};

/// Random crop-and-resize, horizontal flip and per-channel offset, one draw
/// per sample. Deterministic under seed. Accepts [C,H,W] or [B,C,H,W].
torch::Tensor augment_style(const torch::Tensor& c_s, uint64_t seed, const AugmentConfig& cfg = {});

/// -[log D(real|c) + log(1 - D(fake|c))] averaged over patches, from logits.
torch::Tensor disc_loss_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
/// Non-saturating generator loss -log D(fake|c), patch-averaged.
torch::Tensor gen_loss_from_logits(const torch::Tensor& fake_logits);

/// Discriminator objective; x0_hat is detached.
torch::Tensor disc_step_loss(Discriminator& d, const torch::Tensor& c_s, const torch::Tensor& c_s_aug,
                             const torch::Tensor& x0_hat);
/// Generator objective. The discriminator's parameters are excluded from the
/// autograd graph, so only x0_hat's producers receive gradient.
torch::Tensor gen_adv_loss(Discriminator& d, const torch::Tensor& x0_hat, const torch::Tensor& c_s);

}  // namespace controlstyle
