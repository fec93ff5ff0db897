#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "controlstyle/config.hpp"

namespace controlstyle {

struct AutoencoderConfig {
  int64_t image_size = 64;
  int64_t image_channels = 3;
  int64_t latent_channels = 4;
  int64_t downsample_factor = 8;
  int64_t base_channels = 32;
  int64_t num_upsample_blocks = 4;

  int64_t halvings() const;
  int64_t latent_size() const { return image_size / downsample_factor; }
  /// Width of upsample block j (1-based, lowest resolution first).
  int64_t decoder_channels(int64_t block) const;
  /// Spatial size produced by upsample block j.
  int64_t block_resolution(int64_t block) const;

  /// Throws std::invalid_argument if the resolution ladder is inconsistent.
  void validate() const;

  static AutoencoderConfig from_config(const Config& cfg);
  nlohmann::json to_json() const;
  static AutoencoderConfig from_json(const nlohmann::json& j);
};

/// Decoder features, one map per upsample block (index 0 is UpBlock_1).
struct FeatureStack {
  std::vector<torch::Tensor> blocks;
  /// Unclamped output of the final layer; undefined when decoding stopped early.
  torch::Tensor image;
};

class AeResBlockImpl : public torch::nn::Module {
 public:
  explicit AeResBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(AeResBlock);

/// Deterministic convolutional autoencoder with an L2 reconstruction target.
///
/// encode() returns latents multiplied by a stored scale so that they have
/// roughly unit variance over the training set; decode() undoes the scale.
class AutoencoderImpl : public torch::nn::Module {
 public:
  explicit AutoencoderImpl(AutoencoderConfig cfg = {});

  /// [B,3,S,S] in [-1, 1] -> [B,C,S/f,S/f].
  torch::Tensor encode(const torch::Tensor& x);
  /// [B,C,s,s] -> [B,3,S,S], clamped to [-1, 1].
  torch::Tensor decode(const torch::Tensor& z);
  /// Same as decode without the clamp; the reconstruction-training target.
  torch::Tensor decode_raw(const torch::Tensor& z);
  /// Runs the decoder and collects each upsample block's output. With
  /// up_to_block = J in [1, N) decoding stops after block J and `image` is
  /// left undefined.
  FeatureStack decode_features(const torch::Tensor& z, int64_t up_to_block = 0);

  const AutoencoderConfig& config() const { return cfg_; }
  double latent_scale() const { return latent_scale_.item<double>(); }
  void set_latent_scale(double s);

 private:
  void check_image(const torch::Tensor& x) const;
  void check_latent(const torch::Tensor& z) const;

  AutoencoderConfig cfg_;
  torch::nn::Conv2d enc_in_{nullptr}, enc_out_{nullptr};
  std::vector<torch::nn::Conv2d> enc_down_;
  std::vector<AeResBlock> enc_res_;
  torch::nn::Conv2d dec_in_{nullptr}, dec_out_{nullptr};
  std::vector<torch::nn::Conv2d> dec_up_;  // one per block j >= 2
  std::vector<AeResBlock> dec_res_;         // one per block
  torch::Tensor latent_scale_;
};
TORCH_MODULE(Autoencoder);

struct AeTrainConfig {
  int epochs = 20;
  int batch = 32;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  double target_psnr = 22.0;
  uint64_t seed = 0;

  static AeTrainConfig from_config(const Config& cfg);
};

struct AeTrainReport {
  std::vector<double> epoch_loss;  // mean training reconstruction MSE per epoch
  double heldout_mse = 0;
  double heldout_psnr = 0;
  double latent_scale = 1;
  bool converged = false;  // heldout_psnr >= target
};

/// PSNR in dB for images on the [-1, 1] scale (peak-to-peak 2).
double psnr_from_mse(double mse);

/// Trains `ae` in place on [N,3,S,S] images. The last holdout_fraction of a
/// seeded permutation is held out. Throws std::invalid_argument on an empty set.
AeTrainReport train_autoencoder(Autoencoder& ae, const torch::Tensor& images, const AeTrainConfig& cfg,
                                const std::function<void(int, double)>& on_epoch = {});

/// Mean clamped-reconstruction MSE over `images`, in batches.
double reconstruction_mse(Autoencoder& ae, const torch::Tensor& images, int batch = 64);

}  // namespace controlstyle
