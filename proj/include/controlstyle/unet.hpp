#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "controlstyle/config.hpp"

namespace controlstyle {

struct UNetConfig {
  int64_t latent_channels = 4;
  /// Width of encoder level i (1-based); level 1 runs at latent resolution and
  /// every further level halves it.
  std::vector<int64_t> channels = {64, 96, 128};
  /// Encoder levels (1-based) that carry text cross-attention; the symmetric
  /// decoder level gets one too.
  std::vector<int64_t> attention_levels = {3};
  bool middle_attention = true;
  int64_t time_dim = 128;
  int64_t text_dim = 64;
  int64_t heads = 4;
  int64_t groups = 8;

  int64_t levels() const { return static_cast<int64_t>(channels.size()); }
  bool has_attention(int64_t level) const;
  /// Decoder block index paired with encoder level i: j = M + 1 - i.
  int64_t symmetric_decoder_block(int64_t level) const { return levels() + 1 - level; }

  void validate() const;
  static UNetConfig from_config(const Config& cfg);
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
  bool operator==(const UNetConfig&) const = default;
};

/// Outputs of the encoder half: one map per encoder level plus the middle
/// block, and the timestep embedding the decoder reuses.
struct EncoderStates {
  std::vector<torch::Tensor> levels;  // enc_(1) .. enc_(M)
  torch::Tensor middle;
  torch::Tensor temb;
};

/// Extra features added at the decoder's addition sites: entries 0..M-1 go
/// with enc_(1)..enc_(M), entry M with the middle block. Undefined entries
/// (or an empty vector) add nothing.
using Taps = std::vector<torch::Tensor>;

class TimestepEmbeddingImpl : public torch::nn::Module {
 public:
  TimestepEmbeddingImpl(int64_t sinusoid_dim, int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& t);

 private:
  int64_t sinusoid_dim_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TimestepEmbedding);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in, int64_t out, int64_t time_dim, int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

class CrossAttentionImpl : public torch::nn::Module {
 public:
  CrossAttentionImpl(int64_t channels, int64_t text_dim, int64_t heads, int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& text);

 private:
  int64_t heads_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(CrossAttention);

/// Timestep embedding, input convolution, encoder levels and middle block:
/// the part of the U-Net the modulation network copies.
class UNetEncoderImpl : public torch::nn::Module {
 public:
  explicit UNetEncoderImpl(UNetConfig cfg);
  EncoderStates forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& text);
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  TimestepEmbedding time_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr};
  std::vector<torch::nn::Conv2d> down_;  // level i >= 2
  std::vector<ResBlock> res_;
  std::vector<CrossAttention> attn_;     // null where a level has none
  ResBlock mid1_{nullptr}, mid2_{nullptr};
  CrossAttention mid_attn_{nullptr};
};
TORCH_MODULE(UNetEncoder);

/// Decoder half. Decoder block j receives dec_(j) + enc_(i) (+ tap) with
/// i = M + 1 - j, i.e. additive skips.
class UNetDecoderImpl : public torch::nn::Module {
 public:
  explicit UNetDecoderImpl(UNetConfig cfg);
  torch::Tensor forward(const EncoderStates& states, const torch::Tensor& text, const Taps& taps = {});

 private:
  UNetConfig cfg_;
  std::vector<ResBlock> res_;            // indexed by encoder level - 1
  std::vector<CrossAttention> attn_;
  std::vector<torch::nn::Conv2d> up_;    // level i >= 2: c_i -> c_{i-1}
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(UNetDecoder);

struct UNetOutput {
  torch::Tensor eps;
  EncoderStates states;
};

/// Text-conditioned noise predictor.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(UNetConfig cfg = {});

  /// z_t: [B,C,h,w]; t: int64 [B]; text: [B,L,D] embedded caption.
  UNetOutput forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text);
  EncoderStates encode(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text);
  torch::Tensor decode(const EncoderStates& states, const torch::Tensor& text, const Taps& taps = {});

  const UNetConfig& config() const { return cfg_; }
  UNetEncoder& encoder() { return encoder_; }
  UNetDecoder& decoder() { return decoder_; }

 private:
  void check_input(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text) const;
  UNetConfig cfg_;
  UNetEncoder encoder_{nullptr};
  UNetDecoder decoder_{nullptr};
};
TORCH_MODULE(UNet);

/// Convenience: timesteps as an int64 [B] tensor filled with t.
torch::Tensor timesteps(int64_t batch, int64_t t);

}  // namespace controlstyle
