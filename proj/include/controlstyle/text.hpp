#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace controlstyle {

/// Closed vocabulary of the caption grammar. Id 0 is padding.
class Vocabulary {
 public:
  static const Vocabulary& instance();

  int64_t size() const { return static_cast<int64_t>(words_.size()); }
  /// Fixed token-sequence length every caption is padded to.
  static constexpr int64_t kLength = 16;
  static constexpr int64_t kPad = 0;

  /// Throws std::invalid_argument naming the first out-of-vocabulary word.
  std::vector<int64_t> encode(std::string_view caption) const;
  const std::string& word(int64_t id) const { return words_.at(static_cast<std::size_t>(id)); }

 private:
  Vocabulary();
  std::vector<std::string> words_;
};

/// [B, L] int64 token ids for a batch of captions.
torch::Tensor tokenize_captions(std::span<const std::string> captions);

struct TextEmbedding {
  torch::Tensor tokens;    // [B, L] int64
  torch::Tensor embedded;  // [B, L, D]
};

/// Learned token table plus fixed sinusoidal positions; no mixing between
/// positions happens here (the U-Net's cross-attention does that).
class TextEncoderImpl : public torch::nn::Module {
 public:
  explicit TextEncoderImpl(int64_t dim = 64, int64_t vocab = Vocabulary::instance().size(),
                           int64_t length = Vocabulary::kLength);
  torch::Tensor forward(const torch::Tensor& tokens);
  int64_t dim() const { return dim_; }

 private:
  int64_t dim_;
  torch::nn::Embedding table_{nullptr};
  torch::Tensor positions_;
};
TORCH_MODULE(TextEncoder);

TextEmbedding embed_text(TextEncoder& encoder, std::string_view caption);
TextEmbedding embed_text(TextEncoder& encoder, std::span<const std::string> captions);

/// Sinusoidal features of `positions` (any shape) with `dim` channels, float64.
torch::Tensor sinusoidal_embedding(const torch::Tensor& positions, int64_t dim);

}  // namespace controlstyle
