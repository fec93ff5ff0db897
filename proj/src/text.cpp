#include "controlstyle/text.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "controlstyle/data_synth.hpp"

namespace controlstyle {

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "a", "on", "of", "above", "below", "left", "right"};
  for (auto c : data::kColorNames) words_.emplace_back(c);
  for (auto s : data::kShapeNames) words_.emplace_back(s);
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary v;
  return v;
}

std::vector<int64_t> Vocabulary::encode(std::string_view caption) const {
  std::vector<int64_t> ids;
  for (const auto& w : data::tokenize(caption)) {
    auto it = std::find(words_.begin() + 1, words_.end(), w);
    if (it == words_.end()) throw std::invalid_argument("token outside vocabulary: '" + w + "'");
    ids.push_back(it - words_.begin());
  }
  if (static_cast<int64_t>(ids.size()) > kLength) throw std::invalid_argument("caption longer than token budget");
  ids.resize(kLength, kPad);
  return ids;
}

torch::Tensor tokenize_captions(std::span<const std::string> captions) {
  std::vector<int64_t> flat;
  flat.reserve(captions.size() * Vocabulary::kLength);
  for (const auto& c : captions) {
    auto ids = Vocabulary::instance().encode(c);
    flat.insert(flat.end(), ids.begin(), ids.end());
  }
  return torch::tensor(flat, torch::kInt64).view({static_cast<int64_t>(captions.size()), Vocabulary::kLength});
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& positions, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, torch::kFloat64) * (-std::log(10000.0) / std::max<int64_t>(half, 1)));
  auto args = positions.to(torch::kFloat64).unsqueeze(-1) * freqs;
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, -1);
  if (dim % 2 == 1) emb = torch::nn::functional::pad(emb, torch::nn::functional::PadFuncOptions({0, 1}));
  return emb;
}

TextEncoderImpl::TextEncoderImpl(int64_t dim, int64_t vocab, int64_t length) : dim_(dim) {
  table_ = register_module("table", torch::nn::Embedding(torch::nn::EmbeddingOptions(vocab, dim)));
  positions_ = register_buffer("positions", sinusoidal_embedding(torch::arange(length), dim).to(torch::kFloat32));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& tokens) {
  if (tokens.dim() != 2 || tokens.size(1) != positions_.size(0)) {
    throw std::invalid_argument("text encoder expects [B, " + std::to_string(positions_.size(0)) + "] tokens");
  }
  return table_(tokens) + positions_.to(table_->weight.dtype()).unsqueeze(0);
}

TextEmbedding embed_text(TextEncoder& encoder, std::string_view caption) {
  const std::string c(caption);
  return embed_text(encoder, std::span<const std::string>(&c, 1));
}

TextEmbedding embed_text(TextEncoder& encoder, std::span<const std::string> captions) {
  TextEmbedding out;
  out.tokens = tokenize_captions(captions);
  out.embedded = encoder->forward(out.tokens);
  return out;
}

}  // namespace controlstyle
