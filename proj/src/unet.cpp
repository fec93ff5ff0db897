#include "controlstyle/unet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "controlstyle/text.hpp"

namespace controlstyle {
namespace {

namespace F = torch::nn::functional;

torch::nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
}

torch::Tensor add_tap(const torch::Tensor& h, const Taps& taps, std::size_t slot) {
  if (slot < taps.size() && taps[slot].defined()) return h + taps[slot];
  return h;
}

}  // namespace

bool UNetConfig::has_attention(int64_t level) const {
  return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

void UNetConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("unet needs at least one level");
  for (auto c : channels)
    if (c <= 0 || c % groups != 0) throw std::invalid_argument("unet channels must be positive multiples of groups");
  for (auto l : attention_levels)
    if (l < 1 || l > levels()) throw std::invalid_argument("attention level out of range");
  if (latent_channels <= 0 || time_dim <= 0 || text_dim <= 0 || heads <= 0) {
    throw std::invalid_argument("unet sizes must be positive");
  }
  for (auto c : channels)
    if (c % heads != 0) throw std::invalid_argument("unet channels must divide into heads");
}

UNetConfig UNetConfig::from_config(const Config& cfg) {
  UNetConfig c;
  c.latent_channels = cfg.get_int("latent_channels", c.latent_channels);
  c.channels = cfg.get_int_list("unet.channels", c.channels);
  c.attention_levels = cfg.get_int_list("unet.attention_levels", c.attention_levels);
  c.middle_attention = cfg.get_bool("unet.middle_attention", c.middle_attention);
  c.time_dim = cfg.get_int("unet.time_dim", c.time_dim);
  c.text_dim = cfg.get_int("text.dim", c.text_dim);
  c.heads = cfg.get_int("unet.heads", c.heads);
  c.groups = cfg.get_int("unet.groups", c.groups);
  c.validate();
  return c;
}

nlohmann::json UNetConfig::to_json() const {
  return {{"latent_channels", latent_channels}, {"channels", channels}, {"attention_levels", attention_levels},
          {"middle_attention", middle_attention}, {"time_dim", time_dim}, {"text_dim", text_dim},
          {"heads", heads},                       {"groups", groups}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.latent_channels = j.at("latent_channels");
  c.channels = j.at("channels").get<std::vector<int64_t>>();
  c.attention_levels = j.at("attention_levels").get<std::vector<int64_t>>();
  c.middle_attention = j.at("middle_attention");
  c.time_dim = j.at("time_dim");
  c.text_dim = j.at("text_dim");
  c.heads = j.at("heads");
  c.groups = j.at("groups");
  c.validate();
  return c;
}

torch::Tensor timesteps(int64_t batch, int64_t t) { return torch::full({batch}, t, torch::kInt64); }

// ---------------------------------------------------------------------------

TimestepEmbeddingImpl::TimestepEmbeddingImpl(int64_t sinusoid_dim, int64_t time_dim)
    : sinusoid_dim_(sinusoid_dim),
      fc1_(register_module("fc1", torch::nn::Linear(sinusoid_dim, time_dim))),
      fc2_(register_module("fc2", torch::nn::Linear(time_dim, time_dim))) {}

torch::Tensor TimestepEmbeddingImpl::forward(const torch::Tensor& t) {
  auto s = sinusoidal_embedding(t, sinusoid_dim_).to(fc1_->weight.dtype());
  return fc2_(torch::silu(fc1_(s)));
}

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t time_dim, int64_t groups) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, in)));
  conv1_ = register_module("conv1", conv3(in, out));
  time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
  conv2_ = register_module("conv2", conv3(out, out));
  if (in != out) skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + time_proj_(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

CrossAttentionImpl::CrossAttentionImpl(int64_t channels, int64_t text_dim, int64_t heads, int64_t groups)
    : heads_(heads) {
  norm_ = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels)));
  q_ = register_module("q", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)));
  k_ = register_module("k", torch::nn::Linear(torch::nn::LinearOptions(text_dim, channels).bias(false)));
  v_ = register_module("v", torch::nn::Linear(torch::nn::LinearOptions(text_dim, channels).bias(false)));
  out_ = register_module("out", torch::nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& text) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const auto d = c / heads_;
  auto tokens = norm_(x).flatten(2).transpose(1, 2);                       // [B, HW, C]
  auto q = q_(tokens).view({b, h * w, heads_, d}).transpose(1, 2);         // [B, H, HW, d]
  auto k = k_(text).view({b, text.size(1), heads_, d}).transpose(1, 2);    // [B, H, L, d]
  auto v = v_(text).view({b, text.size(1), heads_, d}).transpose(1, 2);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(static_cast<double>(d)), -1);
  auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({b, h * w, c});
  return x + out_(mixed).transpose(1, 2).reshape({b, c, h, w});
}

// ---------------------------------------------------------------------------

UNetEncoderImpl::UNetEncoderImpl(UNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& ch = cfg_.channels;
  time_ = register_module("time", TimestepEmbedding(ch[0], cfg_.time_dim));
  conv_in_ = register_module("conv_in", conv3(cfg_.latent_channels, ch[0]));
  for (int64_t i = 1; i <= cfg_.levels(); ++i) {
    const auto in = ch[std::max<int64_t>(i - 2, 0)];
    const auto out = ch[i - 1];
    const auto tag = std::to_string(i);
    if (i >= 2) down_.push_back(register_module("down" + tag, conv3(in, in, 2)));
    res_.push_back(register_module("res" + tag, ResBlock(in, out, cfg_.time_dim, cfg_.groups)));
    attn_.push_back(cfg_.has_attention(i)
                        ? register_module("attn" + tag, CrossAttention(out, cfg_.text_dim, cfg_.heads, cfg_.groups))
                        : CrossAttention(nullptr));
  }
  const auto cm = ch.back();
  mid1_ = register_module("mid1", ResBlock(cm, cm, cfg_.time_dim, cfg_.groups));
  if (cfg_.middle_attention) {
    mid_attn_ = register_module("mid_attn", CrossAttention(cm, cfg_.text_dim, cfg_.heads, cfg_.groups));
  }
  mid2_ = register_module("mid2", ResBlock(cm, cm, cfg_.time_dim, cfg_.groups));
}

EncoderStates UNetEncoderImpl::forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& text) {
  EncoderStates s;
  s.temb = time_(t);
  auto h = conv_in_(z);
  for (int64_t i = 1; i <= cfg_.levels(); ++i) {
    if (i >= 2) h = down_[i - 2](h);
    h = res_[i - 1](h, s.temb);
    if (attn_[i - 1]) h = attn_[i - 1](h, text);
    s.levels.push_back(h);
  }
  h = mid1_(h, s.temb);
  if (mid_attn_) h = mid_attn_(h, text);
  s.middle = mid2_(h, s.temb);
  return s;
}

UNetDecoderImpl::UNetDecoderImpl(UNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& ch = cfg_.channels;
  for (int64_t i = 1; i <= cfg_.levels(); ++i) {
    const auto tag = std::to_string(cfg_.symmetric_decoder_block(i));
    res_.push_back(register_module("res" + tag, ResBlock(ch[i - 1], ch[i - 1], cfg_.time_dim, cfg_.groups)));
    attn_.push_back(cfg_.has_attention(i) ? register_module("attn" + tag, CrossAttention(ch[i - 1], cfg_.text_dim,
                                                                                           cfg_.heads, cfg_.groups))
                                          : CrossAttention(nullptr));
    if (i >= 2) up_.push_back(register_module("up" + tag, conv3(ch[i - 1], ch[i - 2])));
  }
  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg_.groups, ch[0])));
  conv_out_ = register_module("conv_out", conv3(ch[0], cfg_.latent_channels));
  // Small output layer: an untrained predictor starts close to zero.
  torch::NoGradGuard g;
  conv_out_->weight.mul_(0.1);
  conv_out_->bias.mul_(0.1);
}

torch::Tensor UNetDecoderImpl::forward(const EncoderStates& s, const torch::Tensor& text, const Taps& taps) {
  const auto m = cfg_.levels();
  if (static_cast<int64_t>(s.levels.size()) != m) throw std::invalid_argument("decoder: wrong number of skip states");
  if (!taps.empty() && static_cast<int64_t>(taps.size()) != m + 1) {
    throw std::invalid_argument("decoder: expected " + std::to_string(m + 1) + " taps");
  }
  auto h = add_tap(s.middle, taps, static_cast<std::size_t>(m));
  for (int64_t i = m; i >= 1; --i) {
    h = add_tap(h + s.levels[i - 1], taps, static_cast<std::size_t>(i - 1));
    h = res_[i - 1](h, s.temb);
    if (attn_[i - 1]) h = attn_[i - 1](h, text);
    if (i >= 2) h = up_[i - 2](upsample2(h));
  }
  return conv_out_(torch::silu(norm_out_(h)));
}

// ---------------------------------------------------------------------------

UNetImpl::UNetImpl(UNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  encoder_ = register_module("encoder", UNetEncoder(cfg_));
  decoder_ = register_module("decoder", UNetDecoder(cfg_));
}

void UNetImpl::check_input(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text) const {
  const int64_t min_size = int64_t{1} << (cfg_.levels() - 1);
  if (z_t.dim() != 4 || z_t.size(1) != cfg_.latent_channels || z_t.size(2) % min_size != 0 ||
      z_t.size(3) % min_size != 0) {
    throw std::invalid_argument("unet: latent shape " + c10::str(z_t.sizes()) + " incompatible with config");
  }
  if (t.dim() != 1 || t.size(0) != z_t.size(0)) throw std::invalid_argument("unet: timesteps must be [B]");
  if (text.dim() != 3 || text.size(0) != z_t.size(0) || text.size(2) != cfg_.text_dim) {
    throw std::invalid_argument("unet: text embedding must be [B, L, " + std::to_string(cfg_.text_dim) + "]");
  }
}

EncoderStates UNetImpl::encode(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text) {
  check_input(z_t, t, text);
  return encoder_(z_t, t, text);
}

torch::Tensor UNetImpl::decode(const EncoderStates& states, const torch::Tensor& text, const Taps& taps) {
  return decoder_(states, text, taps);
}

UNetOutput UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text) {
  UNetOutput out;
  out.states = encode(z_t, t, text);
  out.eps = decode(out.states, text);
  return out;
}

}  // namespace controlstyle
