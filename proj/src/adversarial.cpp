#include "controlstyle/adversarial.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

#include "controlstyle/freeze_guard.hpp"

namespace controlstyle {
namespace {

namespace F = torch::nn::functional;

void check_finite(const torch::Tensor& logits, const char* what) {
  if (!torch::isfinite(logits).all().item<bool>()) {
    throw std::runtime_error(std::string(what) + ": non-finite discriminator logits");
  }
}

}  // namespace

DiscriminatorImpl::DiscriminatorImpl(int64_t image_channels, int64_t base) : image_channels_(image_channels) {
  using O = torch::nn::Conv2dOptions;
  c1_ = register_module("c1", torch::nn::Conv2d(O(2 * image_channels, base, 4).stride(2).padding(1)));
  c2_ = register_module("c2", torch::nn::Conv2d(O(base, base * 2, 4).stride(2).padding(1)));
  c3_ = register_module("c3", torch::nn::Conv2d(O(base * 2, base * 4, 4).stride(1).padding(1)));
  c4_ = register_module("c4", torch::nn::Conv2d(O(base * 4, 1, 4).stride(1).padding(1)));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& candidate, const torch::Tensor& condition) {
  if (candidate.sizes() != condition.sizes() || candidate.dim() != 4 || candidate.size(1) != image_channels_) {
    throw std::invalid_argument("discriminator: candidate and condition must be matching [B,C,H,W] images");
  }
  auto h = F::leaky_relu(c1_(torch::cat({candidate, condition}, 1)), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = F::leaky_relu(c2_(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  h = F::leaky_relu(c3_(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  return c4_(h);
}

AugmentConfig AugmentConfig::from_config(const Config& cfg) {
  AugmentConfig a;
  a.scale_min = cfg.get_double("aug.scale_min", a.scale_min);
  a.scale_max = cfg.get_double("aug.scale_max", a.scale_max);
  a.flip_prob = cfg.get_double("aug.flip_prob", a.flip_prob);
  a.jitter = cfg.get_double("aug.jitter", a.jitter);
  return a;
}

torch::Tensor augment_style(const torch::Tensor& c_s, uint64_t seed, const AugmentConfig& cfg) {
  if (c_s.dim() == 3) return augment_style(c_s.unsqueeze(0), seed, cfg).squeeze(0);
  if (c_s.dim() != 4) throw std::invalid_argument("augment_style expects [C,H,W] or [B,C,H,W]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int64_t h = c_s.size(2), w = c_s.size(3);
  std::vector<torch::Tensor> out;
  for (int64_t b = 0; b < c_s.size(0); ++b) {
    auto img = c_s[b].unsqueeze(0);
    const double scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng);
    const int64_t ch = std::clamp<int64_t>(std::llround(scale * h), 1, h);
    const int64_t cw = std::clamp<int64_t>(std::llround(scale * w), 1, w);
    const int64_t y0 = static_cast<int64_t>(unit(rng) * (h - ch + 1)) % (h - ch + 1);
    const int64_t x0 = static_cast<int64_t>(unit(rng) * (w - cw + 1)) % (w - cw + 1);
    if (ch != h || cw != w) {
      img = F::interpolate(img.slice(2, y0, y0 + ch).slice(3, x0, x0 + cw),
                           F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kBilinear).align_corners(false));
    }
    if (unit(rng) < cfg.flip_prob) img = img.flip({3});
    if (cfg.jitter > 0) {
      std::vector<double> shift(static_cast<std::size_t>(c_s.size(1)));
      for (auto& s : shift) s = (2 * unit(rng) - 1) * cfg.jitter;
      img = (img + torch::tensor(shift, torch::kFloat64).view({1, -1, 1, 1}).to(img.options())).clamp(-1.0, 1.0);
    }
    out.push_back(img);
  }
  return torch::cat(out, 0);
}

torch::Tensor disc_loss_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  check_finite(real_logits, "disc_step_loss");
  check_finite(fake_logits, "disc_step_loss");
  // -log(sigmoid(x)) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
  return F::softplus(-real_logits).mean() + F::softplus(fake_logits).mean();
}

torch::Tensor gen_loss_from_logits(const torch::Tensor& fake_logits) {
  check_finite(fake_logits, "gen_adv_loss");
  return F::softplus(-fake_logits).mean();
}

torch::Tensor disc_step_loss(Discriminator& d, const torch::Tensor& c_s, const torch::Tensor& c_s_aug,
                             const torch::Tensor& x0_hat) {
  if (c_s.sizes() != c_s_aug.sizes() || c_s.sizes() != x0_hat.sizes()) {
    throw std::invalid_argument("disc_step_loss: images must share one resolution");
  }
  return disc_loss_from_logits(d(c_s_aug, c_s), d(x0_hat.detach(), c_s));
}

torch::Tensor gen_adv_loss(Discriminator& d, const torch::Tensor& x0_hat, const torch::Tensor& c_s) {
  FreezeGuard freeze(*d);
  return gen_loss_from_logits(d(x0_hat, c_s));
}

}  // namespace controlstyle
