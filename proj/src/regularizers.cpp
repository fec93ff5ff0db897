#include "controlstyle/regularizers.hpp"

#include <cmath>
#include <stdexcept>

#include "controlstyle/freeze_guard.hpp"

namespace controlstyle {
namespace {

torch::Tensor population_variance(const torch::Tensor& f) {
  return f.flatten(2).var(/*dim=*/2, /*unbiased=*/false, /*keepdim=*/false);
}

/// decode_features stop index covering every style block (0 = full decode).
int64_t style_depth(const RegConfig& cfg, int64_t n_blocks) {
  int64_t deepest = 0;
  for (auto b : cfg.style_blocks) deepest = std::max(deepest, b);
  return deepest == n_blocks ? 0 : deepest;
}

}  // namespace

void RegConfig::validate(int64_t n_blocks) const {
  if (style_blocks.empty()) throw std::invalid_argument("style_blocks must not be empty");
  for (auto b : style_blocks)
    if (b < 1 || b > n_blocks) throw std::invalid_argument("style block " + std::to_string(b) + " out of range");
  if (content_block < 1 || content_block > n_blocks) throw std::invalid_argument("content block out of range");
  if (!(eps >= 0)) throw std::invalid_argument("variance epsilon must be >= 0");
}

RegConfig RegConfig::from_config(const Config& cfg) {
  RegConfig r;
  r.style_blocks = cfg.get_int_list("reg.style_blocks", r.style_blocks);
  r.content_block = cfg.get_int("reg.content_block", r.content_block);
  r.eps = cfg.get_double("reg.eps", r.eps);
  return r;
}

ChannelStats channel_stats(const torch::Tensor& features, double eps) {
  if (features.dim() != 4) throw std::invalid_argument("channel_stats expects [B,C,H,W]");
  if (features.size(2) * features.size(3) == 0) throw std::invalid_argument("channel_stats: empty spatial extent");
  return {features.flatten(2).mean(2), torch::sqrt(population_variance(features) + eps)};
}

StyleTarget style_target_from_latent(Autoencoder& ae, const torch::Tensor& z_style, const RegConfig& cfg) {
  cfg.validate(ae->config().num_upsample_blocks);
  torch::NoGradGuard g;
  const auto stack = ae->decode_features(z_style, style_depth(cfg, ae->config().num_upsample_blocks));
  StyleTarget t;
  for (auto b : cfg.style_blocks) {
    const auto& f = stack.blocks[b - 1];
    t.mean.push_back(f.flatten(2).mean(2));
    t.variance.push_back(population_variance(f) + cfg.eps);
  }
  return t;
}

StyleTarget style_target(Autoencoder& ae, const torch::Tensor& c_style, const RegConfig& cfg) {
  torch::NoGradGuard g;
  return style_target_from_latent(ae, ae->encode(c_style), cfg);
}

torch::Tensor style_reg_from_stack(const FeatureStack& stack, const StyleTarget& target, const RegConfig& cfg) {
  if (target.mean.size() != cfg.style_blocks.size()) throw std::invalid_argument("style target/block mismatch");
  torch::Tensor total;
  for (std::size_t k = 0; k < cfg.style_blocks.size(); ++k) {
    const auto b = cfg.style_blocks[k];
    if (b < 1 || b > static_cast<int64_t>(stack.blocks.size())) throw std::invalid_argument("feature stack too short");
    const auto& f = stack.blocks[b - 1];
    const auto& tm = target.mean[k];
    if (tm.size(0) != f.size(0) || tm.size(1) != f.size(1)) throw std::invalid_argument("style_reg: shape mismatch");
    auto mean = f.flatten(2).mean(2);
    auto var = population_variance(f) + cfg.eps;
    auto term = (mean - tm).pow(2).sum(1) + (var - target.variance[k]).pow(2).sum(1);  // [B]
    total = total.defined() ? total + term : term;
  }
  return (total / static_cast<double>(cfg.style_blocks.size())).mean();
}

torch::Tensor style_reg(Autoencoder& ae, const torch::Tensor& z0_hat, const torch::Tensor& c_style,
                        const RegConfig& cfg) {
  const auto target = style_target(ae, c_style, cfg);
  if (target.mean.front().size(0) != z0_hat.size(0)) throw std::invalid_argument("style_reg: batch mismatch");
  FreezeGuard frozen(*ae);
  return style_reg_from_stack(ae->decode_features(z0_hat, style_depth(cfg, ae->config().num_upsample_blocks)),
                              target, cfg);
}

torch::Tensor style_reg_latents(Autoencoder& ae, const torch::Tensor& z_a, const torch::Tensor& z_b,
                                const RegConfig& cfg) {
  if (z_a.sizes() != z_b.sizes()) throw std::invalid_argument("style_reg: latent shape mismatch");
  const auto target = style_target_from_latent(ae, z_b, cfg);
  FreezeGuard frozen(*ae);
  return style_reg_from_stack(ae->decode_features(z_a, style_depth(cfg, ae->config().num_upsample_blocks)), target,
                              cfg);
}

torch::Tensor content_reg_from_features(const torch::Tensor& features_hat, const torch::Tensor& features_target) {
  if (features_hat.sizes() != features_target.sizes()) throw std::invalid_argument("content_reg: shape mismatch");
  return (features_hat - features_target.detach()).pow(2).mean();
}

torch::Tensor content_reg(Autoencoder& ae, const torch::Tensor& z0_hat, const torch::Tensor& z0,
                          const RegConfig& cfg) {
  cfg.validate(ae->config().num_upsample_blocks);
  if (z0_hat.sizes() != z0.sizes()) throw std::invalid_argument("content_reg: latent shape mismatch");
  const auto j = cfg.content_block;
  torch::Tensor target;
  {
    torch::NoGradGuard g;
    target = ae->decode_features(z0, j).blocks[j - 1];
  }
  FreezeGuard frozen(*ae);
  return content_reg_from_features(ae->decode_features(z0_hat, j).blocks[j - 1], target);
}

InversionResult invert_style_latent(Autoencoder& ae, const torch::Tensor& z_init, const torch::Tensor& c_style,
                                    int steps, const RegConfig& cfg, const InversionOptions& opts) {
  if (steps < 1) throw std::invalid_argument("invert_style_latent: steps must be >= 1");
  if (!torch::isfinite(z_init).all().item<bool>()) throw std::invalid_argument("invert_style_latent: non-finite init");
  const auto target = style_target(ae, c_style, cfg);
  const int64_t stop = style_depth(cfg, ae->config().num_upsample_blocks);

  InversionResult result;
  auto z = z_init.detach().clone().requires_grad_(true);
  torch::optim::Adam opt({z}, torch::optim::AdamOptions(opts.lr));
  int rising = 0;
  for (int step = 0; step <= steps; ++step) {
    opt.zero_grad();
    auto loss = style_reg_from_stack(ae->decode_features(z, stop), target, cfg);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      result.diverged = true;
      break;
    }
    result.losses.push_back(value);
    if (opts.on_step) opts.on_step(step, value);
    if (opts.image_every > 0 && opts.on_image && step % opts.image_every == 0) opts.on_image(step, z.detach());
    if (step == steps) break;
    loss.backward();
    if (step == 0) result.initial_grad_norm = z.grad().norm().item<double>();
    opt.step();
    if (step > 0 && value > result.losses[result.losses.size() - 2]) {
      if (++rising >= opts.patience) {
        result.diverged = true;
        break;
      }
    } else {
      rising = 0;
    }
  }
  result.latent = z.detach();
  return result;
}

}  // namespace controlstyle
