#include "controlstyle/modulation.hpp"

#include <cmath>
#include <stdexcept>

namespace controlstyle {

std::string branch_kind_name(BranchKind k) { return k == BranchKind::Style ? "style" : "edge"; }

BranchKind parse_branch_kind(const std::string& name) {
  if (name == "style") return BranchKind::Style;
  if (name == "edge") return BranchKind::Edge;
  throw std::invalid_argument("unknown branch kind '" + name + "'");
}

ModulationConfig ModulationConfig::style(int64_t image_size, int64_t factor) {
  return {BranchKind::Style, 3, 32, image_size, factor};
}

ModulationConfig ModulationConfig::edge(int64_t image_size, int64_t factor) {
  return {BranchKind::Edge, 1, 32, image_size, factor};
}

nlohmann::json ModulationConfig::to_json() const {
  return {{"kind", branch_kind_name(kind)},
          {"condition_channels", condition_channels},
          {"hint_channels", hint_channels},
          {"image_size", image_size},
          {"downsample_factor", downsample_factor}};
}

ModulationConfig ModulationConfig::from_json(const nlohmann::json& j) {
  ModulationConfig c;
  c.kind = parse_branch_kind(j.at("kind").get<std::string>());
  c.condition_channels = j.at("condition_channels");
  c.hint_channels = j.at("hint_channels");
  c.image_size = j.at("image_size");
  c.downsample_factor = j.at("downsample_factor");
  return c;
}

ZeroConvImpl::ZeroConvImpl(int64_t in, int64_t out)
    : conv_(register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)))) {
  torch::NoGradGuard g;
  conv_->weight.zero_();
  conv_->bias.zero_();
}

ConditionEmbedderImpl::ConditionEmbedderImpl(const ModulationConfig& cfg) : cfg_(cfg) {
  int64_t ch = cfg.condition_channels;
  int64_t width = 16;
  int stage = 0;
  for (int64_t f = cfg.downsample_factor; f > 1; f /= 2, ++stage) {
    stages_.push_back(register_module(
        "stage" + std::to_string(stage),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, width, 3).stride(2).padding(1))));
    ch = width;
    width = std::min<int64_t>(width * 2, 64);
  }
  out_ = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, cfg.hint_channels, 3).padding(1)));
}

torch::Tensor ConditionEmbedderImpl::forward(const torch::Tensor& c) {
  if (c.dim() != 4 || c.size(1) != cfg_.condition_channels || c.size(2) != cfg_.image_size ||
      c.size(3) != cfg_.image_size) {
    throw std::invalid_argument("condition must be [B," + std::to_string(cfg_.condition_channels) + "," +
                                std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                                "], got " + c10::str(c.sizes()));
  }
  auto h = c;
  for (auto& s : stages_) h = torch::silu(s(h));
  return out_(h);
}

ModulationNetworkImpl::ModulationNetworkImpl(const UNetConfig& unet_cfg, const ModulationConfig& cfg)
    : unet_cfg_(unet_cfg), cfg_(cfg) {
  copy_ = register_module("copy", UNetEncoder(unet_cfg_));
  embedder_ = register_module("embedder", ConditionEmbedder(cfg_));
  input_zero_ = register_module("input_zero", ZeroConv(cfg_.hint_channels, unet_cfg_.latent_channels));
  for (int64_t i = 1; i <= unet_cfg_.levels(); ++i) {
    const auto c = unet_cfg_.channels[i - 1];
    output_zero_.push_back(register_module("output_zero" + std::to_string(i), ZeroConv(c, c)));
  }
  const auto cm = unet_cfg_.channels.back();
  output_zero_.push_back(register_module("output_zero_mid", ZeroConv(cm, cm)));
}

torch::Tensor ModulationNetworkImpl::embed_condition(const torch::Tensor& condition) { return embedder_(condition); }

Taps ModulationNetworkImpl::branch_features(const torch::Tensor& z_t, const torch::Tensor& t,
                                            const torch::Tensor& text, const torch::Tensor& condition) {
  auto hint = input_zero_(embedder_(condition));
  if (hint.sizes() != z_t.sizes()) {
    throw std::invalid_argument("condition embedding " + c10::str(hint.sizes()) + " does not match latent " +
                                c10::str(z_t.sizes()));
  }
  auto states = copy_(z_t + hint, t, text);
  Taps out = states.levels;
  out.push_back(states.middle);
  return out;
}

Taps ModulationNetworkImpl::apply_output_zero_convs(const Taps& features) {
  if (features.size() != output_zero_.size()) throw std::invalid_argument("tap count mismatch");
  Taps out;
  out.reserve(features.size());
  for (std::size_t j = 0; j < features.size(); ++j) out.push_back(output_zero_[j](features[j]));
  return out;
}

Taps ModulationNetworkImpl::taps(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& text,
                                 const torch::Tensor& condition) {
  return apply_output_zero_convs(branch_features(z_t, t, text, condition));
}

std::vector<std::pair<std::string, std::vector<torch::Tensor>>> ModulationNetworkImpl::parameter_groups() {
  std::vector<torch::Tensor> out_params;
  for (auto& z : output_zero_)
    for (auto& p : z->parameters()) out_params.push_back(p);
  return {{"copy", copy_->parameters()},
          {"input_zero", input_zero_->parameters()},
          {"output_zero", out_params},
          {"embedder", embedder_->parameters()}};
}

ModulationNetwork init_modulation(UNet& base, const ModulationConfig& cfg) {
  ModulationNetwork mod(base->config(), cfg);
  auto src = base->encoder()->named_parameters(true);
  auto dst = mod->copy()->named_parameters(true);
  if (src.size() != dst.size()) throw std::invalid_argument("init_modulation: architecture mismatch");
  torch::NoGradGuard g;
  for (const auto& item : src) {
    auto* target = dst.find(item.key());
    if (target == nullptr || target->sizes() != item.value().sizes()) {
      throw std::invalid_argument("init_modulation: architecture mismatch at " + item.key());
    }
    target->copy_(item.value());
  }
  auto src_buf = base->encoder()->named_buffers(true);
  auto dst_buf = mod->copy()->named_buffers(true);
  for (const auto& item : src_buf) {
    auto* target = dst_buf.find(item.key());
    if (target == nullptr) throw std::invalid_argument("init_modulation: buffer mismatch at " + item.key());
    target->copy_(item.value());
  }
  mod->to(base->encoder()->parameters().front().scalar_type());
  return mod;
}

torch::Tensor style_embed(ModulationNetwork& mod, const torch::Tensor& c_style) {
  return mod->embed_condition(c_style);
}

torch::Tensor modulated_forward(UNet& base, ModulationNetwork& mod, const torch::Tensor& z_t, const torch::Tensor& t,
                                const torch::Tensor& text, const torch::Tensor& condition) {
  if (!(mod->unet_config() == base->config())) throw std::invalid_argument("modulation/base architecture mismatch");
  auto states = base->encode(z_t, t, text);
  return base->decode(states, text, mod->taps(z_t, t, text, condition));
}

Taps fuse_taps(std::span<ControlBranch> branches, const torch::Tensor& z_t, const torch::Tensor& t,
               const torch::Tensor& text) {
  if (branches.empty()) throw std::invalid_argument("fuse_controls needs at least one branch");
  Taps sum;
  for (auto& b : branches) {
    if (!std::isfinite(b.weight) || b.weight < 0) throw std::invalid_argument("control weight must be finite and >= 0");
    auto taps = b.net->taps(z_t, t, text, b.condition);
    if (sum.empty()) {
      for (auto& tap : taps) sum.push_back(tap * b.weight);
      continue;
    }
    if (taps.size() != sum.size()) throw std::invalid_argument("fuse_controls: incompatible branch tap counts");
    for (std::size_t j = 0; j < taps.size(); ++j) {
      if (taps[j].sizes() != sum[j].sizes()) throw std::invalid_argument("fuse_controls: incompatible tap shapes");
      sum[j] = sum[j] + taps[j] * b.weight;
    }
  }
  return sum;
}

torch::Tensor fuse_controls(std::span<ControlBranch> branches, const torch::Tensor& z_t, const torch::Tensor& t,
                            const torch::Tensor& text, UNet& base) {
  for (auto& b : branches)
    if (!(b.net->unet_config() == base->config())) throw std::invalid_argument("fuse_controls: branch/base mismatch");
  auto taps = fuse_taps(branches, z_t, t, text);
  return base->decode(base->encode(z_t, t, text), text, taps);
}

}  // namespace controlstyle
