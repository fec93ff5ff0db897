#include "controlstyle/autoencoder.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace controlstyle {
namespace {

torch::nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

int64_t AutoencoderConfig::halvings() const {
  int64_t h = 0;
  for (int64_t f = downsample_factor; f > 1; f /= 2) ++h;
  return h;
}

int64_t AutoencoderConfig::decoder_channels(int64_t block) const {
  const int64_t n = num_upsample_blocks;
  if (block <= n - 2) return base_channels * 2;
  if (block == n - 1) return base_channels;
  return std::max<int64_t>(base_channels / 2, 1);
}

int64_t AutoencoderConfig::block_resolution(int64_t block) const { return latent_size() << (block - 1); }

void AutoencoderConfig::validate() const {
  if (image_size <= 0 || latent_channels <= 0 || base_channels <= 0 || image_channels <= 0) {
    throw std::invalid_argument("autoencoder sizes must be positive");
  }
  if (downsample_factor < 2 || (downsample_factor & (downsample_factor - 1)) != 0) {
    throw std::invalid_argument("downsample_factor must be a power of two >= 2");
  }
  if (image_size % downsample_factor != 0) throw std::invalid_argument("image_size not divisible by downsample_factor");
  if (num_upsample_blocks != halvings() + 1) {
    throw std::invalid_argument("num_upsample_blocks must equal log2(downsample_factor) + 1");
  }
}

AutoencoderConfig AutoencoderConfig::from_config(const Config& cfg) {
  AutoencoderConfig c;
  c.image_size = cfg.get_int("image_size", c.image_size);
  c.latent_channels = cfg.get_int("latent_channels", c.latent_channels);
  c.downsample_factor = cfg.get_int("ae.downsample_factor", c.downsample_factor);
  c.base_channels = cfg.get_int("ae.base_channels", c.base_channels);
  c.num_upsample_blocks = cfg.get_int("ae.upsample_blocks", c.halvings() + 1);
  c.validate();
  return c;
}

nlohmann::json AutoencoderConfig::to_json() const {
  return {{"image_size", image_size},           {"image_channels", image_channels},
          {"latent_channels", latent_channels}, {"downsample_factor", downsample_factor},
          {"base_channels", base_channels},     {"num_upsample_blocks", num_upsample_blocks}};
}

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
  AutoencoderConfig c;
  c.image_size = j.at("image_size");
  c.image_channels = j.at("image_channels");
  c.latent_channels = j.at("latent_channels");
  c.downsample_factor = j.at("downsample_factor");
  c.base_channels = j.at("base_channels");
  c.num_upsample_blocks = j.at("num_upsample_blocks");
  c.validate();
  return c;
}

AeResBlockImpl::AeResBlockImpl(int64_t channels)
    : conv1_(register_module("conv1", conv3(channels, channels))),
      conv2_(register_module("conv2", conv3(channels, channels))) {}

torch::Tensor AeResBlockImpl::forward(const torch::Tensor& x) {
  return x + conv2_(torch::silu(conv1_(torch::silu(x))));
}

AutoencoderImpl::AutoencoderImpl(AutoencoderConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const int64_t n = cfg_.num_upsample_blocks;
  const int64_t h = cfg_.halvings();
  // Encoder level l (0..h) mirrors decoder block n - l.
  auto enc_ch = [&](int64_t l) { return cfg_.decoder_channels(n - l); };

  enc_in_ = register_module("enc_in", conv3(cfg_.image_channels, enc_ch(0)));
  for (int64_t l = 1; l <= h; ++l) {
    enc_down_.push_back(register_module("enc_down" + std::to_string(l), conv3(enc_ch(l - 1), enc_ch(l), 2)));
    enc_res_.push_back(register_module("enc_res" + std::to_string(l), AeResBlock(enc_ch(l))));
  }
  enc_out_ = register_module("enc_out", conv3(enc_ch(h), cfg_.latent_channels));

  dec_in_ = register_module("dec_in", conv3(cfg_.latent_channels, cfg_.decoder_channels(1)));
  for (int64_t j = 1; j <= n; ++j) {
    if (j >= 2) {
      dec_up_.push_back(register_module("dec_up" + std::to_string(j),
                                        conv3(cfg_.decoder_channels(j - 1), cfg_.decoder_channels(j))));
    }
    dec_res_.push_back(register_module("dec_res" + std::to_string(j), AeResBlock(cfg_.decoder_channels(j))));
  }
  dec_out_ = register_module("dec_out", conv3(cfg_.decoder_channels(n), cfg_.image_channels));
  latent_scale_ = register_buffer("latent_scale", torch::ones({1}));
}

void AutoencoderImpl::set_latent_scale(double s) {
  torch::NoGradGuard g;
  latent_scale_.fill_(s);
}

void AutoencoderImpl::check_image(const torch::Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != cfg_.image_channels || x.size(2) != cfg_.image_size ||
      x.size(3) != cfg_.image_size) {
    throw std::invalid_argument("autoencoder expects [B," + std::to_string(cfg_.image_channels) + "," +
                                std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                                "] images, got " + c10::str(x.sizes()));
  }
}

void AutoencoderImpl::check_latent(const torch::Tensor& z) const {
  const auto s = cfg_.latent_size();
  if (z.dim() != 4 || z.size(1) != cfg_.latent_channels || z.size(2) != s || z.size(3) != s) {
    throw std::invalid_argument("autoencoder expects [B," + std::to_string(cfg_.latent_channels) + "," +
                                std::to_string(s) + "," + std::to_string(s) + "] latents, got " +
                                c10::str(z.sizes()));
  }
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& x) {
  check_image(x);
  auto h = enc_in_(x);
  for (std::size_t l = 0; l < enc_down_.size(); ++l) h = enc_res_[l](enc_down_[l](torch::silu(h)));
  return enc_out_(torch::silu(h)) * latent_scale_.to(x.dtype());
}

FeatureStack AutoencoderImpl::decode_features(const torch::Tensor& z, int64_t up_to_block) {
  check_latent(z);
  const int64_t n = cfg_.num_upsample_blocks;
  if (up_to_block < 0 || up_to_block > n) throw std::out_of_range("decode_features: block index out of range");
  const int64_t last = up_to_block == 0 ? n : up_to_block;

  FeatureStack out;
  auto h = dec_in_(z / latent_scale_.to(z.dtype()));
  for (int64_t j = 1; j <= last; ++j) {
    if (j >= 2) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(
                 torch::kNearest));
      h = torch::silu(dec_up_[j - 2](h));
    }
    h = dec_res_[j - 1](h);
    out.blocks.push_back(h);
  }
  if (last == n) out.image = dec_out_(torch::silu(h));
  return out;
}

torch::Tensor AutoencoderImpl::decode_raw(const torch::Tensor& z) { return decode_features(z).image; }

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& z) { return decode_raw(z).clamp(-1.0, 1.0); }

// ---------------------------------------------------------------------------

AeTrainConfig AeTrainConfig::from_config(const Config& cfg) {
  AeTrainConfig c;
  c.epochs = static_cast<int>(cfg.get_int("ae.epochs", c.epochs));
  c.batch = static_cast<int>(cfg.get_int("ae.batch", c.batch));
  c.lr = cfg.get_double("ae.lr", c.lr);
  c.holdout_fraction = cfg.get_double("ae.holdout", c.holdout_fraction);
  c.target_psnr = cfg.get_double("ae.target_psnr", c.target_psnr);
  c.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  return c;
}

double psnr_from_mse(double mse) { return 10.0 * std::log10(4.0 / std::max(mse, 1e-20)); }

double reconstruction_mse(Autoencoder& ae, const torch::Tensor& images, int batch) {
  torch::NoGradGuard g;
  double total = 0;
  const int64_t n = images.size(0);
  for (int64_t i = 0; i < n; i += batch) {
    auto x = images.slice(0, i, std::min(n, i + batch));
    total += (ae->decode(ae->encode(x)) - x).pow(2).sum().item<double>();
  }
  return total / static_cast<double>(images.numel());
}

AeTrainReport train_autoencoder(Autoencoder& ae, const torch::Tensor& images, const AeTrainConfig& cfg,
                                const std::function<void(int, double)>& on_epoch) {
  if (!images.defined() || images.size(0) == 0) throw std::invalid_argument("train_autoencoder: empty dataset");
  if (cfg.epochs < 1 || cfg.batch < 1) throw std::invalid_argument("train_autoencoder: epochs and batch must be >= 1");
  const int64_t n = images.size(0);
  const int64_t n_hold = n > 1 ? std::max<int64_t>(1, static_cast<int64_t>(std::llround(n * cfg.holdout_fraction)))
                               : 0;
  const int64_t n_train = n - n_hold;

  std::mt19937_64 rng(cfg.seed);
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto idx = torch::tensor(perm, torch::kInt64);
  auto train = images.index_select(0, idx.slice(0, 0, n_train)).contiguous();
  auto hold = images.index_select(0, idx.slice(0, n_train, n)).contiguous();

  ae->train();
  ae->set_latent_scale(1.0);
  torch::optim::Adam opt(ae->parameters(), torch::optim::AdamOptions(cfg.lr));
  const int64_t steps_per_epoch = (n_train + cfg.batch - 1) / cfg.batch;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  int64_t step = 0;

  AeTrainReport report;
  std::vector<int64_t> order(static_cast<std::size_t>(n_train));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    auto order_t = torch::tensor(order, torch::kInt64);
    double sum = 0;
    for (int64_t i = 0; i < n_train; i += cfg.batch, ++step) {
      // Cosine decay to 5% of the base rate.
      const double progress = static_cast<double>(step) / std::max<int64_t>(1, total_steps);
      const double lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1 + std::cos(M_PI * progress)));
      for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

      auto x = train.index_select(0, order_t.slice(0, i, std::min(n_train, i + cfg.batch)));
      auto loss = (ae->decode_raw(ae->encode(x)) - x).pow(2).mean();
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum += loss.item<double>() * x.size(0);
    }
    report.epoch_loss.push_back(sum / static_cast<double>(n_train));
    if (on_epoch) on_epoch(epoch, report.epoch_loss.back());
  }
  ae->eval();

  {
    torch::NoGradGuard g;
    double sq = 0;
    int64_t count = 0;
    for (int64_t i = 0; i < n_train; i += 64) {
      auto z = ae->encode(train.slice(0, i, std::min(n_train, i + 64)));
      sq += z.pow(2).sum().item<double>();
      count += z.numel();
    }
    const double rms = std::sqrt(sq / std::max<int64_t>(count, 1));
    report.latent_scale = rms > 0 ? 1.0 / rms : 1.0;
    ae->set_latent_scale(report.latent_scale);
  }

  const auto& eval_set = n_hold > 0 ? hold : train;
  report.heldout_mse = reconstruction_mse(ae, eval_set);
  report.heldout_psnr = psnr_from_mse(report.heldout_mse);
  report.converged = report.heldout_psnr >= cfg.target_psnr;
  return report;
}

}  // namespace controlstyle
