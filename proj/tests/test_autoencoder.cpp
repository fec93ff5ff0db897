#include <gtest/gtest.h>

#include <cmath>

#include "controlstyle/autoencoder.hpp"
#include "controlstyle/data_synth.hpp"
#include "helpers.hpp"

using namespace controlstyle;

namespace {

torch::Tensor scene_batch(int n, uint64_t seed0 = 0) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(data::gen_scene(seed0 + static_cast<uint64_t>(i)).image);
  return to_batch(imgs);
}

}  // namespace

TEST(AutoencoderConfig, LadderAndValidation) {
  AutoencoderConfig c;
  EXPECT_EQ(c.latent_size(), 8);
  EXPECT_EQ(c.halvings(), 3);
  for (int j = 1; j <= 4; ++j) EXPECT_EQ(c.block_resolution(j), 8 << (j - 1));
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.image_size = 60;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.downsample_factor = 6;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.num_upsample_blocks = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_EQ(AutoencoderConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Autoencoder, ShapesRangeAndDeterminism) {
  torch::manual_seed(0);
  Autoencoder ae(testutil::small_ae_config());
  auto x = scene_batch(2);
  auto z = ae->encode(x);
  EXPECT_EQ(z.sizes(), (std::vector<int64_t>{2, 4, 8, 8}));
  EXPECT_TRUE(torch::isfinite(z).all().item<bool>());
  EXPECT_TRUE(torch::equal(z, ae->encode(x)));
  auto y = ae->decode(z * 10);
  EXPECT_EQ(y.sizes(), x.sizes());
  EXPECT_LE(y.abs().max().item<double>(), 1.0);
  EXPECT_TRUE(torch::equal(ae->decode(z), ae->decode(z)));
  EXPECT_THROW(ae->encode(torch::zeros({1, 3, 32, 32})), std::invalid_argument);
  EXPECT_THROW(ae->decode(torch::zeros({1, 4, 4, 4})), std::invalid_argument);
}

TEST(Autoencoder, FeatureStackLadder) {
  torch::manual_seed(1);
  auto cfg = testutil::small_ae_config();
  Autoencoder ae(cfg);
  auto z = torch::randn({2, 4, 8, 8});
  auto stack = ae->decode_features(z);
  ASSERT_EQ(stack.blocks.size(), 4u);
  for (int j = 1; j <= 4; ++j) {
    const auto& b = stack.blocks[j - 1];
    EXPECT_EQ(b.size(1), cfg.decoder_channels(j));
    EXPECT_EQ(b.size(2), 8 << (j - 1));
    EXPECT_EQ(b.size(3), 8 << (j - 1));
  }
  EXPECT_TRUE(torch::equal(stack.image.clamp(-1, 1), ae->decode(z)));
  auto again = ae->decode_features(z);
  for (int j = 0; j < 4; ++j) EXPECT_TRUE(torch::equal(stack.blocks[j], again.blocks[j]));
  auto partial = ae->decode_features(z, 2);
  EXPECT_EQ(partial.blocks.size(), 2u);
  EXPECT_FALSE(partial.image.defined());
  EXPECT_TRUE(torch::equal(partial.blocks[1], stack.blocks[1]));
  EXPECT_THROW(ae->decode_features(z, 5), std::out_of_range);
}

TEST(Autoencoder, LatentScaleIsUndoneByDecoder) {
  torch::manual_seed(2);
  Autoencoder ae(testutil::small_ae_config());
  auto x = scene_batch(1);
  auto z1 = ae->encode(x);
  auto y1 = ae->decode(z1);
  ae->set_latent_scale(3.0);
  auto z3 = ae->encode(x);
  EXPECT_TRUE(torch::allclose(z3, z1 * 3.0, 1e-6, 1e-6));
  EXPECT_TRUE(torch::allclose(ae->decode(z3), y1, 1e-5, 1e-5));
}

TEST(Autoencoder, TrainingRejectsEmptyAndReducesLoss) {
  torch::manual_seed(3);
  Autoencoder ae(testutil::small_ae_config());
  AeTrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch = 8;
  cfg.lr = 2e-3;
  EXPECT_THROW(train_autoencoder(ae, torch::zeros({0, 3, 64, 64}), cfg), std::invalid_argument);
  auto report = train_autoencoder(ae, scene_batch(40), cfg);
  ASSERT_EQ(report.epoch_loss.size(), 6u);
  for (std::size_t e = 1; e < report.epoch_loss.size(); ++e)
    EXPECT_LE(report.epoch_loss[e], report.epoch_loss[e - 1] * 1.05) << "epoch " << e;
  EXPECT_LT(report.epoch_loss.back(), report.epoch_loss.front());
  EXPECT_GT(report.latent_scale, 0.0);
  EXPECT_NEAR(report.heldout_psnr, psnr_from_mse(report.heldout_mse), 1e-12);
  // Latents of the training set come out with roughly unit RMS.
  auto z = ae->encode(scene_batch(20, 1000));
  EXPECT_NEAR(z.pow(2).mean().sqrt().item<double>(), 1.0, 0.5);
}

TEST(Autoencoder, PsnrFormula) {
  EXPECT_NEAR(psnr_from_mse(0.04), 20.0, 1e-12);
  EXPECT_NEAR(psnr_from_mse(4.0), 0.0, 1e-12);
}

TEST(Autoencoder, ReconstructionGradientMatchesFiniteDifferences) {
  torch::manual_seed(4);
  auto cfg = testutil::small_ae_config();
  cfg.base_channels = 4;
  Autoencoder ae(cfg);
  ae->to(torch::kFloat64);
  auto x = scene_batch(4).to(torch::kFloat64);
  auto loss_fn = [&] { return (ae->decode_raw(ae->encode(x)) - x).pow(2).mean(); };

  auto params = ae->named_parameters();
  for (const char* name : {"enc_in.weight", "dec_res2.conv1.weight", "dec_out.bias"}) {
    auto p = params[name];
    ASSERT_TRUE(p.defined()) << name;
    p.mutable_grad() = torch::Tensor();
    loss_fn().backward();
    auto flat = p.view(-1);
    const int64_t k = flat.size(0) / 3;
    const double analytic = p.grad().view(-1)[k].item<double>();
    const double h = 1e-6;
    double numeric;
    {
      torch::NoGradGuard g;
      const double orig = flat[k].item<double>();
      flat[k] = orig + h;
      const double up = loss_fn().item<double>();
      flat[k] = orig - h;
      const double down = loss_fn().item<double>();
      flat[k] = orig;
      numeric = (up - down) / (2 * h);
    }
    EXPECT_LE(std::fabs(analytic - numeric), 1e-3 * std::max(std::fabs(numeric), 1e-8)) << name;
  }
}
