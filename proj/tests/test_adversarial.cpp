#include <cmath>

#include <gtest/gtest.h>

#include "controlstyle/adversarial.hpp"
#include "controlstyle/data_synth.hpp"
#include "controlstyle/modulation.hpp"
#include "controlstyle/text.hpp"
#include "helpers.hpp"

using namespace controlstyle;

namespace {

torch::Tensor styles(int n, uint64_t seed) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(data::gen_style(data::make_style_spec(i % 8, seed + i)));
  return to_batch(imgs);
}

/// Zeroes the final layer so every logit is 0, i.e. D = 0.5 everywhere.
void make_uninformed(Discriminator& d) {
  torch::NoGradGuard g;
  auto params = d->named_parameters();
  params["c4.weight"].zero_();
  params["c4.bias"].zero_();
}

double naive_disc_loss(const torch::Tensor& real, const torch::Tensor& fake) {
  auto r = real.to(torch::kFloat64).contiguous().view(-1);
  auto f = fake.to(torch::kFloat64).contiguous().view(-1);
  double lr = 0, lf = 0;
  for (int64_t i = 0; i < r.numel(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-r[i].item<double>()));
    lr += -std::log(p);
  }
  for (int64_t i = 0; i < f.numel(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-f[i].item<double>()));
    lf += -std::log(1.0 - p);
  }
  return lr / static_cast<double>(r.numel()) + lf / static_cast<double>(f.numel());
}

}  // namespace

TEST(Discriminator, PatchGridAndFiniteLogits) {
  torch::manual_seed(0);
  Discriminator d;
  auto c = styles(3, 1);
  auto out = d(c, c);
  EXPECT_EQ(out.size(0), 3);
  EXPECT_EQ(out.size(1), 1);
  EXPECT_GT(out.size(2), 1);
  EXPECT_GT(out.size(3), 1);
  EXPECT_TRUE(torch::isfinite(out).all().item<bool>());
  EXPECT_THROW(d(c, c.slice(0, 0, 2)), std::invalid_argument);
  EXPECT_THROW(d(c.slice(1, 0, 1), c.slice(1, 0, 1)), std::invalid_argument);
}

TEST(Discriminator, ConditionalityIsLive) {
  torch::manual_seed(1);
  Discriminator d;
  auto c = styles(4, 2);
  auto x = styles(4, 50);
  torch::NoGradGuard g;
  auto a = d(x, c);
  auto b = d(x, c.flip({1}));  // channel permutation of the condition
  EXPECT_GT(testutil::max_abs_diff(a, b), 1e-6);
}

TEST(AdversarialLoss, UninformedDiscriminator) {
  torch::manual_seed(2);
  Discriminator d;
  make_uninformed(d);
  auto c = styles(2, 3);
  auto aug = augment_style(c, 4);
  auto fake = styles(2, 70);
  EXPECT_NEAR(disc_step_loss(d, c, aug, fake).item<double>(), 2 * std::log(2.0), 1e-6);
  EXPECT_NEAR(gen_adv_loss(d, fake, c).item<double>(), std::log(2.0), 1e-6);
}

TEST(AdversarialLoss, PerfectAndFooledDiscriminator) {
  auto hi = torch::full({2, 1, 6, 6}, 40.0);
  auto lo = torch::full({2, 1, 6, 6}, -40.0);
  EXPECT_LT(disc_loss_from_logits(hi, lo).item<double>(), 1e-12);
  EXPECT_LT(gen_loss_from_logits(hi).item<double>(), 1e-12);
  EXPECT_GT(disc_loss_from_logits(lo, hi).item<double>(), 79.0);
}

TEST(AdversarialLoss, MatchesNaiveLoop) {
  for (int trial = 0; trial < 10; ++trial) {
    torch::manual_seed(10 + trial);
    auto r = torch::randn({3, 1, 5, 5}, torch::kFloat64) * 3;
    auto f = torch::randn({3, 1, 5, 5}, torch::kFloat64) * 3;
    EXPECT_NEAR(disc_loss_from_logits(r, f).item<double>(), naive_disc_loss(r, f), 1e-8);
    double g = 0;
    auto fv = f.contiguous().view(-1);
    for (int64_t i = 0; i < fv.numel(); ++i) g += std::log1p(std::exp(-fv[i].item<double>()));
    EXPECT_NEAR(gen_loss_from_logits(f).item<double>(), g / static_cast<double>(fv.numel()), 1e-8);
  }
}

TEST(AdversarialLoss, NonFiniteLogitsRejected) {
  auto ok = torch::zeros({1, 1, 4, 4});
  auto bad = ok.clone();
  bad[0][0][1][1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(disc_loss_from_logits(bad, ok), std::runtime_error);
  EXPECT_THROW(disc_loss_from_logits(ok, bad), std::runtime_error);
  EXPECT_THROW(gen_loss_from_logits(bad), std::runtime_error);
}

TEST(AdversarialLoss, DiscStepDetachesGenerator) {
  torch::manual_seed(3);
  Discriminator d;
  auto c = styles(2, 5);
  auto gen_param = torch::zeros({2, 3, 64, 64}).requires_grad_(true);
  auto x0_hat = torch::tanh(gen_param + styles(2, 90));
  disc_step_loss(d, c, augment_style(c, 1), x0_hat).backward();
  EXPECT_FALSE(gen_param.grad().defined());
  for (auto& p : d->named_parameters()) {
    ASSERT_TRUE(p.value().grad().defined()) << p.key();
    EXPECT_GT(p.value().grad().abs().sum().item<double>(), 0.0) << p.key();
  }
  EXPECT_THROW(disc_step_loss(d, c, c, x0_hat.slice(0, 0, 1)), std::invalid_argument);
}

TEST(AdversarialLoss, GeneratorGradientAudit) {
  // Frozen base + autoencoder, jittered modulation network, live discriminator.
  torch::manual_seed(4);
  auto ucfg = testutil::small_unet_config();
  UNet base(ucfg);
  TextEncoder text(ucfg.text_dim);
  Autoencoder ae(testutil::small_ae_config());
  for (torch::nn::Module* m : std::initializer_list<torch::nn::Module*>{base.get(), text.get(), ae.get()})
    for (auto& p : m->parameters()) p.requires_grad_(false);
  auto mod = init_modulation(base, ModulationConfig::style());
  testutil::jitter_parameters(*mod, 0.02, 5);
  Discriminator d;

  auto c = styles(2, 6);
  auto z = torch::randn({2, 4, 8, 8});
  auto t = torch::full({2}, 50, torch::kInt64);
  std::vector<std::string> caps = {"a red circle", "a blue square on green"};
  auto emb = embed_text(text, caps).embedded;
  auto eps = modulated_forward(base, mod, z, t, emb, c);
  auto x0_hat = ae->decode(z - eps);
  gen_adv_loss(d, x0_hat, c).backward();

  for (auto& [group, params] : mod->parameter_groups()) {
    double total = 0;
    for (auto& p : params)
      if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
    EXPECT_GT(total, 0.0) << group;
  }
  for (auto& p : d->named_parameters()) {
    EXPECT_FALSE(p.value().grad().defined()) << "disc." << p.key();
    EXPECT_TRUE(p.value().requires_grad()) << "disc." << p.key();
  }
  for (auto& p : base->parameters()) EXPECT_FALSE(p.grad().defined());
  for (auto& p : ae->parameters()) EXPECT_FALSE(p.grad().defined());
}

TEST(Augment, IdentityAndDeterminism) {
  auto c = styles(3, 7);
  EXPECT_TRUE(testutil::bitwise_equal(augment_style(c, 123, AugmentConfig::identity()), c));
  auto a = augment_style(c, 9);
  auto b = augment_style(c, 9);
  EXPECT_TRUE(testutil::bitwise_equal(a, b));
  EXPECT_FALSE(torch::equal(a, augment_style(c, 10)));
  EXPECT_EQ(a.sizes(), c.sizes());
  EXPECT_LE(a.abs().max().item<double>(), 1.0);
  auto single = augment_style(c[0], 9);
  EXPECT_EQ(single.sizes(), c[0].sizes());
  EXPECT_THROW(augment_style(torch::zeros({64, 64}), 1), std::invalid_argument);
}

TEST(Augment, ChannelMeanShiftBoundedByJitter) {
  AugmentConfig cfg{1.0, 1.0, 0.5, 0.1};  // flips preserve means, so only jitter moves them
  auto c = styles(4, 11);
  auto base_mean = c.mean({2, 3});
  double worst = 0;
  torch::Tensor avg_shift = torch::zeros_like(base_mean);
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto shift = augment_style(c, seed, cfg).mean({2, 3}) - base_mean;
    worst = std::max(worst, shift.abs().max().item<double>());
    avg_shift += shift / 100.0;
  }
  EXPECT_LE(worst, cfg.jitter + 1e-5);
  EXPECT_GT(worst, 0.0);
  // Offsets are uniform in [-j, j]; clamping only pulls the mean towards zero shift.
  EXPECT_LE(avg_shift.abs().max().item<double>(), 4 * cfg.jitter / std::sqrt(3.0 * 100));
}
