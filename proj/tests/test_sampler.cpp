#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "controlstyle/data_synth.hpp"
#include "controlstyle/sampler.hpp"
#include "helpers.hpp"

using namespace controlstyle;

namespace {

/// Small models over a short T = 20 chain.
FrozenModels small_models(uint64_t seed) {
  torch::manual_seed(seed);
  auto ucfg = testutil::small_unet_config();
  FrozenModels m{Autoencoder(testutil::small_ae_config()), UNet(ucfg), TextEncoder(ucfg.text_dim),
                 make_linear_schedule(20, 1e-3, 0.2)};
  testutil::jitter_parameters(*m.unet, 0.02, seed + 1);
  freeze(m);
  return m;
}

torch::Tensor style(int cls, uint64_t seed) { return to_tensor(data::gen_style(data::make_style_spec(cls, seed))); }

const std::string kCaption = "a red circle above a blue square";

/// Reverse chain written out directly from the per-seed noise contract.
torch::Tensor manual_base_chain(FrozenModels& m, const std::string& caption, uint64_t seed) {
  torch::NoGradGuard g;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto z = torch::randn({4, 8, 8}, gen, torch::kFloat32).unsqueeze(0);
  std::vector<std::string> caps{caption};
  auto text = m.text->forward(tokenize_captions(caps));
  for (int t = m.schedule.steps(); t >= 1; --t) {
    auto tt = torch::full({1}, t, torch::kInt64);
    auto eps = m.unet->forward(z, tt, text).eps;
    auto noise = t > 1 ? torch::randn({4, 8, 8}, gen, torch::kFloat32).unsqueeze(0) : torch::zeros_like(z);
    z = reverse_step(z, t, eps, noise, m.schedule);
  }
  return m.ae->decode(z)[0];
}

}  // namespace

TEST(Sample, NoStyleIsBaseChain) {
  auto m = small_models(1);
  SampleRequest req;
  req.caption = kCaption;
  req.seed = 7;
  auto img = sample(req, m);
  EXPECT_EQ(img.sizes(), (std::vector<int64_t>{3, 64, 64}));
  EXPECT_LE(testutil::max_abs_diff(img, manual_base_chain(m, kCaption, 7)), 1e-6);
  EXPECT_LE(img.abs().max().item<double>(), 1.0);
}

TEST(Sample, ZeroInitModulationIsBase) {
  auto m = small_models(2);
  auto mod = init_modulation(m.unet, ModulationConfig::style());
  SampleRequest req;
  req.caption = kCaption;
  req.seed = 3;
  auto base = sample(req, m);
  req.style = style(2, 5);
  EXPECT_TRUE(testutil::bitwise_equal(sample(req, m, &mod), base));
  req.style_weight = 0.4;  // fused path, still identity
  EXPECT_TRUE(testutil::bitwise_equal(sample(req, m, &mod), base));
}

TEST(Sample, DeterministicAndSeedSensitive) {
  auto m = small_models(3);
  auto mod = init_modulation(m.unet, ModulationConfig::style());
  testutil::jitter_parameters(*mod, 0.02, 4);
  SampleRequest req;
  req.caption = kCaption;
  req.style = style(1, 2);
  req.seed = 11;
  auto a = sample(req, m, &mod);
  EXPECT_TRUE(testutil::bitwise_equal(a, sample(req, m, &mod)));
  req.seed = 12;
  EXPECT_FALSE(torch::equal(a, sample(req, m, &mod)));
}

TEST(Sample, RowsIndependentOfBatching) {
  auto m = small_models(4);
  std::vector<std::string> caps = {kCaption, "a green triangle on black"};
  std::vector<uint64_t> seeds = {5, 6};
  auto both = sample_latents(m, nullptr, caps, torch::Tensor(), seeds);
  for (int i = 0; i < 2; ++i) {
    std::vector<std::string> one_cap{caps[i]};
    std::vector<uint64_t> one_seed{seeds[i]};
    auto one = sample_latents(m, nullptr, one_cap, torch::Tensor(), one_seed);
    EXPECT_LE(testutil::max_abs_diff(one[0], both[i]), 1e-5) << i;
  }
}

TEST(Sample, FusedStyleAndEdge) {
  auto m = small_models(5);
  auto style_net = init_modulation(m.unet, ModulationConfig::style());
  auto edge_net = init_modulation(m.unet, ModulationConfig::edge());
  testutil::jitter_parameters(*style_net, 0.02, 6);
  testutil::jitter_parameters(*edge_net, 0.02, 7);
  auto edges = to_tensor(data::edge_map(data::gen_scene(3).image));

  SampleRequest req;
  req.caption = kCaption;
  req.seed = 9;
  auto base = sample(req, m);
  req.style = style(4, 1);
  req.style_weight = 0.0;
  req.extra = {{edge_net, edges, 0.0}};
  EXPECT_LE(testutil::max_abs_diff(sample(req, m, &style_net), base), 1e-6);

  req.style_weight = 0.8;
  req.extra[0].weight = 1.0;
  auto fused = sample(req, m, &style_net);
  EXPECT_GT(testutil::max_abs_diff(fused, base), 1e-4);
  EXPECT_TRUE(torch::isfinite(fused).all().item<bool>());
}

TEST(Sample, Errors) {
  auto m = small_models(6);
  SampleRequest req;
  req.caption = kCaption;
  req.style = style(0, 0);
  EXPECT_THROW(sample(req, m, nullptr), std::invalid_argument);
  auto mod = init_modulation(m.unet, ModulationConfig::style());
  req.style_weight = -1;
  EXPECT_THROW(sample(req, m, &mod), std::invalid_argument);
  req.style_weight = 1;
  req.steps = 7;
  EXPECT_THROW(sample(req, m, &mod), std::invalid_argument);
  req.steps = 20;
  EXPECT_NO_THROW(sample(req, m, &mod));
  req.caption = "a red elephant";
  EXPECT_THROW(sample(req, m, &mod), std::invalid_argument);
}

TEST(Metrics, SelfDistancesAreZero) {
  auto m = small_models(7);
  RegConfig reg;
  auto s = style(3, 3);
  EXPECT_EQ(style_distance(m.ae, s, s, reg), 0.0);
  auto img = to_tensor(data::gen_scene(4).image);
  EXPECT_EQ(structure_score(m.ae, img, img, reg), 0.0);
  EXPECT_GT(structure_score(m.ae, img, to_tensor(data::gen_scene(5).image), reg), 0.0);
  EXPECT_GT(style_distance(m.ae, img, s, reg), 0.0);
}

TEST(Metrics, SameClassCloserThanOtherFamily) {
  auto m = small_models(8);
  RegConfig reg;
  double same = 0, other = 0;
  for (int i = 0; i < 20; ++i) {
    const int cls = i % 8;
    const int far = (cls + 2) % 4 + (cls < 4 ? 4 : 0);  // other family, other theme
    auto a = style(cls, 100 + i);
    same += style_distance(m.ae, style(cls, 500 + i), a, reg);
    other += style_distance(m.ae, style(far, 900 + i), a, reg);
  }
  EXPECT_LT(same / 20, other / 20);
}

TEST(Metrics, MeanCI) {
  std::vector<double> v = {1, 2, 3, 4};
  auto ci = mean_ci(v);
  EXPECT_DOUBLE_EQ(ci.mean, 2.5);
  EXPECT_NEAR(ci.half_width, 1.96 * std::sqrt(5.0 / 3.0) / 2.0, 1e-12);
  std::vector<double> one = {3};
  EXPECT_EQ(mean_ci(one).half_width, 0.0);
}

TEST(Evaluate, ZeroInitBranchMatchesBase) {
  auto m = small_models(9);
  auto mod = init_modulation(m.unet, ModulationConfig::style());
  std::vector<EvalPair> pairs = {{kCaption, style(0, 1), 0}, {"a white square on purple", style(5, 2), 1}};
  EvalOptions opts;
  opts.seeds_per_pair = 2;
  opts.seed = 4;
  int images = 0;
  opts.on_images = [&](int, const torch::Tensor&, const torch::Tensor&) { ++images; };
  auto rep = evaluate(m, mod, pairs, opts);
  ASSERT_EQ(rep.records.size(), 4u);
  EXPECT_EQ(images, 4);
  for (const auto& r : rep.records) {
    EXPECT_EQ(r.style_distance, r.base_style_distance);
    EXPECT_EQ(r.structure_score, 0.0);
    EXPECT_GT(r.shuffled_structure, 0.0);
    EXPECT_GE(r.style_distance, 0.0);
  }
  EXPECT_EQ(rep.records[1].pair, 0);
  EXPECT_EQ(rep.records[2].caption, "a white square on purple");
  EXPECT_NE(rep.records[0].seed, rep.records[1].seed);

  auto dir = testutil::temp_dir("eval");
  rep.write_jsonl((dir / "eval.jsonl").string());
  std::ifstream in(dir / "eval.jsonl");
  std::string line;
  int lines = 0;
  nlohmann::json last;
  while (std::getline(in, line)) {
    last = nlohmann::json::parse(line);
    ++lines;
  }
  EXPECT_EQ(lines, 5);
  EXPECT_TRUE(last.at("summary").get<bool>());
  EXPECT_DOUBLE_EQ(last.at("style_distance").at("mean").get<double>(), rep.style_distance.mean);

  std::vector<EvalPair> none;
  EXPECT_THROW(evaluate(m, mod, none, opts), std::invalid_argument);
}
