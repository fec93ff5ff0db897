#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "controlstyle/archive.hpp"
#include "controlstyle/autoencoder.hpp"
#include "helpers.hpp"

using namespace controlstyle;

TEST(Archive, RoundTripsArraysAndMeta) {
  auto dir = testutil::temp_dir("archive");
  Archive ar("demo");
  ar.meta()["answer"] = 42;
  auto f32 = torch::randn({3, 4});
  auto f64 = torch::randn({2}, torch::kFloat64);
  auto i64 = torch::arange(5, torch::kInt64);
  ar.put("a", f32);
  ar.put("b", f64);
  ar.put("c", i64);
  ar.save(dir / "x.csarch");

  auto back = Archive::load(dir / "x.csarch");
  EXPECT_EQ(back.kind(), "demo");
  EXPECT_EQ(back.meta()["answer"], 42);
  EXPECT_EQ(back.names(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_TRUE(testutil::bitwise_equal(back.get("a"), f32));
  EXPECT_TRUE(testutil::bitwise_equal(back.get("b"), f64));
  EXPECT_TRUE(testutil::bitwise_equal(back.get("c"), i64));
  EXPECT_THROW(back.get("zzz"), std::runtime_error);
}

TEST(Archive, HeaderLayout) {
  auto dir = testutil::temp_dir("archive_header");
  Archive ar("k");
  ar.put("v", torch::tensor({1.0f, 2.0f}));
  ar.save(dir / "h.csarch");
  std::ifstream in(dir / "h.csarch", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "CSARCH01");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string manifest(len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(len));
  auto j = nlohmann::json::parse(manifest);
  EXPECT_EQ(j["arrays"][0]["name"], "v");
  EXPECT_EQ(j["arrays"][0]["dtype"], "float32");
  EXPECT_EQ(j["arrays"][0]["shape"], nlohmann::json::array({2}));
  float payload[2];
  in.read(reinterpret_cast<char*>(payload), sizeof payload);
  EXPECT_EQ(payload[0], 1.0f);
  EXPECT_EQ(payload[1], 2.0f);
}

TEST(Archive, Errors) {
  auto dir = testutil::temp_dir("archive_errors");
  try {
    Archive::load(dir / "missing.csarch");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("missing.csarch"), std::string::npos);
  }
  std::ofstream(dir / "junk.csarch") << "not an archive";
  EXPECT_THROW(Archive::load(dir / "junk.csarch"), std::runtime_error);
  Archive ar;
  EXPECT_THROW(ar.put("x", torch::zeros({2}, torch::kInt32)), std::invalid_argument);
}

TEST(Archive, ModuleRoundTripAndArchitectureMismatch) {
  auto dir = testutil::temp_dir("archive_module");
  Autoencoder a(testutil::small_ae_config());
  a->set_latent_scale(0.25);
  Archive ar("autoencoder");
  put_module(ar, "ae.", *a);
  ar.save(dir / "ae.csarch");

  Autoencoder b(testutil::small_ae_config());
  load_module(Archive::load(dir / "ae.csarch"), "ae.", *b);
  auto pa = a->named_parameters();
  auto pb = b->named_parameters();
  for (const auto& p : pa) EXPECT_TRUE(testutil::bitwise_equal(p.value(), pb[p.key()])) << p.key();
  EXPECT_EQ(b->latent_scale(), 0.25);

  auto wide_cfg = testutil::small_ae_config();
  wide_cfg.base_channels = 16;
  Autoencoder wide(wide_cfg);
  try {
    load_module(Archive::load(dir / "ae.csarch"), "ae.", *wide);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("architecture mismatch"), std::string::npos);
  }
}
