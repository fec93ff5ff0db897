#include <gtest/gtest.h>

#include "controlstyle/image.hpp"
#include "helpers.hpp"

using namespace controlstyle;

TEST(Image, PngRoundTripRgbAndGray) {
  auto dir = testutil::temp_dir("image");
  Image rgb(5, 3, 3);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) rgb.pixels[i] = static_cast<uint8_t>(i * 17);
  write_png(dir / "rgb.png", rgb);
  EXPECT_EQ(read_png(dir / "rgb.png"), rgb);

  Image gray(4, 4, 1);
  gray.at(1, 2, 0) = 255;
  write_png(dir / "g.png", gray);
  EXPECT_EQ(read_png(dir / "g.png"), gray);
  EXPECT_THROW(read_png(dir / "none.png"), std::runtime_error);
}

TEST(Image, TensorConversion) {
  Image img(2, 1, 3);
  img.pixels = {0, 255, 128, 255, 0, 0};
  auto t = to_tensor(img);
  ASSERT_EQ(t.sizes(), (std::vector<int64_t>{3, 1, 2}));
  EXPECT_FLOAT_EQ(t[0][0][0].item<float>(), -1.0f);
  EXPECT_FLOAT_EQ(t[1][0][0].item<float>(), 1.0f);
  EXPECT_FLOAT_EQ(t[0][0][1].item<float>(), 1.0f);
  EXPECT_EQ(from_tensor(t), img);
  // Out-of-range values clamp.
  EXPECT_EQ(from_tensor(torch::full({1, 1, 1}, 3.0)).pixels[0], 255);
  EXPECT_EQ(from_tensor(torch::full({1, 1, 1}, -3.0)).pixels[0], 0);
}

TEST(Image, BatchAndTile) {
  std::vector<Image> imgs(3, Image(2, 2, 3, 10));
  imgs[1] = Image(2, 2, 3, 200);
  EXPECT_EQ(to_batch(imgs).sizes(), (std::vector<int64_t>{3, 3, 2, 2}));
  auto grid = tile(imgs, 2);
  EXPECT_EQ(grid.width, 4);
  EXPECT_EQ(grid.height, 4);
  EXPECT_EQ(grid.at(0, 2, 0), 200);
  EXPECT_EQ(grid.at(2, 0, 0), 10);
}
