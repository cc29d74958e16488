#include "qgn/image.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "qgn/rng.hpp"

using namespace qgn;

namespace {

Tensor rand_img(int h, int w, RandomSource& rng) {
  Tensor t({3, h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Ppm, WriteIsDeterministicByteForByte) {
  RandomSource rng(90);
  Tensor img = rand_img(9, 13, rng);
  const std::string a = testing::TempDir() + "det_a.ppm";
  const std::string b = testing::TempDir() + "det_b.ppm";
  write_ppm(a, img);
  write_ppm(b, img);
  const std::string ba = read_bytes(a), bb = read_bytes(b);
  ASSERT_FALSE(ba.empty());
  EXPECT_EQ(ba, bb);
  std::remove(a.c_str());
  std::remove(b.c_str());
}

TEST(Ppm, RoundTripIsLosslessAfterQuantization) {
  RandomSource rng(91);
  Tensor img = rand_img(6, 7, rng);
  const std::string path = testing::TempDir() + "rt.ppm";
  write_ppm(path, img);
  Tensor back = read_ppm(path);
  ASSERT_EQ(back.shape(), img.shape());
  // Values come back on the 1/255 grid, within half a quantization step.
  for (int64_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255.0 + 1e-12);
  // A second round trip is exact: quantized values are fixed points.
  const std::string path2 = testing::TempDir() + "rt2.ppm";
  write_ppm(path2, back);
  EXPECT_EQ(read_bytes(path), read_bytes(path2));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST(Rot90, FourQuarterTurnsAreIdentity) {
  RandomSource rng(92);
  Tensor img = rand_img(8, 8, rng);
  Tensor r = img;
  for (int i = 0; i < 4; ++i) r = rot90(r, 1);
  for (int64_t i = 0; i < img.numel(); ++i) EXPECT_DOUBLE_EQ(r[i], img[i]);
}

TEST(Rot90, SingleTurnMovesCornerCounterClockwise) {
  Tensor img({3, 2, 2});
  img.at({0, 0, 1}) = 1.0;  // top-right pixel
  Tensor r = rot90(img, 1);
  EXPECT_DOUBLE_EQ(r.at({0, 0, 0}), 1.0);  // lands top-left after CCW turn
  EXPECT_DOUBLE_EQ(r.at({0, 0, 1}), 0.0);
}

TEST(Rot90, KComposesLikeRepeatedSingleTurns) {
  RandomSource rng(93);
  Tensor img = rand_img(5, 5, rng);
  Tensor twice = rot90(rot90(img, 1), 1);
  Tensor k2 = rot90(img, 2);
  for (int64_t i = 0; i < img.numel(); ++i) EXPECT_DOUBLE_EQ(twice[i], k2[i]);
}

TEST(Hflip, IsAnInvolution) {
  RandomSource rng(94);
  Tensor img = rand_img(4, 9, rng);
  Tensor back = hflip(hflip(img));
  for (int64_t i = 0; i < img.numel(); ++i) EXPECT_DOUBLE_EQ(back[i], img[i]);
}

TEST(CropResize, IdentityCropAtSameSizeIsExact) {
  RandomSource rng(95);
  Tensor img = rand_img(6, 6, rng);
  Tensor out = crop_resize(img, 0, 0, 6, 6, 6, 6);
  for (int64_t i = 0; i < img.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], img[i]);
}

TEST(CropResize, PicksNearestSourcePixels) {
  Tensor img({3, 2, 4});
  for (int x = 0; x < 4; ++x) img.at({0, 0, x}) = x;
  // Crop the left half, upsample to width 4: columns 0,0,1,1.
  Tensor out = crop_resize(img, 0, 0, 2, 1, 1, 4);
  EXPECT_DOUBLE_EQ(out.at({0, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(out.at({0, 0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(out.at({0, 0, 2}), 1.0);
  EXPECT_DOUBLE_EQ(out.at({0, 0, 3}), 1.0);
}
