#include <gtest/gtest.h>

#include <random>

#include "ctsfda/datamodel.hpp"

using namespace ctsfda;

TEST(ReshapeSpec, PaperShapes) {
  auto mfd = make_reshape_spec(1, 5120, 64, 80);
  EXPECT_EQ(mfd.pad_len, 0);
  EXPECT_EQ(mfd.c, 1);

  auto ssc = make_reshape_spec(1, 3000, 48, 64);
  EXPECT_EQ(ssc.pad_len, 72);

  auto har = make_reshape_spec(9, 128, 64, 64);
  EXPECT_EQ(har.pad_len, 3968);
  EXPECT_EQ(har.c, 9);
}

TEST(ReshapeSpec, RejectsTruncation) {
  EXPECT_THROW(make_reshape_spec(1, 100, 8, 8), ConfigError);
}

TEST(ReshapeSpec, PadArithmetic) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    const std::int64_t l = 1 + static_cast<std::int64_t>(rng() % 500);
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng() % 30);
    const std::int64_t w = (l + h - 1) / h + static_cast<std::int64_t>(rng() % 5);
    if (h * w < l) continue;
    auto s = make_reshape_spec(1, l, h, w);
    EXPECT_EQ(h * w - l, s.pad_len);
    EXPECT_LT(s.pad_len, h * w);
  }
}

TEST(SeriesToImage, RowMajorLayout) {
  // single channel [1,2,3,4] with H=2, W=3 -> rows [[1,2,3],[4,0,0]]
  auto spec = make_reshape_spec(1, 4, 2, 3);
  TimeSeriesBatch<double> x(Tensor<double>({1, 1, 4}, {1, 2, 3, 4}));
  auto img = series_to_image(x, spec);
  std::vector<double> expected{1, 2, 3, 4, 0, 0};
  EXPECT_EQ(img.values.data, expected);

  auto back = image_to_series(img, spec);
  EXPECT_EQ(back.values.data, x.values.data);
}

TEST(SeriesToImage, ExactFitNoPadding) {
  auto spec = make_reshape_spec(1, 5120, 64, 80);
  std::mt19937_64 rng(1);
  auto x = TimeSeriesBatch<float>(randn<float>({2, 1, 5120}, rng));
  auto img = series_to_image(x, spec);
  EXPECT_EQ(img.values.shape, (Shape{2, 1, 64, 80}));
}

TEST(SeriesToImage, ZeroInput) {
  auto spec = make_reshape_spec(1, 10, 4, 4);
  TimeSeriesBatch<float> x(Tensor<float>({3, 1, 10}));
  auto img = series_to_image(x, spec);
  for (float v : img.values.data) EXPECT_EQ(v, 0.0f);
}

TEST(SeriesToImage, PaddingRegionIsZero) {
  auto spec = make_reshape_spec(2, 5, 2, 4);  // pad_len 3 per channel
  std::mt19937_64 rng(5);
  auto x = TimeSeriesBatch<float>(randn<float>({2, 2, 5}, rng));
  auto img = series_to_image(x, spec);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t t = 5; t < 8; ++t)
        EXPECT_EQ(img.values[(b * 2 + c) * 8 + t], 0.0f);
}

TEST(SeriesToImage, ShapeMismatchRejected) {
  auto spec = make_reshape_spec(1, 8, 2, 4);
  TimeSeriesBatch<float> x(Tensor<float>({1, 1, 9}));
  EXPECT_THROW(series_to_image(x, spec), ShapeError);
  ImageTensor<float> img(Tensor<float>({1, 1, 3, 4}));
  EXPECT_THROW(image_to_series(img, spec), ShapeError);
}

TEST(RoundTrip, BitExactOnPaperSpecs) {
  const std::vector<ReshapeSpec> specs{make_reshape_spec(1, 5120, 64, 80),
                                       make_reshape_spec(1, 3000, 48, 64),
                                       make_reshape_spec(9, 128, 64, 64)};
  std::mt19937_64 rng(42);
  for (const auto& spec : specs) {
    auto x = TimeSeriesBatch<float>(randn<float>({3, spec.d, spec.l}, rng));
    auto back = image_to_series(series_to_image(x, spec), spec);
    ASSERT_EQ(back.values.shape, x.values.shape);
    for (std::int64_t i = 0; i < x.values.size(); ++i)
      ASSERT_EQ(back.values[i], x.values[i]);
  }
}

TEST(RoundTrip, InverseOfLayoutExample) {
  // rows [[1,2,3],[4,0,0]] with pad_len 2 -> [1,2,3,4]
  auto spec = make_reshape_spec(1, 4, 2, 3);
  ImageTensor<double> img(Tensor<double>({1, 1, 2, 3}, {1, 2, 3, 4, 0, 0}));
  auto s = image_to_series(img, spec);
  EXPECT_EQ(s.values.data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(RoundTrip, SSCImageYieldsLength3000) {
  auto spec = make_reshape_spec(1, 3000, 48, 64);
  ImageTensor<float> img(Tensor<float>({1, 1, 48, 64}));
  auto s = image_to_series(img, spec);
  EXPECT_EQ(s.length(), 3000);
}

TEST(LabelBatch, RejectsOutOfRange) {
  EXPECT_THROW(LabelBatch({0, 1, 3}, 3), InvariantError);
  EXPECT_NO_THROW(LabelBatch({0, 1, 2}, 3));
}
