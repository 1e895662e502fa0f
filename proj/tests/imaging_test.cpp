#include <gtest/gtest.h>

#include <sstream>

#include "relprop/imaging.hpp"
#include "support/temp_dir.hpp"

using namespace relprop;
using testing_support::TempDir;

namespace {

NetworkModel rgb_model(std::size_t h, std::size_t w, std::vector<double> means = {0, 0, 0}) {
  const std::size_t n = h * w * 3;
  return assemble_model({h, w, 3}, {{LayerKind::flatten}, {LayerKind::dense, n, 2, 0, 0, 1, 0, false}, {LayerKind::softmax}},
                        {{}, {Tensor({2, n}, 1.0), Tensor()}, {}}, {std::move(means), 0.0, 255.0});
}

RelevanceMap map_from_input(Tensor input_relevance) {
  Tensor pixels = positive_channel_sum(input_relevance);
  return {Method::lrp, 0, std::move(pixels), std::move(input_relevance)};
}

}  // namespace

TEST(Pnm, WhitePixelRoundTrip) {
  TempDir dir;
  const RgbImage white{1, 1, {255, 255, 255}};
  write_ppm(white, dir.file("w.ppm"));
  EXPECT_EQ(testing_support::read_all(dir.file("w.ppm")), std::string("P6\n1 1\n255\n\xff\xff\xff", 14));
  EXPECT_EQ(read_ppm(dir.file("w.ppm")), white);
  const Tensor t = to_input_tensor(white, {1, 1, 3});
  EXPECT_EQ(t, Tensor({1, 1, 3}, 255.0));
}

TEST(Pnm, CheckerboardAndCommentedHeader) {
  std::istringstream in(std::string("P6\n# made by hand\n2 2\n# max\n255\n") +
                        std::string("\xff\xff\xff\x00\x00\x00\x00\x00\x00\xff\xff\xff", 12));
  const RgbImage img = read_ppm(in);
  ASSERT_EQ(img.width, 2u);
  EXPECT_EQ(img.at(0, 0, 0), 255);
  EXPECT_EQ(img.at(0, 1, 2), 0);
  EXPECT_EQ(img.at(1, 0, 1), 0);
  EXPECT_EQ(img.at(1, 1, 1), 255);
}

TEST(Pnm, RejectsUnsupportedInput) {
  auto parse = [](const std::string& s) {
    std::istringstream in(s);
    return read_ppm(in);
  };
  try {
    parse("P3\n1 1\n255\n255 255 255\n");
    FAIL();
  } catch (const ImageFormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported format"), std::string::npos);
  }
  EXPECT_THROW(parse("P6\n1 1\n65535\n\0\0\0\0\0\0"), ImageFormatError);
  try {
    parse(std::string("P6\n2 1\n255\n\x01\x02\x03", 14));
    FAIL();
  } catch (const ImageFormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  EXPECT_THROW(parse("GIF89a"), ImageFormatError);
  EXPECT_THROW(read_ppm("/nonexistent/x.ppm"), ImageFormatError);
}

TEST(Preprocess, IdentityResizeAndMeanSubtraction) {
  RgbImage img{3, 3, std::vector<std::uint8_t>(27)};
  for (std::size_t i = 0; i < 27; ++i) img.samples[i] = static_cast<std::uint8_t>(i * 7);
  const Tensor t = preprocess(img, rgb_model(3, 3, {1, 2, 3}));
  for (std::size_t i = 0; i < 27; ++i) EXPECT_EQ(t[i], static_cast<double>(i * 7) - static_cast<double>(1 + i % 3));

  const RgbImage flat{6, 6, std::vector<std::uint8_t>(108, 77)};
  EXPECT_EQ(preprocess(flat, rgb_model(4, 4, {7, 7, 7})), Tensor({4, 4, 3}, 70.0));
}

TEST(Preprocess, WideImageIsCentreCropped) {
  // 4x2 image: the 2x2 centre square is columns 1..2.
  RgbImage img{4, 2, std::vector<std::uint8_t>(24)};
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(10 * x + y);
  const Tensor t = to_input_tensor(img, {2, 2, 3});
  EXPECT_EQ(t.at(0, 0, 0), 10.0);
  EXPECT_EQ(t.at(0, 1, 2), 20.0);
  EXPECT_EQ(t.at(1, 0, 1), 11.0);
  EXPECT_EQ(t.at(1, 1, 0), 21.0);
  EXPECT_THROW(to_input_tensor(img, {2, 2, 1}), ShapeError);
}

TEST(Preprocess, BoxesFollowTheCrop) {
  // 4x2 source, 2x2 crop from column 1: source box x 2..3 maps to column 1.
  EXPECT_EQ(map_box_to_input(2, 0, 3, 1, 4, 2, 2, 2), (std::array<std::size_t, 4>{1, 0, 1, 1}));
  EXPECT_FALSE(map_box_to_input(0, 0, 0, 1, 4, 2, 2, 2).has_value());
  // Identity geometry leaves boxes alone.
  EXPECT_EQ(map_box_to_input(3, 4, 9, 12, 32, 32, 32, 32), (std::array<std::size_t, 4>{3, 4, 9, 12}));
}

TEST(Heatmap, ScalingRules) {
  EXPECT_EQ(render_heatmap(map_from_input(Tensor({2, 2, 1}))).samples, std::vector<std::uint8_t>(4, 0));

  Tensor single({2, 2, 1});
  single[3] = 0.3;
  EXPECT_EQ(render_heatmap(map_from_input(single)).samples, (std::vector<std::uint8_t>{0, 0, 0, 255}));

  // Negative relevance sets the scale but renders black.
  const GrayImage g = render_heatmap(map_from_input(Tensor({1, 2, 1}, {-2.0, 1.0})));
  EXPECT_EQ(g.samples, (std::vector<std::uint8_t>{0, 128}));

  Tensor r({3, 3, 3});
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::sin(static_cast<double>(i) * 1.7);
  Tensor scaled = r;
  for (double& v : scaled.values()) v *= 1000.0;
  EXPECT_EQ(render_heatmap(map_from_input(r)), render_heatmap(map_from_input(scaled)));
}

TEST(Heatmap, PgmRoundTrip) {
  TempDir dir;
  const GrayImage g{3, 2, {0, 1, 2, 128, 254, 255}};
  write_pgm(g, dir.file("h.pgm"));
  EXPECT_EQ(read_pgm(dir.file("h.pgm")), g);
  EXPECT_EQ(testing_support::read_all(dir.file("h.pgm")).substr(0, 11), "P5\n3 2\n255\n");
}
