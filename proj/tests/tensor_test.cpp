#include <gtest/gtest.h>

#include <random>

#include "relprop/tensor.hpp"
#include "support/oracles.hpp"

using namespace relprop;

TEST(Conv2d, ScalarMultiply) {
  Tensor in({1, 1, 1}, {5.0});
  Tensor w({1, 1, 1, 1}, {2.0});
  Tensor out = conv2d_forward(in, w, Tensor({1}), {1, 0});
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out[0], 10.0);
}

TEST(Conv2d, WindowSum) {
  Tensor out = conv2d_forward(Tensor({3, 3, 1}, 1.0), Tensor({1, 1, 3, 3}, 1.0), Tensor({1}), {1, 0});
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out[0], 9.0);
}

TEST(Conv2d, MatchesNaiveLoop) {
  std::mt19937_64 rng(11);
  struct Case { std::size_t h, w, cin, cout, k, stride, pad; };
  for (const Case c : {Case{6, 6, 2, 3, 3, 1, 0}, Case{6, 6, 2, 3, 3, 1, 1}, Case{8, 7, 3, 2, 3, 2, 1},
                       Case{5, 8, 1, 4, 2, 2, 0}, Case{4, 4, 3, 1, 1, 1, 0}}) {
    Tensor x = oracle::random_tensor(rng, {c.h, c.w, c.cin});
    Tensor k = oracle::random_tensor(rng, {c.cout, c.cin, c.k, c.k});
    Tensor b = oracle::random_tensor(rng, {c.cout});
    std::size_t oh = 0, ow = 0;
    const auto want = oracle::conv2d(oracle::to_vec(x), c.h, c.w, c.cin, oracle::to_vec(k), c.cout, c.k, c.k,
                                     oracle::to_vec(b), c.stride, c.pad, oh, ow);
    Tensor got = conv2d_forward(x, k, b, {c.stride, c.pad});
    ASSERT_EQ(got.shape(), (Shape{oh, ow, c.cout}));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, ShapeErrorNamesLayerAndShapes) {
  try {
    conv2d_forward(Tensor({4, 4, 2}), Tensor({1, 3, 3, 3}), Tensor({1}), {1, 0}, "layer 2 (conv2d)");
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("layer 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,4,2]"), std::string::npos) << msg;
    EXPECT_NE(msg.find('3'), std::string::npos) << msg;
  }
  EXPECT_THROW(conv2d_forward(Tensor({4, 4, 1}), Tensor({2, 1, 3, 3}), Tensor({3}), {1, 0}), ShapeError);
  EXPECT_THROW(conv2d_forward(Tensor({2, 2, 1}), Tensor({1, 1, 3, 3}), Tensor({1}), {1, 0}), ShapeError);
}

TEST(MaxPool, PicksWindowMaximum) {
  Tensor in({2, 2, 1}, {1, 2, 3, 4});
  auto [out, argmax] = maxpool_forward(in, {2, 2, 2});
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out[0], 4.0);
  EXPECT_EQ(argmax.index[0], 3u);
}

TEST(MaxPool, TiesGoToLowestIndex) {
  auto [out, argmax] = maxpool_forward(Tensor({2, 2, 1}, 7.0), {2, 2, 2});
  EXPECT_EQ(argmax.index[0], 0u);
  // Tie between positions 1 and 2 only.
  auto [out2, argmax2] = maxpool_forward(Tensor({2, 2, 1}, {0, 5, 5, 1}), {2, 2, 2});
  EXPECT_EQ(argmax2.index[0], 1u);
}

TEST(MaxPool, MatchesNaiveLoopAndIsDeterministic) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = oracle::random_tensor(rng, {8, 8, 3});
    // Quantise so that ties actually occur.
    for (double& v : x.values()) v = std::round(v * 2.0);
    const auto want = oracle::maxpool(oracle::to_vec(x), 8, 8, 3, 2, 2, 2);
    auto [out, argmax] = maxpool_forward(x, {2, 2, 2});
    EXPECT_EQ(oracle::to_vec(out), want.values);
    EXPECT_EQ(argmax.index, want.argmax);
    auto [out2, argmax2] = maxpool_forward(x, {2, 2, 2});
    EXPECT_EQ(argmax2, argmax);
    // Every winner lies inside its window.
    for (std::size_t o = 0; o < argmax.index.size(); ++o) {
      const std::size_t oy = o / (4 * 3), ox = (o / 3) % 4, iy = argmax.index[o] / (8 * 3),
                        ix = (argmax.index[o] / 3) % 8;
      EXPECT_TRUE(iy / 2 == oy && ix / 2 == ox);
    }
  }
  Tensor x = oracle::random_tensor(rng, {7, 7, 2});
  const auto want = oracle::maxpool(oracle::to_vec(x), 7, 7, 2, 3, 3, 2);
  auto [out, argmax] = maxpool_forward(x, {3, 3, 2});
  EXPECT_EQ(oracle::to_vec(out), want.values);
  EXPECT_EQ(argmax.index, want.argmax);
}

TEST(MaxPool, RejectsNonTilingExtents) {
  EXPECT_THROW(maxpool_forward(Tensor({5, 4, 1}), {2, 2, 2}), ShapeError);
  EXPECT_THROW(maxpool_forward(Tensor({1, 4, 1}), {2, 2, 2}), ShapeError);
}

TEST(Dense, IdentityLeavesInputUnchanged) {
  Tensor w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x = Tensor::vector({0.5, -2.0, 3.25});
  EXPECT_EQ(dense_forward(x, w, Tensor({3})), x);
}

TEST(Dense, HandEvaluation) {
  Tensor out = dense_forward(Tensor::vector({1, 2}), Tensor({1, 2}, {0.5, -0.25}), Tensor::vector({0.1}));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out[0], 0.1, 1e-15);
}

TEST(Dense, MatchesNaiveLoop) {
  std::mt19937_64 rng(3);
  Tensor x = oracle::random_tensor(rng, {16});
  Tensor w = oracle::random_tensor(rng, {8, 16});
  Tensor b = oracle::random_tensor(rng, {8});
  const auto want = oracle::dense(oracle::to_vec(x), oracle::to_mat(w), oracle::to_vec(b));
  const Tensor got = dense_forward(x, w, b);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  EXPECT_THROW(dense_forward(Tensor({15}), w, b), ShapeError);
  EXPECT_THROW(dense_forward(x, w, Tensor({7})), ShapeError);
}

TEST(Activations, ReluClampsNegatives) {
  EXPECT_EQ(relu(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
}

TEST(Activations, FlattenKeepsRowMajorOrder) {
  Tensor t({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor f = flatten(t);
  EXPECT_EQ(f.shape(), (Shape{8}));
  EXPECT_EQ(f.data(), t.data());
}

TEST(Softmax, UniformAndStable) {
  const Tensor a = softmax(Tensor::vector({0, 0}));
  EXPECT_EQ(a[0], 0.5);
  EXPECT_EQ(a[1], 0.5);
  const Tensor b = softmax(Tensor::vector({1000, 1000}));
  EXPECT_EQ(b[0], 0.5);
  EXPECT_EQ(b[1], 0.5);
}

TEST(Softmax, PropertiesOnRandomLogits) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor z = oracle::random_tensor(rng, {10}, -8, 8);
    const Tensor y = softmax(z);
    EXPECT_NEAR(y.sum(), 1.0, 1e-12);
    for (double v : y.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    const double c = shift(rng);
    Tensor zc = z;
    for (double& v : zc.values()) v += c;
    const Tensor yc = softmax(zc);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(yc[i], y[i], 1e-12);
  }
}

TEST(TensorType, RejectsInconsistentData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({4}).reshaped({3}), ShapeError);
}
