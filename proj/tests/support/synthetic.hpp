#pragma once

// Two-object scenes and a hand-built CNN that recognises four 7x7 outline
// shapes. Each 32x32 image shows two different shapes on dim noise; the
// label names one of them.
//
// conv 7x7 (pad 3) -> relu -> maxpool 2x2 -> flatten -> dense -> softmax
//
// Conv channels 0..3 fire (activation 1.5) only where their shape's template
// is fully lit. Channel 4 fires on every lit pixel whatever the shape, and the
// dense layer gives it the same weight for every class: evidence shared by
// all classes, as in the toy networks, which a one-hot seed cannot discount.

#include <array>
#include <random>
#include <vector>

#include "relprop/eval.hpp"
#include "relprop/imaging.hpp"
#include "relprop/model.hpp"

namespace synthetic {

inline constexpr std::size_t kSize = 32;
inline constexpr std::size_t kShape = 7;
inline constexpr std::size_t kClasses = 4;
inline constexpr std::size_t kChannels = kClasses + 1;
inline constexpr std::uint8_t kNoiseLimit = 40;  // background in [0, 40)
inline constexpr std::size_t kMinGap = 6;
inline constexpr double kClassWeight = 4.0;
inline constexpr double kSharedWeight = 0.6;

using Template = std::array<bool, kShape * kShape>;

inline const std::array<Template, kClasses>& templates() {
  static const auto shapes = [] {
    std::array<Template, kClasses> t{};
    for (std::size_t y = 0; y < kShape; ++y) {
      for (std::size_t x = 0; x < kShape; ++x) {
        const int dx = static_cast<int>(x) - 3, dy = static_cast<int>(y) - 3;
        const std::size_t i = y * kShape + x;
        t[0][i] = dx == 0 || dy == 0;                              // plus
        t[1][i] = dx == dy || dx == -dy;                           // cross
        t[2][i] = x == 0 || y == 0 || x == 6 || y == 6;            // square outline
        t[3][i] = std::abs(dx) + std::abs(dy) == 3;                // diamond outline
      }
    }
    return t;
  }();
  return shapes;
}

struct Scene {
  relprop::RgbImage image;
  std::size_t label = 0;
  relprop::BoundingBox box;    // the labelled object
  relprop::BoundingBox other;  // the distractor
};

inline Scene make_scene(std::mt19937_64& rng) {
  using relprop::uniform_index;
  Scene s;
  s.image = {kSize, kSize, std::vector<std::uint8_t>(kSize * kSize * 3)};
  for (auto& v : s.image.samples) v = static_cast<std::uint8_t>(uniform_index(rng, kNoiseLimit));

  const std::size_t a = uniform_index(rng, kClasses);
  const std::size_t b = (a + 1 + uniform_index(rng, kClasses - 1)) % kClasses;
  const std::size_t span = kSize - kShape + 1;
  std::size_t ax, ay, bx, by;
  do {
    ax = uniform_index(rng, span), ay = uniform_index(rng, span);
    bx = uniform_index(rng, span), by = uniform_index(rng, span);
  } while ((ax > bx ? ax - bx : bx - ax) < kShape + kMinGap && (ay > by ? ay - by : by - ay) < kShape + kMinGap);

  auto draw = [&](std::size_t cls, std::size_t x0, std::size_t y0) {
    for (std::size_t y = 0; y < kShape; ++y)
      for (std::size_t x = 0; x < kShape; ++x)
        if (templates()[cls][y * kShape + x])
          for (std::size_t c = 0; c < 3; ++c) s.image.at(y0 + y, x0 + x, c) = 255;
    return relprop::BoundingBox{cls, x0, y0, x0 + kShape - 1, y0 + kShape - 1};
  };
  const relprop::BoundingBox box_a = draw(a, ax, ay);
  const relprop::BoundingBox box_b = draw(b, bx, by);
  const bool label_first = uniform_index(rng, 2) == 0;
  s.label = label_first ? a : b;
  s.box = label_first ? box_a : box_b;
  s.other = label_first ? box_b : box_a;
  return s;
}

inline std::vector<Scene> make_scenes(std::uint64_t seed, std::size_t count) {
  auto rng = relprop::make_rng(seed, 0);
  std::vector<Scene> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_scene(rng));
  return out;
}

/// Per-channel means of a generated training set.
inline std::vector<double> channel_means(std::uint64_t seed, std::size_t count) {
  std::vector<double> sum(3, 0.0);
  for (const Scene& s : make_scenes(seed, count))
    for (std::size_t i = 0; i < s.image.samples.size(); ++i) sum[i % 3] += s.image.samples[i];
  for (double& v : sum) v /= static_cast<double>(count * kSize * kSize);
  return sum;
}

inline relprop::NetworkModel build_model(const std::vector<double>& means) {
  using relprop::LayerKind;
  using relprop::Tensor;
  const double mean_sum = means[0] + means[1] + means[2];

  // A unit with n lit taps outputs 3n - 3(n - 0.5) = 1.5; one unlit tap costs at
  // least 3 - 3 * 39/255 > 1.5, so partial matches stay negative.
  Tensor w({kChannels, 3, kShape, kShape});
  Tensor bias({kChannels});
  auto set_tap = [&](std::size_t out, std::size_t y, std::size_t x) {
    for (std::size_t c = 0; c < 3; ++c) w[((out * 3 + c) * kShape + y) * kShape + x] = 1.0 / 255.0;
  };
  for (std::size_t k = 0; k < kChannels; ++k) {
    std::size_t n = 0;
    for (std::size_t y = 0; y < kShape; ++y)
      for (std::size_t x = 0; x < kShape; ++x) {
        const bool tap = k < kClasses ? templates()[k][y * kShape + x] : (y == 3 && x == 3);
        if (tap) set_tap(k, y, x), ++n;
      }
    bias[k] = -3.0 * (static_cast<double>(n) - 0.5) + static_cast<double>(n) * mean_sum / 255.0;
  }

  const std::size_t pooled = kSize / 2;
  const std::size_t features = pooled * pooled * kChannels;
  Tensor dense({kClasses, features});
  for (std::size_t cls = 0; cls < kClasses; ++cls) {
    for (std::size_t i = 0; i < features; ++i) {
      const std::size_t channel = i % kChannels;
      dense[cls * features + i] = channel == cls ? kClassWeight : channel == kClasses ? kSharedWeight : 0.0;
    }
  }

  return relprop::assemble_model({kSize, kSize, 3},
                                 {{LayerKind::conv2d, 3, kChannels, kShape, kShape, 1, 3, true},
                                  {LayerKind::relu},
                                  {LayerKind::maxpool, 0, 0, 2, 2, 2, 0, false},
                                  {LayerKind::flatten},
                                  {LayerKind::dense, features, kClasses, 0, 0, 1, 0, true},
                                  {LayerKind::softmax}},
                                 {{w, bias}, {}, {}, {}, {dense, Tensor({kClasses})}, {}},
                                 {means, 0.0, 255.0});
}

inline relprop::Tensor to_tensor(const relprop::RgbImage& image) {
  return relprop::to_input_tensor(image, {kSize, kSize, 3});
}

}  // namespace synthetic
