#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace relprop {

using Shape = std::vector<std::size_t>;

/// Raised when tensor extents do not chain. The message names the layer (or
/// kernel) and both the expected and the actual shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array of doubles (last index fastest).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_volume(shape_)) +
                       " values, got " + std::to_string(data_.size()));
    }
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // [H,W,C] accessors.
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }
  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_volume(shape) != data_.size()) {
      throw ShapeError("reshape: cannot view " + shape_string(shape_) +
                       " as " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor: zero extent in " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Flat input index of the winning element for each pooled output.
struct PoolArgmax {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> index;

  friend bool operator==(const PoolArgmax&, const PoolArgmax&) = default;
};

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct PoolParams {
  std::size_t kh = 2;
  std::size_t kw = 2;
  std::size_t stride = 2;
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const std::string& who) {
  if (t.rank() != rank) {
    throw ShapeError(who + ": expected rank " + std::to_string(rank) +
                     " tensor, got " + shape_string(t.shape()));
  }
}

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride,
                               std::size_t pad, const std::string& who) {
  if (in + 2 * pad < k) {
    throw ShapeError(who + ": kernel " + std::to_string(k) +
                     " larger than padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

/// Output extents [H',W',Cout] of a convolution, validating the kernel layout.
inline Shape conv2d_output_shape(const Shape& input, const Shape& weights,
                                 Conv2dParams params,
                                 const std::string& who = "conv2d") {
  if (input.size() != 3 || weights.size() != 4) {
    throw ShapeError(who + ": expected input [H,W,Cin] and weights [Cout,Cin,kh,kw], got " +
                     shape_string(input) + " and " + shape_string(weights));
  }
  if (params.stride < 1) throw ShapeError(who + ": stride must be >= 1");
  if (weights[1] != input[2]) {
    throw ShapeError(who + ": expected " + std::to_string(weights[1]) +
                     " input channels, got input " + shape_string(input));
  }
  return {detail::conv_extent(input[0], weights[2], params.stride, params.pad, who),
          detail::conv_extent(input[1], weights[3], params.stride, params.pad, who),
          weights[0]};
}

inline Tensor conv2d_forward(const Tensor& input, const Tensor& weights,
                             const Tensor& bias, Conv2dParams params,
                             const std::string& who = "conv2d") {
  const Shape out_shape = conv2d_output_shape(input.shape(), weights.shape(), params, who);
  const std::size_t cout = weights.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != cout) {
    throw ShapeError(who + ": expected bias [" + std::to_string(cout) + "], got " +
                     shape_string(bias.shape()));
  }
  const std::size_t in_h = input.dim(0), in_w = input.dim(1), cin = input.dim(2);
  const std::size_t kh = weights.dim(2), kw = weights.dim(3);
  Tensor out(out_shape);
  for (std::size_t oy = 0; oy < out_shape[0]; ++oy) {
    for (std::size_t ox = 0; ox < out_shape[1]; ++ox) {
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = bias[co];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * params.stride + ky) -
                                    static_cast<std::ptrdiff_t>(params.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * params.stride + kx) -
                                      static_cast<std::ptrdiff_t>(params.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              acc += input.at(iy, ix, ci) * weights[((co * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        out.at(oy, ox, co) = acc;
      }
    }
  }
  return out;
}

inline Shape maxpool_output_shape(const Shape& input, PoolParams params,
                                  const std::string& who = "maxpool") {
  if (input.size() != 3) {
    throw ShapeError(who + ": expected input [H,W,C], got " + shape_string(input));
  }
  if (params.stride < 1 || params.kh < 1 || params.kw < 1) {
    throw ShapeError(who + ": window and stride must be >= 1");
  }
  if (input[0] < params.kh || input[1] < params.kw ||
      (input[0] - params.kh) % params.stride != 0 ||
      (input[1] - params.kw) % params.stride != 0) {
    throw ShapeError(who + ": window " + std::to_string(params.kh) + "x" +
                     std::to_string(params.kw) + " stride " + std::to_string(params.stride) +
                     " does not tile input " + shape_string(input) + " without padding");
  }
  return {(input[0] - params.kh) / params.stride + 1,
          (input[1] - params.kw) / params.stride + 1, input[2]};
}

/// Window maximum per channel. Ties go to the lowest row-major input index.
inline std::pair<Tensor, PoolArgmax> maxpool_forward(const Tensor& input, PoolParams params,
                                                     const std::string& who = "maxpool") {
  const Shape out_shape = maxpool_output_shape(input.shape(), params, who);
  const std::size_t in_w = input.dim(1), channels = input.dim(2);
  Tensor out(out_shape);
  PoolArgmax argmax{input.shape(), out_shape, std::vector<std::size_t>(out.size())};
  for (std::size_t oy = 0; oy < out_shape[0]; ++oy) {
    for (std::size_t ox = 0; ox < out_shape[1]; ++ox) {
      for (std::size_t c = 0; c < channels; ++c) {
        std::size_t best = (oy * params.stride * in_w + ox * params.stride) * channels + c;
        for (std::size_t ky = 0; ky < params.kh; ++ky) {
          for (std::size_t kx = 0; kx < params.kw; ++kx) {
            const std::size_t idx =
                ((oy * params.stride + ky) * in_w + ox * params.stride + kx) * channels + c;
            // Strict comparison keeps the earliest index; scan order is row-major.
            if (input[idx] > input[best]) best = idx;
          }
        }
        const std::size_t o = (oy * out_shape[1] + ox) * channels + c;
        out[o] = input[best];
        argmax.index[o] = best;
      }
    }
  }
  return {std::move(out), std::move(argmax)};
}

/// Affine map of the flattened input: weights [M,N], bias [M].
inline Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                            const std::string& who = "dense") {
  if (weights.rank() != 2 || input.size() != weights.dim(1)) {
    throw ShapeError(who + ": expected " +
                     (weights.rank() == 2 ? std::to_string(weights.dim(1)) : std::string("?")) +
                     " inputs for weights " + shape_string(weights.shape()) + ", got input " +
                     shape_string(input.shape()));
  }
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != m) {
    throw ShapeError(who + ": expected bias [" + std::to_string(m) + "], got " +
                     shape_string(bias.shape()));
  }
  Tensor out({m});
  for (std::size_t j = 0; j < m; ++j) {
    double acc = bias[j];
    for (std::size_t i = 0; i < n; ++i) acc += weights[j * n + i] * input[i];
    out[j] = acc;
  }
  return out;
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.values()) v = std::max(v, 0.0);
  return out;
}

inline Tensor flatten(const Tensor& input) { return input.reshaped({input.size()}); }

inline Tensor softmax(const Tensor& logits) {
  detail::require_rank(logits, 1, "softmax");
  const double peak = *std::max_element(logits.values().begin(), logits.values().end());
  Tensor out = logits;
  double total = 0.0;
  for (double& v : out.values()) {
    v = std::exp(v - peak);
    total += v;
  }
  for (double& v : out.values()) v /= total;
  return out;
}

}  // namespace relprop
