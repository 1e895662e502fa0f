#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relprop/model.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

/// Denominators smaller than this in magnitude drop their output node's
/// relevance instead of dividing.
inline constexpr double kDenominatorFloor = 1e-9;

enum class Method { lrp, clrp, sglrp };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::lrp: return "lrp";
    case Method::clrp: return "clrp";
    case Method::sglrp: return "sglrp";
  }
  return "?";
}

inline Method parse_method(std::string_view name) {
  if (name == "lrp") return Method::lrp;
  if (name == "clrp") return Method::clrp;
  if (name == "sglrp") return Method::sglrp;
  throw std::invalid_argument("unknown explanation method '" + std::string(name) + "'");
}

/// Output-layer relevance R^(L), one entry per class.
struct Seed {
  Method method = Method::lrp;
  std::size_t target = 0;
  Tensor relevance;
};

/// Relevance at the input of layer `layer`, shaped like that input.
struct RelevanceState {
  std::size_t layer = 0;
  Tensor relevance;
};

/// Per-channel domain limits [lower, upper] of the preprocessed input.
struct InputBounds {
  std::vector<double> lower;
  std::vector<double> upper;

  static InputBounds from_preprocessing(const Preprocessing& prep) {
    InputBounds b;
    for (double mean : prep.channel_means) {
      b.lower.push_back(prep.pixel_min - mean);
      b.upper.push_back(prep.pixel_max - mean);
    }
    return b;
  }

  std::size_t channels() const { return lower.size(); }
};

/// Pixel relevance map. `pixels` is [H,W]: the channel sum of the positive
/// part of `input_relevance` ([H,W,C], signed).
struct RelevanceMap {
  Method method = Method::lrp;
  std::size_t target = 0;
  Tensor pixels;
  Tensor input_relevance;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
  double at(std::size_t y, std::size_t x) const { return pixels[y * pixels.dim(1) + x]; }
};

// ---------------------------------------------------------------------------
// Seeds

namespace detail {

inline void check_target(const Tensor& logits, std::size_t t, const char* who) {
  if (t >= logits.size()) {
    throw std::out_of_range(std::string(who) + ": target class " + std::to_string(t) +
                            " outside [0," + std::to_string(logits.size()) + ")");
  }
}

}  // namespace detail

inline Seed seed_lrp(const ForwardTrace& trace, std::size_t t) {
  const Tensor& z = trace.logits();
  detail::check_target(z, t, "seed_lrp");
  Tensor r({z.size()});
  r[t] = z[t];
  return {Method::lrp, t, std::move(r)};
}

inline Seed seed_clrp(const ForwardTrace& trace, std::size_t t) {
  const Tensor& z = trace.logits();
  detail::check_target(z, t, "seed_clrp");
  if (z.size() < 2) throw std::invalid_argument("seed_clrp: needs at least two classes");
  const double penalty = -z[t] / static_cast<double>(z.size() - 1);
  Tensor r({z.size()}, penalty);
  r[t] = z[t];
  return {Method::clrp, t, std::move(r)};
}

/// d(softmax_t)/d(z_n): y_t(1 - y_t) at the target, -y_t y_n elsewhere.
inline Seed seed_sglrp(const ForwardTrace& trace, std::size_t t) {
  const Tensor& y = trace.probabilities();
  detail::check_target(y, t, "seed_sglrp");
  Tensor r({y.size()});
  for (std::size_t n = 0; n < y.size(); ++n) r[n] = n == t ? y[t] * (1.0 - y[t]) : -y[t] * y[n];
  return {Method::sglrp, t, std::move(r)};
}

inline Seed make_seed(const ForwardTrace& trace, std::size_t t, Method method) {
  switch (method) {
    case Method::lrp: return seed_lrp(trace, t);
    case Method::clrp: return seed_clrp(trace, t);
    case Method::sglrp: return seed_sglrp(trace, t);
  }
  throw std::invalid_argument("make_seed: unknown method");
}

// ---------------------------------------------------------------------------
// Distribution rules
//
// Both rules share one shape: every input node n and output node m carry a
// contribution c(n, w_nm), and R_n = sum_m c(n, w_nm) / sum_n' c(n', w_n'm) * R_m.
// The z+ rule uses c = a_n w+; the bounded-input rule uses
// c = x_n w - lower_n w+ - upper_n w-. Biases never appear.

struct ZPlusContribution {
  const Tensor& activations;
  double operator()(std::size_t n, double w) const { return activations[n] * std::max(w, 0.0); }
};

struct ZBetaContribution {
  const Tensor& input;
  std::vector<double> lower;  // per input element
  std::vector<double> upper;
  double operator()(std::size_t n, double w) const {
    return input[n] * w - lower[n] * std::max(w, 0.0) - upper[n] * std::min(w, 0.0);
  }
};

namespace detail {

inline double safe_ratio(double relevance, double denominator) {
  return std::abs(denominator) < kDenominatorFloor ? 0.0 : relevance / denominator;
}

template <typename Contribution>
Tensor distribute_dense(const Tensor& r_next, const Tensor& weights, const Shape& input_shape,
                        const Contribution& contribution, const std::string& who) {
  if (weights.rank() != 2 || r_next.size() != weights.dim(0) ||
      shape_volume(input_shape) != weights.dim(1)) {
    throw ShapeError(who + ": relevance " + shape_string(r_next.shape()) + " and input " +
                     shape_string(input_shape) + " do not match weights " +
                     shape_string(weights.shape()));
  }
  const std::size_t m_count = weights.dim(0), n_count = weights.dim(1);
  Tensor r(input_shape);
  for (std::size_t m = 0; m < m_count; ++m) {
    if (r_next[m] == 0.0) continue;
    const double* row = &weights.values()[m * n_count];
    double denom = 0.0;
    for (std::size_t n = 0; n < n_count; ++n) denom += contribution(n, row[n]);
    const double scale = safe_ratio(r_next[m], denom);
    if (scale == 0.0) continue;
    for (std::size_t n = 0; n < n_count; ++n) r[n] += contribution(n, row[n]) * scale;
  }
  return r;
}

// Three convolution-shaped passes: contribution sums per output, the
// relevance/denominator ratio, then the transposed scatter back to inputs.
template <typename Contribution>
Tensor distribute_conv(const Tensor& r_next, const Tensor& weights, const Shape& input_shape,
                       Conv2dParams params, const Contribution& contribution,
                       const std::string& who) {
  const Shape out_shape = conv2d_output_shape(input_shape, weights.shape(), params, who);
  if (r_next.shape() != out_shape) {
    throw ShapeError(who + ": expected relevance " + shape_string(out_shape) + ", got " +
                     shape_string(r_next.shape()));
  }
  const std::size_t in_h = input_shape[0], in_w = input_shape[1], cin = input_shape[2];
  const std::size_t cout = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);

  auto for_each_tap = [&](std::size_t oy, std::size_t ox, std::size_t co, auto&& fn) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * params.stride + ky) -
                                static_cast<std::ptrdiff_t>(params.pad);
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * params.stride + kx) -
                                  static_cast<std::ptrdiff_t>(params.pad);
        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          fn((static_cast<std::size_t>(iy) * in_w + static_cast<std::size_t>(ix)) * cin + ci,
             weights[((co * cin + ci) * kh + ky) * kw + kx]);
        }
      }
    }
  };

  Tensor ratio(out_shape);
  for (std::size_t oy = 0; oy < out_shape[0]; ++oy) {
    for (std::size_t ox = 0; ox < out_shape[1]; ++ox) {
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t o = (oy * out_shape[1] + ox) * cout + co;
        if (r_next[o] == 0.0) continue;
        double denom = 0.0;
        for_each_tap(oy, ox, co, [&](std::size_t n, double w) { denom += contribution(n, w); });
        ratio[o] = safe_ratio(r_next[o], denom);
      }
    }
  }

  Tensor r(input_shape);
  for (std::size_t oy = 0; oy < out_shape[0]; ++oy) {
    for (std::size_t ox = 0; ox < out_shape[1]; ++ox) {
      for (std::size_t co = 0; co < cout; ++co) {
        const double s = ratio[(oy * out_shape[1] + ox) * cout + co];
        if (s == 0.0) continue;
        for_each_tap(oy, ox, co, [&](std::size_t n, double w) { r[n] += contribution(n, w) * s; });
      }
    }
  }
  return r;
}

inline void require_nonnegative(const Tensor& a, const std::string& who) {
  for (double v : a.values()) {
    if (v < 0.0) {
      throw std::invalid_argument(who + ": z+ rule needs non-negative activations, found " +
                                  std::to_string(v));
    }
  }
}

}  // namespace detail

/// z+ rule through a dense layer. `activations` is the layer's recorded input.
inline RelevanceState propagate_zplus_dense(const RelevanceState& r_next, const Tensor& weights,
                                            const Tensor& activations, std::size_t layer = 0) {
  const std::string who = "propagate_zplus_dense (layer " + std::to_string(layer) + ")";
  detail::require_nonnegative(activations, who);
  return {layer, detail::distribute_dense(r_next.relevance, weights, activations.shape(),
                                          ZPlusContribution{activations}, who)};
}

inline RelevanceState propagate_zplus_conv(const RelevanceState& r_next, const Tensor& weights,
                                           Conv2dParams params, const Tensor& activations,
                                           std::size_t layer = 0) {
  const std::string who = "propagate_zplus_conv (layer " + std::to_string(layer) + ")";
  detail::require_nonnegative(activations, who);
  return {layer, detail::distribute_conv(r_next.relevance, weights, activations.shape(), params,
                                         ZPlusContribution{activations}, who)};
}

namespace detail {

inline ZBetaContribution bounded_contribution(const Tensor& input, const InputBounds& bounds,
                                              const std::string& who) {
  if (bounds.channels() == 0 || bounds.lower.size() != bounds.upper.size()) {
    throw std::invalid_argument(who + ": input bounds missing");
  }
  // Elements are laid out channel-last, so element i belongs to channel i % C.
  if (input.size() % bounds.channels() != 0) {
    throw ShapeError(who + ": input " + shape_string(input.shape()) + " is not a multiple of " +
                     std::to_string(bounds.channels()) + " channels");
  }
  ZBetaContribution c{input, std::vector<double>(input.size()), std::vector<double>(input.size())};
  for (std::size_t i = 0; i < input.size(); ++i) {
    const std::size_t ch = i % bounds.channels();
    if (bounds.lower[ch] > bounds.upper[ch]) {
      throw std::invalid_argument(who + ": lower bound exceeds upper bound on channel " + std::to_string(ch));
    }
    c.lower[i] = bounds.lower[ch];
    c.upper[i] = bounds.upper[ch];
  }
  return c;
}

}  // namespace detail

/// Bounded-input rule for a dense first layer.
inline RelevanceState propagate_zbeta_dense(const RelevanceState& r_next, const Tensor& weights,
                                            const Tensor& input, const InputBounds& bounds,
                                            std::size_t layer = 0) {
  const std::string who = "propagate_zbeta_dense (layer " + std::to_string(layer) + ")";
  return {layer, detail::distribute_dense(r_next.relevance, weights, input.shape(),
                                          detail::bounded_contribution(input, bounds, who), who)};
}

/// Bounded-input rule for a convolutional first layer.
inline RelevanceState propagate_zbeta_conv(const RelevanceState& r_next, const Tensor& weights,
                                           Conv2dParams params, const Tensor& input,
                                           const InputBounds& bounds, std::size_t layer = 0) {
  const std::string who = "propagate_zbeta_conv (layer " + std::to_string(layer) + ")";
  return {layer, detail::distribute_conv(r_next.relevance, weights, input.shape(), params,
                                         detail::bounded_contribution(input, bounds, who), who)};
}

/// Bounded-input rule at whichever parametric layer touches the input.
inline RelevanceState propagate_zbeta_input(const RelevanceState& r_next, const NetworkModel& model,
                                            std::size_t layer, const Tensor& input,
                                            const InputBounds& bounds) {
  const LayerSpec& spec = model.layers.at(layer);
  const Tensor& w = model.params.at(layer).weights;
  if (spec.kind == LayerKind::conv2d) {
    return propagate_zbeta_conv(r_next, w, {spec.stride, spec.pad}, input, bounds, layer);
  }
  if (spec.kind == LayerKind::dense) return propagate_zbeta_dense(r_next, w, input, bounds, layer);
  throw std::invalid_argument("propagate_zbeta_input: layer " + std::to_string(layer) + " is not parametric");
}

/// Winner-take-all: each pooled relevance goes to its recorded argmax.
inline RelevanceState propagate_maxpool(const RelevanceState& r_next, const PoolArgmax& argmax,
                                        std::size_t layer = 0) {
  if (r_next.relevance.shape() != argmax.output_shape) {
    throw ShapeError("propagate_maxpool (layer " + std::to_string(layer) + "): expected relevance " +
                     shape_string(argmax.output_shape) + ", got " + shape_string(r_next.relevance.shape()));
  }
  Tensor r(argmax.input_shape);
  for (std::size_t o = 0; o < argmax.index.size(); ++o) r[argmax.index[o]] += r_next.relevance[o];
  return {layer, std::move(r)};
}

inline RelevanceState propagate_relu(const RelevanceState& r_next, std::size_t layer = 0) {
  return {layer, r_next.relevance};
}

inline RelevanceState propagate_flatten(const RelevanceState& r_next, const Shape& input_shape,
                                        std::size_t layer = 0) {
  return {layer, r_next.relevance.reshaped(input_shape)};
}

/// Carries an output-layer seed back to the model input. The bounded-input
/// rule applies at the first parametric layer, z+ at every other one.
inline RelevanceState propagate_to_input(const NetworkModel& model, const ForwardTrace& trace,
                                         const Tensor& seed, const InputBounds& bounds) {
  const std::size_t count = model.layers.size();
  if (trace.layers.size() != count) {
    throw std::invalid_argument("propagate_to_input: trace has " + std::to_string(trace.layers.size()) +
                                " layers, model has " + std::to_string(count));
  }
  if (seed.shape() != trace.logits().shape()) {
    throw ShapeError("propagate_to_input: seed " + shape_string(seed.shape()) + " does not match logits " +
                     shape_string(trace.logits().shape()));
  }
  const std::size_t first = *model.first_parametric_layer();
  // The seed lives on the softmax input, i.e. the final dense output.
  RelevanceState state{count - 1, seed};
  for (std::size_t l = count - 1; l-- > 0;) {
    const LayerSpec& spec = model.layers[l];
    const LayerRecord& rec = trace.layers[l];
    switch (spec.kind) {
      case LayerKind::dense:
        state = l == first ? propagate_zbeta_dense(state, model.params[l].weights, rec.input, bounds, l)
                           : propagate_zplus_dense(state, model.params[l].weights, rec.input, l);
        break;
      case LayerKind::conv2d:
        state = l == first ? propagate_zbeta_conv(state, model.params[l].weights, {spec.stride, spec.pad},
                                                  rec.input, bounds, l)
                           : propagate_zplus_conv(state, model.params[l].weights, {spec.stride, spec.pad},
                                                  rec.input, l);
        break;
      case LayerKind::maxpool: state = propagate_maxpool(state, *rec.argmax, l); break;
      case LayerKind::relu: state = propagate_relu(state, l); break;
      case LayerKind::flatten: state = propagate_flatten(state, rec.input.shape(), l); break;
      case LayerKind::softmax:
        throw std::invalid_argument("propagate_to_input: softmax before the final layer");
    }
  }
  return state;
}

/// Clamp each input element at zero, then sum over channels.
inline Tensor positive_channel_sum(const Tensor& input_relevance) {
  const std::size_t h = input_relevance.dim(0), w = input_relevance.dim(1), c = input_relevance.dim(2);
  Tensor pixels({h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    double acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) acc += std::max(input_relevance[i * c + ch], 0.0);
    pixels[i] = acc;
  }
  return pixels;
}

inline RelevanceMap explain(const NetworkModel& model, const ForwardTrace& trace, std::size_t t,
                            Method method) {
  const Seed seed = make_seed(trace, t, method);
  const RelevanceState input = propagate_to_input(model, trace, seed.relevance,
                                                  InputBounds::from_preprocessing(model.preprocessing));
  Tensor signed_relevance = input.relevance.reshaped(model.input_shape);
  return {method, t, positive_channel_sum(signed_relevance), std::move(signed_relevance)};
}

}  // namespace relprop
