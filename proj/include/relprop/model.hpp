#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "relprop/tensor.hpp"

namespace relprop {

enum class LayerKind { conv2d, relu, maxpool, flatten, dense, softmax };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv2d: in/out channels; dense: in/out features.
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool has_bias = false;

  bool parametric() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }

  Shape weight_shape() const {
    if (kind == LayerKind::conv2d) return {out, in, kh, kw};
    if (kind == LayerKind::dense) return {out, in};
    return {};
  }

  std::size_t parameter_count() const {
    if (!parametric()) return 0;
    return shape_volume(weight_shape()) + (has_bias ? out : 0);
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Pixel-domain preprocessing: the network sees `pixel - mean[c]`.
struct Preprocessing {
  std::vector<double> channel_means;
  double pixel_min = 0.0;
  double pixel_max = 255.0;

  friend bool operator==(const Preprocessing&, const Preprocessing&) = default;
};

struct LayerParams {
  Tensor weights;
  Tensor bias;  // zeros when the layer has no bias term
};

struct NetworkModel {
  Shape input_shape;  // [H,W,C]
  std::vector<LayerSpec> layers;
  std::vector<LayerParams> params;  // one entry per layer; empty for non-parametric
  Preprocessing preprocessing;

  std::size_t num_classes() const { return layers.at(layers.size() - 2).out; }

  std::optional<std::size_t> first_parametric_layer() const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].parametric()) return i;
    }
    return std::nullopt;
  }
};

/// Malformed manifest or weight blob. `kind` distinguishes the failure and
/// the message names the manifest line or blob offset.
class ModelFormatError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, syntax, unknown_layer, chain_mismatch, truncated_blob, oversized_blob };

  ModelFormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline std::string line_prefix(std::size_t line) {
  return "manifest line " + std::to_string(line) + ": ";
}

inline std::size_t parse_extent(const std::string& token, std::size_t line, const std::string& what,
                                bool allow_zero = false) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(token, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != token.size() || token.empty() || token[0] == '-' || (!allow_zero && v == 0)) {
    throw ModelFormatError(ModelFormatError::Kind::syntax,
                           line_prefix(line) + "invalid " + what + " '" + token + "'");
  }
  return static_cast<std::size_t>(v);
}

inline double parse_number(const std::string& token, std::size_t line, const std::string& what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(token, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != token.size() || token.empty() || !std::isfinite(v)) {
    throw ModelFormatError(ModelFormatError::Kind::syntax,
                           line_prefix(line) + "invalid " + what + " '" + token + "'");
  }
  return v;
}

inline LayerSpec parse_layer(const std::vector<std::string>& tokens, std::size_t line) {
  static const std::map<std::string, LayerKind, std::less<>> kinds = {
      {"conv2d", LayerKind::conv2d}, {"relu", LayerKind::relu},
      {"maxpool", LayerKind::maxpool}, {"flatten", LayerKind::flatten},
      {"dense", LayerKind::dense},   {"softmax", LayerKind::softmax}};
  if (tokens.size() < 2) {
    throw ModelFormatError(ModelFormatError::Kind::syntax, line_prefix(line) + "layer kind missing");
  }
  const auto kind_it = kinds.find(tokens[1]);
  if (kind_it == kinds.end()) {
    throw ModelFormatError(ModelFormatError::Kind::unknown_layer,
                           line_prefix(line) + "unknown layer kind '" + tokens[1] + "'");
  }
  LayerSpec spec;
  spec.kind = kind_it->second;

  std::map<std::string, std::string, std::less<>> kv;
  for (std::size_t i = 2; i < tokens.size(); ++i) {
    const auto eq = tokens[i].find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ModelFormatError(ModelFormatError::Kind::syntax,
                             line_prefix(line) + "expected key=value, got '" + tokens[i] + "'");
    }
    if (!kv.emplace(tokens[i].substr(0, eq), tokens[i].substr(eq + 1)).second) {
      throw ModelFormatError(ModelFormatError::Kind::syntax,
                             line_prefix(line) + "duplicate key '" + tokens[i].substr(0, eq) + "'");
    }
  }

  std::vector<std::string> required;
  switch (spec.kind) {
    case LayerKind::conv2d: required = {"in", "out", "kh", "kw", "stride", "pad", "bias"}; break;
    case LayerKind::maxpool: required = {"kh", "kw", "stride"}; break;
    case LayerKind::dense: required = {"in", "out", "bias"}; break;
    default: break;
  }
  for (const auto& [key, value] : kv) {
    if (std::find(required.begin(), required.end(), key) == required.end()) {
      throw ModelFormatError(ModelFormatError::Kind::syntax,
                             line_prefix(line) + "unexpected key '" + key + "' for " +
                                 std::string(to_string(spec.kind)));
    }
  }
  for (const auto& key : required) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
      throw ModelFormatError(ModelFormatError::Kind::syntax,
                             line_prefix(line) + std::string(to_string(spec.kind)) +
                                 " missing key '" + key + "'");
    }
    const std::string& v = it->second;
    if (key == "in") spec.in = parse_extent(v, line, key);
    else if (key == "out") spec.out = parse_extent(v, line, key);
    else if (key == "kh") spec.kh = parse_extent(v, line, key);
    else if (key == "kw") spec.kw = parse_extent(v, line, key);
    else if (key == "stride") spec.stride = parse_extent(v, line, key);
    else if (key == "pad") spec.pad = parse_extent(v, line, key, true);
    else if (key == "bias") {
      if (v != "0" && v != "1") {
        throw ModelFormatError(ModelFormatError::Kind::syntax,
                               line_prefix(line) + "bias must be 0 or 1, got '" + v + "'");
      }
      spec.has_bias = v == "1";
    }
  }
  return spec;
}

}  // namespace detail

/// Output shape of one layer given its input shape. Throws ShapeError naming
/// the layer on an incompatible chain.
inline Shape layer_output_shape(const LayerSpec& spec, const Shape& input, std::size_t index) {
  const std::string who = "layer " + std::to_string(index) + " (" + std::string(to_string(spec.kind)) + ")";
  switch (spec.kind) {
    case LayerKind::conv2d:
      return conv2d_output_shape(input, spec.weight_shape(), {spec.stride, spec.pad}, who);
    case LayerKind::maxpool:
      return maxpool_output_shape(input, {spec.kh, spec.kw, spec.stride}, who);
    case LayerKind::dense:
      if (shape_volume(input) != spec.in) {
        throw ShapeError(who + ": expected " + std::to_string(spec.in) + " inputs, got " +
                         shape_string(input));
      }
      return {spec.out};
    case LayerKind::flatten:
      return {shape_volume(input)};
    case LayerKind::softmax:
      if (input.size() != 1) {
        throw ShapeError(who + ": expected a logit vector, got " + shape_string(input));
      }
      return input;
    case LayerKind::relu:
      return input;
  }
  return input;
}

/// Checks the layer chain and the softmax-after-dense head.
inline void validate_architecture(const Shape& input_shape, const std::vector<LayerSpec>& layers) {
  using K = ModelFormatError::Kind;
  if (layers.size() < 2 || layers.back().kind != LayerKind::softmax ||
      layers[layers.size() - 2].kind != LayerKind::dense) {
    throw ModelFormatError(K::chain_mismatch, "model must end with a dense layer followed by softmax");
  }
  Shape shape = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::softmax && i + 1 != layers.size()) {
      throw ModelFormatError(K::chain_mismatch,
                             "layer " + std::to_string(i) + ": softmax must be the final layer");
    }
    try {
      shape = layer_output_shape(layers[i], shape, i);
    } catch (const ShapeError& e) {
      throw ModelFormatError(K::chain_mismatch, e.what());
    }
  }
}

struct ParsedManifest {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  Preprocessing preprocessing;
};

/// Parses the line-oriented text manifest. Missing `mean` defaults to zeros
/// and missing `pixel_range` to 0..255.
inline ParsedManifest parse_manifest(std::istream& in) {
  using K = ModelFormatError::Kind;
  ParsedManifest m;
  bool seen_magic = false, seen_input = false, seen_mean = false, seen_range = false;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream ls(raw);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;

    if (!seen_magic) {
      if (tok.size() != 2 || tok[0] != "RELPROP-MODEL" || tok[1] != "1") {
        throw ModelFormatError(K::bad_magic, detail::line_prefix(line_no) +
                                                 "expected 'RELPROP-MODEL 1', got '" + raw + "'");
      }
      seen_magic = true;
      continue;
    }
    const std::string& key = tok[0];
    if (key == "input") {
      if (seen_input || tok.size() != 4) {
        throw ModelFormatError(K::syntax, detail::line_prefix(line_no) + "expected 'input H W C' once");
      }
      for (std::size_t i = 1; i < 4; ++i) m.input_shape.push_back(detail::parse_extent(tok[i], line_no, "input extent"));
      seen_input = true;
    } else if (key == "layer") {
      if (!seen_input) {
        throw ModelFormatError(K::syntax, detail::line_prefix(line_no) + "'input' must precede layers");
      }
      m.layers.push_back(detail::parse_layer(tok, line_no));
    } else if (key == "mean") {
      if (seen_mean) throw ModelFormatError(K::syntax, detail::line_prefix(line_no) + "duplicate 'mean'");
      for (std::size_t i = 1; i < tok.size(); ++i) {
        m.preprocessing.channel_means.push_back(detail::parse_number(tok[i], line_no, "mean"));
      }
      seen_mean = true;
    } else if (key == "pixel_range") {
      if (seen_range || tok.size() != 3) {
        throw ModelFormatError(K::syntax, detail::line_prefix(line_no) + "expected 'pixel_range LO HI' once");
      }
      m.preprocessing.pixel_min = detail::parse_number(tok[1], line_no, "pixel_range");
      m.preprocessing.pixel_max = detail::parse_number(tok[2], line_no, "pixel_range");
      if (m.preprocessing.pixel_min > m.preprocessing.pixel_max) {
        throw ModelFormatError(K::syntax, detail::line_prefix(line_no) + "pixel_range LO exceeds HI");
      }
      seen_range = true;
    } else {
      throw ModelFormatError(K::syntax, detail::line_prefix(line_no) + "unknown directive '" + key + "'");
    }
  }
  if (!seen_magic) throw ModelFormatError(K::bad_magic, "manifest is empty; expected 'RELPROP-MODEL 1'");
  if (!seen_input) throw ModelFormatError(K::syntax, "manifest has no 'input' line");
  const std::size_t channels = m.input_shape[2];
  if (!seen_mean) {
    m.preprocessing.channel_means.assign(channels, 0.0);
  } else if (m.preprocessing.channel_means.size() != channels) {
    throw ModelFormatError(K::syntax, "manifest 'mean' has " +
                                          std::to_string(m.preprocessing.channel_means.size()) +
                                          " values for " + std::to_string(channels) + " channels");
  }
  validate_architecture(m.input_shape, m.layers);
  return m;
}

inline std::size_t expected_parameter_count(const std::vector<LayerSpec>& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

/// Decodes the little-endian float32 blob into per-layer tensors.
inline std::vector<LayerParams> decode_weights(const std::vector<LayerSpec>& layers,
                                               std::span<const unsigned char> blob) {
  using K = ModelFormatError::Kind;
  const std::size_t expected = expected_parameter_count(layers);
  if (blob.size() % 4 != 0 || blob.size() / 4 < expected) {
    throw ModelFormatError(K::truncated_blob,
                           "weight blob truncated: expected " + std::to_string(expected) +
                               " floats (" + std::to_string(expected * 4) + " bytes), got " +
                               std::to_string(blob.size()) + " bytes (" +
                               std::to_string(blob.size() / 4) + " floats)");
  }
  if (blob.size() / 4 > expected) {
    throw ModelFormatError(K::oversized_blob,
                           "weight blob has trailing data: expected " + std::to_string(expected) +
                               " floats, got " + std::to_string(blob.size() / 4));
  }
  std::size_t offset = 0;
  auto read = [&](std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i, offset += 4) {
      const std::uint32_t bits = std::uint32_t{blob[offset]} | std::uint32_t{blob[offset + 1]} << 8 |
                                 std::uint32_t{blob[offset + 2]} << 16 |
                                 std::uint32_t{blob[offset + 3]} << 24;
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) {
        throw ModelFormatError(K::syntax, "weight blob: non-finite value at byte offset " +
                                              std::to_string(offset));
      }
      out[i] = static_cast<double>(f);
    }
    return out;
  };
  std::vector<LayerParams> params(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (!l.parametric()) continue;
    const Shape ws = l.weight_shape();
    params[i].weights = Tensor(ws, read(shape_volume(ws)));
    params[i].bias = l.has_bias ? Tensor({l.out}, read(l.out)) : Tensor({l.out});
  }
  return params;
}

inline std::vector<unsigned char> encode_weights(const NetworkModel& model) {
  std::vector<unsigned char> blob;
  auto put = [&](double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int s = 0; s < 32; s += 8) blob.push_back(static_cast<unsigned char>(bits >> s));
  };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (!model.layers[i].parametric()) continue;
    for (double v : model.params[i].weights.values()) put(v);
    if (model.layers[i].has_bias) {
      for (double v : model.params[i].bias.values()) put(v);
    }
  }
  return blob;
}

inline std::string format_manifest(const NetworkModel& model) {
  std::ostringstream os;
  os.precision(17);
  os << "RELPROP-MODEL 1\n";
  os << "input " << model.input_shape[0] << ' ' << model.input_shape[1] << ' ' << model.input_shape[2] << '\n';
  for (const LayerSpec& l : model.layers) {
    os << "layer " << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv2d:
        os << " in=" << l.in << " out=" << l.out << " kh=" << l.kh << " kw=" << l.kw
           << " stride=" << l.stride << " pad=" << l.pad << " bias=" << (l.has_bias ? 1 : 0);
        break;
      case LayerKind::maxpool:
        os << " kh=" << l.kh << " kw=" << l.kw << " stride=" << l.stride;
        break;
      case LayerKind::dense:
        os << " in=" << l.in << " out=" << l.out << " bias=" << (l.has_bias ? 1 : 0);
        break;
      default:
        break;
    }
    os << '\n';
  }
  os << "mean";
  for (double m : model.preprocessing.channel_means) os << ' ' << m;
  os << "\npixel_range " << model.preprocessing.pixel_min << ' ' << model.preprocessing.pixel_max << '\n';
  return os.str();
}

inline NetworkModel make_model(ParsedManifest manifest, std::span<const unsigned char> blob) {
  NetworkModel model;
  model.params = decode_weights(manifest.layers, blob);
  model.input_shape = std::move(manifest.input_shape);
  model.layers = std::move(manifest.layers);
  model.preprocessing = std::move(manifest.preprocessing);
  return model;
}

/// Builds a model in memory, checking the chain and every parameter shape.
/// Empty means default to zero per channel.
inline NetworkModel assemble_model(Shape input_shape, std::vector<LayerSpec> layers,
                                   std::vector<LayerParams> params, Preprocessing prep = {}) {
  using K = ModelFormatError::Kind;
  if (input_shape.size() != 3) {
    throw ModelFormatError(K::chain_mismatch, "model input must be [H,W,C], got " + shape_string(input_shape));
  }
  validate_architecture(input_shape, layers);
  if (params.size() != layers.size()) {
    throw ModelFormatError(K::chain_mismatch, "expected parameters for " + std::to_string(layers.size()) +
                                                  " layers, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].parametric()) continue;
    if (params[i].weights.shape() != layers[i].weight_shape()) {
      throw ModelFormatError(K::chain_mismatch, "layer " + std::to_string(i) + ": expected weights " +
                                                    shape_string(layers[i].weight_shape()) + ", got " +
                                                    shape_string(params[i].weights.shape()));
    }
    if (params[i].bias.size() == 0) params[i].bias = Tensor({layers[i].out});
    if (params[i].bias.shape() != Shape{layers[i].out}) {
      throw ModelFormatError(K::chain_mismatch, "layer " + std::to_string(i) + ": expected bias [" +
                                                    std::to_string(layers[i].out) + "]");
    }
  }
  if (prep.channel_means.empty()) prep.channel_means.assign(input_shape[2], 0.0);
  if (prep.channel_means.size() != input_shape[2]) {
    throw ModelFormatError(K::syntax, "expected one mean per input channel");
  }
  return {std::move(input_shape), std::move(layers), std::move(params), std::move(prep)};
}

inline std::vector<unsigned char> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFormatError(ModelFormatError::Kind::io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline NetworkModel load_model(const std::string& manifest_path, const std::string& weights_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ModelFormatError(ModelFormatError::Kind::io, "cannot open '" + manifest_path + "'");
  ParsedManifest manifest = parse_manifest(in);
  const auto blob = read_binary_file(weights_path);
  return make_model(std::move(manifest), blob);
}

inline void save_model(const NetworkModel& model, const std::string& manifest_path,
                       const std::string& weights_path) {
  std::ofstream m(manifest_path, std::ios::binary);
  std::ofstream w(weights_path, std::ios::binary);
  if (!m || !w) throw ModelFormatError(ModelFormatError::Kind::io, "cannot write model files");
  m << format_manifest(model);
  const auto blob = encode_weights(model);
  w.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

// ---------------------------------------------------------------------------
// Forward execution

struct LayerRecord {
  Tensor input;
  Tensor output;
  std::optional<PoolArgmax> argmax;
};

struct ForwardTrace {
  std::vector<LayerRecord> layers;

  /// Pre-activation of layer l. For relu this is its input; every other kind
  /// records its result directly.
  const Tensor& pre_activation(std::size_t l, const NetworkModel& model) const {
    return model.layers.at(l).kind == LayerKind::relu ? layers.at(l).input : layers.at(l).output;
  }
  const Tensor& logits() const { return layers.back().input; }
  const Tensor& probabilities() const { return layers.back().output; }
  std::size_t num_classes() const { return logits().size(); }
};

enum class Preprocess { already_applied, apply };

inline Tensor subtract_means(const Tensor& image, const Preprocessing& prep) {
  Tensor out = image;
  const std::size_t channels = image.dim(2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= prep.channel_means[i % channels];
  return out;
}

/// Runs one layer on `input`; shared by forward() and trace replay.
inline LayerRecord run_layer(const NetworkModel& model, std::size_t l, const Tensor& input) {
  const LayerSpec& spec = model.layers[l];
  const std::string who = "layer " + std::to_string(l) + " (" + std::string(to_string(spec.kind)) + ")";
  LayerRecord rec{input, {}, std::nullopt};
  switch (spec.kind) {
    case LayerKind::conv2d:
      rec.output = conv2d_forward(input, model.params[l].weights, model.params[l].bias,
                                  {spec.stride, spec.pad}, who);
      break;
    case LayerKind::maxpool: {
      auto [out, argmax] = maxpool_forward(input, {spec.kh, spec.kw, spec.stride}, who);
      rec.output = std::move(out);
      rec.argmax = std::move(argmax);
      break;
    }
    case LayerKind::dense:
      rec.output = dense_forward(input, model.params[l].weights, model.params[l].bias, who);
      break;
    case LayerKind::relu: rec.output = relu(input); break;
    case LayerKind::flatten: rec.output = flatten(input); break;
    case LayerKind::softmax: rec.output = softmax(input); break;
  }
  return rec;
}

inline ForwardTrace forward(const NetworkModel& model, const Tensor& image,
                            Preprocess mode = Preprocess::already_applied) {
  if (image.shape() != model.input_shape) {
    throw ShapeError("forward: expected input " + shape_string(model.input_shape) + ", got " +
                     shape_string(image.shape()));
  }
  if (!image.all_finite()) throw std::invalid_argument("forward: input contains non-finite values");
  ForwardTrace trace;
  trace.layers.reserve(model.layers.size());
  Tensor current = mode == Preprocess::apply ? subtract_means(image, model.preprocessing) : image;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    trace.layers.push_back(run_layer(model, l, current));
    current = trace.layers.back().output;
  }
  return trace;
}

struct ClassScore {
  std::size_t index;
  double probability;
  friend bool operator==(const ClassScore&, const ClassScore&) = default;
};

/// Highest-probability classes, descending; equal probabilities keep the lower index first.
inline std::vector<ClassScore> predict_topk(const ForwardTrace& trace, std::size_t k) {
  const Tensor& probs = trace.probabilities();
  if (k < 1 || k > probs.size()) {
    throw std::out_of_range("predict_topk: k=" + std::to_string(k) + " outside [1," +
                            std::to_string(probs.size()) + "]");
  }
  std::vector<ClassScore> all(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) all[i] = {i, probs[i]};
  std::stable_sort(all.begin(), all.end(),
                   [](const ClassScore& a, const ClassScore& b) { return a.probability > b.probability; });
  all.resize(k);
  return all;
}

}  // namespace relprop
