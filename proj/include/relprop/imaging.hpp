#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "relprop/model.hpp"
#include "relprop/propagation.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

class ImageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> samples;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return samples[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return samples[(y * width + x) * 3 + c]; }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> samples;
  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

namespace detail {

inline std::size_t read_header_number(std::istream& in, const std::string& path) {
  // Whitespace and '#' comments may precede each header field.
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  bool any = false;
  while (std::isdigit(in.peek())) {
    v = v * 10 + static_cast<std::size_t>(in.get() - '0');
    any = true;
    if (v > (1u << 20)) throw ImageFormatError(path + ": header value too large");
  }
  if (!any) throw ImageFormatError(path + ": malformed header");
  return v;
}

// Parses "Pn W H 255" plus the single whitespace byte; returns (W, H).
inline std::pair<std::size_t, std::size_t> read_pnm_header(std::istream& in, const char* magic,
                                                           const std::string& path) {
  char m[2] = {0, 0};
  in.read(m, 2);
  if (!in || m[0] != 'P') throw ImageFormatError(path + ": not a PNM file");
  if (m[1] != magic[1]) {
    throw ImageFormatError(path + ": unsupported format P" + std::string(1, m[1]) + ", expected " + magic);
  }
  const std::size_t w = read_header_number(in, path);
  const std::size_t h = read_header_number(in, path);
  const std::size_t maxval = read_header_number(in, path);
  if (w == 0 || h == 0) throw ImageFormatError(path + ": zero image extent");
  if (maxval != 255) throw ImageFormatError(path + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
  const int sep = in.get();
  if (sep == EOF || !std::isspace(sep)) throw ImageFormatError(path + ": malformed header");
  return {w, h};
}

inline std::vector<std::uint8_t> read_payload(std::istream& in, std::size_t count, const std::string& path) {
  std::vector<std::uint8_t> data(count);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) {
    throw ImageFormatError(path + ": truncated payload, expected " + std::to_string(count) + " bytes, got " +
                           std::to_string(in.gcount()));
  }
  return data;
}

inline void write_pnm(const std::string& path, const char* magic, std::size_t w, std::size_t h,
                      const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageFormatError("cannot write '" + path + "'");
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw ImageFormatError("failed writing '" + path + "'");
}

}  // namespace detail

inline RgbImage read_ppm(std::istream& in, const std::string& name = "<stream>") {
  const auto [w, h] = detail::read_pnm_header(in, "P6", name);
  return {w, h, detail::read_payload(in, w * h * 3, name)};
}

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageFormatError("cannot open '" + path + "'");
  return read_ppm(in, path);
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageFormatError("cannot open '" + path + "'");
  const auto [w, h] = detail::read_pnm_header(in, "P5", path);
  return {w, h, detail::read_payload(in, w * h, path)};
}

inline void write_ppm(const RgbImage& image, const std::string& path) {
  if (image.samples.size() != image.width * image.height * 3) throw ImageFormatError("write_ppm: sample count mismatch");
  detail::write_pnm(path, "P6", image.width, image.height, image.samples);
}

inline void write_pgm(const GrayImage& image, const std::string& path) {
  if (image.samples.size() != image.width * image.height) throw ImageFormatError("write_pgm: sample count mismatch");
  detail::write_pnm(path, "P5", image.width, image.height, image.samples);
}

/// Centre square crop, nearest-neighbour resize to the model input, pixel
/// values as doubles. Means are not subtracted; see preprocess().
inline Tensor to_input_tensor(const RgbImage& image, const Shape& input_shape) {
  if (input_shape.size() != 3 || input_shape[2] != 3) {
    throw ShapeError("to_input_tensor: model input must be [H,W,3], got " + shape_string(input_shape));
  }
  const std::size_t side = std::min(image.width, image.height);
  const std::size_t x_off = (image.width - side) / 2;
  const std::size_t y_off = (image.height - side) / 2;
  const std::size_t out_h = input_shape[0], out_w = input_shape[1];
  Tensor t(input_shape);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = y_off + y * side / out_h;
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = x_off + x * side / out_w;
      for (std::size_t c = 0; c < 3; ++c) t.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return t;
}

inline Tensor preprocess(const RgbImage& image, const NetworkModel& model) {
  return subtract_means(to_input_tensor(image, model.input_shape), model.preprocessing);
}

/// Maps an inclusive box in source-image pixels through the crop/resize of
/// to_input_tensor. Returns nullopt when the box falls outside the crop.
inline std::optional<std::array<std::size_t, 4>> map_box_to_input(std::size_t x_min, std::size_t y_min,
                                                                  std::size_t x_max, std::size_t y_max,
                                                                  std::size_t image_w, std::size_t image_h,
                                                                  std::size_t out_w, std::size_t out_h) {
  const std::size_t side = std::min(image_w, image_h);
  const std::size_t x_off = (image_w - side) / 2, y_off = (image_h - side) / 2;
  // Output pixel o samples source x_off + o*side/out; keep every o whose sample lies in the box.
  auto range = [&](std::size_t lo, std::size_t hi, std::size_t off, std::size_t out)
      -> std::optional<std::pair<std::size_t, std::size_t>> {
    std::optional<std::size_t> first, last;
    for (std::size_t o = 0; o < out; ++o) {
      const std::size_t s = off + o * side / out;
      if (s >= lo && s <= hi) {
        if (!first) first = o;
        last = o;
      }
    }
    if (!first) return std::nullopt;
    return std::pair{*first, *last};
  };
  const auto xr = range(x_min, x_max, x_off, out_w);
  const auto yr = range(y_min, y_max, y_off, out_h);
  if (!xr || !yr) return std::nullopt;
  return std::array<std::size_t, 4>{xr->first, yr->first, xr->second, yr->second};
}

/// Grayscale heatmap: positive map values scaled by 1/max|signed input
/// relevance|, clamped to [0,1], rounded half-up to 0..255.
inline GrayImage render_heatmap(const RelevanceMap& map) {
  GrayImage out{map.width(), map.height(), std::vector<std::uint8_t>(map.pixels.size(), 0)};
  double peak = 0.0;
  for (double v : map.input_relevance.values()) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) return out;
  for (std::size_t i = 0; i < map.pixels.size(); ++i) {
    const double scaled = std::clamp(map.pixels[i] / peak, 0.0, 1.0);
    out.samples[i] = static_cast<std::uint8_t>(std::floor(scaled * 255.0 + 0.5));
  }
  return out;
}

}  // namespace relprop
