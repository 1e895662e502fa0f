#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "relprop/model.hpp"
#include "relprop/propagation.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

inline constexpr std::size_t kDefaultPatchSizes[] = {1, 3, 5, 7, 9};

inline std::vector<std::size_t> default_patch_sizes() {
  return {std::begin(kDefaultPatchSizes), std::end(kDefaultPatchSizes)};
}

/// 10%, 20%, ..., 100%.
inline std::vector<double> default_energy_levels() {
  std::vector<double> e;
  for (int i = 1; i <= 10; ++i) e.push_back(i / 10.0);
  return e;
}

struct Point {
  std::size_t x = 0;
  std::size_t y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Inclusive pixel box.
struct BoundingBox {
  std::size_t class_id = 0;
  std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  bool contains(std::size_t x, std::size_t y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// An explanation method or the random baseline.
struct EvalMethod {
  std::optional<Method> method;  // empty = random baseline

  static EvalMethod random() { return {}; }
  bool is_random() const { return !method.has_value(); }
  std::string name() const { return method ? std::string(to_string(*method)) : "random"; }

  static EvalMethod parse(std::string_view s) {
    if (s == "random") return random();
    return {parse_method(s)};
  }
  friend bool operator==(const EvalMethod&, const EvalMethod&) = default;
};

struct MaskingResult {
  std::string method;
  std::size_t patch = 0;
  std::size_t target = 0;
  double prob_before = 0.0;
  double prob_after = 0.0;
  double drop = 0.0;
  Point center;
};

struct PointingResult {
  std::string method;
  std::size_t target = 0;
  double energy = 0.0;
  double threshold = 0.0;
  std::size_t hits = 0;
  std::size_t misses = 0;
  double accuracy = 0.0;
  bool skipped = false;  // map had no positive relevance
};

// ---------------------------------------------------------------------------
// Seeded randomness. Built on the raw mt19937_64 stream so that results do
// not depend on the standard library's distribution implementations.

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

/// Uniform in (0, 1].
inline double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>((rng() >> 11) + 1) * 0x1.0p-53;
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t range = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % range);
}

/// Random baseline map for the pointing game: independent uniform values.
inline RelevanceMap random_relevance_map(std::size_t height, std::size_t width, std::size_t target,
                                         std::mt19937_64& rng) {
  Tensor pixels({height, width});
  for (double& v : pixels.values()) v = uniform_unit(rng);
  return {Method::lrp, target, pixels, pixels.reshaped({height, width, 1})};
}

// ---------------------------------------------------------------------------

/// Largest 2-D map entry; the first in row-major order wins ties.
inline Point maximal_point(const RelevanceMap& map) {
  const auto values = map.pixels.values();
  const auto it = std::max_element(values.begin(), values.end());
  const auto idx = static_cast<std::size_t>(it - values.begin());
  return {idx % map.width(), idx / map.width()};
}

/// Replaces the p x p patch centred at `center` (clipped to the image) with
/// `fill`, one value per channel.
inline Tensor mask_patch(const Tensor& image, Point center, std::size_t p, std::span<const double> fill) {
  if (p < 1 || p % 2 == 0) {
    throw std::invalid_argument("mask_patch: patch size must be odd and >= 1, got " + std::to_string(p));
  }
  if (image.rank() != 3 || fill.size() != image.dim(2)) {
    throw ShapeError("mask_patch: expected [H,W," + std::to_string(fill.size()) + "] image, got " +
                     shape_string(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (center.x >= w || center.y >= h) throw std::out_of_range("mask_patch: center outside image");
  const std::size_t half = p / 2;
  const std::size_t y0 = center.y >= half ? center.y - half : 0;
  const std::size_t x0 = center.x >= half ? center.x - half : 0;
  const std::size_t y1 = std::min(h - 1, center.y + half);
  const std::size_t x1 = std::min(w - 1, center.x + half);
  Tensor out = image;
  for (std::size_t y = y0; y <= y1; ++y) {
    for (std::size_t x = x0; x <= x1; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) out.at(y, x, ch) = fill[ch];
    }
  }
  return out;
}

struct GroundTruth {
  std::size_t label;
};
struct SecondProbable {};
using TargetSelector = std::variant<GroundTruth, SecondProbable>;

inline std::size_t resolve_target(const ForwardTrace& trace, const TargetSelector& selector) {
  if (const auto* gt = std::get_if<GroundTruth>(&selector)) {
    if (gt->label >= trace.num_classes()) {
      throw std::out_of_range("ground-truth label " + std::to_string(gt->label) + " outside [0," +
                              std::to_string(trace.num_classes()) + ")");
    }
    return gt->label;
  }
  return predict_topk(trace, 2)[1].index;
}

/// Maximal patch masking on one raw (un-preprocessed) image. For each method
/// and patch size: explain, mask around the peak with the dataset means,
/// re-classify, and record the target probability drop. The random baseline
/// draws its centre from `rng`, once per patch size.
inline std::vector<MaskingResult> patch_masking_eval(const NetworkModel& model, const Tensor& raw_image,
                                                     const TargetSelector& selector,
                                                     const std::vector<EvalMethod>& methods,
                                                     const std::vector<std::size_t>& patch_sizes,
                                                     std::mt19937_64& rng) {
  const ForwardTrace trace = forward(model, raw_image, Preprocess::apply);
  const std::size_t t = resolve_target(trace, selector);
  const double before = trace.probabilities()[t];
  const auto& fill = model.preprocessing.channel_means;

  std::vector<MaskingResult> results;
  for (const EvalMethod& m : methods) {
    std::optional<Point> peak;
    if (!m.is_random()) peak = maximal_point(explain(model, trace, t, *m.method));
    for (std::size_t p : patch_sizes) {
      const Point center = peak ? *peak
                                : Point{uniform_index(rng, raw_image.dim(1)), uniform_index(rng, raw_image.dim(0))};
      const Tensor masked = mask_patch(raw_image, center, p, fill);
      const double after = forward(model, masked, Preprocess::apply).probabilities()[t];
      results.push_back({m.name(), p, t, before, after, before - after, center});
    }
  }
  return results;
}

/// Threshold admitting the top max(1, floor(E*K)) of the K positive pixels.
inline double energy_threshold(const RelevanceMap& map, double energy) {
  if (!(energy > 0.0 && energy <= 1.0)) {
    throw std::invalid_argument("energy_threshold: E must lie in (0,1], got " + std::to_string(energy));
  }
  std::vector<double> positive;
  for (double v : map.pixels.values()) {
    if (v > 0.0) positive.push_back(v);
  }
  if (positive.empty()) throw std::domain_error("energy_threshold: map has no positive relevance");
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(energy * static_cast<double>(positive.size()))));
  std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(k - 1), positive.end(),
                   std::greater<>());
  return positive[k - 1];
}

/// Clips a box to a width x height image; nullopt when nothing remains.
inline std::optional<BoundingBox> clip_box(const BoundingBox& box, std::size_t width, std::size_t height) {
  if (box.x_min > box.x_max || box.y_min > box.y_max || box.x_min >= width || box.y_min >= height) {
    return std::nullopt;
  }
  BoundingBox b = box;
  b.x_max = std::min(b.x_max, width - 1);
  b.y_max = std::min(b.y_max, height - 1);
  return b;
}

/// Extended pointing game over the union of `boxes`.
inline std::vector<PointingResult> pointing_game(const RelevanceMap& map, const std::vector<BoundingBox>& boxes,
                                                 const std::vector<double>& energies,
                                                 const std::string& method_name = {}) {
  for (const auto& b : boxes) {
    if (b.x_min > b.x_max || b.y_min > b.y_max || b.x_max >= map.width() || b.y_max >= map.height()) {
      throw ShapeError("pointing_game: box (" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) +
                       ")-(" + std::to_string(b.x_max) + "," + std::to_string(b.y_max) +
                       ") does not fit map " + shape_string(map.pixels.shape()));
    }
  }
  const bool any_positive = std::any_of(map.pixels.values().begin(), map.pixels.values().end(),
                                        [](double v) { return v > 0.0; });
  std::vector<PointingResult> out;
  for (double e : energies) {
    PointingResult r{method_name, map.target, e};
    if (!any_positive) {
      if (!(e > 0.0 && e <= 1.0)) throw std::invalid_argument("pointing_game: E must lie in (0,1]");
      r.skipped = true;
      out.push_back(r);
      continue;
    }
    r.threshold = energy_threshold(map, e);
    for (std::size_t y = 0; y < map.height(); ++y) {
      for (std::size_t x = 0; x < map.width(); ++x) {
        if (!(map.at(y, x) >= r.threshold)) continue;
        const bool inside = std::any_of(boxes.begin(), boxes.end(), [&](const BoundingBox& b) { return b.contains(x, y); });
        ++(inside ? r.hits : r.misses);
      }
    }
    r.accuracy = static_cast<double>(r.hits) / static_cast<double>(r.hits + r.misses);
    out.push_back(r);
  }
  return out;
}

inline std::vector<PointingResult> pointing_game(const RelevanceMap& map, const BoundingBox& box,
                                                 const std::vector<double>& energies,
                                                 const std::string& method_name = {}) {
  return pointing_game(map, std::vector<BoundingBox>{box}, energies, method_name);
}

// ---------------------------------------------------------------------------
// Aggregation

struct MaskingSummary {
  std::string method;
  std::size_t patch = 0;
  std::size_t count = 0;
  double mean_before = 0.0;
  double mean_after = 0.0;
  double mean_drop = 0.0;
};

struct PointingSummary {
  std::string method;
  double energy = 0.0;
  std::size_t count = 0;    // scored (non-skipped) records
  std::size_t skipped = 0;
  double mean_accuracy = 0.0;
};

/// Per-image records for a whole dataset run.
struct EvalReport {
  struct MaskingRow {
    std::string image;
    MaskingResult result;
  };
  struct PointingRow {
    std::string image;
    PointingResult result;
  };
  std::vector<MaskingRow> masking;
  std::vector<PointingRow> pointing;

  /// Means per (method, patch) in first-appearance order.
  std::vector<MaskingSummary> masking_summary() const {
    std::vector<MaskingSummary> out;
    for (const auto& row : masking) {
      const auto& r = row.result;
      auto it = std::find_if(out.begin(), out.end(),
                             [&](const MaskingSummary& s) { return s.method == r.method && s.patch == r.patch; });
      if (it == out.end()) it = out.insert(out.end(), MaskingSummary{r.method, r.patch});
      ++it->count;
      it->mean_before += r.prob_before;
      it->mean_after += r.prob_after;
      it->mean_drop += r.drop;
    }
    for (auto& s : out) {
      const double n = static_cast<double>(s.count);
      s.mean_before /= n;
      s.mean_after /= n;
      s.mean_drop /= n;
    }
    return out;
  }

  std::vector<PointingSummary> pointing_summary() const {
    std::vector<PointingSummary> out;
    for (const auto& row : pointing) {
      const auto& r = row.result;
      auto it = std::find_if(out.begin(), out.end(),
                             [&](const PointingSummary& s) { return s.method == r.method && s.energy == r.energy; });
      if (it == out.end()) it = out.insert(out.end(), PointingSummary{r.method, r.energy});
      if (r.skipped) {
        ++it->skipped;
        continue;
      }
      ++it->count;
      it->mean_accuracy += r.accuracy;
    }
    for (auto& s : out) {
      if (s.count) s.mean_accuracy /= static_cast<double>(s.count);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Files

/// Reads `image_id class_id x_min y_min x_max y_max` lines, keyed by image id.
inline std::map<std::string, std::vector<BoundingBox>> read_bounding_boxes(std::istream& in) {
  std::map<std::string, std::vector<BoundingBox>> boxes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string id;
    if (!(ls >> id)) continue;
    long long v[5];
    for (auto& x : v) {
      if (!(ls >> x) || x < 0) {
        throw std::runtime_error("box file line " + std::to_string(line_no) +
                                 ": expected 'image_id class_id x_min y_min x_max y_max'");
      }
    }
    std::string extra;
    if (ls >> extra) throw std::runtime_error("box file line " + std::to_string(line_no) + ": trailing text");
    BoundingBox b{static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]), static_cast<std::size_t>(v[2]),
                  static_cast<std::size_t>(v[3]), static_cast<std::size_t>(v[4])};
    if (b.x_min > b.x_max || b.y_min > b.y_max) {
      throw std::runtime_error("box file line " + std::to_string(line_no) + ": empty box");
    }
    boxes[id].push_back(b);
  }
  return boxes;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_masking_csv(std::ostream& os, const EvalReport& report) {
  os << "image,method,target,patch,prob_before,prob_after,drop,center_x,center_y\n";
  for (const auto& [image, r] : report.masking) {
    os << image << ',' << r.method << ',' << r.target << ',' << r.patch << ',' << format_double(r.prob_before) << ','
       << format_double(r.prob_after) << ',' << format_double(r.drop) << ',' << r.center.x << ',' << r.center.y
       << '\n';
  }
}

inline void write_masking_summary_csv(std::ostream& os, const EvalReport& report) {
  os << "method,patch,count,mean_prob_before,mean_prob_after,mean_drop\n";
  for (const auto& s : report.masking_summary()) {
    os << s.method << ',' << s.patch << ',' << s.count << ',' << format_double(s.mean_before) << ','
       << format_double(s.mean_after) << ',' << format_double(s.mean_drop) << '\n';
  }
}

inline void write_pointing_csv(std::ostream& os, const EvalReport& report) {
  os << "image,method,target,energy,threshold,hits,misses,accuracy,skipped\n";
  for (const auto& [image, r] : report.pointing) {
    os << image << ',' << r.method << ',' << r.target << ',' << format_double(r.energy) << ','
       << format_double(r.threshold) << ',' << r.hits << ',' << r.misses << ',' << format_double(r.accuracy) << ','
       << (r.skipped ? 1 : 0) << '\n';
  }
}

inline void write_pointing_summary_csv(std::ostream& os, const EvalReport& report) {
  os << "method,energy,count,skipped,mean_accuracy\n";
  for (const auto& s : report.pointing_summary()) {
    os << s.method << ',' << format_double(s.energy) << ',' << s.count << ',' << s.skipped << ','
       << format_double(s.mean_accuracy) << '\n';
  }
}

}  // namespace relprop
