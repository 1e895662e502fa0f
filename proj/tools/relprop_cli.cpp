// relprop: predictions, relevance heatmaps and the masking / pointing
// evaluations from the command line.
//
// Exit codes: 0 success, 1 runtime or data error, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "relprop/relprop.hpp"

namespace fs = std::filesystem;
using namespace relprop;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ImageEntry {
  std::string id;  // path exactly as written in the list
  std::string path;
  std::optional<std::size_t> label;
};

std::vector<ImageEntry> read_image_list(const std::string& list_path) {
  std::ifstream in(list_path);
  if (!in) throw std::runtime_error("cannot open image list '" + list_path + "'");
  const fs::path base = fs::path(list_path).parent_path();
  std::vector<ImageEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    ImageEntry e;
    if (!(ls >> e.id)) continue;
    e.path = fs::path(e.id).is_absolute() ? e.id : (base / e.id).string();
    std::string label, extra;
    if (ls >> label) {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(label, &used);
        if (used != label.size() || v < 0) throw std::invalid_argument(label);
        e.label = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw std::runtime_error(list_path + ":" + std::to_string(line_no) + ": bad label '" + label + "'");
      }
    }
    if (ls >> extra) throw std::runtime_error(list_path + ":" + std::to_string(line_no) + ": trailing text");
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw std::runtime_error("image list '" + list_path + "' is empty");
  return entries;
}

std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RELPROP_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw UsageError("RELPROP_THREADS must be a positive integer");
    n = std::min(n, static_cast<std::size_t>(v));
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

// Runs fn(i) for every i; results land in per-index slots so the caller
// writes them in list order. The first failure (by index) is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, Fn fn) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = worker_count(count);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<EvalMethod> parse_methods(const std::vector<std::string>& names, bool& needs_seed) {
  std::vector<EvalMethod> out;
  needs_seed = false;
  for (const auto& n : names) {
    EvalMethod m;
    try {
      m = EvalMethod::parse(n);
    } catch (const std::invalid_argument&) {
      throw UsageError("unknown method '" + n + "' (expected lrp, clrp, sglrp or random)");
    }
    if (std::find(out.begin(), out.end(), m) != out.end()) throw UsageError("method '" + n + "' given twice");
    needs_seed |= m.is_random();
    out.push_back(m);
  }
  if (out.empty()) throw UsageError("no methods given");
  return out;
}

void ensure_directory(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

template <typename Writer>
void write_report(const std::string& path, Writer writer, const EvalReport& report) {
  std::ostringstream os;
  writer(os, report);
  write_file(path, os.str());
}

std::string encode_raw_map(const Tensor& pixels) {
  std::string out;
  auto put = [&](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  static_assert(std::endian::native == std::endian::little, "raw dump assumes a little-endian host");
  const auto h = static_cast<std::uint32_t>(pixels.dim(0)), w = static_cast<std::uint32_t>(pixels.dim(1));
  put(&h, 4);
  put(&w, 4);
  for (double v : pixels.values()) put(&v, 8);
  return out;
}

struct ModelArgs {
  std::string manifest;
  std::string weights;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--model", manifest, "Model manifest")->required();
    cmd->add_option("--weights", weights, "Little-endian float32 weight blob")->required();
  }
  NetworkModel load() const { return load_model(manifest, weights); }
};

// ---------------------------------------------------------------------------

int cmd_predict(const ModelArgs& margs, const std::string& image_path, std::size_t k) {
  const NetworkModel model = margs.load();
  const Tensor input = to_input_tensor(read_ppm(image_path), model.input_shape);
  const ForwardTrace trace = forward(model, input, Preprocess::apply);
  if (k < 1 || k > trace.num_classes()) {
    throw UsageError("-k must lie in [1," + std::to_string(trace.num_classes()) + "]");
  }
  std::size_t rank = 1;
  for (const auto& s : predict_topk(trace, k)) std::printf("%zu %zu %.6f\n", rank++, s.index, s.probability);
  return 0;
}

int cmd_explain(const ModelArgs& margs, const std::string& image_path, const std::string& method_name,
                std::optional<std::size_t> target, const std::string& out) {
  const Method method = parse_method(method_name);
  const NetworkModel model = margs.load();
  const Tensor input = to_input_tensor(read_ppm(image_path), model.input_shape);
  const ForwardTrace trace = forward(model, input, Preprocess::apply);
  const std::size_t t = target ? *target : predict_topk(trace, 1)[0].index;
  if (t >= trace.num_classes()) {
    throw UsageError("--target " + std::to_string(t) + " outside [0," + std::to_string(trace.num_classes()) + ")");
  }
  const RelevanceMap map = explain(model, trace, t, method);
  const std::string heat = [&] {
    const GrayImage g = render_heatmap(map);
    std::ostringstream os;
    os << "P5\n" << g.width << ' ' << g.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(g.samples.data()), static_cast<std::streamsize>(g.samples.size()));
    return os.str();
  }();
  if (const fs::path parent = fs::path(out).parent_path(); !parent.empty()) ensure_directory(parent.string());
  write_file(out + ".pgm", heat);
  write_file(out + ".f32", encode_raw_map(map.pixels));
  return 0;
}

struct EvalArgs {
  std::string images;
  std::vector<std::string> methods{"lrp", "clrp", "sglrp"};
  std::optional<std::uint64_t> seed;
  std::string out;
};

std::vector<double> energies_or_default(const std::vector<double>& e) {
  for (double v : e) {
    if (!(v > 0.0 && v <= 1.0)) throw UsageError("energies must lie in (0,1]");
  }
  return e.empty() ? default_energy_levels() : e;
}

int cmd_mask_eval(const ModelArgs& margs, const EvalArgs& args, std::vector<std::size_t> patches,
                  const std::string& target_mode) {
  bool needs_seed = false;
  const auto methods = parse_methods(args.methods, needs_seed);
  if (needs_seed && !args.seed) throw UsageError("--seed is required when the random baseline is requested");
  if (patches.empty()) patches = default_patch_sizes();
  for (std::size_t p : patches) {
    if (p < 1 || p % 2 == 0) throw UsageError("patch sizes must be odd and positive, got " + std::to_string(p));
  }
  std::optional<std::size_t> explicit_target;
  if (target_mode != "label" && target_mode != "second") {
    try {
      std::size_t used = 0;
      explicit_target = std::stoul(target_mode, &used);
      if (used != target_mode.size()) throw std::invalid_argument(target_mode);
    } catch (const std::exception&) {
      throw UsageError("--target must be 'label', 'second' or a class index");
    }
  }

  const NetworkModel model = margs.load();
  if (explicit_target && *explicit_target >= model.num_classes()) {
    throw UsageError("--target " + target_mode + " outside [0," + std::to_string(model.num_classes()) + ")");
  }
  const auto entries = read_image_list(args.images);
  std::vector<std::vector<MaskingResult>> per_image(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const auto& e = entries[i];
    TargetSelector selector = SecondProbable{};
    if (explicit_target) {
      selector = GroundTruth{*explicit_target};
    } else if (target_mode == "label") {
      if (!e.label) throw std::runtime_error(e.id + ": no label in image list (use --target second)");
      selector = GroundTruth{*e.label};
    }
    auto rng = make_rng(args.seed.value_or(0), i);
    per_image[i] = patch_masking_eval(model, to_input_tensor(read_ppm(e.path), model.input_shape), selector, methods,
                                      patches, rng);
  });

  EvalReport report;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (auto& r : per_image[i]) report.masking.push_back({entries[i].id, std::move(r)});
  }
  ensure_directory(args.out);
  const fs::path dir(args.out);
  write_report((dir / "masking.csv").string(), write_masking_csv, report);
  write_report((dir / "masking_summary.csv").string(), write_masking_summary_csv, report);
  nlohmann::ordered_json meta;
  meta["patch_sizes"] = patches;
  meta["methods"] = args.methods;
  meta["target"] = target_mode;
  meta["seed"] = args.seed ? nlohmann::ordered_json(*args.seed) : nlohmann::ordered_json(nullptr);
  meta["images"] = entries.size();
  write_file((dir / "masking_meta.json").string(), meta.dump(2) + "\n");
  return 0;
}

int cmd_pointing(const ModelArgs& margs, const EvalArgs& args, const std::string& boxes_path,
                 const std::vector<double>& energy_args) {
  bool needs_seed = false;
  const auto methods = parse_methods(args.methods, needs_seed);
  if (needs_seed && !args.seed) throw UsageError("--seed is required when the random baseline is requested");
  const auto energies = energies_or_default(energy_args);

  const NetworkModel model = margs.load();
  const auto entries = read_image_list(args.images);
  std::map<std::string, std::vector<BoundingBox>> boxes;
  {
    std::ifstream in(boxes_path);
    if (!in) throw std::runtime_error("cannot open box file '" + boxes_path + "'");
    boxes = read_bounding_boxes(in);
  }
  const std::size_t in_h = model.input_shape[0], in_w = model.input_shape[1];

  struct ImageOutcome {
    std::vector<PointingResult> rows;
    nlohmann::ordered_json adjustments = nlohmann::ordered_json::array();
  };
  std::vector<ImageOutcome> per_image(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const auto& e = entries[i];
    auto& outcome = per_image[i];
    const auto it = boxes.find(e.id);
    if (it == boxes.end()) return;
    const RgbImage img = read_ppm(e.path);

    // Boxes are given in source pixels; move them into model-input pixels.
    std::map<std::size_t, std::vector<BoundingBox>> by_class;
    for (const BoundingBox& b : it->second) {
      const auto clipped = clip_box(b, img.width, img.height);
      std::optional<std::array<std::size_t, 4>> mapped;
      if (clipped) {
        mapped = map_box_to_input(clipped->x_min, clipped->y_min, clipped->x_max, clipped->y_max, img.width,
                                  img.height, in_w, in_h);
      }
      const BoundingBox in_box = mapped ? BoundingBox{b.class_id, (*mapped)[0], (*mapped)[1], (*mapped)[2], (*mapped)[3]}
                                        : BoundingBox{};
      const bool unchanged = mapped && in_box == b;
      if (!unchanged) {
        outcome.adjustments.push_back({{"image", e.id},
                                       {"class", b.class_id},
                                       {"box", {b.x_min, b.y_min, b.x_max, b.y_max}},
                                       {"input_box", mapped ? nlohmann::ordered_json(*mapped) : nullptr}});
      }
      if (mapped) by_class[b.class_id].push_back(in_box);
    }
    if (by_class.empty()) return;

    const ForwardTrace trace = forward(model, to_input_tensor(img, model.input_shape), Preprocess::apply);
    auto rng = make_rng(args.seed.value_or(0), i);
    for (const auto& [cls, union_boxes] : by_class) {
      if (cls >= trace.num_classes()) {
        throw std::runtime_error(e.id + ": box class " + std::to_string(cls) + " outside [0," +
                                 std::to_string(trace.num_classes()) + ")");
      }
      for (const EvalMethod& m : methods) {
        const RelevanceMap map =
            m.is_random() ? random_relevance_map(in_h, in_w, cls, rng) : explain(model, trace, cls, *m.method);
        for (auto& r : pointing_game(map, union_boxes, energies, m.name())) outcome.rows.push_back(std::move(r));
      }
    }
  });

  EvalReport report;
  nlohmann::ordered_json adjustments = nlohmann::ordered_json::array();
  std::vector<std::string> without_boxes;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!boxes.count(entries[i].id)) without_boxes.push_back(entries[i].id);
    for (auto& r : per_image[i].rows) report.pointing.push_back({entries[i].id, std::move(r)});
    for (auto& a : per_image[i].adjustments) adjustments.push_back(std::move(a));
  }
  ensure_directory(args.out);
  const fs::path dir(args.out);
  write_report((dir / "pointing.csv").string(), write_pointing_csv, report);
  write_report((dir / "pointing_summary.csv").string(), write_pointing_summary_csv, report);
  nlohmann::ordered_json meta;
  meta["energies"] = energies;
  meta["energy_grid"] = energy_args.empty() ? "default: 0.1 to 1.0 in steps of 0.1" : "user supplied";
  meta["methods"] = args.methods;
  meta["seed"] = args.seed ? nlohmann::ordered_json(*args.seed) : nlohmann::ordered_json(nullptr);
  meta["images"] = entries.size();
  meta["images_without_boxes"] = without_boxes;
  meta["box_adjustments"] = adjustments;
  write_file((dir / "pointing_meta.json").string(), meta.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relevance maps (LRP, CLRP, SGLRP) and their evaluation"};
  app.require_subcommand(1);

  ModelArgs margs;
  std::string image;
  std::size_t k = 5;
  std::string method = "sglrp";
  std::optional<std::size_t> target;
  std::string out;
  EvalArgs eval_args;
  std::vector<std::size_t> patches;
  std::string target_mode = "label";
  std::string boxes_path;
  std::vector<double> energies;

  auto* predict = app.add_subcommand("predict", "Top-k classes for one image");
  margs.add_to(predict);
  predict->add_option("--image", image, "P6 image")->required();
  predict->add_option("-k", k, "Number of rows")->capture_default_str();

  auto* explain_cmd = app.add_subcommand("explain", "Relevance heatmap for one image");
  margs.add_to(explain_cmd);
  explain_cmd->add_option("--image", image, "P6 image")->required();
  explain_cmd->add_option("--method", method, "lrp, clrp or sglrp")
      ->check(CLI::IsMember({"lrp", "clrp", "sglrp"}))
      ->capture_default_str();
  explain_cmd->add_option("--target", target, "Target class (default: top prediction)");
  explain_cmd->add_option("--out", out, "Output prefix; writes <out>.pgm and <out>.f32")->required();

  auto add_eval_options = [&](CLI::App* cmd) {
    margs.add_to(cmd);
    cmd->add_option("--images", eval_args.images, "Image list, one 'path [label]' per line")->required();
    cmd->add_option("--methods", eval_args.methods, "Comma-separated: lrp, clrp, sglrp, random")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--seed", eval_args.seed, "Seed for the random baseline");
    cmd->add_option("--out", eval_args.out, "Output directory")->required();
  };
  auto* mask = app.add_subcommand("mask-eval", "Maximal patch masking over an image list");
  add_eval_options(mask);
  mask->add_option("--patches", patches, "Comma-separated odd patch sizes (default 1,3,5,7,9)")->delimiter(',');
  mask->add_option("--target", target_mode, "'label', 'second' or a class index")->capture_default_str();

  auto* pointing = app.add_subcommand("pointing", "Pointing game over an image list with boxes");
  add_eval_options(pointing);
  pointing->add_option("--boxes", boxes_path, "Box file, 'image class x_min y_min x_max y_max' per line")
      ->required();
  pointing->add_option("--energies", energies, "Comma-separated energies in (0,1] (default 0.1..1.0)")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*predict) return cmd_predict(margs, image, k);
    if (*explain_cmd) return cmd_explain(margs, image, method, target, out);
    if (*mask) return cmd_mask_eval(margs, eval_args, patches, target_mode);
    return cmd_pointing(margs, eval_args, boxes_path, energies);
  } catch (const UsageError& e) {
    std::cerr << "relprop: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "relprop: " << e.what() << "\n";
    return 1;
  }
}
