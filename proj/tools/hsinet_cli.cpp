// hsinet command-line tool.
//
//   hsinet analyze          complexity report for a configuration
//   hsinet infer            detections for one or more images -> CSV
//   hsinet cluster-anchors  1-IoU k-means anchors from an annotation file
//   hsinet eval             precision / recall / mAP against annotations
//   hsinet train-toy        train on the synthetic rectangle set
//   hsinet selftest         quick invariant checks
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hsinet/hsinet.hpp"

using namespace hsinet;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::string config;
  std::optional<double> conf, iou, width;
  std::optional<int> order, layers, size;
  std::uint64_t seed = 0;
};

void add_model_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "model config JSON")->check(CLI::ExistingFile);
  app->add_option("--conf", o.conf, "confidence threshold");
  app->add_option("--iou", o.iou, "NMS / matching IoU threshold");
  app->add_option("--width", o.width, "width multiplier");
  app->add_option("--order", o.order, "gated convolution order n");
  app->add_option("--layers", o.layers, "HSI-Former layers L");
  app->add_option("--size", o.size, "network input size");
  app->add_option("--seed", o.seed, "seed for initialization and sampling");
}

// Config file first, then flags. A bad file is a data error, a bad flag value
// a usage error.
ModelConfig resolve_config(const Overrides& o) {
  ModelConfig cfg;
  if (!o.config.empty()) {
    try {
      cfg = io::read_config(o.config);
    } catch (const FormatError& e) {
      throw DataError(e.what());
    }
  }
  if (o.conf) cfg.conf_threshold = *o.conf;
  if (o.iou) cfg.iou_threshold = *o.iou;
  if (o.width) cfg.width_multiplier = *o.width;
  if (o.order) cfg.hsi_order = *o.order;
  if (o.layers) cfg.hsi_layers = *o.layers;
  if (o.size) cfg.input_size = *o.size;
  try {
    cfg.validate();
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

void print_resolved(const std::string& cmd, const json& settings) {
  json j = settings;
  j["subcommand"] = cmd;
  std::cout << "# resolved " << j.dump() << "\n";
}

// Output is assembled in memory and written once, so a failure leaves no file.
void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text) || !out.flush()) throw DataError("cannot write '" + path + "'");
}

template <class T>
void load_or_init(Model<T>& model, const std::string& weights) {
  if (weights.empty()) return;
  try {
    io::load_weights(model.params(), weights);
  } catch (const FormatError& e) {
    throw DataError(e.what());
  }
}

struct Inference {
  std::vector<io::DetectionRecord> rows;
  std::map<std::string, std::vector<Detection>> per_image;  // source pixels
  std::map<std::string, io::Image> images;
};

Inference run_inference(const Model<float>& model, const std::vector<std::string>& paths, bool keep_images) {
  Inference inf;
  const int size = model.config().input_size;
  for (const auto& path : paths) {
    io::Image img;
    try {
      img = io::read_image(path);
    } catch (const FormatError& e) {
      throw DataError(e.what());
    }
    io::LetterboxTransform t;
    const auto x = io::letterbox<float>(img, size, &t);
    auto& dets = inf.per_image[path];
    const auto found = model.detect(x);
    for (auto d : found[0]) {
      const double x1 = std::clamp(t.to_source_x(d.cx - d.w / 2), 0.0, static_cast<double>(img.width));
      const double y1 = std::clamp(t.to_source_y(d.cy - d.h / 2), 0.0, static_cast<double>(img.height));
      const double x2 = std::clamp(t.to_source_x(d.cx + d.w / 2), 0.0, static_cast<double>(img.width));
      const double y2 = std::clamp(t.to_source_y(d.cy + d.h / 2), 0.0, static_cast<double>(img.height));
      inf.rows.push_back({path, d.class_id, d.score, x1, y1, x2, y2});
      d.cx = (x1 + x2) / 2;
      d.cy = (y1 + y2) / 2;
      d.w = x2 - x1;
      d.h = y2 - y1;
      dets.push_back(d);
    }
    if (keep_images) inf.images.emplace(path, std::move(img));
  }
  return inf;
}

// ---------------------------------------------------------------------------

int cmd_analyze(const Overrides& o, const std::string& output) {
  const auto cfg = resolve_config(o);
  print_resolved("analyze", {{"model", io::config_to_json(cfg)}, {"output", output}});
  Model<float> model(cfg, o.seed);
  const auto text = analyze(model, cfg.input_size).to_text();
  if (!output.empty()) write_text(output, text);
  std::cout << text;
  return 0;
}

int cmd_infer(const Overrides& o, const std::string& weights, const std::vector<std::string>& inputs,
              const std::string& output, const std::string& annotated) {
  const auto cfg = resolve_config(o);
  print_resolved("infer", {{"model", io::config_to_json(cfg)}, {"weights", weights}, {"inputs", inputs},
                           {"output", output}, {"annotated", annotated}});
  if (weights.empty()) std::cerr << "warning: no --weights given, using a randomly initialized model\n";
  Model<float> model(cfg, o.seed);
  load_or_init(model, weights);
  const auto inf = run_inference(model, inputs, !annotated.empty());
  const std::string csv = io::format_detections(inf.rows);
  std::vector<std::pair<std::string, io::Image>> copies;
  const std::uint8_t red[3] = {255, 0, 0};
  for (const auto& [path, img] : inf.images) {
    auto copy = img;
    for (const auto& d : inf.per_image.at(path)) draw_box(copy, d.cx - d.w / 2, d.cy - d.h / 2, d.cx + d.w / 2, d.cy + d.h / 2, red);
    copies.emplace_back((fs::path(annotated) / (fs::path(path).stem().string() + ".det.png")).string(), std::move(copy));
  }
  if (!annotated.empty()) fs::create_directories(annotated);
  write_text(output, csv);
  for (const auto& [path, img] : copies) io::write_png(img, path);
  std::cout << inf.rows.size() << " detections in " << inputs.size() << " image(s) -> " << output << "\n";
  return 0;
}

std::vector<io::AnnotationRecord> read_annotations_or_fail(const std::string& path) {
  try {
    return io::read_annotations(path);
  } catch (const FormatError& e) {
    throw DataError(e.what());
  }
}

int cmd_cluster(const Overrides& o, const std::string& input, int k, int toy_images, const std::string& output) {
  const int size = o.size.value_or(640);
  print_resolved("cluster-anchors", {{"input", input.empty() ? "<synthetic>" : input},
                                     {"k", k},
                                     {"size", size},
                                     {"seed", o.seed},
                                     {"output", output}});
  if (k < 1) throw UsageError("--k must be >= 1");
  std::vector<BoxWH> boxes;
  if (input.empty()) {
    for (const auto& s : io::make_toy_dataset(toy_images, size, o.seed))
      for (const auto& b : s.boxes) boxes.push_back({b.w, b.h});
  } else {
    // Normalized sizes scaled to the network input, as after a square resize.
    for (const auto& r : read_annotations_or_fail(input)) boxes.push_back({r.w * size, r.h * size});
  }
  KMeansOptions opt;
  opt.k = k;
  opt.seed = o.seed;
  ClusterResult r;
  try {
    r = kmeans_1iou(boxes, opt);
  } catch (const ValueError& e) {
    throw DataError(e.what());
  }
  std::string text;
  if (k == 12) {
    text = r.anchor_set().to_text();
  } else {
    for (const auto& c : r.centers) text += std::to_string(std::lround(c.w)) + "," + std::to_string(std::lround(c.h)) + "\n";
  }
  if (!output.empty()) write_text(output, text);
  std::cout << "# " << boxes.size() << " boxes, " << r.iterations << " iterations, mean 1-IoU " << r.mean_distance << "\n";
  std::cout << text;
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& weights, const std::string& input, const std::string& detections,
             const std::string& output) {
  const auto cfg = resolve_config(o);
  print_resolved("eval", {{"model", io::config_to_json(cfg)}, {"annotations", input}, {"detections", detections},
                          {"weights", weights}, {"output", output}});
  const auto anns = read_annotations_or_fail(input);
  // Ground truth grouped by resolved image path, in first-seen order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<GtBox>> gts;
  std::map<std::string, std::string> raw_path;
  for (const auto& a : anns) {
    const auto p = io::resolve_relative(input, a.path);
    if (!gts.count(p)) {
      order.push_back(p);
      gts[p];
      raw_path[a.path] = p;
    }
  }
  std::map<std::string, std::pair<int, int>> dims;
  for (const auto& p : order) {
    try {
      const auto img = io::read_image(p);
      dims[p] = {img.width, img.height};
    } catch (const FormatError& e) {
      throw DataError(e.what());
    }
  }
  for (const auto& a : anns) {
    const auto p = io::resolve_relative(input, a.path);
    gts[p].push_back(a.to_pixels(dims[p].first, dims[p].second));
  }
  std::map<std::string, std::vector<Detection>> dets;
  if (!detections.empty()) {
    std::ifstream in(detections);
    if (!in) throw DataError("cannot open detections '" + detections + "'");
    std::vector<io::DetectionRecord> rows;
    try {
      rows = io::parse_detections(in, detections);
    } catch (const FormatError& e) {
      throw DataError(e.what());
    }
    for (const auto& r : rows) {
      const auto it = raw_path.find(r.path);
      const std::string p = it != raw_path.end() ? it->second : r.path;
      Detection d;
      d.cx = (r.x1 + r.x2) / 2;
      d.cy = (r.y1 + r.y2) / 2;
      d.w = r.x2 - r.x1;
      d.h = r.y2 - r.y1;
      d.score = r.score;
      d.class_id = r.class_id;
      dets[p].push_back(d);
    }
  } else {
    if (weights.empty()) std::cerr << "warning: no --weights given, evaluating a randomly initialized model\n";
    Model<float> model(cfg, o.seed);
    load_or_init(model, weights);
    dets = run_inference(model, order, false).per_image;
  }
  std::vector<ImageResult> results;
  for (const auto& p : order) {
    auto d = dets[p];
    std::sort(d.begin(), d.end(), detection_before);
    results.push_back({d, gts[p]});
  }
  // --iou is the matching threshold here; mAP@0.5 unless given.
  const auto text = evaluate(results, o.iou.value_or(0.5), cfg.conf_threshold).to_text();
  if (!output.empty()) write_text(output, text);
  std::cout << text;
  return 0;
}

struct TrainFlags {
  std::string recipe = "sgd";
  std::optional<int> epochs, images;
  std::optional<double> lr;
  std::string output, log, dump_data;
};

int cmd_train_toy(const Overrides& o, const TrainFlags& f) {
  ToyRecipe recipe;
  if (f.recipe == "overfit") {
    recipe = toy_overfit_recipe();
  } else if (f.recipe == "sgd") {
    // Optimizer settings of the full-scale schedule, at toy size.
    recipe.model.width_multiplier = 0.25;
  } else {
    throw UsageError("--recipe must be 'sgd' or 'overfit'");
  }
  if (!o.config.empty()) {
    try {
      recipe.model = io::read_config(o.config);
    } catch (const FormatError& e) {
      throw DataError(e.what());
    }
  }
  if (o.conf) recipe.model.conf_threshold = *o.conf;
  if (o.iou) recipe.model.iou_threshold = *o.iou;
  if (o.width) recipe.model.width_multiplier = *o.width;
  if (o.order) recipe.model.hsi_order = *o.order;
  if (o.layers) recipe.model.hsi_layers = *o.layers;
  if (o.size) recipe.image_size = *o.size;
  recipe.model.input_size = recipe.image_size;
  if (f.epochs) recipe.train.epochs = *f.epochs;
  if (f.images) recipe.images = *f.images;
  if (f.lr) recipe.train.lr = *f.lr;
  recipe.data_seed += o.seed;
  recipe.model_seed += o.seed;
  recipe.train.seed += o.seed;
  try {
    recipe.model.validate();
    recipe.train.validate();
    if (recipe.images < 1) throw ValueError("--images must be >= 1");
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  const auto& t = recipe.train;
  print_resolved("train-toy", {{"model", io::config_to_json(recipe.model)},
                               {"recipe", f.recipe},
                               {"images", recipe.images},
                               {"image_size", recipe.image_size},
                               {"cluster_anchors", recipe.cluster_anchors},
                               {"optimizer", t.adam ? "adam" : "sgd"},
                               {"lr", t.lr},
                               {"final_lr_fraction", t.final_lr_fraction},
                               {"momentum", t.momentum},
                               {"weight_decay", t.weight_decay},
                               {"batch", t.batch},
                               {"epochs", t.epochs},
                               {"warmup_epochs", t.warmup_epochs},
                               {"shuffle", t.shuffle},
                               {"seed", o.seed},
                               {"output", f.output},
                               {"log", f.log},
                               {"dump_data", f.dump_data}});
  if (!f.dump_data.empty()) {
    // The training images and their annotations, for infer / eval.
    const auto set = io::make_toy_dataset(recipe.images, recipe.image_size, recipe.data_seed);
    fs::create_directories(f.dump_data);
    for (std::size_t i = 0; i < set.size(); ++i) {
      io::write_ppm(set[i].image, (fs::path(f.dump_data) / ("toy" + std::to_string(i) + ".ppm")).string());
    }
    io::write_annotations(io::toy_annotations(set, "toy"), (fs::path(f.dump_data) / "annotations.csv").string());
  }
  std::string log = "epoch,lr,loss,box,obj,cls\n";
  std::vector<std::uint8_t> weights;
  const auto r = run_toy_overfit<float>(
      recipe,
      [&](const EpochLog& l) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%d,%.6g,%.6f,%.6f,%.6f,%.6f\n", l.epoch, l.lr, l.loss, l.box, l.obj, l.cls);
        log += buf;
        std::cout << "epoch " << buf;
        std::cout.flush();
      },
      [&](const Model<float>& m) { weights = io::serialize_weights(m.params()); });
  if (!f.output.empty()) io::write_file(f.output, weights);
  if (!f.log.empty()) write_text(f.log, log);
  std::cout << "anchors\n" << r.anchors.to_text() << r.report.to_text();
  std::cout << "loss rises after warmup: " << r.rises_after_warmup << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_selftest() {
  print_resolved("selftest", json::object());
  int failures = 0;
  auto check = [&](bool ok, const std::string& what) {
    std::cout << (ok ? "PASS " : "FAIL ") << what << "\n";
    if (!ok) ++failures;
  };
  {
    bool ok = true;
    const std::pair<int, int> cases[] = {{2, 1}, {16, 3}, {40, 3}, {112, 3}, {160, 5}, {960, 5}};
    for (const auto& [c, k] : cases) ok = ok && psi_kernel_size(c) == k;
    check(ok, "attention kernel sizes");
  }
  {
    bool ok = true;
    for (int n = 1; n <= 4; ++n)
      for (int c = 1 << (n - 1); c <= 512; c += 1 << (n - 1)) ok = ok && channel_schedule(c, n).total() == 2 * c;
    check(ok, "gated convolution widths sum to 2C");
  }
  {
    GhostModuleSpec s{64, 128, 1};
    s.with_bn = false;
    check(ghost_ratios(s).flops == Rational::make(73, 128), "ghost ratio 73/128 at C=64, s=1");
  }
  {
    ParamStore<float> store;
    Backbone<float> bb(store, BackboneSpec{});
    Graph<float> g(Graph<float>::Options{false, false, true});
    auto taps = bb.forward(g, g.input(Tensor<float>(Shape{1, 3, 640, 640})));
    check(taps.p2->value.shape() == (Shape{1, 24, 160, 160}) && taps.p5->value.shape() == (Shape{1, 160, 20, 20}),
          "backbone taps at 640");
  }
  {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 100), sz(5, 30), sc(0, 1);
    bool ok = true;
    for (int t = 0; t < 50; ++t) {
      std::vector<Detection> d(30);
      for (auto& x : d) {
        x.cx = u(rng);
        x.cy = u(rng);
        x.w = sz(rng);
        x.h = sz(rng);
        x.score = sc(rng);
      }
      const auto kept = nms(d, 0.45);
      for (std::size_t i = 0; i < kept.size(); ++i)
        for (std::size_t j = i + 1; j < kept.size(); ++j) ok = ok && box_iou(kept[i], kept[j]) < 0.45;
      // Every suppressed box overlaps a survivor that ranks ahead of it.
      for (const auto& x : d) {
        bool covered = false;
        for (const auto& k : kept) covered = covered || (!detection_before(x, k) && box_iou(x, k) >= 0.45);
        ok = ok && covered;
      }
    }
    check(ok, "NMS survivors disjoint and covering");
  }
  {
    std::vector<ImageResult> set(1);
    set[0].gts = {GtBox{0, 20, 20, 10, 10}, GtBox{0, 60, 60, 12, 8}};
    Detection d;
    d.cx = d.cy = 20;
    d.w = d.h = 10;
    d.score = 0.9;
    set[0].dets = {d};
    check(evaluate(set, 0.5, 0.25).map == 0.5, "AP 0.5 for one of two");
  }
  {
    ModelConfig cfg;
    cfg.width_multiplier = 0.25;
    cfg.input_size = 64;
    Model<float> a(cfg, 1), b(cfg, 2);
    const auto bytes = io::serialize_weights(a.params());
    io::deserialize_weights(b.params(), bytes);
    bool ok = io::serialize_weights(b.params()) == bytes;
    auto bad = bytes;
    bad[5] ^= 0x10;
    try {
      io::deserialize_weights(b.params(), bad);
      ok = false;
    } catch (const FormatError&) {
    }
    check(ok, "weight round-trip and header corruption");
  }
  std::cout << (failures ? "selftest failed\n" : "selftest passed\n");
  return failures ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hsinet: lightweight ship detector toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all help");

  Overrides o;
  std::string weights, output, annotated, input, detections;
  std::vector<std::string> inputs;
  int k = 12, toy_images = 200;
  TrainFlags tf;

  auto* analyze_cmd = app.add_subcommand("analyze", "parameter and FLOP report");
  add_model_flags(analyze_cmd, o);
  analyze_cmd->add_option("--output", output, "also write the report here");

  auto* infer_cmd = app.add_subcommand("infer", "detect ships in images");
  add_model_flags(infer_cmd, o);
  infer_cmd->add_option("--weights", weights, "weight container");
  infer_cmd->add_option("--input", inputs, "PPM or PNG image(s)")->required();
  infer_cmd->add_option("--output", output, "detection CSV")->required();
  infer_cmd->add_option("--annotated", annotated, "directory for copies with boxes drawn");

  auto* cluster_cmd = app.add_subcommand("cluster-anchors", "1-IoU k-means anchors");
  cluster_cmd->add_option("--input", input, "annotation CSV (default: synthetic rectangles)");
  cluster_cmd->add_option("--k", k, "number of anchors");
  cluster_cmd->add_option("--size", o.size, "network input size the sizes are scaled to");
  cluster_cmd->add_option("--seed", o.seed, "k-means++ seed");
  cluster_cmd->add_option("--toy-images", toy_images, "synthetic images when no --input is given");
  cluster_cmd->add_option("--output", output, "also write the anchors here");

  auto* eval_cmd = app.add_subcommand("eval", "precision, recall and mAP");
  add_model_flags(eval_cmd, o);
  eval_cmd->add_option("--input", input, "annotation CSV")->required();
  eval_cmd->add_option("--detections", detections, "detection CSV (default: run the model)");
  eval_cmd->add_option("--weights", weights, "weight container when running the model");
  eval_cmd->add_option("--output", output, "also write the report here");

  auto* train_cmd = app.add_subcommand("train-toy", "train on synthetic rectangles");
  add_model_flags(train_cmd, o);
  train_cmd->add_option("--recipe", tf.recipe, "sgd (plain SGD at 0.01) or overfit");
  train_cmd->add_option("--epochs", tf.epochs, "epochs");
  train_cmd->add_option("--images", tf.images, "synthetic training images");
  train_cmd->add_option("--lr", tf.lr, "peak learning rate");
  train_cmd->add_option("--output", tf.output, "weights file");
  train_cmd->add_option("--log", tf.log, "per-epoch loss CSV");
  train_cmd->add_option("--dump-data", tf.dump_data, "also write the training images and annotations here");

  auto* selftest_cmd = app.add_subcommand("selftest", "quick invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*analyze_cmd) return cmd_analyze(o, output);
    if (*infer_cmd) return cmd_infer(o, weights, inputs, output, annotated);
    if (*cluster_cmd) return cmd_cluster(o, input, k, toy_images, output);
    if (*eval_cmd) return cmd_eval(o, weights, input, detections, output);
    if (*train_cmd) return cmd_train_toy(o, tf);
    if (*selftest_cmd) return cmd_selftest();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
