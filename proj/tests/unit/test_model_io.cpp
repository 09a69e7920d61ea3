#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "hsinet/io/annotations.hpp"
#include "hsinet/io/config.hpp"
#include "hsinet/io/image.hpp"
#include "hsinet/io/toy_dataset.hpp"
#include "hsinet/io/weights.hpp"

using namespace hsinet;
using namespace hsinet::io;

namespace {

std::string tmp_path(const std::string& name) {
  const char* dir = std::getenv("HSINET_TEST_TMP");
  return (std::filesystem::path(dir ? dir : std::filesystem::temp_directory_path().string()) / name).string();
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.width_multiplier = 0.25;
  cfg.input_size = 64;
  return cfg;
}

}  // namespace

TEST(Weights, EmptyStoreIsHeaderOnly) {
  ParamStore<float> store;
  const auto bytes = serialize_weights(store);
  ASSERT_EQ(bytes.size(), kWeightHeaderBytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HSIW");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 0);
}

TEST(Weights, SingleTwoByTwoTensor) {
  ParamStore<float> store;
  store.add("w", Tensor<float>(Shape{2, 2, 1, 1}, 1.5f));
  const auto bytes = serialize_weights(store);
  // u16 name length + name + dtype + rank + 2 dims
  const std::size_t record_header = 2 + 1 + 1 + 1 + 2 * 4;
  EXPECT_EQ(bytes.size(), kWeightHeaderBytes + record_header + 16);
  const auto recs = parse_weights(bytes);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].dims, (std::vector<std::uint32_t>{2, 2}));
  EXPECT_EQ(recs[0].values, (std::vector<double>(4, 1.5)));
}

TEST(Weights, FullModelRoundTripIsBitIdentical) {
  Model<float> a(small_config(), 1);
  Model<float> b(small_config(), 2);
  const auto bytes = serialize_weights(a.params());
  deserialize_weights(b.params(), bytes);
  EXPECT_EQ(serialize_weights(b.params()), bytes);
  const auto path = tmp_path("roundtrip.hsiw");
  save_weights(b.params(), path);
  EXPECT_EQ(read_file(path), bytes);
  Model<float> c(small_config(), 3);
  load_weights(c.params(), path);
  EXPECT_EQ(serialize_weights(c.params()), bytes);
}

TEST(Weights, DoubleModelsRoundTrip) {
  Model<double> a(small_config(), 1), b(small_config(), 2);
  const auto bytes = serialize_weights(a.params());
  deserialize_weights(b.params(), bytes);
  EXPECT_EQ(serialize_weights(b.params()), bytes);
  Model<float> f(small_config(), 1);
  EXPECT_NE(error_of([&] { deserialize_weights(f.params(), bytes); }).find("f64"), std::string::npos);
}

TEST(Weights, EverySingleHeaderByteCorruptionDetected) {
  Model<float> a(small_config(), 1);
  const auto bytes = serialize_weights(a.params());
  // Global header plus the first record's header.
  const std::size_t name_len = bytes[12] | (bytes[13] << 8);
  const std::size_t rank = bytes[14 + name_len + 1];
  const std::size_t span = 14 + name_len + 2 + 4 * rank;
  for (std::size_t i = 0; i < span; ++i) {
    for (std::uint8_t flip : {0x01, 0x80, 0xFF}) {
      Model<float> b(small_config(), 2);
      const auto before = serialize_weights(b.params());
      auto bad = bytes;
      bad[i] ^= flip;
      EXPECT_THROW(deserialize_weights(b.params(), bad), FormatError) << "byte " << i << " flip " << int(flip);
      EXPECT_EQ(serialize_weights(b.params()), before) << "partial load at byte " << i;
    }
  }
}

TEST(Weights, DistinctDiagnostics) {
  Model<float> a(small_config(), 1);
  const auto bytes = serialize_weights(a.params());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_NE(error_of([&] { parse_weights(bad_magic); }).find("magic"), std::string::npos);
  auto bad_version = bytes;
  bad_version[4] = 7;
  EXPECT_NE(error_of([&] { parse_weights(bad_version); }).find("version 7"), std::string::npos);
  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 3);
  EXPECT_NE(error_of([&] { parse_weights(truncated); }).find("truncated"), std::string::npos);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_NE(error_of([&] { parse_weights(trailing); }).find("trailing"), std::string::npos);
  ParamStore<float> other;
  other.add("nope", Tensor<float>(Shape{1, 1, 1, 1}));
  EXPECT_NE(error_of([&] { deserialize_weights(a.params(), serialize_weights(other)); }).find("unknown tensor name"),
            std::string::npos);
  ParamStore<float> partial;
  partial.add(a.params().entries()[0].name, a.params().entries()[0].var->value);
  EXPECT_NE(error_of([&] { deserialize_weights(a.params(), serialize_weights(partial)); }).find("missing tensor"),
            std::string::npos);
  EXPECT_THROW(load_weights(a.params(), tmp_path("does_not_exist.hsiw")), FormatError);
}

TEST(Letterbox, SquareSourceScalesWithoutPadding) {
  const auto t = LetterboxTransform::make(768, 768, 640);
  EXPECT_DOUBLE_EQ(t.scale, 640.0 / 768.0);
  EXPECT_EQ(t.new_w, 640);
  EXPECT_EQ(t.new_h, 640);
  EXPECT_EQ(t.pad_x, 0);
  EXPECT_EQ(t.pad_y, 0);
}

TEST(Letterbox, WideSourcePadsTopAndBottom) {
  const auto t = LetterboxTransform::make(100, 50, 640);
  EXPECT_DOUBLE_EQ(t.scale, 6.4);
  EXPECT_EQ(t.new_w, 640);
  EXPECT_EQ(t.new_h, 320);
  EXPECT_EQ(t.pad_x, 0);
  EXPECT_EQ(t.pad_y, 160);
  Image img(100, 50, 200);
  const auto x = letterbox<float>(img, 640);
  EXPECT_FLOAT_EQ(x.at(0, 0, 0, 0), 114.0f / 255.0f);
  EXPECT_FLOAT_EQ(x.at(0, 1, 159, 300), 114.0f / 255.0f);
  EXPECT_FLOAT_EQ(x.at(0, 2, 160, 300), 200.0f / 255.0f);
  EXPECT_FLOAT_EQ(x.at(0, 0, 480, 300), 114.0f / 255.0f);
}

TEST(Letterbox, InverseWithinHalfPixel) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> side(1, 2000);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const int w = side(rng), h = side(rng);
    const auto t = LetterboxTransform::make(w, h, 640);
    for (int k = 0; k < 4; ++k) {
      const double x = u(rng) * w, y = u(rng) * h;
      EXPECT_LT(std::abs(t.to_source_x(t.to_input_x(x)) - x), 0.5);
      EXPECT_LT(std::abs(t.to_source_y(t.to_input_y(y)) - y), 0.5);
    }
    // Source corners land inside the canvas.
    EXPECT_GE(t.to_input_x(0), 0);
    EXPECT_LE(t.to_input_x(w), 640 + 1e-9);
    EXPECT_LE(t.to_input_y(h), 640 + 1e-9);
  }
}

TEST(Image, PpmAndPngRoundTrip) {
  Image img(7, 5);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 37);
  const auto ppm = tmp_path("img.ppm"), png = tmp_path("img.png");
  write_ppm(img, ppm);
  write_png(img, png);
  for (const auto& p : {ppm, png}) {
    const auto back = read_image(p);
    EXPECT_EQ(back.width, 7);
    EXPECT_EQ(back.height, 5);
    EXPECT_EQ(back.rgb, img.rgb) << p;
  }
}

TEST(Image, RejectsUnsupportedFiles) {
  const std::string p16 = "P6\n2 2\n65535\n";
  std::vector<std::uint8_t> deep(p16.begin(), p16.end());
  deep.resize(deep.size() + 24);
  EXPECT_THROW(decode_image(deep), FormatError);
  const std::string ascii = "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(decode_image(std::vector<std::uint8_t>(ascii.begin(), ascii.end())), FormatError);
  const std::string short_ppm = "P6\n4 4\n255\nabc";
  EXPECT_THROW(decode_image(std::vector<std::uint8_t>(short_ppm.begin(), short_ppm.end())), FormatError);
  EXPECT_THROW(read_image(tmp_path("missing.png")), FormatError);
}

TEST(Rle, Examples) {
  auto b = rle_to_bbox("1 3", 4, 4);
  ASSERT_TRUE(b);
  EXPECT_EQ(*b, (PixelBox{0, 0, 0, 2}));
  b = rle_to_bbox("1 16", 4, 4);
  ASSERT_TRUE(b);
  EXPECT_EQ(*b, (PixelBox{0, 0, 3, 3}));
  EXPECT_FALSE(rle_to_bbox("", 4, 4));
  EXPECT_FALSE(rle_to_bbox("  \n", 4, 4));
}

TEST(Rle, MultipleRunsAndWrapping) {
  // Column 1 rows 1-2, column 3 row 3.
  EXPECT_EQ(*rle_to_bbox("6 2 16 1", 4, 4), (PixelBox{1, 1, 3, 3}));
  // Starts at row 3 of column 0 and wraps into column 1 rows 0-1.
  EXPECT_EQ(*rle_to_bbox("4 3", 4, 4), (PixelBox{0, 0, 1, 3}));
  // Non-square: 3 rows, 5 columns; run in column 4, row 2.
  EXPECT_EQ(*rle_to_bbox("15 1", 3, 5), (PixelBox{4, 2, 4, 2}));
}

TEST(Rle, MatchesPaintedMask) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + static_cast<int>(rng() % 12), w = 1 + static_cast<int>(rng() % 12);
    std::vector<char> mask(static_cast<std::size_t>(h * w), 0);
    std::string rle;
    long long pos = 1;
    while (true) {
      pos += static_cast<long long>(rng() % 8);
      if (pos > h * w) break;
      const long long len = 1 + static_cast<long long>(rng() % std::min<long long>(6, h * w - pos + 1));
      for (long long k = pos; k < pos + len; ++k) mask[static_cast<std::size_t>(k - 1)] = 1;
      rle += std::to_string(pos) + " " + std::to_string(len) + " ";
      pos += len + 1;
    }
    std::optional<PixelBox> want;
    for (int c = 0; c < w; ++c)
      for (int r = 0; r < h; ++r) {
        if (!mask[static_cast<std::size_t>(c * h + r)]) continue;
        if (!want) want = PixelBox{c, r, c, r};
        want->x0 = std::min(want->x0, c);
        want->x1 = std::max(want->x1, c);
        want->y0 = std::min(want->y0, r);
        want->y1 = std::max(want->y1, r);
      }
    EXPECT_EQ(rle_to_bbox(rle, h, w), want) << rle << " on " << h << "x" << w;
  }
}

TEST(Rle, RejectsMalformed) {
  EXPECT_THROW(rle_to_bbox("1", 4, 4), FormatError);
  EXPECT_THROW(rle_to_bbox("1 17", 4, 4), FormatError);
  EXPECT_THROW(rle_to_bbox("0 2", 4, 4), FormatError);
  EXPECT_THROW(rle_to_bbox("1 x", 4, 4), FormatError);
  EXPECT_THROW(rle_to_bbox("1 2", 0, 4), ValueError);
}

TEST(Annotations, ParseAndErrors) {
  std::istringstream ok("path,class,cx,cy,w,h\n# comment\n\nimg/a.png,0,0.5,0.5,0.1,0.2\nimg/b.png,2,1,0,0.5,0.5\n");
  const auto recs = parse_annotations(ok, "ann.csv");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[1].class_id, 2);
  EXPECT_EQ(recs[0].to_pixels(200, 100).h, 20);

  auto err = [](const std::string& text) {
    std::istringstream in(text);
    return error_of([&] { parse_annotations(in, "ann.csv"); });
  };
  EXPECT_NE(err("a.png,0,0.5,0.5,0.1,0.2\na.png,0,1.5,0.5,0.1,0.2\n").find("ann.csv:2"), std::string::npos);
  EXPECT_NE(err("a.png,0,0.5,-0.1,0.1,0.2\n").find("ann.csv:1"), std::string::npos);
  EXPECT_NE(err("a.png,0,0.5,0.5,0,0.2\n").find("ann.csv:1"), std::string::npos);
  EXPECT_NE(err("a.png,0,0.5,0.5,0.1\n").find("ann.csv:1"), std::string::npos);
  EXPECT_NE(err("\n\na.png,zero,0.5,0.5,0.1,0.2\n").find("ann.csv:3"), std::string::npos);
}

TEST(Annotations, RelativePaths) {
  EXPECT_EQ(resolve_relative("data/ann.csv", "img/a.png"), (std::filesystem::path("data") / "img/a.png").string());
  EXPECT_EQ(resolve_relative("data/ann.csv", "/abs/a.png"), "/abs/a.png");
}

TEST(Annotations, DetectionCsvRoundTrip) {
  const std::vector<DetectionRecord> recs{{"a.png", 0, 0.875, 1.5, 2.25, 30.125, 40.0}, {"b.png", 3, 0.1, 0, 0, 1, 1}};
  std::istringstream in(format_detections(recs));
  const auto back = parse_detections(in);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].path, "a.png");
  EXPECT_EQ(back[0].x2, 30.125);
  EXPECT_EQ(back[1].class_id, 3);
}

TEST(ToyDataset, DeterministicAndInBounds) {
  const auto a = make_toy_dataset(12, 96, 5), b = make_toy_dataset(12, 96, 5), c = make_toy_dataset(12, 96, 6);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.rgb, b[i].image.rgb);
    any_diff = any_diff || a[i].image.rgb != c[i].image.rgb;
    ASSERT_GE(a[i].boxes.size(), 1u);
    ASSERT_LE(a[i].boxes.size(), 3u);
    for (const auto& box : a[i].boxes) {
      EXPECT_GE(box.w, 4);
      EXPECT_LE(box.w, 20);
      EXPECT_GE(box.cx - box.w / 2, 0);
      EXPECT_GE(box.cy - box.h / 2, 0);
      EXPECT_LE(box.cx + box.w / 2, 96);
      EXPECT_LE(box.cy + box.h / 2, 96);
      // Interior pixels are bright, and so the box is exact.
      EXPECT_GE(a[i].image.px(static_cast<int>(box.cx), static_cast<int>(box.cy))[0], 190);
    }
  }
  EXPECT_TRUE(any_diff);
  EXPECT_THROW(make_toy_dataset(1, 100, 0), ValueError);
}

TEST(ToyDataset, AnnotationsRoundTripExactly) {
  const auto set = make_toy_dataset(6, 64, 9);
  const auto recs = toy_annotations(set, "toy_");
  const auto path = tmp_path("toy.csv");
  write_annotations(recs, path);
  EXPECT_EQ(read_annotations(path), recs);
  for (const auto& r : recs) {
    const auto idx = static_cast<std::size_t>(std::stoi(r.path.substr(4)));
    const auto px = r.to_pixels(64, 64);
    bool found = false;
    for (const auto& b : set[idx].boxes) found = found || (b.cx == px.cx && b.cy == px.cy && b.w == px.w && b.h == px.h);
    EXPECT_TRUE(found) << r.path;
  }
}

TEST(Config, JsonRoundTripAndStrictness) {
  ModelConfig cfg = small_config();
  cfg.hsi_order = 2;
  cfg.attention = AttentionKind::SE;
  cfg.p2_branch = false;
  cfg.anchors.groups[1][2] = AnchorWH{11.5, 3};
  const auto back = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(back), config_to_json(cfg));
  EXPECT_EQ(back.attention, AttentionKind::SE);

  auto j = config_to_json(cfg);
  j["widht_multiplier"] = 1.0;
  EXPECT_NE(error_of([&] { config_from_json(j); }).find("widht_multiplier"), std::string::npos);
  j = config_to_json(cfg);
  j["hsi"]["order"] = 7;  // 40 channels at this width
  EXPECT_THROW(config_from_json(j), FormatError);
  j = config_to_json(cfg);
  j["input_size"] = "big";
  EXPECT_THROW(config_from_json(j), FormatError);
  j = config_to_json(cfg);
  j["anchors"].erase(0);
  EXPECT_THROW(config_from_json(j), FormatError);
  EXPECT_THROW(read_config(tmp_path("missing.json")), FormatError);
}
