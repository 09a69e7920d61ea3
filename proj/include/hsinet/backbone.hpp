#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hsinet/ghost.hpp"
#include "hsinet/hsi_former.hpp"

namespace hsinet {

struct StageRow {
  enum class Kind { StemConv, Gbneck };
  Kind kind = Kind::Gbneck;
  int stage = 0;   // 0 for the stem, 1..5 otherwise
  int exp = 0;     // unused for the stem
  int out = 16;
  bool lhab = false;
  int stride = 1;
  int dw_kernel = 3;
};

// LHAB-GhostNet at multiplier 1.0: stem plus 16 bottlenecks. Depthwise kernel
// sizes follow the GhostNet lineage (5 on the 40- and 160-channel stages).
inline std::vector<StageRow> lhab_ghostnet_rows() {
  using K = StageRow::Kind;
  return {
      {K::StemConv, 0, 0, 16, false, 2, 3},
      {K::Gbneck, 1, 16, 16, false, 1, 3},
      {K::Gbneck, 1, 48, 24, false, 2, 3},
      {K::Gbneck, 2, 72, 24, false, 1, 3},
      {K::Gbneck, 2, 72, 40, true, 2, 5},
      {K::Gbneck, 3, 120, 40, true, 1, 5},
      {K::Gbneck, 3, 240, 80, false, 2, 3},
      {K::Gbneck, 4, 184, 80, false, 1, 3},
      {K::Gbneck, 4, 184, 80, false, 1, 3},
      {K::Gbneck, 4, 184, 80, false, 1, 3},
      {K::Gbneck, 4, 480, 112, true, 1, 3},
      {K::Gbneck, 4, 672, 112, true, 1, 3},
      {K::Gbneck, 4, 672, 160, true, 2, 5},
      {K::Gbneck, 5, 960, 160, false, 1, 5},
      {K::Gbneck, 5, 960, 160, true, 1, 5},
      {K::Gbneck, 5, 960, 160, false, 1, 5},
      {K::Gbneck, 5, 960, 160, true, 1, 5},
  };
}

// Nearest multiple of 4 (halves away from zero), at least 4.
inline int scale_channels(int channels, double multiplier) {
  if (multiplier <= 0) throw ValueError("width multiplier must be positive");
  const long v = std::lround(channels * multiplier / 4.0) * 4;
  return static_cast<int>(std::max(4L, v));
}

struct BackboneSpec {
  std::vector<StageRow> rows = lhab_ghostnet_rows();
  double width_multiplier = 1.0;
  int input_size = 640;
  AttentionKind attention = AttentionKind::Lhab;
  bool use_hsi = true;
  int hsi_layers = 1;
  int hsi_order = 3;
  double mlp_ratio = 4.0;

  int channels(int base) const { return scale_channels(base, width_multiplier); }
};

template <class T>
struct FeatureTaps {
  Var<T> p2;  // stride 4, end of stage 1
  Var<T> p3;  // stride 8, end of stage 2
  Var<T> p4;  // stride 16, end of stage 3
  Var<T> p5;  // stride 32, after the HSI-Former
};

template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamStore<T>& store, const BackboneSpec& spec) : spec_(spec) {
    if (spec.width_multiplier <= 0) throw ValueError("backbone: width multiplier must be positive");
    if (spec.rows.empty() || spec.rows.front().kind != StageRow::Kind::StemConv) {
      throw ValueError("backbone: first row must be the stem convolution");
    }
    int in = 3;
    for (std::size_t i = 0; i < spec.rows.size(); ++i) {
      const StageRow& r = spec.rows[i];
      const int out = spec.channels(r.out);
      const std::string name = "backbone.row" + std::to_string(i);
      if (r.kind == StageRow::Kind::StemConv) {
        stem_ = ConvBnAct<T>(store, name, Conv2dSpec::square(in, out, 3, r.stride), true, Activation::HSwish);
      } else {
        GbneckSpec gs;
        gs.in_channels = in;
        gs.exp_channels = spec.channels(r.exp);
        gs.out_channels = out;
        gs.stride = r.stride;
        gs.use_lhab = r.lhab && spec.attention != AttentionKind::None;
        gs.attention = spec.attention;
        gs.dw_kernel = r.dw_kernel;
        blocks_.push_back(Gbneck<T>(store, name, gs));
      }
      in = out;
    }
    // Taps sit on the last row of stages 1-3 and the final row.
    for (std::size_t i = 1; i < spec.rows.size(); ++i) {
      const bool last_of_stage = i + 1 == spec.rows.size() || spec.rows[i + 1].stage != spec.rows[i].stage;
      if (last_of_stage && spec.rows[i].stage >= 1 && spec.rows[i].stage <= 3) tap_rows_.push_back(i);
    }
    if (tap_rows_.size() != 3) throw ValueError("backbone: rows must contain stages 1, 2 and 3");
    tap_channels_ = {spec.channels(spec.rows[tap_rows_[0]].out), spec.channels(spec.rows[tap_rows_[1]].out),
                     spec.channels(spec.rows[tap_rows_[2]].out), in};
    if (spec.use_hsi) {
      hsi_ = HsiFormer<T>(store, "backbone.hsi", HsiFormerSpec{in, spec.hsi_layers, spec.hsi_order, spec.mlp_ratio});
    }
  }

  /// Runs every row; `row_shapes`, when given, receives each row's output shape.
  FeatureTaps<T> forward(Graph<T>& g, const Var<T>& x, std::vector<Shape>* row_shapes = nullptr) const {
    const Shape& s = x->value.shape();
    if (s.c != 3) throw ShapeError("backbone: expected 3 input channels, got " + std::to_string(s.c));
    if (s.h % 32 != 0 || s.w % 32 != 0) {
      throw ShapeError("backbone: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                       " is not divisible by 32");
    }
    FeatureTaps<T> taps;
    Var<T> y = stem_.forward(g, x);
    if (row_shapes) row_shapes->push_back(y->value.shape());
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      y = blocks_[i].forward(g, y);
      if (row_shapes) row_shapes->push_back(y->value.shape());
      const std::size_t row = i + 1;
      if (row == tap_rows_[0]) taps.p2 = y;
      if (row == tap_rows_[1]) taps.p3 = y;
      if (row == tap_rows_[2]) taps.p4 = y;
    }
    taps.p5 = spec_.use_hsi ? hsi_.forward(g, y) : y;
    return taps;
  }

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<Gbneck<T>>& blocks() const { return blocks_; }
  // Channels of p2..p5.
  const std::vector<int>& tap_channels() const { return tap_channels_; }

 private:
  BackboneSpec spec_;
  ConvBnAct<T> stem_;
  std::vector<Gbneck<T>> blocks_;
  std::vector<std::size_t> tap_rows_;
  std::vector<int> tap_channels_;
  HsiFormer<T> hsi_;
};

}  // namespace hsinet
