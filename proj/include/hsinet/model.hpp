#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "hsinet/backbone.hpp"
#include "hsinet/detect.hpp"
#include "hsinet/loss.hpp"

namespace hsinet {

struct NeckSpec {
  std::vector<int> channels;  // per level, finest first (3 or 4 entries)
  double expansion = 2.0;     // bottleneck expansion inside fusion blocks
};

/// PANet-style fusion: top-down (upsample, concat, fuse) from the coarsest
/// tap down to the finest, then bottom-up (stride-2 conv, concat, fuse) back
/// up. Every fusion block is two stride-1 Ghost bottlenecks without attention.
template <class T>
class Neck {
 public:
  Neck() = default;
  Neck(ParamStore<T>& store, const NeckSpec& spec) : spec_(spec) {
    const auto& ch = spec.channels;
    const std::size_t L = ch.size();
    if (L < 2) throw ValueError("neck: at least two pyramid levels required");
    // top-down: level i (i < L-1) fuses upsampled level i+1 with tap i
    for (std::size_t i = L - 1; i-- > 0;) {
      top_down_[i] = make_fusion(store, "neck.td" + std::to_string(i), ch[i + 1] + ch[i], ch[i]);
    }
    for (std::size_t i = 1; i < L; ++i) {
      down_[i] = ConvBnAct<T>(store, "neck.down" + std::to_string(i), Conv2dSpec::square(ch[i - 1], ch[i - 1], 3, 2),
                              true, Activation::ReLU);
      bottom_up_[i] = make_fusion(store, "neck.bu" + std::to_string(i), ch[i - 1] + ch[i], ch[i]);
    }
  }

  std::vector<Var<T>> forward(Graph<T>& g, const std::vector<Var<T>>& taps) const {
    const std::size_t L = spec_.channels.size();
    if (taps.size() != L) throw ShapeError("neck: expected " + std::to_string(L) + " taps");
    for (std::size_t i = 0; i < L; ++i) {
      const Shape& s = taps[i]->value.shape();
      if (s.c != spec_.channels[i]) {
        throw ShapeError("neck: level " + std::to_string(i) + " has " + std::to_string(s.c) + " channels, expected " +
                         std::to_string(spec_.channels[i]));
      }
      if (i + 1 < L) {
        const Shape& up = taps[i + 1]->value.shape();
        if (up.h * 2 != s.h || up.w * 2 != s.w) {
          throw ShapeError("neck: level " + std::to_string(i + 1) + " (" + up.str() + ") is not half of level " +
                           std::to_string(i) + " (" + s.str() + ")");
        }
      }
    }
    std::vector<Var<T>> td(L);
    td[L - 1] = taps[L - 1];
    for (std::size_t i = L - 1; i-- > 0;) {
      auto up = ops::upsample_nearest_2x(g, td[i + 1]);
      td[i] = fuse(g, top_down_[i], ops::concat_channels(g, {up, taps[i]}));
    }
    std::vector<Var<T>> out(L);
    out[0] = td[0];
    for (std::size_t i = 1; i < L; ++i) {
      auto down = down_[i].forward(g, out[i - 1]);
      out[i] = fuse(g, bottom_up_[i], ops::concat_channels(g, {down, td[i]}));
    }
    return out;
  }

 private:
  using Fusion = std::array<Gbneck<T>, 2>;

  Fusion make_fusion(ParamStore<T>& store, const std::string& name, int in, int out) const {
    const int exp = std::max(4, static_cast<int>(std::lround(out * spec_.expansion / 4.0)) * 4);
    GbneckSpec a{in, std::max(exp, in), out, 1, false, 3};
    GbneckSpec b{out, exp, out, 1, false, 3};
    return Fusion{Gbneck<T>(store, name + ".0", a), Gbneck<T>(store, name + ".1", b)};
  }
  static Var<T> fuse(Graph<T>& g, const Fusion& f, const Var<T>& x) { return f[1].forward(g, f[0].forward(g, x)); }

  NeckSpec spec_;
  std::array<Fusion, 4> top_down_{};
  std::array<Fusion, 4> bottom_up_{};
  std::array<ConvBnAct<T>, 4> down_{};
};

struct ModelConfig {
  double width_multiplier = 1.0;
  int input_size = 640;
  int ncls = 1;
  bool use_hsi = true;
  int hsi_order = 3;
  int hsi_layers = 1;
  double mlp_ratio = 4.0;
  AttentionKind attention = AttentionKind::Lhab;
  bool p2_branch = true;
  double neck_expansion = 2.0;
  AnchorSet anchors = AnchorSet::defaults();
  double conf_threshold = 0.25;
  double iou_threshold = 0.45;
  int max_det = 300;
  LossWeights loss;

  void validate() const {
    if (!(width_multiplier > 0)) throw ValueError("config: width_multiplier must be positive");
    if (input_size < 32 || input_size % 32 != 0) throw ValueError("config: input_size must be a positive multiple of 32");
    if (ncls < 1) throw ValueError("config: ncls must be >= 1");
    if (hsi_order < 1 || hsi_order > 8) throw ValueError("config: hsi order must be in 1..8");
    if (hsi_layers < 1) throw ValueError("config: hsi layers must be >= 1");
    if (!(mlp_ratio > 0)) throw ValueError("config: mlp_ratio must be positive");
    if (!(neck_expansion > 0)) throw ValueError("config: neck_expansion must be positive");
    if (conf_threshold < 0 || conf_threshold > 1) throw ValueError("config: conf threshold must lie in [0,1]");
    if (iou_threshold < 0 || iou_threshold > 1) throw ValueError("config: iou threshold must lie in [0,1]");
    if (max_det < 1) throw ValueError("config: max_det must be >= 1");
    for (const auto& grp : anchors.groups)
      for (const auto& a : grp)
        if (!(a.w > 0) || !(a.h > 0)) throw ValueError("config: anchors must have positive sizes");
    loss.validate();
    if (use_hsi) {
      const int c5 = scale_channels(160, width_multiplier);
      (void)channel_schedule(c5, hsi_order);
    }
  }

  BackboneSpec backbone_spec() const {
    BackboneSpec b;
    b.width_multiplier = width_multiplier;
    b.input_size = input_size;
    b.attention = attention;
    b.use_hsi = use_hsi;
    b.hsi_layers = hsi_layers;
    b.hsi_order = hsi_order;
    b.mlp_ratio = mlp_ratio;
    return b;
  }

  // Head levels, finest first.
  std::vector<LevelInfo> levels() const {
    std::vector<LevelInfo> out;
    for (std::size_t i = p2_branch ? 0 : 1; i < 4; ++i) {
      out.push_back(LevelInfo{AnchorSet::kStrides[i], anchors.groups[i]});
    }
    return out;
  }
};

/// Backbone, neck, and one 1x1 prediction conv per level.
template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg.validate();
    store_.seed(seed);
    backbone_ = Backbone<T>(store_, cfg.backbone_spec());
    const auto& tc = backbone_.tap_channels();
    NeckSpec ns;
    ns.expansion = cfg.neck_expansion;
    ns.channels = cfg.p2_branch ? tc : std::vector<int>(tc.begin() + 1, tc.end());
    neck_ = Neck<T>(store_, ns);
    const auto levels = cfg.levels();
    for (std::size_t i = 0; i < levels.size(); ++i) {
      heads_.push_back(ConvBnAct<T>(store_, "head" + std::to_string(i),
                                    Conv2dSpec::square(ns.channels[i], head_channels(cfg.ncls), 1, 1, 1, true), false,
                                    Activation::None));
      init_head_bias(heads_.back(), levels[i].stride);
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Raw head logits, finest level first.
  std::vector<Var<T>> forward(Graph<T>& g, const Var<T>& x) const {
    auto taps = backbone_.forward(g, x);
    std::vector<Var<T>> levels{taps.p2, taps.p3, taps.p4, taps.p5};
    if (!cfg_.p2_branch) levels.erase(levels.begin());
    auto fused = neck_.forward(g, levels);
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < fused.size(); ++i) out.push_back(heads_[i].forward(g, fused[i]));
    return out;
  }

  /// Inference: forward, decode every level, then per-image NMS.
  std::vector<std::vector<Detection>> detect(const Tensor<T>& images) const {
    Graph<T> g;
    auto heads = forward(g, g.input(images));
    const auto levels = cfg_.levels();
    std::vector<std::vector<Detection>> out;
    for (std::int64_t b = 0; b < images.shape().n; ++b) {
      std::vector<Detection> dets;
      for (std::size_t l = 0; l < heads.size(); ++l) {
        auto d = decode(heads[l]->value, levels[l], cfg_.ncls, cfg_.conf_threshold, b);
        dets.insert(dets.end(), d.begin(), d.end());
      }
      out.push_back(nms(std::move(dets), cfg_.iou_threshold, static_cast<std::size_t>(cfg_.max_det)));
    }
    return out;
  }

  LossResult<T> loss(Graph<T>& g, const std::vector<Var<T>>& heads,
                     const std::vector<std::vector<GtBox>>& targets) const {
    return detection_loss(g, heads, cfg_.levels(), targets, cfg_.loss, cfg_.ncls);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const Backbone<T>& backbone() const { return backbone_; }

 private:
  // Objectness prior of ~8 objects per 640x640 image; class prior 0.6.
  void init_head_bias(const ConvBnAct<T>& head, int stride) {
    Tensor<T>& b = head.bias()->value;
    const int per = 5 + cfg_.ncls;
    const double cells = std::pow(640.0 / stride, 2);
    for (int a = 0; a < 3; ++a) {
      b[static_cast<std::size_t>(a * per + 4)] += static_cast<T>(std::log(8.0 / cells));
      for (int c = 0; c < cfg_.ncls; ++c) {
        b[static_cast<std::size_t>(a * per + 5 + c)] += static_cast<T>(std::log(0.6 / (cfg_.ncls - 0.99)));
      }
    }
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  Backbone<T> backbone_;
  Neck<T> neck_;
  std::vector<ConvBnAct<T>> heads_;
};

}  // namespace hsinet
