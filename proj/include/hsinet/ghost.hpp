#pragma once

#include <string>

#include "hsinet/attention.hpp"
#include "hsinet/nn.hpp"

namespace hsinet {

struct GhostModuleSpec {
  int in_channels = 1;       // C
  int out_channels = 2;      // D
  int ratio = 1;             // s, ghost maps per intrinsic map
  int cheap_kernel = 3;      // d
  int primary_kernel = 1;    // k
  Activation act = Activation::ReLU;
  bool with_bn = true;

  // m = ceil(D / (1 + s))
  int intrinsic() const { return (out_channels + ratio) / (1 + ratio); }

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw ValueError("ghost module: channel counts must be >= 1");
    if (ratio < 1) throw ValueError("ghost module: ratio s must be >= 1");
    if (cheap_kernel < 1 || cheap_kernel % 2 == 0) throw ValueError("ghost module: cheap kernel d must be odd");
    if (primary_kernel < 1 || primary_kernel % 2 == 0) throw ValueError("ghost module: primary kernel k must be odd");
    if (ratio == 1 && out_channels % 2 != 0) {
      throw ValueError("ghost module: with s=1 the output channel count D must be even, got " +
                       std::to_string(out_channels));
    }
  }
};

/// Y_out = concat(Y1, Y2): Y1 = primary conv (m maps), Y2 = s cheap depthwise
/// maps per intrinsic map; the first D channels are kept.
template <class T>
class GhostModule {
 public:
  GhostModule() = default;
  GhostModule(ParamStore<T>& store, const std::string& name, const GhostModuleSpec& spec)
      : name_(name), spec_(spec) {
    spec.validate();
    const int m = spec.intrinsic();
    primary_ = ConvBnAct<T>(store, name + ".primary",
                            Conv2dSpec::square(spec.in_channels, m, spec.primary_kernel), spec.with_bn, spec.act);
    cheap_ = ConvBnAct<T>(store, name + ".cheap", Conv2dSpec::square(m, m * spec.ratio, spec.cheap_kernel, 1, m),
                          spec.with_bn, spec.act);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x) const {
    auto scope = g.scope(name_);
    if (x->value.shape().c != spec_.in_channels) {
      throw ShapeError(name_ + ": expected " + std::to_string(spec_.in_channels) + " input channels, got " +
                       std::to_string(x->value.shape().c));
    }
    auto y1 = primary_.forward(g, x);
    auto y2 = cheap_.forward(g, y1);
    auto out = ops::concat_channels(g, {y1, y2});
    const int total = spec_.intrinsic() * (1 + spec_.ratio);
    if (total == spec_.out_channels) return out;
    return ops::split_channels<T>(g, out, {spec_.out_channels, total - spec_.out_channels}).front();
  }

  const GhostModuleSpec& spec() const { return spec_; }

 private:
  std::string name_;
  GhostModuleSpec spec_{};
  ConvBnAct<T> primary_;
  ConvBnAct<T> cheap_;
};

struct GbneckSpec {
  int in_channels = 16;
  int exp_channels = 16;
  int out_channels = 16;
  int stride = 1;
  bool use_lhab = false;
  int dw_kernel = 3;
  AttentionKind attention = AttentionKind::Lhab;  // block inserted when use_lhab is set

  void validate() const {
    if (stride != 1 && stride != 2) throw ValueError("gbneck: stride must be 1 or 2, got " + std::to_string(stride));
    if (dw_kernel < 1 || dw_kernel % 2 == 0) throw ValueError("gbneck: depthwise kernel must be odd");
    if (in_channels < 1 || exp_channels < 1 || out_channels < 1) {
      throw ValueError("gbneck: channel counts must be >= 1");
    }
  }
  bool identity_shortcut() const { return stride == 1 && in_channels == out_channels; }
};

/// Ghost bottleneck: expand ghost -> [stride-2 depthwise] -> [attention] ->
/// reduce ghost, plus a shortcut (identity, or depthwise 3x3 + pointwise
/// projection when the shape changes).
template <class T>
class Gbneck {
 public:
  Gbneck() = default;
  Gbneck(ParamStore<T>& store, const std::string& name, const GbneckSpec& spec) : name_(name), spec_(spec) {
    spec.validate();
    GhostModuleSpec expand{spec.in_channels, spec.exp_channels};
    expand.act = Activation::ReLU;
    ghost1_ = GhostModule<T>(store, name + ".ghost1", expand);
    if (spec.stride == 2) {
      dw_ = ConvBnAct<T>(store, name + ".dw",
                         Conv2dSpec::square(spec.exp_channels, spec.exp_channels, spec.dw_kernel, 2, spec.exp_channels),
                         true, Activation::None);
    }
    if (spec.use_lhab) attn_ = AttentionBlock<T>(store, name + ".attn", spec.attention, spec.exp_channels);
    GhostModuleSpec reduce{spec.exp_channels, spec.out_channels};
    reduce.act = Activation::None;
    ghost2_ = GhostModule<T>(store, name + ".ghost2", reduce);
    if (!spec.identity_shortcut()) {
      sc_dw_ = ConvBnAct<T>(store, name + ".shortcut.dw",
                            Conv2dSpec::square(spec.in_channels, spec.in_channels, 3, spec.stride, spec.in_channels),
                            true, Activation::None);
      sc_pw_ = ConvBnAct<T>(store, name + ".shortcut.pw", Conv2dSpec::square(spec.in_channels, spec.out_channels, 1),
                            true, Activation::None);
    }
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x) const {
    auto scope = g.scope(name_);
    if (x->value.shape().c != spec_.in_channels) {
      throw ShapeError(name_ + ": expected " + std::to_string(spec_.in_channels) + " input channels, got " +
                       std::to_string(x->value.shape().c));
    }
    auto y = ghost1_.forward(g, x);
    if (spec_.stride == 2) y = dw_.forward(g, y);
    if (spec_.use_lhab) y = attn_.forward(g, y);
    y = ghost2_.forward(g, y);
    auto shortcut = spec_.identity_shortcut() ? x : sc_pw_.forward(g, sc_dw_.forward(g, x));
    return ops::add(g, y, shortcut);
  }

  const GbneckSpec& spec() const { return spec_; }

 private:
  std::string name_;
  GbneckSpec spec_{};
  GhostModule<T> ghost1_;
  ConvBnAct<T> dw_;
  AttentionBlock<T> attn_;
  GhostModule<T> ghost2_;
  ConvBnAct<T> sc_dw_;
  ConvBnAct<T> sc_pw_;
};

}  // namespace hsinet
