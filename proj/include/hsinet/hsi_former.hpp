#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsinet/nn.hpp"

namespace hsinet {

struct ChannelSchedule {
  int a0 = 0;              // width of the first carrier a_0
  std::vector<int> b;      // widths C_0 .. C_{n-1} of the gates b_i

  int total() const {
    int s = a0;
    for (int v : b) s += v;
    return s;
  }
};

// C_i = C / 2^(n-i-1); a_0 shares C_0.
inline ChannelSchedule channel_schedule(int channels, int order) {
  if (order < 1) throw ValueError("channel_schedule: order n must be >= 1");
  if (channels < 1) throw ValueError("channel_schedule: channel count must be >= 1");
  const int div = 1 << (order - 1);
  if (channels % div != 0) {
    throw ValueError("channel_schedule: C=" + std::to_string(channels) + " is not divisible by 2^(n-1)=" +
                     std::to_string(div) + " for order n=" + std::to_string(order));
  }
  ChannelSchedule s;
  for (int i = 0; i < order; ++i) s.b.push_back(channels >> (order - i - 1));
  s.a0 = s.b.front();
  return s;
}

struct GnConvSpec {
  int channels = 8;
  int order = 3;
  int dw_kernel = 7;
};

/// Iterated gated convolution with `order` multiplicative interactions.
///
///   x' = Conv_in(x)                       (1x1, C -> 2C)
///   [a_0, b_0 .. b_{n-1}] = split(x')
///   a_{i+1} = h_i(a_i) * DW_i(b_i)        h_0 = id, h_i = 1x1 C_{i-1} -> C_i
///   y = Conv_out(a_n)                     (1x1, C -> C)
template <class T>
class GnConv {
 public:
  GnConv() = default;
  GnConv(ParamStore<T>& store, const std::string& name, const GnConvSpec& spec)
      : name_(name), spec_(spec), schedule_(channel_schedule(spec.channels, spec.order)) {
    const int C = spec.channels;
    conv_in_ = ConvBnAct<T>(store, name + ".proj_in", Conv2dSpec::square(C, 2 * C, 1), false, Activation::None);
    for (int i = 0; i < spec.order; ++i) {
      const int ci = schedule_.b[static_cast<std::size_t>(i)];
      dw_.push_back(ConvBnAct<T>(store, name + ".dw" + std::to_string(i),
                                 Conv2dSpec::square(ci, ci, spec.dw_kernel, 1, ci), false, Activation::None));
      if (i > 0) {
        const int prev = schedule_.b[static_cast<std::size_t>(i - 1)];
        h_.push_back(ConvBnAct<T>(store, name + ".h" + std::to_string(i), Conv2dSpec::square(prev, ci, 1), false,
                                  Activation::None));
      }
    }
    conv_out_ = ConvBnAct<T>(store, name + ".proj_out", Conv2dSpec::square(C, C, 1), false, Activation::None);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x) const {
    auto scope = g.scope(name_);
    if (x->value.shape().c != spec_.channels) {
      throw ShapeError(name_ + ": expected " + std::to_string(spec_.channels) + " channels, got " +
                       std::to_string(x->value.shape().c));
    }
    auto xp = conv_in_.forward(g, x);
    std::vector<std::int64_t> sizes{schedule_.a0};
    for (int v : schedule_.b) sizes.push_back(v);
    auto parts = ops::split_channels(g, xp, sizes);
    Var<T> a = parts[0];
    for (int i = 0; i < spec_.order; ++i) {
      auto gate = dw_[static_cast<std::size_t>(i)].forward(g, parts[static_cast<std::size_t>(i) + 1]);
      auto carrier = i == 0 ? a : h_[static_cast<std::size_t>(i) - 1].forward(g, a);
      a = ops::mul(g, carrier, gate);
    }
    return conv_out_.forward(g, a);
  }

  const ChannelSchedule& schedule() const { return schedule_; }

 private:
  std::string name_;
  GnConvSpec spec_{};
  ChannelSchedule schedule_;
  ConvBnAct<T> conv_in_;
  std::vector<ConvBnAct<T>> dw_;
  std::vector<ConvBnAct<T>> h_;
  ConvBnAct<T> conv_out_;
};

struct HsiFormerSpec {
  int channels = 160;
  int layers = 1;
  int order = 3;
  double mlp_ratio = 4.0;
};

/// Encoder-shaped block with gated convolution in place of self-attention:
///   x <- x + gnconv(bn(x));  x <- x + mlp(bn(x))
template <class T>
class HsiFormer {
 public:
  HsiFormer() = default;
  HsiFormer(ParamStore<T>& store, const std::string& name, const HsiFormerSpec& spec) : name_(name), spec_(spec) {
    if (spec.layers < 1) throw ValueError("hsi-former: layer count must be >= 1");
    if (spec.mlp_ratio <= 0) throw ValueError("hsi-former: mlp_ratio must be positive");
    const int C = spec.channels;
    const int hidden = std::max(1, static_cast<int>(std::lround(spec.mlp_ratio * C)));
    for (int l = 0; l < spec.layers; ++l) {
      const std::string p = name + ".layer" + std::to_string(l);
      Layer layer;
      layer.norm1 = BatchNorm<T>(store, p + ".norm1", C);
      layer.gnconv = GnConv<T>(store, p + ".gnconv", GnConvSpec{C, spec.order, 7});
      layer.norm2 = BatchNorm<T>(store, p + ".norm2", C);
      layer.fc1 = ConvBnAct<T>(store, p + ".mlp.fc1", Conv2dSpec::square(C, hidden, 1), false, Activation::HSwish);
      layer.fc2 = ConvBnAct<T>(store, p + ".mlp.fc2", Conv2dSpec::square(hidden, C, 1), false, Activation::None);
      layers_.push_back(std::move(layer));
    }
  }

  Var<T> forward(Graph<T>& g, Var<T> x) const {
    auto scope = g.scope(name_);
    if (x->value.shape().c != spec_.channels) {
      throw ShapeError(name_ + ": expected " + std::to_string(spec_.channels) + " channels, got " +
                       std::to_string(x->value.shape().c));
    }
    for (const auto& l : layers_) {
      x = ops::add(g, x, l.gnconv.forward(g, l.norm1.forward(g, x)));
      x = ops::add(g, x, l.fc2.forward(g, l.fc1.forward(g, l.norm2.forward(g, x))));
    }
    return x;
  }

  const HsiFormerSpec& spec() const { return spec_; }

 private:
  struct Layer {
    BatchNorm<T> norm1;
    GnConv<T> gnconv;
    BatchNorm<T> norm2;
    ConvBnAct<T> fc1;
    ConvBnAct<T> fc2;
  };
  std::string name_;
  HsiFormerSpec spec_{};
  std::vector<Layer> layers_;
};

}  // namespace hsinet
