#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "hsinet/nn.hpp"

namespace hsinet {

/// Adaptive 1-D kernel size for channel attention: the odd integer nearest to
/// log2(C)/gamma + b/gamma. Exact midpoints (t an even integer) round up.
inline int psi_kernel_size(int channels, double gamma = 2.0, double b = 1.0) {
  if (channels < 1) throw ValueError("psi_kernel_size: channel count must be >= 1");
  const double t = std::log2(static_cast<double>(channels)) / gamma + b / gamma;
  // odd = 2j + 1 with j nearest to (t - 1) / 2; floor(x + 0.5) rounds ties up
  const double j = std::floor((t - 1.0) / 2.0 + 0.5);
  const int k = static_cast<int>(2.0 * j + 1.0);
  return k < 1 ? 1 : k;
}

// Which attention block a flagged bottleneck carries. Lhab is the shipped
// design; the others rebuild the attention ablation rows.
enum class AttentionKind {
  None,
  SE,          // squeeze-excitation with a reduced hidden layer
  EcaAvg,      // average-pooled descriptor only
  EcaShared,   // max + avg descriptors through one shared 1-D kernel
  EcaNoShare,  // max + avg through independent kernels (channel block alone)
  Lhab,        // independent-kernel channel block followed by spatial block
};

inline std::string_view to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::None: return "none";
    case AttentionKind::SE: return "se";
    case AttentionKind::EcaAvg: return "eca_avg";
    case AttentionKind::EcaShared: return "eca_shared";
    case AttentionKind::EcaNoShare: return "eca_noshare";
    case AttentionKind::Lhab: return "lhab";
  }
  return "none";
}

inline AttentionKind parse_attention(std::string_view s) {
  for (auto k : {AttentionKind::None, AttentionKind::SE, AttentionKind::EcaAvg, AttentionKind::EcaShared,
                 AttentionKind::EcaNoShare, AttentionKind::Lhab}) {
    if (to_string(k) == s) return k;
  }
  throw ValueError("unknown attention kind: " + std::string(s));
}

struct ChannelAttnSpec {
  int channels = 1;
  double gamma = 2.0;
  double b = 1.0;
  bool use_max = true;   // false: average-pooled branch only
  bool shared = false;   // one kernel for both branches

  int kernel() const { return psi_kernel_size(channels, gamma, b); }
};

/// U' = sigmoid(C1D_k1(maxpool U) + C1D_k2(avgpool U)) * U
template <class T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(ParamStore<T>& store, const std::string& name, const ChannelAttnSpec& spec)
      : name_(name), spec_(spec) {
    const int k = spec.kernel();
    const Shape ks{1, 1, 1, k};
    if (spec.use_max && !spec.shared) {
      k_max_ = store.add(name + ".conv_max.weight", init_uniform<T>(store.rng(), ks, k));
    }
    k_avg_ = store.add(name + ".conv_avg.weight", init_uniform<T>(store.rng(), ks, k));
  }

  Var<T> forward(Graph<T>& g, const Var<T>& u) const {
    auto scope = g.scope(name_);
    if (u->value.shape().c != spec_.channels) {
      throw ShapeError(name_ + ": expected " + std::to_string(spec_.channels) + " channels, got " +
                       std::to_string(u->value.shape().c));
    }
    auto avg = ops::conv1d_channels(g, ops::pool_spatial(g, u, PoolMode::Avg), k_avg_);
    Var<T> logits = avg;
    if (spec_.use_max) {
      const Var<T>& kmax = spec_.shared ? k_avg_ : k_max_;
      auto mx = ops::conv1d_channels(g, ops::pool_spatial(g, u, PoolMode::Max), kmax);
      logits = ops::add(g, mx, avg);
    }
    return ops::mul_broadcast(g, u, ops::sigmoid(g, logits));
  }

  const ChannelAttnSpec& spec() const { return spec_; }

 private:
  std::string name_;
  ChannelAttnSpec spec_{};
  Var<T> k_max_;
  Var<T> k_avg_;
};

/// U'' = sigmoid(C2D_7x7(channel-max U') + C2D_7x7(channel-avg U')) * U'
template <class T>
class SpatialAttention {
 public:
  static constexpr int kKernel = 7;

  SpatialAttention() = default;
  SpatialAttention(ParamStore<T>& store, const std::string& name) : name_(name) {
    const auto spec = Conv2dSpec::square(1, 1, kKernel);
    conv_max_ = ConvBnAct<T>(store, name + ".conv_max", spec, false, Activation::None);
    conv_avg_ = ConvBnAct<T>(store, name + ".conv_avg", spec, false, Activation::None);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& u) const {
    auto scope = g.scope(name_);
    auto mx = conv_max_.forward(g, ops::pool_channel(g, u, PoolMode::Max));
    auto av = conv_avg_.forward(g, ops::pool_channel(g, u, PoolMode::Avg));
    return ops::mul_broadcast(g, u, ops::sigmoid(g, ops::add(g, mx, av)));
  }

 private:
  std::string name_;
  ConvBnAct<T> conv_max_;
  ConvBnAct<T> conv_avg_;
};

/// Squeeze-excitation as used by the original Ghost bottleneck.
template <class T>
class SqueezeExcite {
 public:
  SqueezeExcite() = default;
  SqueezeExcite(ParamStore<T>& store, const std::string& name, int channels) : name_(name) {
    int reduced = std::max(4, ((channels / 4) + 2) / 4 * 4);
    reduce_ = ConvBnAct<T>(store, name + ".reduce", Conv2dSpec::square(channels, reduced, 1, 1, 1, true), false,
                           Activation::ReLU);
    expand_ = ConvBnAct<T>(store, name + ".expand", Conv2dSpec::square(reduced, channels, 1, 1, 1, true), false,
                           Activation::Sigmoid);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& u) const {
    auto scope = g.scope(name_);
    auto gate = expand_.forward(g, reduce_.forward(g, ops::pool_spatial(g, u, PoolMode::Avg)));
    return ops::mul_broadcast(g, u, gate);
  }

 private:
  std::string name_;
  ConvBnAct<T> reduce_;
  ConvBnAct<T> expand_;
};

/// Attention slot of a bottleneck; dispatches on AttentionKind.
template <class T>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(ParamStore<T>& store, const std::string& name, AttentionKind kind, int channels) : kind_(kind) {
    ChannelAttnSpec cs;
    cs.channels = channels;
    switch (kind) {
      case AttentionKind::None:
        break;
      case AttentionKind::SE:
        se_ = SqueezeExcite<T>(store, name + ".se", channels);
        break;
      case AttentionKind::EcaAvg:
        cs.use_max = false;
        channel_ = ChannelAttention<T>(store, name + ".channel", cs);
        break;
      case AttentionKind::EcaShared:
        cs.shared = true;
        channel_ = ChannelAttention<T>(store, name + ".channel", cs);
        break;
      case AttentionKind::EcaNoShare:
        channel_ = ChannelAttention<T>(store, name + ".channel", cs);
        break;
      case AttentionKind::Lhab:
        channel_ = ChannelAttention<T>(store, name + ".channel", cs);
        spatial_ = SpatialAttention<T>(store, name + ".spatial");
        break;
    }
  }

  Var<T> forward(Graph<T>& g, const Var<T>& u) const {
    switch (kind_) {
      case AttentionKind::None:
        return u;
      case AttentionKind::SE:
        return se_.forward(g, u);
      case AttentionKind::Lhab:
        return spatial_.forward(g, channel_.forward(g, u));
      default:
        return channel_.forward(g, u);
    }
  }

  AttentionKind kind() const { return kind_; }

 private:
  AttentionKind kind_ = AttentionKind::None;
  ChannelAttention<T> channel_;
  SpatialAttention<T> spatial_;
  SqueezeExcite<T> se_;
};

/// Lightweight hybrid attention: channel block then spatial block.
template <class T>
class Lhab {
 public:
  Lhab() = default;
  Lhab(ParamStore<T>& store, const std::string& name, int channels)
      : block_(store, name, AttentionKind::Lhab, channels) {}
  Var<T> forward(Graph<T>& g, const Var<T>& u) const { return block_.forward(g, u); }

 private:
  AttentionBlock<T> block_;
};

}  // namespace hsinet
