#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "hsinet/graph.hpp"
#include "hsinet/ops.hpp"

namespace hsinet {

enum class Activation { None, ReLU, HSwish, Sigmoid };

template <class T>
Var<T> activate(Graph<T>& g, const Var<T>& x, Activation act) {
  switch (act) {
    case Activation::ReLU:
      return ops::relu(g, x);
    case Activation::HSwish:
      return ops::hswish(g, x);
    case Activation::Sigmoid:
      return ops::sigmoid(g, x);
    case Activation::None:
      break;
  }
  return x;
}

/// Named registry of every tensor a model owns.
///
/// Trainable entries are parameters; the rest are buffers such as batch-norm
/// running statistics. Registration order is the serialization order.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool trainable;
  };

  Var<T> add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
    auto v = make_var(std::move(value), trainable);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, v, trainable});
    return v;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const Entry* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  // Element count over trainable tensors, by walking the registry.
  std::int64_t trainable_count() const {
    std::int64_t total = 0;
    for (const auto& e : entries_)
      if (e.trainable) total += static_cast<std::int64_t>(e.var->value.numel());
    return total;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var->zero_grad();
  }

  std::mt19937_64& rng() { return rng_; }
  void seed(std::uint64_t s) { rng_.seed(s); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::mt19937_64 rng_{0};
};

// Uniform(-b, b) with b = 1/sqrt(fan_in), the usual conv default.
template <class T>
Tensor<T> init_uniform(std::mt19937_64& rng, Shape s, double fan_in) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(std::max(1.0, fan_in));
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng) * bound);
  return t;
}

template <class T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamStore<T>& store, const std::string& name, int channels) : name_(name) {
    const Shape s{channels, 1, 1, 1};
    p_.gamma = store.add(name + ".weight", Tensor<T>(s, T(1)));
    p_.beta = store.add(name + ".bias", Tensor<T>(s, T(0)));
    p_.running_mean = store.add(name + ".running_mean", Tensor<T>(s, T(0)), false);
    p_.running_var = store.add(name + ".running_var", Tensor<T>(s, T(1)), false);
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x) const { return ops::batch_norm(g, x, p_); }
  const ops::BatchNormParams<T>& params() const { return p_; }

 private:
  std::string name_;
  ops::BatchNormParams<T> p_;
};

/// Convolution, optional batch norm, optional activation.
template <class T>
class ConvBnAct {
 public:
  ConvBnAct() = default;
  ConvBnAct(ParamStore<T>& store, const std::string& name, const Conv2dSpec& spec, bool with_bn,
            Activation act)
      : name_(name), spec_(spec), act_(act) {
    spec_.validate();
    const double fan_in = static_cast<double>(spec.in_channels / spec.groups) * spec.kh * spec.kw;
    weight_ = store.add(name + ".conv.weight", init_uniform<T>(store.rng(), spec.weight_shape(), fan_in));
    if (spec.has_bias) {
      bias_ = store.add(name + ".conv.bias",
                        init_uniform<T>(store.rng(), Shape{spec.out_channels, 1, 1, 1}, fan_in));
    }
    if (with_bn) bn_ = BatchNorm<T>(store, name + ".bn", spec.out_channels);
    has_bn_ = with_bn;
  }

  Var<T> forward(Graph<T>& g, const Var<T>& x) const {
    auto scope = g.scope(name_);
    auto y = ops::conv2d(g, x, weight_, bias_, spec_);
    if (has_bn_) y = bn_.forward(g, y);
    return activate(g, y, act_);
  }

  const Conv2dSpec& spec() const { return spec_; }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  Conv2dSpec spec_{};
  Activation act_ = Activation::None;
  Var<T> weight_;
  Var<T> bias_;
  BatchNorm<T> bn_;
  bool has_bn_ = false;
};

}  // namespace hsinet
