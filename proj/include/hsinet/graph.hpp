#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hsinet/tensor.hpp"

namespace hsinet {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::function<void(const Tensor<T>&)> backward;

  // Gradient buffer, zero-allocated on first use.
  Tensor<T>& grad_buffer() {
    if (!grad.materialized() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.materialized() && grad.shape() == value.shape(); }
  void zero_grad() { grad = Tensor<T>(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto v = std::make_shared<Node<T>>();
  v->value = std::move(value);
  v->requires_grad = requires_grad;
  return v;
}

// One executed operation as seen by the complexity analyzer.
struct OpCost {
  std::string layer;
  std::string op;
  Shape out;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

/// Execution context and tape for one forward (and optional backward) pass.
///
/// With `record` set, every operation whose inputs require gradients is
/// appended to the tape in execution order together with a closure that
/// propagates its output gradient to its inputs; backward() replays the tape
/// in reverse. Without `record` nothing is retained, so intermediate tensors
/// die as soon as the caller drops them. `shape_only` runs the pass on
/// geometry alone and is what the analyzer uses.
template <class T>
class Graph {
 public:
  struct Options {
    bool record = false;
    bool training = false;
    bool shape_only = false;
  };

  Graph() = default;
  explicit Graph(Options opts) : opts_(opts) {}

  bool recording() const { return opts_.record; }
  bool training() const { return opts_.training; }
  bool shape_only() const { return opts_.shape_only; }

  Var<T> input(Tensor<T> value, bool requires_grad = false) {
    if (opts_.shape_only && value.materialized()) value = Tensor<T>::shape_only(value.shape());
    return make_var(std::move(value), requires_grad);
  }

  // Wraps an op result. `backward` receives the output gradient and must
  // accumulate into the grad buffers of whichever inputs require gradients.
  Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> inputs,
              std::function<void(const Tensor<T>&)> backward) {
    return emit_many(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> emit_many(Tensor<T> value, const std::vector<Var<T>>& inputs,
                   std::function<void(const Tensor<T>&)> backward) {
    auto out = make_var(std::move(value));
    if (opts_.record && !opts_.shape_only) {
      for (const auto& in : inputs) {
        if (in && in->requires_grad) {
          out->requires_grad = true;
          break;
        }
      }
      if (out->requires_grad) {
        out->backward = std::move(backward);
        tape_.push_back(out);
      }
    }
    return out;
  }

  // Reverse pass from a scalar node.
  void backward(const Var<T>& loss) {
    if (loss->value.numel() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + loss->value.shape().str());
    }
    if (!loss->requires_grad) return;
    loss->grad_buffer()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& node = **it;
      if (node.backward && node.has_grad()) node.backward(node.grad);
    }
  }

  void backward(const Var<T>& loss, const Tensor<T>& seed) {
    if (seed.numel() != 1) throw ShapeError("backward seed must be a scalar");
    if (loss->value.numel() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + loss->value.shape().str());
    }
    if (!loss->requires_grad) return;
    loss->grad_buffer()[0] += seed[0];
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& node = **it;
      if (node.backward && node.has_grad()) node.backward(node.grad);
    }
  }

  std::size_t tape_size() const { return tape_.size(); }

  // Cost accounting.
  void set_cost_sink(std::vector<OpCost>* sink) { costs_ = sink; }
  bool tracking_costs() const { return costs_ != nullptr; }
  void record_cost(std::string op, const Shape& out, std::int64_t params, std::int64_t flops) {
    if (!costs_) return;
    costs_->push_back(OpCost{scopes_.empty() ? std::string("<root>") : scopes_.back(), std::move(op),
                             out, params, flops});
  }

  class Scope {
   public:
    Scope(Graph& g, std::string name) : g_(g) { g_.scopes_.push_back(std::move(name)); }
    ~Scope() { g_.scopes_.pop_back(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph& g_;
  };
  Scope scope(std::string name) { return Scope(*this, std::move(name)); }

 private:
  Options opts_{};
  std::vector<Var<T>> tape_;
  std::vector<OpCost>* costs_ = nullptr;
  std::vector<std::string> scopes_;
};

}  // namespace hsinet
