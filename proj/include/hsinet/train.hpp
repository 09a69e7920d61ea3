#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <unordered_map>
#include <vector>

#include "hsinet/model.hpp"

namespace hsinet {

struct TrainOptions {
  int epochs = 100;
  int batch = 4;
  double lr = 0.01;
  double final_lr_fraction = 0.01;  // cosine floor, as a fraction of lr
  double momentum = 0.937;
  double weight_decay = 5e-4;
  bool nesterov = true;
  int warmup_epochs = 3;
  double warmup_lr_fraction = 0.1;
  double warmup_momentum = 0.8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  bool adam = false;           // Adam (beta1 = momentum) instead of SGD
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 0;    // global L2 clip; 0 disables

  void validate() const {
    if (epochs < 1 || batch < 1) throw ValueError("train: epochs and batch must be >= 1");
    if (!(lr > 0) || momentum < 0 || momentum >= 1 || weight_decay < 0) throw ValueError("train: bad optimizer settings");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ValueError("train: warmup must be shorter than training");
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double loss = 0;  // mean over batches
  double box = 0, obj = 0, cls = 0;
};

/// SGD with (Nesterov) momentum. Weight decay applies to convolution kernels
/// only, not to batch-norm affine terms or biases.
template <class T>
class Sgd {
 public:
  explicit Sgd(const ParamStore<T>& store) {
    for (const auto& e : store.entries()) {
      if (!e.trainable) continue;
      const Shape s = e.var->value.shape();
      slots_.push_back(Slot{e.var, Tensor<T>(s), s.c > 1 || s.h > 1 || s.w > 1, Tensor<T>(s)});
    }
  }

  // Scales all gradients so their joint L2 norm is at most max_norm. Returns
  // the norm before clipping.
  double clip_grad_norm(double max_norm) {
    double sq = 0;
    for (auto& s : slots_) {
      if (!s.var->has_grad()) continue;
      for (auto g : s.var->grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
      const double f = max_norm / norm;
      for (auto& s : slots_) {
        if (!s.var->has_grad()) continue;
        for (auto& g : s.var->grad.data()) g = static_cast<T>(static_cast<double>(g) * f);
      }
    }
    return norm;
  }

  // Adam; L2 decay is folded into the gradient as in the SGD path.
  void adam_step(double lr, double beta1, double weight_decay, double beta2 = 0.999, double eps = 1e-8) {
    ++steps_;
    const double c1 = 1 - std::pow(beta1, static_cast<double>(steps_));
    const double c2 = 1 - std::pow(beta2, static_cast<double>(steps_));
    for (auto& s : slots_) {
      if (!s.var->has_grad()) continue;
      auto w = s.var->value.data();
      auto g = s.var->grad.data();
      auto m = s.velocity.data();
      auto v = s.second.data();
      const double wd = s.decay ? weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double grad = static_cast<double>(g[i]) + wd * static_cast<double>(w[i]);
        const double mi = beta1 * static_cast<double>(m[i]) + (1 - beta1) * grad;
        const double vi = beta2 * static_cast<double>(v[i]) + (1 - beta2) * grad * grad;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
      }
    }
  }

  void step(double lr, double momentum, double weight_decay, bool nesterov) {
    for (auto& s : slots_) {
      if (!s.var->has_grad()) continue;
      auto w = s.var->value.data();
      auto g = s.var->grad.data();
      auto v = s.velocity.data();
      const double wd = s.decay ? weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double grad = static_cast<double>(g[i]) + wd * static_cast<double>(w[i]);
        const double vel = momentum * static_cast<double>(v[i]) + grad;
        v[i] = static_cast<T>(vel);
        const double upd = nesterov ? grad + momentum * vel : vel;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * upd);
      }
    }
  }

 private:
  struct Slot {
    Var<T> var;
    Tensor<T> velocity;
    bool decay;
    Tensor<T> second;  // Adam second moment
  };
  std::vector<Slot> slots_;
  std::int64_t steps_ = 0;
};

// Stacks 1x3xHxW images into one batch tensor.
template <class T>
Tensor<T> stack_images(const std::vector<const Tensor<T>*>& imgs) {
  if (imgs.empty()) throw ValueError("stack_images: empty batch");
  const Shape s = imgs.front()->shape();
  Tensor<T> out(Shape{static_cast<std::int64_t>(imgs.size()), s.c, s.h, s.w});
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    if (!(imgs[i]->shape() == s) || s.n != 1) throw ShapeError("stack_images: images must all be 1x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w));
    std::copy(imgs[i]->data().begin(), imgs[i]->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * s.numel()));
  }
  return out;
}

/// Mini-batch training loop. Warmup ramps the learning rate and momentum
/// linearly over the first epochs; afterwards the rate follows a cosine from
/// lr down to lr * final_lr_fraction, fixed per epoch.
template <class T>
std::vector<EpochLog> train(Model<T>& model, const std::vector<Tensor<T>>& images,
                            const std::vector<std::vector<GtBox>>& targets, const TrainOptions& opt,
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
  opt.validate();
  if (images.size() != targets.size() || images.empty()) throw ValueError("train: need one target list per image");
  Sgd<T> sgd(model.params());
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_epoch = (images.size() + static_cast<std::size_t>(opt.batch) - 1) / static_cast<std::size_t>(opt.batch);
  const double warmup_iters = static_cast<double>(opt.warmup_epochs) * static_cast<double>(per_epoch);
  const double pi = std::acos(-1.0);
  std::vector<EpochLog> logs;
  std::size_t iter = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    if (opt.shuffle) std::shuffle(order.begin(), order.end(), rng);
    const int cos_span = std::max(1, opt.epochs - opt.warmup_epochs - 1);
    const double t = std::clamp(static_cast<double>(epoch - opt.warmup_epochs) / cos_span, 0.0, 1.0);
    const double epoch_lr = opt.lr * (opt.final_lr_fraction + (1 - opt.final_lr_fraction) * 0.5 * (1 + std::cos(pi * t)));
    EpochLog log;
    log.epoch = epoch;
    log.lr = epoch_lr;
    for (std::size_t b = 0; b < per_epoch; ++b, ++iter) {
      std::vector<const Tensor<T>*> batch;
      std::vector<std::vector<GtBox>> batch_targets;
      for (std::size_t k = b * static_cast<std::size_t>(opt.batch); k < std::min(images.size(), (b + 1) * static_cast<std::size_t>(opt.batch)); ++k) {
        batch.push_back(&images[order[k]]);
        batch_targets.push_back(targets[order[k]]);
      }
      double lr = epoch_lr, momentum = opt.momentum;
      if (static_cast<double>(iter) < warmup_iters) {
        const double f = static_cast<double>(iter) / warmup_iters;
        lr = opt.lr * (opt.warmup_lr_fraction + (1 - opt.warmup_lr_fraction) * f);
        momentum = opt.warmup_momentum + (opt.momentum - opt.warmup_momentum) * f;
      }
      model.params().zero_grad();
      Graph<T> g(typename Graph<T>::Options{true, true, false});
      auto heads = model.forward(g, g.input(stack_images(batch)));
      auto loss = model.loss(g, heads, batch_targets);
      g.backward(loss.total);
      if (opt.max_grad_norm > 0) sgd.clip_grad_norm(opt.max_grad_norm);
      if (opt.adam) {
        sgd.adam_step(lr, momentum, opt.weight_decay, opt.adam_beta2, opt.adam_eps);
      } else {
        sgd.step(lr, momentum, opt.weight_decay, opt.nesterov);
      }
      log.loss += loss.parts.total;
      log.box += loss.parts.box;
      log.obj += loss.parts.obj;
      log.cls += loss.parts.cls;
    }
    const double n = static_cast<double>(per_epoch);
    log.loss /= n;
    log.box /= n;
    log.obj /= n;
    log.cls /= n;
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

}  // namespace hsinet
