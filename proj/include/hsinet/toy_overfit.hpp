#pragma once

// Overfitting run on the synthetic rectangle set: a smoke test that the whole
// detector (forward, loss, backward, optimizer, decode, NMS, metrics) can
// drive training error down and recover the boxes it was shown.

#include <functional>
#include <vector>

#include "hsinet/clustering.hpp"
#include "hsinet/io/toy_dataset.hpp"
#include "hsinet/metrics.hpp"
#include "hsinet/model.hpp"
#include "hsinet/train.hpp"

namespace hsinet {

struct ToyRecipe {
  int images = 16;
  int image_size = 160;
  std::uint64_t data_seed = 7;
  std::uint64_t model_seed = 1;
  bool cluster_anchors = true;  // k-means anchors from the training boxes
  ModelConfig model;
  TrainOptions train;
};

// Best trade-off found between a monotone epoch loss and fitting the
// 16-image set within 100 epochs. Plain SGD at the full-scale learning rate
// of 0.01 barely moves the box term in that budget, see README.
inline ToyRecipe toy_overfit_recipe() {
  ToyRecipe r;
  r.model.width_multiplier = 0.25;
  r.model.input_size = r.image_size;
  r.model.loss.box = 1.0;
  r.train.epochs = 100;
  r.train.batch = 4;
  r.train.seed = 3;
  r.train.shuffle = false;
  r.train.adam = true;
  r.train.lr = 0.004;
  r.train.momentum = 0.98;
  r.train.adam_beta2 = 0.9999;
  r.train.max_grad_norm = 2.0;
  r.train.final_lr_fraction = 0.001;
  return r;
}

struct ToyOverfitResult {
  std::vector<EpochLog> logs;
  EvalReport report;
  AnchorSet anchors;
  int rises_after_warmup = 0;  // epochs whose mean loss exceeds the previous one
};

template <class T = float>
ToyOverfitResult run_toy_overfit(ToyRecipe recipe, const std::function<void(const EpochLog&)>& on_epoch = {},
                                 const std::function<void(const Model<T>&)>& on_trained = {}) {
  const auto set = io::make_toy_dataset(recipe.images, recipe.image_size, recipe.data_seed);
  std::vector<Tensor<T>> images;
  std::vector<std::vector<GtBox>> targets;
  std::vector<BoxWH> sizes;
  for (const auto& s : set) {
    images.push_back(io::to_tensor<T>(s.image));
    targets.push_back(s.boxes);
    for (const auto& b : s.boxes) sizes.push_back({b.w, b.h});
  }
  recipe.model.input_size = recipe.image_size;
  if (recipe.cluster_anchors) {
    KMeansOptions ko;
    ko.seed = 1;
    recipe.model.anchors = kmeans_1iou(sizes, ko).anchor_set();
  }
  Model<T> model(recipe.model, recipe.model_seed);
  ToyOverfitResult out;
  out.anchors = recipe.model.anchors;
  out.logs = train(model, images, targets, recipe.train, on_epoch);
  for (std::size_t e = static_cast<std::size_t>(recipe.train.warmup_epochs) + 1; e < out.logs.size(); ++e) {
    if (out.logs[e].loss > out.logs[e - 1].loss) ++out.rises_after_warmup;
  }
  std::vector<ImageResult> results;
  for (std::size_t i = 0; i < images.size(); ++i) results.push_back({model.detect(images[i])[0], targets[i]});
  out.report = evaluate(results, 0.5, 0.25);
  if (on_trained) on_trained(model);
  return out;
}

}  // namespace hsinet
