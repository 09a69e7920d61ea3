#pragma once

#include "hsinet/analyzer.hpp"
#include "hsinet/attention.hpp"
#include "hsinet/backbone.hpp"
#include "hsinet/clustering.hpp"
#include "hsinet/detect.hpp"
#include "hsinet/ghost.hpp"
#include "hsinet/graph.hpp"
#include "hsinet/hsi_former.hpp"
#include "hsinet/io/annotations.hpp"
#include "hsinet/io/config.hpp"
#include "hsinet/io/image.hpp"
#include "hsinet/io/toy_dataset.hpp"
#include "hsinet/io/weights.hpp"
#include "hsinet/loss.hpp"
#include "hsinet/metrics.hpp"
#include "hsinet/model.hpp"
#include "hsinet/nn.hpp"
#include "hsinet/ops.hpp"
#include "hsinet/parallel.hpp"
#include "hsinet/tensor.hpp"
#include "hsinet/toy_overfit.hpp"
#include "hsinet/train.hpp"
