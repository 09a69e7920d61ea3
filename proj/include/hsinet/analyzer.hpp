#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hsinet/ghost.hpp"
#include "hsinet/model.hpp"

namespace hsinet {

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Rational make(std::int64_t n, std::int64_t d) {
    if (d == 0) throw ValueError("rational with zero denominator");
    if (d < 0) {
      n = -n;
      d = -d;
    }
    const std::int64_t g = std::gcd(n, d);
    return g ? Rational{n / g, d / g} : Rational{0, 1};
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Rational&, const Rational&) = default;
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

struct GhostRatios {
  Rational flops;      // r_F
  Rational params;     // r_P
  double asymptotic;   // 1 / (1 + s)
};

/// Closed-form Ghost-vs-standard conv cost ratios (convolutions only):
///   (k^2 C m + d^2 m s) / (k^2 C D), which is (C + s d^2) / (C (1 + s)) for
///   k = 1 and D = m (1 + s).
inline GhostRatios ghost_ratios(const GhostModuleSpec& spec) {
  spec.validate();
  const std::int64_t C = spec.in_channels, D = spec.out_channels, m = spec.intrinsic(), s = spec.ratio;
  const std::int64_t k2 = static_cast<std::int64_t>(spec.primary_kernel) * spec.primary_kernel;
  const std::int64_t d2 = static_cast<std::int64_t>(spec.cheap_kernel) * spec.cheap_kernel;
  const Rational r = Rational::make(k2 * C * m + d2 * m * s, k2 * C * D);
  return GhostRatios{r, r, 1.0 / static_cast<double>(1 + s)};
}

struct LayerCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t conv_params = 0;
  std::int64_t conv_flops = 0;
  Shape out{};
};

struct ComplexityReport {
  int input_size = 0;
  std::vector<LayerCost> layers;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  std::int64_t conv_params = 0;
  std::int64_t conv_flops = 0;

  static constexpr const char* kConvention =
      "FLOPs = 2 x multiply-accumulates for convolutions; 1 per element for elementwise "
      "arithmetic (activations, add, mul, batch norm) and per input element for pooling; "
      "data movement (concat, split, upsample) is free";

  std::string to_text() const {
    std::ostringstream os;
    os << "# complexity report, input " << input_size << "x" << input_size << "\n";
    os << "# " << kConvention << "\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-48s %14s %16s  %s\n", "layer", "params", "flops", "output");
    os << line;
    for (const auto& l : layers) {
      std::snprintf(line, sizeof line, "%-48s %14lld %16lld  %s\n", l.name.c_str(), static_cast<long long>(l.params),
                    static_cast<long long>(l.flops), l.out.str().c_str());
      os << line;
    }
    std::snprintf(line, sizeof line, "%-48s %14lld %16lld\n", "TOTAL", static_cast<long long>(total_params),
                  static_cast<long long>(total_flops));
    os << line;
    std::snprintf(line, sizeof line, "total params %.4fM, total GFLOPs %.4f\n", total_params / 1e6, total_flops / 1e9);
    os << line;
    return os.str();
  }
};

// Folds op-level costs into per-layer rows (innermost scope), keeping the
// order of first appearance.
inline ComplexityReport summarize_costs(const std::vector<OpCost>& costs, int input_size) {
  ComplexityReport r;
  r.input_size = input_size;
  std::map<std::string, std::size_t> index;
  for (const auto& c : costs) {
    auto it = index.find(c.layer);
    if (it == index.end()) {
      it = index.emplace(c.layer, r.layers.size()).first;
      r.layers.push_back(LayerCost{c.layer});
    }
    LayerCost& l = r.layers[it->second];
    l.params += c.params;
    l.flops += c.flops;
    if (c.op == "conv2d" || c.op == "conv1d") {
      l.conv_params += c.params;
      l.conv_flops += c.flops;
    }
    l.out = c.out;
    r.total_params += c.params;
    r.total_flops += c.flops;
  }
  for (const auto& l : r.layers) {
    r.conv_params += l.conv_params;
    r.conv_flops += l.conv_flops;
  }
  return r;
}

/// Runs `fn(graph, input)` on geometry only and accounts every executed op.
template <class T, class Fn>
ComplexityReport trace_costs(Shape input, Fn&& fn) {
  std::vector<OpCost> costs;
  Graph<T> g(typename Graph<T>::Options{false, false, true});
  g.set_cost_sink(&costs);
  fn(g, g.input(Tensor<T>::shape_only(input)));
  return summarize_costs(costs, static_cast<int>(input.h));
}

template <class T>
ComplexityReport analyze(const Model<T>& model, int input_size) {
  if (input_size % 32 != 0) throw ValueError("analyze: input size must be divisible by 32");
  return trace_costs<T>(Shape{1, 3, input_size, input_size},
                        [&](Graph<T>& g, const Var<T>& x) { model.forward(g, x); });
}

}  // namespace hsinet
