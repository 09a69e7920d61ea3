#pragma once

#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "hsinet/model.hpp"

namespace hsinet::io {

using nlohmann::json;

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError("config: '" + where + "' must be an object");
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw FormatError("config: unknown key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

template <class V>
void read_opt(const json& j, const char* key, V& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw FormatError("config: '" + (where.empty() ? std::string(key) : where + "." + key) + "' has the wrong type");
  }
}

}  // namespace detail

inline json config_to_json(const ModelConfig& c) {
  json anchors = json::array();
  for (const auto& grp : c.anchors.groups) {
    json g = json::array();
    for (const auto& a : grp) g.push_back({a.w, a.h});
    anchors.push_back(g);
  }
  return json{
      {"width_multiplier", c.width_multiplier},
      {"input_size", c.input_size},
      {"ncls", c.ncls},
      {"hsi", {{"enabled", c.use_hsi}, {"order", c.hsi_order}, {"layers", c.hsi_layers}, {"mlp_ratio", c.mlp_ratio}}},
      {"attention", to_string(c.attention)},
      {"p2_branch", c.p2_branch},
      {"neck_expansion", c.neck_expansion},
      {"anchors", anchors},
      {"conf_threshold", c.conf_threshold},
      {"iou_threshold", c.iou_threshold},
      {"max_det", c.max_det},
      {"loss",
       {{"box", c.loss.box},
        {"obj", c.loss.obj},
        {"cls", c.loss.cls},
        {"balance", c.loss.balance},
        {"anchor_ratio", c.loss.anchor_ratio},
        {"iou_objectness", c.loss.iou_objectness}}},
  };
}

/// Missing keys keep their defaults; unknown keys are errors. The result is
/// validated before it is returned.
inline ModelConfig config_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"width_multiplier", "input_size", "ncls", "hsi", "attention", "p2_branch", "neck_expansion",
                          "anchors", "conf_threshold", "iou_threshold", "max_det", "loss"},
                         "");
  ModelConfig c;
  detail::read_opt(j, "width_multiplier", c.width_multiplier, "");
  detail::read_opt(j, "input_size", c.input_size, "");
  detail::read_opt(j, "ncls", c.ncls, "");
  detail::read_opt(j, "p2_branch", c.p2_branch, "");
  detail::read_opt(j, "neck_expansion", c.neck_expansion, "");
  detail::read_opt(j, "conf_threshold", c.conf_threshold, "");
  detail::read_opt(j, "iou_threshold", c.iou_threshold, "");
  detail::read_opt(j, "max_det", c.max_det, "");
  if (j.contains("hsi")) {
    const auto& h = j["hsi"];
    detail::reject_unknown(h, {"enabled", "order", "layers", "mlp_ratio"}, "hsi");
    detail::read_opt(h, "enabled", c.use_hsi, "hsi");
    detail::read_opt(h, "order", c.hsi_order, "hsi");
    detail::read_opt(h, "layers", c.hsi_layers, "hsi");
    detail::read_opt(h, "mlp_ratio", c.mlp_ratio, "hsi");
  }
  if (j.contains("attention")) {
    std::string a;
    detail::read_opt(j, "attention", a, "");
    try {
      c.attention = parse_attention(a);
    } catch (const ValueError& e) {
      throw FormatError(std::string("config: ") + e.what());
    }
  }
  if (j.contains("anchors")) {
    const auto& a = j["anchors"];
    if (!a.is_array() || a.size() != 4) throw FormatError("config: 'anchors' must be 4 groups of 3 [w, h] pairs");
    for (std::size_t g = 0; g < 4; ++g) {
      if (!a[g].is_array() || a[g].size() != 3) throw FormatError("config: 'anchors' must be 4 groups of 3 [w, h] pairs");
      for (std::size_t i = 0; i < 3; ++i) {
        const auto& p = a[g][i];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
          throw FormatError("config: anchor " + std::to_string(g) + "." + std::to_string(i) + " must be [w, h]");
        }
        c.anchors.groups[g][i] = AnchorWH{p[0].get<double>(), p[1].get<double>()};
      }
    }
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    detail::reject_unknown(l, {"box", "obj", "cls", "balance", "anchor_ratio", "iou_objectness"}, "loss");
    detail::read_opt(l, "box", c.loss.box, "loss");
    detail::read_opt(l, "obj", c.loss.obj, "loss");
    detail::read_opt(l, "cls", c.loss.cls, "loss");
    detail::read_opt(l, "balance", c.loss.balance, "loss");
    detail::read_opt(l, "anchor_ratio", c.loss.anchor_ratio, "loss");
    detail::read_opt(l, "iou_objectness", c.loss.iou_objectness, "loss");
  }
  try {
    c.validate();
  } catch (const ValueError& e) {
    throw FormatError(e.what());
  }
  return c;
}

inline ModelConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

}  // namespace hsinet::io
