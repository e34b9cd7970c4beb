#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "scannet/config.hpp"
#include "scannet/tensor.hpp"

namespace scannet {

/// Per-pixel class indices: 0 = no-change, 1..num_classes = land-cover class.
struct SemanticChangeMap {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> classes;

  SemanticChangeMap() = default;
  SemanticChangeMap(int h, int w, int n) : height(h), width(w), num_classes(n), classes(static_cast<std::size_t>(h) * w, 0) {
    if (h < 0 || w < 0) throw ShapeError("negative map size");
    if (n < 1 || n > 254) throw DataError("num_classes must be in [1, 254], got " + std::to_string(n));
  }

  std::uint8_t& at(int y, int x) { return classes[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return classes[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return classes.size(); }
  bool same_shape(const SemanticChangeMap& o) const { return height == o.height && width == o.width; }

  /// Throws DataError naming the first cell outside [0, num_classes].
  void check_range() const {
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] > num_classes)
        throw DataError("class index " + std::to_string(classes[i]) + " at pixel (" + std::to_string(i / width) +
                        ", " + std::to_string(i % width) + ") exceeds num_classes " + std::to_string(num_classes));
  }

  friend bool operator==(const SemanticChangeMap&, const SemanticChangeMap&) = default;
};

/// Binary change mask: 1 = changed.
struct ChangeMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;

  std::uint8_t at(int y, int x) const { return mask[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return mask.size(); }
  friend bool operator==(const ChangeMask&, const ChangeMask&) = default;
};

inline std::string dims_str(const SemanticChangeMap& m) {
  return std::to_string(m.height) + "x" + std::to_string(m.width);
}

/// Binarizes either epoch's labels. Requires matching dimensions.
inline ChangeMask derive_change_mask(const SemanticChangeMap& label1, const SemanticChangeMap& label2) {
  if (!label1.same_shape(label2))
    throw ShapeError("derive_change_mask: label1 is " + dims_str(label1) + " but label2 is " + dims_str(label2));
  ChangeMask m{label1.height, label1.width, std::vector<std::uint8_t>(label1.size())};
  for (std::size_t i = 0; i < label1.size(); ++i) m.mask[i] = label1.classes[i] != 0 ? 1 : 0;
  return m;
}

/// An image pair (c x H x W, values in [0,1]) with its two semantic change maps.
struct BitemporalSample {
  std::string id;
  Tensor<float> image1;
  Tensor<float> image2;
  SemanticChangeMap label1;
  SemanticChangeMap label2;
};

struct Violation {
  int y = -1;
  int x = -1;
  std::string rule;
};

inline std::string to_string(const Violation& v) {
  if (v.y < 0) return v.rule;
  return "pixel (" + std::to_string(v.y) + ", " + std::to_string(v.x) + "): " + v.rule;
}

/// Checks every BitemporalSample invariant; never throws. Empty result means valid.
/// At most `max_reports` pixel violations are listed.
inline std::vector<Violation> validate_sample(const BitemporalSample& s, std::size_t max_reports = 64) {
  std::vector<Violation> out;
  const int H = s.label1.height, W = s.label1.width;
  auto image_ok = [&](const Tensor<float>& im, const char* name) {
    if (im.rank() != 3 || im.dim(1) != H || im.dim(2) != W) {
      out.push_back({-1, -1, std::string(name) + " has shape " + shape_str(im.shape) + ", labels are " +
                                 std::to_string(H) + "x" + std::to_string(W)});
      return;
    }
    for (float v : im.data)
      if (!(v >= 0.0f && v <= 1.0f)) {
        out.push_back({-1, -1, std::string(name) + " has values outside [0, 1]"});
        return;
      }
  };
  if (!s.label1.same_shape(s.label2)) {
    out.push_back({-1, -1, "label1 is " + dims_str(s.label1) + " but label2 is " + dims_str(s.label2)});
    return out;
  }
  if (s.label1.num_classes != s.label2.num_classes) out.push_back({-1, -1, "labels disagree on num_classes"});
  image_ok(s.image1, "image1");
  image_ok(s.image2, "image2");
  if (s.image1.shape != s.image2.shape) out.push_back({-1, -1, "image1 and image2 differ in shape"});

  const int N = s.label1.num_classes;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (out.size() >= max_reports) return out;
      const int a = s.label1.at(y, x), b = s.label2.at(y, x);
      if (a > N) out.push_back({y, x, "label1 class " + std::to_string(a) + " out of range"});
      if (b > N) out.push_back({y, x, "label2 class " + std::to_string(b) + " out of range"});
      if (a != 0 && b == 0) out.push_back({y, x, "changed pixel lacks epoch-2 label"});
      else if (a == 0 && b != 0) out.push_back({y, x, "changed pixel lacks epoch-1 label"});
      else if (a != 0 && a == b) out.push_back({y, x, "changed pixel has identical labels in both epochs"});
    }
  return out;
}

/// Architecture and pseudo-labeling configuration.
struct ModelConfig {
  int num_classes = 5;
  int input_channels = 3;
  int encoder_channels_u = 64;
  int encoder_channels_v = 128;
  int stripe_width = 2;
  int attention_layers = 2;
  int heads_per_group = 2;
  double pseudo_threshold = 0.8;
  int input_height = 64;
  int input_width = 64;
  // Width of the stride-2 stem; 0 selects encoder_channels_u / 2.
  int stem_channels = 0;
  int encoder_blocks = 1;
  int change_blocks = 6;
  int mlp_ratio = 2;
  int max_norm_groups = 8;
  bool bias_inside_softmax = false;
  bool share_temporal_neck = true;

  int token_depth() const { return 3 * encoder_channels_v; }
  int head_depth() const { return token_depth() / (2 * heads_per_group); }
  int stem() const { return stem_channels > 0 ? stem_channels : std::max(1, encoder_channels_u / 2); }

  /// Throws ConfigError listing every violated invariant.
  void validate() const {
    std::vector<std::string> errs;
    auto need = [&](bool ok, const std::string& msg) {
      if (!ok) errs.push_back(msg);
    };
    need(num_classes >= 1 && num_classes <= 254, "num_classes must be in [1, 254]");
    need(input_channels >= 1 && input_channels <= 3, "input_channels must be 1..3");
    need(encoder_channels_u >= 1 && encoder_channels_v >= 1, "encoder channels must be positive");
    need(stripe_width >= 1 && attention_layers >= 0 && heads_per_group >= 1, "s >= 1, L >= 0, K >= 1 required");
    need(input_height % 8 == 0 && input_width % 8 == 0, "input size must be divisible by 8");
    need(input_height > 0 && input_width > 0, "input size must be positive");
    need((input_height / 4) % stripe_width == 0 && (input_width / 4) % stripe_width == 0,
         "H/4 and W/4 must be divisible by stripe_width");
    need(token_depth() % (2 * heads_per_group) == 0, "token depth 3*C_v must be divisible by 2K");
    need(pseudo_threshold > 0.0 && pseudo_threshold <= 1.0, "pseudo_threshold must be in (0, 1]");
    need(encoder_blocks >= 1 && change_blocks >= 0 && mlp_ratio >= 1 && max_norm_groups >= 1,
         "block counts and mlp_ratio must be positive");
    if (errs.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("num_classes", num_classes);
    fn("input_channels", input_channels);
    fn("encoder_channels_u", encoder_channels_u);
    fn("encoder_channels_v", encoder_channels_v);
    fn("stripe_width", stripe_width);
    fn("attention_layers", attention_layers);
    fn("heads_per_group", heads_per_group);
    fn("pseudo_threshold", pseudo_threshold);
    fn("input_height", input_height);
    fn("input_width", input_width);
    fn("stem_channels", stem_channels);
    fn("encoder_blocks", encoder_blocks);
    fn("change_blocks", change_blocks);
    fn("mlp_ratio", mlp_ratio);
    fn("max_norm_groups", max_norm_groups);
    fn("bias_inside_softmax", bias_inside_softmax);
    fn("share_temporal_neck", share_temporal_neck);
  }

  static ModelConfig read(ConfigReader& r, const std::string& prefix = "model.") {
    ModelConfig c;
    c.visit([&](const char* k, auto& v) { r.read(prefix + k, v); });
    c.validate();
    return c;
  }

  static ModelConfig from_flat(const FlatConfig& cfg, const std::string& prefix = "model.") {
    ConfigReader r(cfg);
    ModelConfig c = read(r, prefix);
    r.require_all_known();
    return c;
  }

  FlatConfig to_flat(const std::string& prefix = "model.") const {
    FlatConfig f;
    ModelConfig copy = *this;
    copy.visit([&](const char* k, auto& v) {
      std::ostringstream os;
      if constexpr (std::is_same_v<std::decay_t<decltype(v)>, bool>) os << (v ? "true" : "false");
      else os << v;
      f.set(prefix + k, os.str());
    });
    return f;
  }

  std::uint64_t hash() const { return fnv1a64(to_flat("").serialize()); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace scannet
