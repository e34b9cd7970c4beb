#pragma once

// Triple encoder-decoder backbone: a Siamese residual encoder applied to both
// epochs, a residual change branch over the concatenated 1/8-scale features,
// and decoder necks that bring all three branches to 1/4 scale.

#include <numeric>
#include <string>

#include "scannet/ops.hpp"
#include "scannet/params.hpp"
#include "scannet/types.hpp"

namespace scannet {

/// Largest divisor of `channels` not exceeding `max_groups`.
inline int norm_groups(int channels, int max_groups) {
  for (int g = std::min(channels, max_groups); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

namespace detail {

template <typename T>
void add_conv(ParameterStore<T>& p, const std::string& name, int cout, int cin, int k) {
  p.add(name + ".w", Shape{cout, cin, k, k}, Init::he_normal, cin * k * k);
}

template <typename T>
void add_norm(ParameterStore<T>& p, const std::string& name, int c) {
  p.add(name + ".g", Shape{c}, Init::ones);
  p.add(name + ".b", Shape{c}, Init::zeros);
}

template <typename T>
void add_res_block(ParameterStore<T>& p, const std::string& name, int cin, int cout, int stride) {
  add_conv(p, name + ".conv1", cout, cin, 3);
  add_norm(p, name + ".gn1", cout);
  add_conv(p, name + ".conv2", cout, cout, 3);
  add_norm(p, name + ".gn2", cout);
  if (stride != 1 || cin != cout) {
    add_conv(p, name + ".down", cout, cin, 1);
    add_norm(p, name + ".down_gn", cout);
  }
}

template <typename T>
Var conv_norm(Binder<T>& b, const std::string& name, const std::string& norm, Var x, int stride, int pad,
              int max_groups) {
  Tape<T>& t = b.tape();
  Var y = ops::conv2d(t, x, b(name + ".w"), Var{}, stride, pad);
  const int c = t.shape(y)[0];
  return ops::group_norm(t, y, b(norm + ".g"), b(norm + ".b"), norm_groups(c, max_groups));
}

template <typename T>
Var res_block(Binder<T>& b, const std::string& name, Var x, int stride, int max_groups) {
  Tape<T>& t = b.tape();
  Var h = ops::relu(t, conv_norm(b, name + ".conv1", name + ".gn1", x, stride, 1, max_groups));
  h = conv_norm(b, name + ".conv2", name + ".gn2", h, 1, 1, max_groups);
  Var sc = b.params().contains(name + ".down.w") ? conv_norm(b, name + ".down", name + ".down_gn", x, stride, 0, max_groups)
                                                  : x;
  return ops::relu(t, ops::add(t, h, sc));
}

}  // namespace detail

/// Registers every backbone parameter. Temporal encoder weights exist once (shared by both epochs).
template <typename T>
void add_backbone_params(ParameterStore<T>& p, const ModelConfig& cfg) {
  const int cu = cfg.encoder_channels_u, cv = cfg.encoder_channels_v, cs = cfg.stem();
  detail::add_conv(p, "enc.stem.conv", cs, cfg.input_channels, 3);
  detail::add_norm(p, "enc.stem.gn", cs);
  for (int i = 0; i < cfg.encoder_blocks; ++i)
    detail::add_res_block(p, "enc.s1.b" + std::to_string(i), i == 0 ? cs : cu, cu, i == 0 ? 2 : 1);
  for (int i = 0; i < cfg.encoder_blocks; ++i)
    detail::add_res_block(p, "enc.s2.b" + std::to_string(i), i == 0 ? cu : cv, cv, i == 0 ? 2 : 1);

  detail::add_conv(p, "chg.in.conv", cv, 2 * cv, 1);
  detail::add_norm(p, "chg.in.gn", cv);
  for (int i = 0; i < cfg.change_blocks; ++i) detail::add_res_block(p, "chg.r" + std::to_string(i), cv, cv, 1);

  auto add_neck = [&](const std::string& name, int skip_channels) {
    detail::add_conv(p, name + ".proj", cv, cv + skip_channels, 1);
    detail::add_norm(p, name + ".gn", cv);
  };
  if (cfg.share_temporal_neck) {
    add_neck("neck.t", cu);
  } else {
    add_neck("neck.t1", cu);
    add_neck("neck.t2", cu);
  }
  add_neck("neck.c", 2 * cu);
}

struct EncoderFeatures {
  Var x_u;  // C_u x H/4 x W/4
  Var x_v;  // C_v x H/8 x W/8
};

template <typename T>
EncoderFeatures encode(Binder<T>& b, const ModelConfig& cfg, Var image) {
  const Shape& s = b.tape().shape(image);
  if (s.size() != 3 || s[0] != cfg.input_channels)
    throw ShapeError("encode: expected " + std::to_string(cfg.input_channels) + " x H x W image, got " + shape_str(s));
  if (s[1] % 8 != 0 || s[2] % 8 != 0)
    throw ShapeError("encode: spatial size " + shape_str(s) + " is not divisible by 8");
  Tape<T>& t = b.tape();
  Var x = ops::relu(t, detail::conv_norm(b, "enc.stem.conv", "enc.stem.gn", image, 2, 1, cfg.max_norm_groups));
  for (int i = 0; i < cfg.encoder_blocks; ++i)
    x = detail::res_block(b, "enc.s1.b" + std::to_string(i), x, i == 0 ? 2 : 1, cfg.max_norm_groups);
  Var x_u = x;
  for (int i = 0; i < cfg.encoder_blocks; ++i)
    x = detail::res_block(b, "enc.s2.b" + std::to_string(i), x, i == 0 ? 2 : 1, cfg.max_norm_groups);
  return {x_u, x};
}

/// Change features from the concatenated (x1_v, x2_v) through the residual change block.
template <typename T>
Var change_branch(Binder<T>& b, const ModelConfig& cfg, Var x1_v, Var x2_v) {
  Tape<T>& t = b.tape();
  if (t.shape(x1_v) != t.shape(x2_v))
    throw ShapeError("change_branch: inputs " + shape_str(t.shape(x1_v)) + " and " + shape_str(t.shape(x2_v)) +
                     " differ");
  Var x = ops::concat0(t, {x1_v, x2_v});
  x = ops::relu(t, detail::conv_norm(b, "chg.in.conv", "chg.in.gn", x, 1, 0, cfg.max_norm_groups));
  for (int i = 0; i < cfg.change_blocks; ++i) x = detail::res_block(b, "chg.r" + std::to_string(i), x, 1, cfg.max_norm_groups);
  return x;
}

/// Decoder neck: upsample x_v by 2, concatenate with the skip features, project to C_v.
template <typename T>
Var neck(Binder<T>& b, const ModelConfig& cfg, const std::string& name, Var x_u, Var x_v) {
  Tape<T>& t = b.tape();
  const Shape& su = t.shape(x_u);
  const Shape& sv = t.shape(x_v);
  if (su.size() != 3 || sv.size() != 3 || su[1] != 2 * sv[1] || su[2] != 2 * sv[2])
    throw ShapeError("neck: skip features " + shape_str(su) + " are not at twice the resolution of " + shape_str(sv));
  Var up = ops::upsample_bilinear(t, x_v, 2);
  Var cat = ops::concat0(t, {up, x_u});
  return ops::relu(t, detail::conv_norm(b, name + ".proj", name + ".gn", cat, 1, 0, cfg.max_norm_groups));
}

struct TedOutputs {
  Var x1, x2, xc;  // each C_v x H/4 x W/4
};

template <typename T>
TedOutputs ted_forward(Binder<T>& b, const ModelConfig& cfg, Var image1, Var image2) {
  Tape<T>& t = b.tape();
  if (t.shape(image1) != t.shape(image2))
    throw ShapeError("ted_forward: images " + shape_str(t.shape(image1)) + " and " + shape_str(t.shape(image2)) +
                     " differ");
  const EncoderFeatures f1 = encode(b, cfg, image1);
  const EncoderFeatures f2 = encode(b, cfg, image2);
  const Var xc_v = change_branch(b, cfg, f1.x_v, f2.x_v);
  const std::string n1 = cfg.share_temporal_neck ? "neck.t" : "neck.t1";
  const std::string n2 = cfg.share_temporal_neck ? "neck.t" : "neck.t2";
  TedOutputs out;
  out.x1 = neck(b, cfg, n1, f1.x_u, f1.x_v);
  out.x2 = neck(b, cfg, n2, f2.x_u, f2.x_v);
  out.xc = neck(b, cfg, "neck.c", ops::concat0(t, {f1.x_u, f2.x_u}), xc_v);
  return out;
}

}  // namespace scannet
