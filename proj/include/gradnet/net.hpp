#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gradnet/autodiff.hpp"

namespace gradnet {

struct ConvSpec {
  int out_c = 0;
  int kernel = 0;
  int stride = 1;
  bool pool = false;  // 3x3 stride-2 max pool after the activation
};

/// Geometry of the five-layer backbone, the update branch, and the crops.
/// The search branch runs all five layers; the shallow target feature is the
/// output of layer 2; U1 mirrors layers 3..5 with its own parameters; U2 is a
/// shape-preserving 3x3 stack on the shallow feature.
struct NetConfig {
  bool paper_scale = false;
  int in_channels = 3;
  int z_crop = 28;
  int x_crop = 52;
  std::array<ConvSpec, 5> conv{};
  int u2_kernel = 3;
  int u2_layers = 1;
  bool u2_standardize = false;  // per-channel standardization of the gradient fed to U2
  int template_size = 4;
  int score_size = 13;

  static NetConfig desk() {
    NetConfig c;
    c.conv = {ConvSpec{8, 5, 2, false}, ConvSpec{16, 3, 1, false},
              ConvSpec{16, 3, 1, false}, ConvSpec{16, 3, 1, false},
              ConvSpec{16, 3, 1, false}};
    c.validate();
    return c;
  }

  static NetConfig paper() {
    NetConfig c;
    c.paper_scale = true;
    c.z_crop = 127;
    c.x_crop = 255;
    c.conv = {ConvSpec{32, 11, 2, true}, ConvSpec{64, 5, 1, true},
              ConvSpec{64, 3, 1, false}, ConvSpec{64, 3, 1, false},
              ConvSpec{32, 3, 1, false}};
    c.template_size = 6;
    c.score_size = 17;
    c.validate();
    return c;
  }

  int f2_channels() const { return conv[1].out_c; }
  int template_channels() const { return conv[4].out_c; }

  int total_stride() const {
    int s = 1;
    for (const auto& l : conv) {
      s *= l.stride;
      if (l.pool) s *= 2;
    }
    return s;
  }

  /// Spatial size after layers [0, depth) starting from `in`; throws a
  /// ConfigError naming the first layer that cannot be applied.
  int spatial_after(int in, int depth, const char* path) const {
    int s = in;
    for (int i = 0; i < depth; ++i) {
      if (s < conv[i].kernel)
        throw ConfigError(detail::cat("conv", i + 1, " (", path, " path): input ", s,
                                      "x", s, " smaller than ", conv[i].kernel, "x",
                                      conv[i].kernel, " kernel"));
      s = (s - conv[i].kernel) / conv[i].stride + 1;
      if (conv[i].pool) {
        if (s < 3)
          throw ConfigError(detail::cat("pool after conv", i + 1, " (", path,
                                        " path): input ", s, "x", s, " smaller than 3x3"));
        s = (s - 3) / 2 + 1;
      }
    }
    return s;
  }

  int f2_spatial() const { return spatial_after(z_crop, 2, "Z"); }

  void validate() const {
    for (int i = 0; i < 5; ++i) {
      if (conv[i].out_c < 1)
        throw ConfigError(detail::cat("conv", i + 1, ": channel width must be >= 1"));
      if (conv[i].kernel < 1 || conv[i].stride < 1)
        throw ConfigError(detail::cat("conv", i + 1, ": kernel and stride must be >= 1"));
    }
    const int z_final = spatial_after(z_crop, 5, "Z");
    if (z_final != template_size)
      throw ConfigError(detail::cat("conv5 (Z path): produces ", z_final, "x", z_final,
                                    " template, config declares ", template_size, "x",
                                    template_size));
    const int x_final = spatial_after(x_crop, 5, "X");
    if (x_final <= template_size)
      throw ConfigError(detail::cat("conv5 (X path): search feature ", x_final, "x",
                                    x_final, " not larger than template ", template_size,
                                    "x", template_size));
    const int score = x_final - template_size + 1;
    if (score != score_size)
      throw ConfigError(detail::cat("cross-correlation: yields ", score, "x", score,
                                    " score map, config declares ", score_size, "x",
                                    score_size));
    if (score_size % 2 == 0)
      throw ConfigError("score map size must be odd for centered localization");
    if (u2_kernel % 2 == 0 || u2_kernel < 1)
      throw ConfigError("u2 kernel must be odd");
    if (u2_layers < 1 || u2_layers > 2)
      throw ConfigError("u2_layers must be 1 or 2");
  }
};

struct ConvParams {
  Tensor w;  // OxCxKhxKw
  Tensor b;  // O
};

inline ConvParams he_init_conv(int out_c, int in_c, int k, Rng& rng) {
  ConvParams p;
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
  p.w = random_normal({out_c, in_c, k, k}, rng, stddev);
  p.b = Tensor({out_c});
  return p;
}

/// All trainable state of the tracker: shared backbone (search branch; its
/// first two layers also produce the shallow target feature), U1 (applied
/// twice, shared unless share_u1 is false), and U2.
struct ModelParams {
  NetConfig cfg;
  std::array<ConvParams, 5> backbone;
  std::array<ConvParams, 3> u1;
  std::array<ConvParams, 3> u1_final;  // used only when !share_u1
  std::vector<ConvParams> u2;
  // scalar response adjustment (the SiameseFC "adjust" layer); raw
  // correlation sums are far too hot for the logistic loss
  Tensor adjust_gain;
  Tensor adjust_bias;
  bool share_u1 = true;

  static ModelParams init(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams m;
    m.cfg = cfg;
    m.adjust_gain = Tensor::scalar(0.05);
    m.adjust_bias = Tensor::scalar(0.0);
    Rng rng(seed);
    int in_c = cfg.in_channels;
    for (int i = 0; i < 5; ++i) {
      m.backbone[i] = he_init_conv(cfg.conv[i].out_c, in_c, cfg.conv[i].kernel, rng);
      in_c = cfg.conv[i].out_c;
    }
    in_c = cfg.f2_channels();
    for (int i = 0; i < 3; ++i) {
      m.u1[i] = he_init_conv(cfg.conv[2 + i].out_c, in_c, cfg.conv[2 + i].kernel, rng);
      in_c = cfg.conv[2 + i].out_c;
    }
    m.u1_final = m.u1;
    const int f2c = cfg.f2_channels();
    m.u2.resize(cfg.u2_layers);
    for (int i = 0; i < cfg.u2_layers; ++i)
      m.u2[i] = he_init_conv(f2c, f2c, cfg.u2_kernel, rng);
    // Zero final U2 layer: the learned update starts as the identity.
    m.u2.back().w.fill(0.0);
    m.u2.back().b.fill(0.0);
    return m;
  }

  std::vector<std::pair<std::string, Tensor*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (int i = 0; i < 5; ++i) {
      out.emplace_back(detail::cat("backbone.conv", i + 1, ".w"), &backbone[i].w);
      out.emplace_back(detail::cat("backbone.conv", i + 1, ".b"), &backbone[i].b);
    }
    out.emplace_back("adjust.gain", &adjust_gain);
    out.emplace_back("adjust.bias", &adjust_bias);
    for (int i = 0; i < 3; ++i) {
      out.emplace_back(detail::cat("u1.conv", i + 1, ".w"), &u1[i].w);
      out.emplace_back(detail::cat("u1.conv", i + 1, ".b"), &u1[i].b);
    }
    if (!share_u1)
      for (int i = 0; i < 3; ++i) {
        out.emplace_back(detail::cat("u1_final.conv", i + 1, ".w"), &u1_final[i].w);
        out.emplace_back(detail::cat("u1_final.conv", i + 1, ".b"), &u1_final[i].b);
      }
    for (std::size_t i = 0; i < u2.size(); ++i) {
      out.emplace_back(detail::cat("u2.conv", i + 1, ".w"), &u2[i].w);
      out.emplace_back(detail::cat("u2.conv", i + 1, ".b"), &u2[i].b);
    }
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
    auto list = const_cast<ModelParams*>(this)->named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(list.size());
    for (auto& [n, t] : list) out.emplace_back(n, t);
    return out;
  }
};

// ---------------------------------------------------------------------------
// graph-level forwards

struct VarConv {
  Var w, b;
};

/// The parameter set lifted into graph leaves. Which groups are marked
/// trainable decides where gradients flow; a frozen group still participates
/// in the forward as constants.
struct NetVars {
  std::array<VarConv, 5> backbone;
  std::array<VarConv, 3> u1;
  std::array<VarConv, 3> u1_final;
  std::vector<VarConv> u2;
  Var adjust_gain, adjust_bias;
  bool share_u1 = true;

  static NetVars make(const ModelParams& m, bool train_backbone, bool train_update) {
    NetVars v;
    v.share_u1 = m.share_u1;
    v.adjust_gain = leaf(m.adjust_gain, train_backbone);
    v.adjust_bias = leaf(m.adjust_bias, train_backbone);
    for (int i = 0; i < 5; ++i)
      v.backbone[i] = {leaf(m.backbone[i].w, train_backbone),
                       leaf(m.backbone[i].b, train_backbone)};
    for (int i = 0; i < 3; ++i) {
      v.u1[i] = {leaf(m.u1[i].w, train_update), leaf(m.u1[i].b, train_update)};
      v.u1_final[i] = {leaf(m.u1_final[i].w, train_update && !m.share_u1),
                       leaf(m.u1_final[i].b, train_update && !m.share_u1)};
    }
    v.u2.resize(m.u2.size());
    for (std::size_t i = 0; i < m.u2.size(); ++i)
      v.u2[i] = {leaf(m.u2[i].w, train_update), leaf(m.u2[i].b, train_update)};
    return v;
  }

  /// (name, leaf) pairs in the same canonical order as ModelParams, restricted
  /// to leaves created trainable.
  std::vector<std::pair<std::string, Var>> trainable() const {
    std::vector<std::pair<std::string, Var>> out;
    auto push = [&](const std::string& name, const Var& v) {
      if (v->requires_grad) out.emplace_back(name, v);
    };
    for (int i = 0; i < 5; ++i) {
      push(detail::cat("backbone.conv", i + 1, ".w"), backbone[i].w);
      push(detail::cat("backbone.conv", i + 1, ".b"), backbone[i].b);
    }
    push("adjust.gain", adjust_gain);
    push("adjust.bias", adjust_bias);
    for (int i = 0; i < 3; ++i) {
      push(detail::cat("u1.conv", i + 1, ".w"), u1[i].w);
      push(detail::cat("u1.conv", i + 1, ".b"), u1[i].b);
    }
    if (!share_u1)
      for (int i = 0; i < 3; ++i) {
        push(detail::cat("u1_final.conv", i + 1, ".w"), u1_final[i].w);
        push(detail::cat("u1_final.conv", i + 1, ".b"), u1_final[i].b);
      }
    for (std::size_t i = 0; i < u2.size(); ++i) {
      push(detail::cat("u2.conv", i + 1, ".w"), u2[i].w);
      push(detail::cat("u2.conv", i + 1, ".b"), u2[i].b);
    }
    return out;
  }
};

namespace detail {

inline Var conv_block(const Var& x, const VarConv& p, int stride, bool relu_after,
                      bool pool_after) {
  Var y = bias_add(conv2d(x, p.w, stride), p.b);
  if (relu_after) y = relu(y);
  if (pool_after) y = maxpool2d(y, 3, 2);
  return y;
}

inline void check_image_input(const NetConfig& cfg, const Tensor& img, int crop,
                              const char* what) {
  if (img.ndim() != 3 || img.dim(0) != cfg.in_channels || img.dim(1) != crop ||
      img.dim(2) != crop)
    throw ConfigError(cat(what, ": expected ", cfg.in_channels, "x", crop, "x", crop,
                          " input, got ", img.shape_str()));
}

}  // namespace detail

/// Search-branch features f_x: all five layers (relu after 1..4, linear 5).
inline Var forward_fx(const NetConfig& cfg, const Var& x_img, const NetVars& v) {
  detail::check_image_input(cfg, x_img->val, cfg.x_crop, "extract_search_features");
  Var h = x_img;
  for (int i = 0; i < 5; ++i)
    h = detail::conv_block(h, v.backbone[i], cfg.conv[i].stride, i < 4, cfg.conv[i].pool);
  return h;
}

/// Shallow target features f_2: the first two backbone layers.
inline Var forward_f2(const NetConfig& cfg, const Var& z_img, const NetVars& v) {
  detail::check_image_input(cfg, z_img->val, cfg.z_crop, "extract_shallow_features");
  Var h = z_img;
  for (int i = 0; i < 2; ++i)
    h = detail::conv_block(h, v.backbone[i], cfg.conv[i].stride, true, cfg.conv[i].pool);
  return h;
}

/// Template head U1 over a shallow feature (relu between layers, linear out).
inline Var forward_u1(const NetConfig& cfg, const Var& f2z,
                      const std::array<VarConv, 3>& u1) {
  const int f2s = cfg.f2_spatial();
  if (f2z->val.ndim() != 3 || f2z->val.dim(0) != cfg.f2_channels() ||
      f2z->val.dim(1) != f2s || f2z->val.dim(2) != f2s)
    throw ConfigError(detail::cat("u1: expected ", cfg.f2_channels(), "x", f2s, "x", f2s,
                                  " shallow feature, got ", f2z->val.shape_str()));
  Var h = f2z;
  for (int i = 0; i < 3; ++i)
    h = detail::conv_block(h, u1[i], cfg.conv[2 + i].stride, i < 2, false);
  return h;
}

/// Gradient transform U2: shape-preserving odd-kernel stack (zero padded).
inline Var forward_u2(const NetConfig& cfg, const Var& g, const NetVars& v) {
  if (!g->val.same_shape(Tensor({cfg.f2_channels(), cfg.f2_spatial(), cfg.f2_spatial()})))
    throw ShapeError(detail::cat("u2: expected shallow-feature shape, got ",
                                 g->val.shape_str()));
  const int pad = (cfg.u2_kernel - 1) / 2;
  Var h = g;
  for (std::size_t i = 0; i < v.u2.size(); ++i) {
    h = bias_add(conv2d(pad2d(h, pad), v.u2[i].w, 1), v.u2[i].b);
    if (i + 1 < v.u2.size()) h = relu(h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// value-level operations

/// Valid sliding inner product of a template over a feature map; 2-D result.
inline Var cross_correlate_g(const Var& tmpl, const Var& feature) {
  const Tensor& t = tmpl->val;
  const Tensor& f = feature->val;
  if (t.ndim() != 3 || f.ndim() != 3)
    throw ShapeError("cross_correlate: expects CxHxW template and feature");
  if (t.dim(0) != f.dim(0))
    throw ShapeError(detail::cat("cross_correlate: template channels ", t.dim(0),
                                 " != feature channels ", f.dim(0)));
  if (t.dim(1) > f.dim(1) || t.dim(2) > f.dim(2))
    throw ShapeError(detail::cat("cross_correlate: template ", t.shape_str(),
                                 " larger than feature ", f.shape_str()));
  Var w4 = reshape(tmpl, {1, t.dim(0), t.dim(1), t.dim(2)});
  Var s = conv2d(feature, w4, 1);
  return reshape(s, {s->val.dim(1), s->val.dim(2)});
}

inline Tensor cross_correlate(const Tensor& tmpl, const Tensor& feature) {
  return cross_correlate_g(constant(tmpl), constant(feature))->val;
}

/// Cross-correlation followed by the scalar response adjustment; this is the
/// score map the loss and the localizer consume.
inline Var score_map_g(const Var& tmpl, const Var& feature, const Var& gain,
                       const Var& bias) {
  Var s = cross_correlate_g(tmpl, feature);
  const std::vector<int> dims = s->val.dims();
  return add(mul(s, broadcast_full(gain, dims)), broadcast_full(bias, dims));
}

inline Tensor score_map(const Tensor& tmpl, const Tensor& feature, const ModelParams& m) {
  Tensor s = cross_correlate(tmpl, feature);
  const double g = m.adjust_gain[0], b = m.adjust_bias[0];
  for (std::size_t i = 0; i < s.numel(); ++i) s[i] = g * s[i] + b;
  return s;
}

inline Tensor extract_search_features(const NetConfig& cfg, const Tensor& x_img,
                                      const ModelParams& m) {
  NetVars v = NetVars::make(m, false, false);
  return forward_fx(cfg, constant(x_img), v)->val;
}

inline Tensor extract_shallow_features(const NetConfig& cfg, const Tensor& z_img,
                                       const ModelParams& m) {
  NetVars v = NetVars::make(m, false, false);
  return forward_f2(cfg, constant(z_img), v)->val;
}

}  // namespace gradnet
