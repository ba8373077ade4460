#include <gtest/gtest.h>

#include <cmath>

#include "gradnet/net.hpp"
#include "gradnet/update_branch.hpp"

using namespace gradnet;

namespace {

Tensor oracle_conv2d(const Tensor& x, const Tensor& w, int stride) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;
  Tensor out({O, Ho, Wo});
  for (int o = 0; o < O; ++o)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = 0;
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx)
              acc += w(o, c, ky, kx) * x(c, oy * stride + ky, ox * stride + kx);
        out(o, oy, ox) = acc;
      }
  return out;
}

Tensor oracle_layer(const Tensor& x, const ConvParams& p, int stride, bool relu_after) {
  Tensor y = oracle_conv2d(x, p.w, stride);
  for (int o = 0; o < y.dim(0); ++o)
    for (int yy = 0; yy < y.dim(1); ++yy)
      for (int xx = 0; xx < y.dim(2); ++xx) {
        double v = y(o, yy, xx) + p.b[static_cast<std::size_t>(o)];
        y(o, yy, xx) = relu_after ? std::max(0.0, v) : v;
      }
  return y;
}

}  // namespace

TEST(NetConfig, DeskGeometryIsConsistent) {
  NetConfig cfg = NetConfig::desk();
  EXPECT_EQ(cfg.template_size, 4);
  EXPECT_EQ(cfg.score_size, 13);
  EXPECT_EQ(cfg.total_stride(), 2);
  EXPECT_EQ(cfg.f2_spatial(), 10);
}

TEST(NetConfig, PaperGeometryMatchesSiameseFC) {
  NetConfig cfg = NetConfig::paper();
  EXPECT_EQ(cfg.template_size, 6);
  EXPECT_EQ(cfg.score_size, 17);
  EXPECT_EQ(cfg.total_stride(), 8);
  EXPECT_EQ(cfg.f2_spatial(), 12);
}

TEST(NetConfig, InvalidGeometryNamesLayer) {
  NetConfig cfg = NetConfig::desk();
  cfg.conv[2].kernel = 9;  // Z path collapses below the kernel at conv4
  try {
    cfg.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("conv4"), std::string::npos);
  }
  NetConfig bad = NetConfig::desk();
  bad.conv[1].out_c = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  NetConfig wrong = NetConfig::desk();
  wrong.score_size = 11;
  EXPECT_THROW(wrong.validate(), ConfigError);
}

TEST(CoreNet, DeskShapesComposeToScoreMap) {
  NetConfig cfg = NetConfig::desk();
  ModelParams m = ModelParams::init(cfg, 5);
  Rng rng(17);
  Tensor x = random_normal({3, cfg.x_crop, cfg.x_crop}, rng, 0.3);
  Tensor z = random_normal({3, cfg.z_crop, cfg.z_crop}, rng, 0.3);
  Tensor fx = extract_search_features(cfg, x, m);
  Tensor f2z = extract_shallow_features(cfg, z, m);
  EXPECT_EQ(fx.shape_str(), "16x16x16");
  EXPECT_EQ(f2z.shape_str(), "16x10x10");
  Tensor beta = embed_initial(cfg, f2z, m);
  EXPECT_EQ(beta.shape_str(), "16x4x4");
  Tensor s = cross_correlate(beta, fx);
  EXPECT_EQ(s.shape_str(), "13x13");
}

TEST(CoreNet, PaperScaleShapes) {
  NetConfig cfg = NetConfig::paper();
  ModelParams m = ModelParams::init(cfg, 5);
  Rng rng(19);
  Tensor x = random_normal({3, 255, 255}, rng, 0.1);
  Tensor z = random_normal({3, 127, 127}, rng, 0.1);
  Tensor fx = extract_search_features(cfg, x, m);
  Tensor f2z = extract_shallow_features(cfg, z, m);
  EXPECT_EQ(fx.dim(1), 22);
  EXPECT_EQ(f2z.dim(1), 12);
  Tensor beta = embed_initial(cfg, f2z, m);
  EXPECT_EQ(beta.dim(1), 6);
  Tensor s = cross_correlate(beta, fx);
  EXPECT_EQ(s.shape_str(), "17x17");
}

TEST(CoreNet, ZeroInputZeroBiasGivesZeroFeatures) {
  NetConfig cfg = NetConfig::desk();
  ModelParams m = ModelParams::init(cfg, 5);  // biases start at zero
  Tensor x({3, cfg.x_crop, cfg.x_crop});
  Tensor z({3, cfg.z_crop, cfg.z_crop});
  EXPECT_DOUBLE_EQ(extract_search_features(cfg, x, m).abs_max(), 0.0);
  EXPECT_DOUBLE_EQ(extract_shallow_features(cfg, z, m).abs_max(), 0.0);
}

TEST(CoreNet, MatchesDirectConvolutionOracle) {
  NetConfig cfg = NetConfig::desk();
  ModelParams m = ModelParams::init(cfg, 21);
  Rng rng(23);
  Tensor x = random_normal({3, cfg.x_crop, cfg.x_crop}, rng, 0.5);
  Tensor got = extract_search_features(cfg, x, m);
  Tensor h = x;
  for (int i = 0; i < 5; ++i) h = oracle_layer(h, m.backbone[i], cfg.conv[i].stride, i < 4);
  EXPECT_LT(max_rel_diff(got, h), 1e-6);

  Tensor z = random_normal({3, cfg.z_crop, cfg.z_crop}, rng, 0.5);
  Tensor got2 = extract_shallow_features(cfg, z, m);
  Tensor h2 = z;
  for (int i = 0; i < 2; ++i) h2 = oracle_layer(h2, m.backbone[i], cfg.conv[i].stride, true);
  EXPECT_LT(max_rel_diff(got2, h2), 1e-6);
}

TEST(CoreNet, WrongCropSizeNamesOperation) {
  NetConfig cfg = NetConfig::desk();
  ModelParams m = ModelParams::init(cfg, 5);
  Tensor bad({3, 17, 17});
  try {
    extract_search_features(cfg, bad, m);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("extract_search_features"), std::string::npos);
  }
}

TEST(CoreNet, ForwardDeterministic) {
  NetConfig cfg = NetConfig::desk();
  ModelParams m = ModelParams::init(cfg, 31);
  Rng rng(37);
  Tensor x = random_normal({3, cfg.x_crop, cfg.x_crop}, rng);
  Tensor a = extract_search_features(cfg, x, m);
  Tensor b = extract_search_features(cfg, x, m);
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 0.0);
}
