#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "gradnet/update_branch.hpp"

using namespace gradnet;

namespace {

// Small shapes keep the finite-difference sweeps fast.
struct Fixture {
  NetConfig cfg = NetConfig::desk();
  ModelParams model;
  Tensor f2z;
  std::vector<Tensor> x_feats;
  std::vector<LabelMap> labels;

  explicit Fixture(std::uint64_t seed, int k = 2, bool random_u2 = false) {
    model = ModelParams::init(cfg, seed);
    Rng rng(seed + 100);
    if (random_u2)
      for (auto& l : model.u2) {
        l.w = random_normal(l.w.dims(), rng, 0.05);
        l.b = random_normal(l.b.dims(), rng, 0.01);
      }
    f2z = random_normal({cfg.f2_channels(), cfg.f2_spatial(), cfg.f2_spatial()}, rng, 0.5);
    for (int i = 0; i < k; ++i) {
      x_feats.push_back(random_normal(
          {cfg.template_channels(), cfg.spatial_after(cfg.x_crop, 5, "X"),
           cfg.spatial_after(cfg.x_crop, 5, "X")},
          rng, 0.5));
      labels.push_back(make_label(cfg.score_size, cfg.score_size,
                                  2 + static_cast<int>(i) * 3, 4, 2.0));
    }
  }
};

Tensor finite_diff(const std::function<double(const Tensor&)>& f, Tensor at,
                   double h = 1e-4) {
  Tensor g = Tensor::zeros_like(at);
  for (std::size_t i = 0; i < at.numel(); ++i) {
    const double keep = at[i];
    at[i] = keep + h;
    const double fp = f(at);
    at[i] = keep - h;
    const double fm = f(at);
    at[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double max_rel_err(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (d < 1e-9) continue;
    m = std::max(m, d / (std::abs(a[i]) + std::abs(b[i]) + 1e-12));
  }
  return m;
}

}  // namespace

TEST(EmbedInitial, ZeroFeatureZeroBiasGivesZeroTemplate) {
  NetConfig cfg = NetConfig::desk();
  ModelParams m = ModelParams::init(cfg, 2);
  Tensor z({cfg.f2_channels(), cfg.f2_spatial(), cfg.f2_spatial()});
  EXPECT_DOUBLE_EQ(embed_initial(cfg, z, m).abs_max(), 0.0);
}

TEST(EmbedInitial, GradientWrtFeatureMatchesFiniteDifferences) {
  Fixture fx(7, 1);
  Rng probe_rng(9);
  Tensor probe = random_normal({fx.cfg.template_channels(), fx.cfg.template_size,
                                fx.cfg.template_size},
                               probe_rng);  // weights of the scalar functional
  auto f = [&](const Tensor& t) {
    Tensor beta = embed_initial(fx.cfg, t, fx.model);
    double acc = 0;
    for (std::size_t i = 0; i < beta.numel(); ++i) acc += beta[i] * probe[i];
    return acc;
  };
  NetVars vars = NetVars::make(fx.model, false, false);
  Var z = leaf(fx.f2z, true);
  Var loss = sum_all(mul(forward_u1(fx.cfg, z, vars.u1), constant(probe)));
  Tensor got = grad(loss, {z})[0]->val;
  EXPECT_LT(max_rel_err(got, finite_diff(f, fx.f2z)), 1e-4);
}

TEST(ShallowGradient, MatchesFiniteDifferencesOfSummedLoss) {
  Fixture fx(11, 2);
  Tensor got = shallow_gradient(fx.cfg, fx.f2z, fx.model, fx.x_feats, fx.labels);
  auto f = [&](const Tensor& t) {
    Tensor beta = embed_initial(fx.cfg, t, fx.model);
    double acc = 0;
    for (std::size_t i = 0; i < fx.x_feats.size(); ++i)
      acc += logistic_loss(score_map(beta, fx.x_feats[i], fx.model), fx.labels[i]);
    return acc;
  };
  EXPECT_LT(max_rel_err(got, finite_diff(f, fx.f2z)), 1e-4);
}

TEST(ShallowGradient, SaturatedLossGivesVanishingGradient) {
  Fixture fx(13, 1);
  // Channel-constant search feature: every score cell equals the same value,
  // which we scale past the logit clamp so the whole map sits on the
  // saturation plateau.
  Tensor beta = embed_initial(fx.cfg, fx.f2z, fx.model);
  Rng rng(71);
  Tensor feat = fx.x_feats[0];
  std::vector<double> chan(static_cast<std::size_t>(feat.dim(0)));
  for (auto& c : chan) c = rng.uniform() < 0.5 ? -1.0 : 1.0;
  for (int c = 0; c < feat.dim(0); ++c)
    for (int y = 0; y < feat.dim(1); ++y)
      for (int x = 0; x < feat.dim(2); ++x) feat(c, y, x) = chan[static_cast<std::size_t>(c)];
  double q = score_map(beta, feat, fx.model)(0, 0);
  ASSERT_GT(std::abs(q), 1e-9);
  const double scale = 60.0 / std::abs(q);  // bias is zero, so scores are linear in feat
  for (std::size_t i = 0; i < feat.numel(); ++i) feat[i] *= scale;
  Tensor s = score_map(beta, feat, fx.model);
  EXPECT_GE(s.abs_max(), kLogitClamp);
  LabelMap lm = fx.labels[0];
  for (int y = 0; y < lm.y.dim(0); ++y)
    for (int x = 0; x < lm.y.dim(1); ++x) lm.y(y, x) = s(y, x) >= 0 ? 1.0 : -1.0;
  Tensor g = shallow_gradient(fx.cfg, fx.f2z, fx.model, {feat}, {lm});
  EXPECT_LE(g.abs_max(), 1e-8);
}

TEST(ShallowGradient, LinearInLabelWeights) {
  Fixture fx(17, 2);
  Tensor g1 = shallow_gradient(fx.cfg, fx.f2z, fx.model, fx.x_feats, fx.labels);
  std::vector<LabelMap> doubled = fx.labels;
  for (auto& lm : doubled)
    for (std::size_t i = 0; i < lm.weight.numel(); ++i) lm.weight[i] *= 2.0;
  Tensor g2 = shallow_gradient(fx.cfg, fx.f2z, fx.model, fx.x_feats, doubled);
  for (std::size_t i = 0; i < g1.numel(); ++i) EXPECT_NEAR(g2[i], 2.0 * g1[i], 1e-12);
}

TEST(ApplyGradientUpdate, ZeroInitU2IsIdentity) {
  Fixture fx(19, 1);  // freshly initialized model: final U2 layer is zero
  Rng rng(3);
  Tensor g = random_normal(fx.f2z.dims(), rng);
  Tensor h2 = apply_gradient_update(fx.cfg, fx.f2z, g, fx.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(h2, fx.f2z), 0.0);
}

TEST(ApplyGradientUpdate, ZeroGradientZeroBiasIsIdentity) {
  Fixture fx(23, 1, /*random_u2=*/true);
  for (auto& l : fx.model.u2) l.b.fill(0.0);
  Tensor g(fx.f2z.dims());
  Tensor h2 = apply_gradient_update(fx.cfg, fx.f2z, g, fx.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(h2, fx.f2z), 0.0);
}

TEST(ApplyGradientUpdate, CorrectionMatchesPaddedConvOracle) {
  Fixture fx(29, 1, /*random_u2=*/true);
  Rng rng(5);
  Tensor g = random_normal(fx.f2z.dims(), rng);
  Tensor h2 = apply_gradient_update(fx.cfg, fx.f2z, g, fx.model);
  // oracle: zero-pad g by 1, direct 3x3 convolution, add bias
  const auto& u2 = fx.model.u2[0];
  const int C = g.dim(0), H = g.dim(1), W = g.dim(2);
  Tensor pad({C, H + 2, W + 2});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) pad(c, y + 1, x + 1) = g(c, y, x);
  for (int o = 0; o < C; ++o)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = u2.b[static_cast<std::size_t>(o)];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              acc += u2.w(o, c, ky, kx) * pad(c, y + ky, x + kx);
        EXPECT_NEAR(h2(o, y, x) - fx.f2z(o, y, x), acc, 1e-6 * (1 + std::abs(acc)));
      }
}

TEST(GenerateTemplate, ZeroInitU2GivesIdentityPipeline) {
  Fixture fx(31, 2);
  TemplateGenResult r =
      generate_template(fx.cfg, fx.f2z, fx.x_feats, fx.labels, fx.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(r.beta_star, r.beta), 0.0);
  for (std::size_t i = 0; i < r.scores.size(); ++i)
    EXPECT_DOUBLE_EQ(max_abs_diff(r.scores_star[i], r.scores[i]), 0.0);
  EXPECT_DOUBLE_EQ(r.loss_final, r.loss_initial);
  EXPECT_DOUBLE_EQ(max_abs_diff(r.h2z, fx.f2z), 0.0);
  Tensor beta = embed_initial(fx.cfg, fx.f2z, fx.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(r.beta, beta), 0.0);
}

TEST(GenerateTemplate, DeterministicAndPure) {
  Fixture fx(37, 3, /*random_u2=*/true);
  Tensor z_before = fx.f2z;
  TemplateGenResult a = generate_template(fx.cfg, fx.f2z, fx.x_feats, fx.labels, fx.model);
  TemplateGenResult b = generate_template(fx.cfg, fx.f2z, fx.x_feats, fx.labels, fx.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(a.beta_star, b.beta_star), 0.0);
  EXPECT_DOUBLE_EQ(max_abs_diff(a.grad_f2z, b.grad_f2z), 0.0);
  EXPECT_DOUBLE_EQ(a.loss_final, b.loss_final);
  EXPECT_DOUBLE_EQ(max_abs_diff(fx.f2z, z_before), 0.0);
}

TEST(GenerateTemplate, SingletonListMatchesComponents) {
  Fixture fx(41, 1, /*random_u2=*/true);
  TemplateGenResult r =
      generate_template(fx.cfg, fx.f2z, fx.x_feats, fx.labels, fx.model);
  Tensor g = shallow_gradient(fx.cfg, fx.f2z, fx.model, fx.x_feats, fx.labels);
  EXPECT_DOUBLE_EQ(max_abs_diff(r.grad_f2z, g), 0.0);
  Tensor h2 = apply_gradient_update(fx.cfg, fx.f2z, g, fx.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(r.h2z, h2), 0.0);
  Tensor beta_star = embed_initial(fx.cfg, h2, fx.model, /*final_head=*/true);
  EXPECT_DOUBLE_EQ(max_abs_diff(r.beta_star, beta_star), 0.0);
}

TEST(GenerateTemplate, UnsharedCopiesMatchSharedAtInit) {
  Fixture shared(43, 2, /*random_u2=*/true);
  Fixture two_u(43, 2, /*random_u2=*/true);
  two_u.model.share_u1 = false;
  two_u.model.u1_final = two_u.model.u1;
  TemplateGenResult a =
      generate_template(shared.cfg, shared.f2z, shared.x_feats, shared.labels, shared.model);
  TemplateGenResult b =
      generate_template(two_u.cfg, two_u.f2z, two_u.x_feats, two_u.labels, two_u.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(a.beta_star, b.beta_star), 0.0);
  EXPECT_DOUBLE_EQ(a.loss_final, b.loss_final);
}

TEST(GenerateTemplate, ParamGradientMatchesFiniteDifferences) {
  // End-to-end check of d(final loss)/d(alpha1, alpha2) including the
  // second-order path, on a thinned coordinate sample.
  Fixture fx(47, 2, /*random_u2=*/true);
  NetVars vars = NetVars::make(fx.model, false, true);
  std::vector<Var> xf;
  for (const auto& f : fx.x_feats) xf.push_back(constant(f));
  TemplateGenGraph g =
      template_generation_graph(fx.cfg, leaf(fx.f2z, true), xf, fx.labels, vars);
  auto trainable = vars.trainable();
  std::vector<Var> wrt;
  for (auto& [n, v] : trainable) wrt.push_back(v);
  auto grads = grad(g.loss_final, wrt);

  auto loss_with = [&](ModelParams m) {
    TemplateGenResult r = generate_template(fx.cfg, fx.f2z, fx.x_feats, fx.labels, m);
    return r.loss_final;
  };
  Rng pick(7);
  int checked = 0;
  auto named = fx.model.named_tensors();
  for (std::size_t t = 0; t < trainable.size(); ++t) {
    Tensor* host = nullptr;
    for (auto& [n, ptr] : named)
      if (n == trainable[t].first) host = ptr;
    ASSERT_NE(host, nullptr) << trainable[t].first;
    for (int probe = 0; probe < 4; ++probe) {
      const std::size_t i = pick.raw() % host->numel();
      const double keep = (*host)[i];
      const double h = 1e-4;
      (*host)[i] = keep + h;
      const double fp = loss_with(fx.model);
      (*host)[i] = keep - h;
      const double fm = loss_with(fx.model);
      (*host)[i] = keep;
      const double want = (fp - fm) / (2 * h);
      const double got = grads[t]->val[i];
      const double denom = std::abs(want) + std::abs(got) + 1e-12;
      if (std::abs(want - got) > 1e-9)
        EXPECT_LT(std::abs(want - got) / denom, 1e-4)
            << trainable[t].first << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GE(checked, 30);
}

TEST(GenerateTemplate, SecondOrderPathChangesU1Gradient) {
  Fixture fx(53, 2, /*random_u2=*/true);
  auto u1_grad = [&](bool detach_g) {
    NetVars vars = NetVars::make(fx.model, false, true);
    std::vector<Var> xf;
    for (const auto& f : fx.x_feats) xf.push_back(constant(f));
    GenOptions opt;
    opt.detach_gradient = detach_g;
    TemplateGenGraph g =
        template_generation_graph(fx.cfg, leaf(fx.f2z, true), xf, fx.labels, vars, opt);
    std::vector<Var> wrt;
    for (int i = 0; i < 3; ++i) wrt.push_back(vars.u1[i].w);
    return grad(g.loss_final, wrt);
  };
  auto full = u1_grad(false);
  auto detached = u1_grad(true);
  double diff = 0;
  for (int i = 0; i < 3; ++i) diff = std::max(diff, max_abs_diff(full[i]->val, detached[i]->val));
  EXPECT_GT(diff, 1e-6);
}

TEST(GenerateTemplate, SharedHeadReadsIdenticalParameters) {
  // With share_u1 the gradient w.r.t. alpha1 accumulates both applications:
  // it must differ from the two_U split where each copy sees one application.
  Fixture fx(59, 2, /*random_u2=*/true);
  NetVars shared = NetVars::make(fx.model, false, true);
  std::vector<Var> xf;
  for (const auto& f : fx.x_feats) xf.push_back(constant(f));
  TemplateGenGraph g1 =
      template_generation_graph(fx.cfg, leaf(fx.f2z, true), xf, fx.labels, shared);
  Var gw_shared = grad(g1.loss_final, {shared.u1[0].w})[0];

  ModelParams split = fx.model;
  split.share_u1 = false;
  split.u1_final = split.u1;
  NetVars twoVars = NetVars::make(split, false, true);
  TemplateGenGraph g2 =
      template_generation_graph(fx.cfg, leaf(fx.f2z, true), xf, fx.labels, twoVars);
  Var gw_init = grad(g2.loss_final, {twoVars.u1[0].w})[0];
  Var gw_final = grad(g2.loss_final, {twoVars.u1_final[0].w})[0];
  // shared gradient = initial-head contribution + final-head contribution
  Tensor sum = gw_init->val;
  for (std::size_t i = 0; i < sum.numel(); ++i) sum[i] += gw_final->val[i];
  EXPECT_LT(max_rel_diff(gw_shared->val, sum, 1e-9), 1e-8);
}
