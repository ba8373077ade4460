#pragma once

#include "gradnet/labels.hpp"
#include "gradnet/net.hpp"

namespace gradnet {

struct GenOptions {
  bool use_update = true;        // false: the template stays the initial embedding
  bool detach_gradient = false;  // cut the second-order path through the inner gradient
  bool inner_create_graph = true;
};

/// Everything the two-forward-one-backward pipeline produces, as live graph
/// nodes so callers can differentiate the final loss through the whole thing.
struct TemplateGenGraph {
  Var beta;
  std::vector<Var> scores;
  Var loss_initial;
  Var grad_f2z;
  Var h2z;
  Var beta_star;
  std::vector<Var> scores_star;
  Var loss_final;
};

/// Value-level snapshot of the same.
struct TemplateGenResult {
  Tensor beta;
  std::vector<Tensor> scores;
  double loss_initial = 0;
  Tensor grad_f2z;
  Tensor h2z;
  Tensor beta_star;
  std::vector<Tensor> scores_star;
  double loss_final = 0;
};

namespace detail {

/// Per-channel (x - mean) / (std + eps); optional preconditioning of the
/// gradient before U2, built from graph ops so it stays differentiable.
inline Var standardize_channels(const Var& g) {
  const int C = g->val.dim(0), H = g->val.dim(1), W = g->val.dim(2);
  const double n = static_cast<double>(H) * W;
  Var mean = scale(channel_sum(g), 1.0 / n);
  Var centered = sub(g, channel_broadcast(mean, H, W));
  Var var = scale(channel_sum(mul(centered, centered)), 1.0 / n);
  Tensor inv_std({C});
  for (int c = 0; c < C; ++c)
    inv_std[static_cast<std::size_t>(c)] =
        1.0 / (std::sqrt(var->val[static_cast<std::size_t>(c)]) + 1e-8);
  // The scaling factor is treated as data, not differentiated through.
  return mul(centered, channel_broadcast(constant(inv_std), H, W));
}

}  // namespace detail

/// Eqs. of the template-generation pipeline, over k >= 1 search regions that
/// all share the one template from z_feat: initial embedding, scoring, loss,
/// one backward pass for the shallow gradient, the learned additive update,
/// and the re-embedding. z_feat must have requires_grad set (the inner
/// gradient is taken with respect to it even when it is never optimized).
inline TemplateGenGraph template_generation_graph(
    const NetConfig& cfg, const Var& z_feat, const std::vector<Var>& x_feats,
    const std::vector<LabelMap>& labels, const NetVars& vars,
    const GenOptions& opt = {}) {
  if (x_feats.empty() || x_feats.size() != labels.size())
    throw ConfigError("template generation: need equal nonzero counts of search features and labels");
  TemplateGenGraph g;
  g.beta = forward_u1(cfg, z_feat, vars.u1);
  g.scores.reserve(x_feats.size());
  for (std::size_t i = 0; i < x_feats.size(); ++i) {
    g.scores.push_back(score_map_g(g.beta, x_feats[i], vars.adjust_gain, vars.adjust_bias));
    Var li = logistic_loss_g(g.scores[i], labels[i]);
    g.loss_initial = i == 0 ? li : add(g.loss_initial, li);
  }

  if (opt.use_update) {
    if (!z_feat->requires_grad)
      throw Error("template generation: z_feat must be differentiable for the gradient update");
    g.grad_f2z = grad(g.loss_initial, {z_feat}, opt.inner_create_graph)[0];
    Var ginput = opt.detach_gradient ? detach(g.grad_f2z) : g.grad_f2z;
    if (cfg.u2_standardize) ginput = detail::standardize_channels(ginput);
    g.h2z = add(z_feat, forward_u2(cfg, ginput, vars));
    g.beta_star = forward_u1(cfg, g.h2z, vars.share_u1 ? vars.u1 : vars.u1_final);
  } else {
    g.grad_f2z = constant(Tensor::zeros_like(z_feat->val));
    g.h2z = z_feat;
    g.beta_star = g.beta;
  }

  g.scores_star.reserve(x_feats.size());
  for (std::size_t i = 0; i < x_feats.size(); ++i) {
    g.scores_star.push_back(score_map_g(g.beta_star, x_feats[i], vars.adjust_gain, vars.adjust_bias));
    Var li = logistic_loss_g(g.scores_star[i], labels[i]);
    g.loss_final = i == 0 ? li : add(g.loss_final, li);
  }
  if (!std::isfinite(g.loss_final->val[0]) || !std::isfinite(g.loss_initial->val[0]))
    throw NumericError("template generation: non-finite loss");
  return g;
}

/// One-shot template generation on plain tensors; z_feat is f2(Z) at
/// initialization or the persisted updated feature h2(Z1) during online
/// updates — the pipeline is the same either way.
inline TemplateGenResult generate_template(const NetConfig& cfg, const Tensor& z_feat,
                                           const std::vector<Tensor>& x_feats,
                                           const std::vector<LabelMap>& labels,
                                           const ModelParams& m,
                                           bool use_update = true) {
  NetVars vars = NetVars::make(m, false, false);
  std::vector<Var> xf;
  xf.reserve(x_feats.size());
  for (const auto& f : x_feats) xf.push_back(constant(f));
  GenOptions opt;
  opt.use_update = use_update;
  opt.inner_create_graph = false;
  TemplateGenGraph g =
      template_generation_graph(cfg, leaf(z_feat, true), xf, labels, vars, opt);
  TemplateGenResult r;
  r.beta = g.beta->val;
  for (const auto& s : g.scores) r.scores.push_back(s->val);
  r.loss_initial = g.loss_initial->val[0];
  r.grad_f2z = g.grad_f2z->val;
  r.h2z = g.h2z->val;
  r.beta_star = g.beta_star->val;
  for (const auto& s : g.scores_star) r.scores_star.push_back(s->val);
  r.loss_final = g.loss_final->val[0];
  return r;
}

// Spec-level single operations, value form.

inline Tensor embed_initial(const NetConfig& cfg, const Tensor& f2z, const ModelParams& m,
                            bool final_head = false) {
  NetVars vars = NetVars::make(m, false, false);
  return forward_u1(cfg, constant(f2z),
                    (final_head && !m.share_u1) ? vars.u1_final : vars.u1)
      ->val;
}

/// Exact reverse-mode gradient of sum_i l(U1(f2z) * fx_i, Y_i) w.r.t. f2z.
inline Tensor shallow_gradient(const NetConfig& cfg, const Tensor& f2z,
                               const ModelParams& m, const std::vector<Tensor>& x_feats,
                               const std::vector<LabelMap>& labels) {
  NetVars vars = NetVars::make(m, false, false);
  Var z = leaf(f2z, true);
  Var loss;
  Var beta = forward_u1(cfg, z, vars.u1);
  if (x_feats.empty() || x_feats.size() != labels.size())
    throw ConfigError("shallow_gradient: need equal nonzero counts of features and labels");
  for (std::size_t i = 0; i < x_feats.size(); ++i) {
    Var li = logistic_loss_g(
        score_map_g(beta, constant(x_feats[i]), vars.adjust_gain, vars.adjust_bias),
        labels[i]);
    loss = i == 0 ? li : add(loss, li);
  }
  Tensor g = grad(loss, {z})[0]->val;
  if (!g.all_finite()) throw NumericError("shallow_gradient: non-finite gradient");
  return g;
}

/// h2(Z) = f2(Z) + U2(G).
inline Tensor apply_gradient_update(const NetConfig& cfg, const Tensor& f2z,
                                    const Tensor& grad_f2z, const ModelParams& m) {
  if (!f2z.same_shape(grad_f2z))
    throw ShapeError(detail::cat("apply_gradient_update: feature ", f2z.shape_str(),
                                 " vs gradient ", grad_f2z.shape_str()));
  NetVars vars = NetVars::make(m, false, false);
  Var g = constant(grad_f2z);
  if (cfg.u2_standardize) g = detail::standardize_channels(g);
  return add(constant(f2z), forward_u2(cfg, g, vars))->val;
}

}  // namespace gradnet
