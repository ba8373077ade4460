#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gradnet/checkpoint.hpp"
#include "gradnet/config.hpp"
#include "gradnet/data.hpp"
#include "gradnet/update_branch.hpp"

namespace gradnet {

enum class Variant { ours, no_M, no_MG, no_U, two_U };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::ours: return "ours";
    case Variant::no_M: return "no_M";
    case Variant::no_MG: return "no_MG";
    case Variant::no_U: return "no_U";
    case Variant::two_U: return "two_U";
  }
  return "?";
}

inline Variant variant_from(const std::string& s) {
  if (s == "ours") return Variant::ours;
  if (s == "no_M") return Variant::no_M;
  if (s == "no_MG") return Variant::no_MG;
  if (s == "no_U") return Variant::no_U;
  if (s == "two_U") return Variant::two_U;
  throw ConfigError(detail::cat("bad value for key 'train.variant': '", s, "'"));
}

struct TrainConfig {
  Variant variant = Variant::ours;
  int steps = 1000;
  int k = 4;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  double label_radius = 2.0;
  bool gaussian_label_weights = false;
  bool freeze_backbone = true;  // ignored by no_MG, which exists to train the backbone
  std::string init_from;        // checkpoint to start the update branch from
  int pairs_per_video = 8;
  int max_frame_gap = 30;
  int log_every = 10;
  int heldout_every = 0;  // 0 disables the held-out trace

  // One anchor template scored on every region in the batch?
  bool generalize() const { return variant == Variant::ours || variant == Variant::no_U; }
  // Gradient update applied inside the pipeline?
  bool use_update() const {
    return variant == Variant::ours || variant == Variant::no_M || variant == Variant::two_U;
  }
  bool share_u1() const { return variant != Variant::two_U; }
  bool train_backbone() const {
    return variant == Variant::no_MG ? true : !freeze_backbone;
  }

  void validate() const {
    if (k < 1) throw ConfigError("train.k must be >= 1");
    if (generalize() && variant == Variant::ours && k < 2)
      throw ConfigError("template generalization needs k >= 2 cross-video regions");
    if (steps < 0) throw ConfigError("train.steps must be >= 0");
    if (lr <= 0) throw ConfigError("train.lr must be positive");
  }
};

inline TrainConfig train_config_from(const KvConfig& kv) {
  kv.check_known("train", {"variant", "steps", "k", "lr", "momentum", "seed",
                           "label_radius", "gaussian_label_weights", "freeze_backbone",
                           "init_from", "pairs_per_video", "max_frame_gap", "log_every",
                           "heldout_every"});
  TrainConfig c;
  c.variant = variant_from(kv.get_str("train.variant", "ours"));
  c.steps = kv.get_int("train.steps", c.steps);
  c.k = kv.get_int("train.k", c.k);
  c.lr = kv.get_double("train.lr", c.lr);
  c.momentum = kv.get_double("train.momentum", c.momentum);
  c.seed = kv.get_u64("train.seed", c.seed);
  c.label_radius = kv.get_double("train.label_radius", c.label_radius);
  c.gaussian_label_weights = kv.get_bool("train.gaussian_label_weights", false);
  c.freeze_backbone = kv.get_bool("train.freeze_backbone", c.freeze_backbone);
  c.init_from = kv.get_str("train.init_from", "");
  c.pairs_per_video = kv.get_int("train.pairs_per_video", c.pairs_per_video);
  c.max_frame_gap = kv.get_int("train.max_frame_gap", c.max_frame_gap);
  c.log_every = kv.get_int("train.log_every", c.log_every);
  c.heldout_every = kv.get_int("train.heldout_every", c.heldout_every);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// optimizer

struct SgdState {
  double lr = 0.01;
  double momentum = 0.9;
  std::map<std::string, Tensor> velocity;
};

inline void sgd_apply(SgdState& opt, ModelParams& model,
                      const std::vector<std::pair<std::string, Var>>& trainable,
                      const std::vector<Var>& grads) {
  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : model.named_tensors()) by_name[name] = t;
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    const auto& name = trainable[i].first;
    Tensor* p = by_name.at(name);
    Tensor& v = opt.velocity.try_emplace(name, Tensor::zeros_like(*p)).first->second;
    const Tensor& g = grads[i]->val;
    for (std::size_t j = 0; j < p->numel(); ++j) {
      v[j] = opt.momentum * v[j] + g[j];
      (*p)[j] -= opt.lr * v[j];
    }
  }
}

// ---------------------------------------------------------------------------
// batches and features

/// k pairs from k distinct videos, uniformly; deterministic given rng state.
inline std::vector<int> sample_batch(const PairDataset& ds, int k, Rng& rng) {
  const int nv = ds.num_videos();
  if (nv < k)
    throw ConfigError(detail::cat("sample_batch: need ", k, " distinct videos, dataset has ",
                                  nv));
  std::vector<int> videos(static_cast<std::size_t>(nv));
  for (int i = 0; i < nv; ++i) videos[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + rng.uniform_int(nv - i);
    std::swap(videos[static_cast<std::size_t>(i)], videos[static_cast<std::size_t>(j)]);
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const auto& members = ds.by_video[static_cast<std::size_t>(videos[static_cast<std::size_t>(i)])];
    out.push_back(members[static_cast<std::size_t>(rng.uniform_int(
        static_cast<int>(members.size())))]);
  }
  return out;
}

/// Memoizes frozen-backbone features on the pairs; bumping the version (after
/// any backbone update) invalidates everything.
class FeatureCache {
 public:
  const Tensor& fx(const NetConfig& cfg, const ModelParams& m, const TrainingPair& p) const {
    if (p.cache_version != version_) refresh(cfg, m, p);
    return p.fx_cache;
  }
  const Tensor& f2z(const NetConfig& cfg, const ModelParams& m, const TrainingPair& p) const {
    if (p.cache_version != version_) refresh(cfg, m, p);
    return p.f2z_cache;
  }
  void invalidate() { ++version_; }

 private:
  void refresh(const NetConfig& cfg, const ModelParams& m, const TrainingPair& p) const {
    p.fx_cache = extract_search_features(cfg, to_tensor(p.x), m);
    p.f2z_cache = extract_shallow_features(cfg, to_tensor(p.z), m);
    p.cache_version = version_;
  }
  std::int64_t version_ = 0;
};

struct StepOutcome {
  double loss_initial = 0;
  double loss_final = 0;
};

namespace detail {

struct StepInputs {
  Var z_feat;                // differentiable shallow feature of the anchor Z
  std::vector<Var> x_feats;  // one per pair
  std::vector<const LabelMap*> labels;
};

inline StepInputs gather_inputs(const NetConfig& cfg, const TrainConfig& tc,
                                const ModelParams& model, const NetVars& vars,
                                const PairDataset& ds, const std::vector<int>& batch,
                                const FeatureCache& cache, int anchor) {
  StepInputs in;
  const TrainingPair& zp = ds.pairs[static_cast<std::size_t>(batch[static_cast<std::size_t>(anchor)])];
  if (tc.train_backbone()) {
    in.z_feat = forward_f2(cfg, constant(to_tensor(zp.z)), vars);
    if (!in.z_feat->requires_grad && tc.use_update())
      in.z_feat = leaf(in.z_feat->val, true);
    for (int idx : batch) {
      const TrainingPair& p = ds.pairs[static_cast<std::size_t>(idx)];
      in.x_feats.push_back(forward_fx(cfg, constant(to_tensor(p.x)), vars));
      in.labels.push_back(&p.y);
    }
  } else {
    in.z_feat = leaf(cache.f2z(cfg, model, zp), true);
    for (int idx : batch) {
      const TrainingPair& p = ds.pairs[static_cast<std::size_t>(idx)];
      in.x_feats.push_back(constant(cache.fx(cfg, model, p)));
      in.labels.push_back(&p.y);
    }
  }
  return in;
}

inline std::string batch_ids(const PairDataset& ds, const std::vector<int>& batch) {
  std::string s;
  for (int idx : batch) {
    const auto& p = ds.pairs[static_cast<std::size_t>(idx)];
    if (!s.empty()) s += " ";
    s += cat("video", p.video_id, "[", p.z_frame, "->", p.x_frame, "]");
  }
  return s;
}

}  // namespace detail

/// Algorithm-1 step: the anchor pair's template is scored on every search
/// region in the batch, updated once through the gradient, re-scored, and the
/// final summed loss trains the update branch with second-order terms kept.
inline StepOutcome generalization_step(const NetConfig& cfg, const TrainConfig& tc,
                                       ModelParams& model, SgdState& opt,
                                       const PairDataset& ds, const std::vector<int>& batch,
                                       FeatureCache& cache, int anchor = 0) {
  NetVars vars = NetVars::make(model, tc.train_backbone(), true);
  detail::StepInputs in =
      detail::gather_inputs(cfg, tc, model, vars, ds, batch, cache, anchor);
  std::vector<LabelMap> labels;
  labels.reserve(in.labels.size());
  for (auto* l : in.labels) labels.push_back(*l);
  GenOptions gen;
  gen.use_update = tc.use_update();
  TemplateGenGraph g;
  try {
    g = template_generation_graph(cfg, in.z_feat, in.x_feats, labels, vars, gen);
  } catch (const NumericError& e) {
    throw NumericError(detail::cat(e.what(), " (batch: ", detail::batch_ids(ds, batch), ")"));
  }
  auto trainable = vars.trainable();
  std::vector<Var> wrt;
  wrt.reserve(trainable.size());
  for (auto& [n, v] : trainable) wrt.push_back(v);
  auto grads = grad(g.loss_final, wrt);
  sgd_apply(opt, model, trainable, grads);
  if (tc.train_backbone()) cache.invalidate();
  return {g.loss_initial->val[0], g.loss_final->val[0]};
}

/// Per-pair objective: each pair builds and scores its own template; one SGD
/// update from the summed final losses.
inline StepOutcome basic_step(const NetConfig& cfg, const TrainConfig& tc,
                              ModelParams& model, SgdState& opt, const PairDataset& ds,
                              const std::vector<int>& batch, FeatureCache& cache) {
  NetVars vars = NetVars::make(model, tc.train_backbone(), true);
  Var total_init, total_final;
  GenOptions gen;
  gen.use_update = tc.use_update();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<int> single{batch[i]};
    detail::StepInputs in =
        detail::gather_inputs(cfg, tc, model, vars, ds, single, cache, 0);
    TemplateGenGraph g;
    try {
      g = template_generation_graph(cfg, in.z_feat, in.x_feats, {*in.labels[0]}, vars, gen);
    } catch (const NumericError& e) {
      throw NumericError(detail::cat(e.what(), " (batch: ", detail::batch_ids(ds, batch), ")"));
    }
    total_init = i == 0 ? g.loss_initial : add(total_init, g.loss_initial);
    total_final = i == 0 ? g.loss_final : add(total_final, g.loss_final);
  }
  auto trainable = vars.trainable();
  std::vector<Var> wrt;
  wrt.reserve(trainable.size());
  for (auto& [n, v] : trainable) wrt.push_back(v);
  auto grads = grad(total_final, wrt);
  sgd_apply(opt, model, trainable, grads);
  if (tc.train_backbone()) cache.invalidate();
  return {total_init->val[0], total_final->val[0]};
}

// ---------------------------------------------------------------------------
// held-out probes

struct OneStepStats {
  double mean_loss_initial = 0;
  double mean_loss_final = 0;
  double improve_rate = 0;  // fraction of pairs with loss_final < loss_initial
};

/// Singleton-pair template generation over a probe set; how the online update
/// behaves on unseen data.
inline OneStepStats evaluate_one_step(const NetConfig& cfg, const ModelParams& model,
                                      const PairDataset& probes) {
  OneStepStats st;
  if (probes.pairs.empty()) return st;
  int improved = 0;
  for (const auto& p : probes.pairs) {
    Tensor f2z = extract_shallow_features(cfg, to_tensor(p.z), model);
    Tensor fx = extract_search_features(cfg, to_tensor(p.x), model);
    TemplateGenResult r = generate_template(cfg, f2z, {fx}, {p.y}, model);
    st.mean_loss_initial += r.loss_initial;
    st.mean_loss_final += r.loss_final;
    if (r.loss_final < r.loss_initial) ++improved;
  }
  const double n = static_cast<double>(probes.pairs.size());
  st.mean_loss_initial /= n;
  st.mean_loss_final /= n;
  st.improve_rate = improved / n;
  return st;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainLogRow {
  long step;
  double loss_initial;
  double loss_final;
  double lr;
  double seconds;
};

struct TrainResult {
  ModelParams model;
  std::vector<TrainLogRow> log;
  std::vector<std::pair<long, OneStepStats>> heldout;
};

/// Offline training. Writes `train_log.csv` (and `heldout.csv` when a probe
/// set is given) under log_dir unless it is empty. Fully reproducible from
/// the seed; two runs with identical inputs produce bit-identical parameters.
inline TrainResult train(const NetConfig& cfg, const TrainConfig& tc,
                         const PairDataset& dataset,
                         const std::filesystem::path& log_dir = {},
                         const PairDataset* heldout = nullptr) {
  tc.validate();
  TrainResult out;
  if (!tc.init_from.empty()) {
    out.model = load_checkpoint(tc.init_from);
    for (int i = 0; i < 5; ++i) {
      const ConvSpec &a = out.model.cfg.conv[i], &b = cfg.conv[i];
      if (a.out_c != b.out_c || a.kernel != b.kernel || a.stride != b.stride ||
          a.pool != b.pool)
        throw ConfigError(detail::cat("checkpoint ", tc.init_from, ": conv", i + 1,
                                      " does not match the requested config"));
    }
    if (out.model.cfg.u2_kernel != cfg.u2_kernel ||
        out.model.cfg.u2_layers != cfg.u2_layers)
      throw ConfigError(detail::cat("checkpoint ", tc.init_from,
                                    ": U2 stack does not match the requested config"));
    out.model.cfg = cfg;
  } else {
    out.model = ModelParams::init(cfg, tc.seed);
  }
  out.model.share_u1 = tc.share_u1();
  if (!tc.share_u1()) out.model.u1_final = out.model.u1;  // identical copies at step 0

  SgdState opt;
  opt.lr = tc.lr;
  opt.momentum = tc.momentum;
  FeatureCache cache;
  Rng rng(tc.seed);

  std::ofstream log_csv, heldout_csv;
  if (!log_dir.empty()) {
    std::filesystem::create_directories(log_dir);
    log_csv.open(log_dir / "train_log.csv", std::ios::app);
    log_csv << "# gradnet train variant=" << variant_name(tc.variant) << " seed=" << tc.seed
            << " k=" << tc.k << " lr=" << tc.lr << "\n";
    log_csv << "step,loss_initial,loss_final,lr,seconds\n";
    if (heldout) {
      heldout_csv.open(log_dir / "heldout.csv", std::ios::app);
      heldout_csv << "step,loss_initial,loss_final,improve_rate\n";
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  for (long step = 1; step <= tc.steps; ++step) {
    std::vector<int> batch = sample_batch(dataset, tc.k, rng);
    StepOutcome oc;
    if (tc.generalize()) {
      // rotate a random anchor to the front so no video is systematically Z_1
      const int anchor = rng.uniform_int(tc.k);
      std::swap(batch[0], batch[static_cast<std::size_t>(anchor)]);
      oc = generalization_step(cfg, tc, out.model, opt, dataset, batch, cache, 0);
    } else {
      oc = basic_step(cfg, tc, out.model, opt, dataset, batch, cache);
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.log.push_back({step, oc.loss_initial, oc.loss_final, tc.lr, secs});
    if (log_csv.is_open() && (step % std::max(1, tc.log_every) == 0 || step == tc.steps))
      log_csv << step << "," << oc.loss_initial << "," << oc.loss_final << "," << tc.lr
              << "," << secs << "\n";
    if (heldout && tc.heldout_every > 0 && step % tc.heldout_every == 0) {
      OneStepStats st = evaluate_one_step(cfg, out.model, *heldout);
      out.heldout.emplace_back(step, st);
      if (heldout_csv.is_open())
        heldout_csv << step << "," << st.mean_loss_initial << "," << st.mean_loss_final
                    << "," << st.improve_rate << "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// diagnostics that belong to the training side

struct WeightRatioSummary {
  std::vector<double> histogram;  // 20 bins over [0,1]
  double median = 0;
  long samples = 0;
};

/// Per-element |U2(G)| / (|f2(Z)| + |U2(G)|) over the probe set: how much of
/// the updated feature is gradient correction versus appearance.
inline WeightRatioSummary gradient_weight_ratio(const NetConfig& cfg,
                                                const ModelParams& model,
                                                const PairDataset& probes) {
  WeightRatioSummary out;
  out.histogram.assign(20, 0.0);
  std::vector<double> ratios;
  for (const auto& p : probes.pairs) {
    Tensor f2z = extract_shallow_features(cfg, to_tensor(p.z), model);
    Tensor fx = extract_search_features(cfg, to_tensor(p.x), model);
    TemplateGenResult r = generate_template(cfg, f2z, {fx}, {p.y}, model);
    for (std::size_t i = 0; i < f2z.numel(); ++i) {
      // only where the appearance feature is live; relu zeros would pin the
      // ratio at 1 regardless of the correction size
      if (std::abs(f2z[i]) < 1e-12) continue;
      const double corr = std::abs(r.h2z[i] - f2z[i]);
      const double ratio = corr / (std::abs(f2z[i]) + corr);
      ratios.push_back(ratio);
      const int bin = std::min(19, static_cast<int>(ratio * 20.0));
      out.histogram[static_cast<std::size_t>(bin)] += 1.0;
    }
  }
  out.samples = static_cast<long>(ratios.size());
  if (!ratios.empty()) {
    std::sort(ratios.begin(), ratios.end());
    out.median = ratios[ratios.size() / 2];
    for (auto& h : out.histogram) h /= static_cast<double>(ratios.size());
  }
  return out;
}

struct SgdBaselineEntry {
  double lr_multiple = 0;
  double median_iterations = 0;  // HUGE_VAL encodes divergence / no convergence
  double mean_one_step_loss = 0;
};

struct SgdBaselineResult {
  std::vector<SgdBaselineEntry> entries;
  double gradnet_mean_loss = 0;   // one learned step on the same pairs
  double initial_mean_loss = 0;
  double threshold = 0;
};

/// Plain gradient descent directly on the template, per pair, over a grid of
/// learning-rate multiples: iterations until the loss falls under
/// 0.1*log(2), capped, plus the loss after exactly one step. The learned
/// one-step update runs on the same pairs for comparison.
inline SgdBaselineResult one_step_sgd_baseline(const NetConfig& cfg,
                                               const ModelParams& model,
                                               const PairDataset& probes,
                                               const std::vector<double>& lr_multiples,
                                               double base_lr = 0.5, int cap = 1000) {
  SgdBaselineResult out;
  out.threshold = 0.1 * std::log(2.0);
  std::vector<std::vector<double>> iters(lr_multiples.size());
  std::vector<std::vector<double>> one_step(lr_multiples.size());
  double gradnet_sum = 0, init_sum = 0;
  for (const auto& p : probes.pairs) {
    Tensor f2z = extract_shallow_features(cfg, to_tensor(p.z), model);
    Tensor fx = extract_search_features(cfg, to_tensor(p.x), model);
    Tensor beta0 = embed_initial(cfg, f2z, model);
    init_sum += logistic_loss(score_map(beta0, fx, model), p.y);
    TemplateGenResult r = generate_template(cfg, f2z, {fx}, {p.y}, model);
    gradnet_sum += r.loss_final;
    for (std::size_t li = 0; li < lr_multiples.size(); ++li) {
      const double lr = base_lr * lr_multiples[li];
      Tensor beta = beta0;
      double it_count = HUGE_VAL;
      for (int it = 1; it <= cap; ++it) {
        Var bv = leaf(beta, true);
        Var loss = logistic_loss_g(
            score_map_g(bv, constant(fx), constant(model.adjust_gain),
                        constant(model.adjust_bias)),
            p.y);
        Tensor g = grad(loss, {bv})[0]->val;
        for (std::size_t j = 0; j < beta.numel(); ++j) beta[j] -= lr * g[j];
        double l = HUGE_VAL;
        if (beta.all_finite())
          l = logistic_loss(score_map(beta, fx, model), p.y);
        if (it == 1) one_step[li].push_back(std::isfinite(l) ? l : HUGE_VAL);
        if (!std::isfinite(l)) break;  // diverged: stays HUGE_VAL
        if (l < out.threshold) {
          it_count = it;
          break;
        }
      }
      iters[li].push_back(it_count);
    }
  }
  const double n = std::max<std::size_t>(1, probes.pairs.size());
  out.gradnet_mean_loss = gradnet_sum / n;
  out.initial_mean_loss = init_sum / n;
  for (std::size_t li = 0; li < lr_multiples.size(); ++li) {
    SgdBaselineEntry e;
    e.lr_multiple = lr_multiples[li];
    std::sort(iters[li].begin(), iters[li].end());
    e.median_iterations = iters[li].empty() ? HUGE_VAL : iters[li][iters[li].size() / 2];
    double s = 0;
    for (double v : one_step[li]) s += v;
    e.mean_one_step_loss = one_step[li].empty() ? HUGE_VAL : s / one_step[li].size();
    out.entries.push_back(e);
  }
  return out;
}

}  // namespace gradnet
