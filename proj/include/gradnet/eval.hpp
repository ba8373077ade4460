#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "gradnet/tracking.hpp"
#include "gradnet/training.hpp"

namespace gradnet {

inline double center_error(const BBox& a, const BBox& b) {
  const double dx = a.cx() - b.cx();
  const double dy = a.cy() - b.cy();
  return std::sqrt(dx * dx + dy * dy);
}

inline double iou(const BBox& a, const BBox& b) {
  if (a.w < 0 || a.h < 0 || b.w < 0 || b.h < 0)
    throw ConfigError("iou: negative box size");
  const double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const double x1 = std::min(a.x + a.w, b.x + b.w);
  const double y1 = std::min(a.y + a.h, b.y + b.h);
  const double inter = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
  const double uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

inline constexpr int kPrecisionThresholds = 51;  // 0..50 px
inline constexpr int kSuccessThresholds = 21;    // 0, 0.05, ..., 1.0

struct OPEResult {
  std::vector<std::string> seq_names;
  std::vector<std::vector<double>> errors;  // per sequence, per frame
  std::vector<std::vector<double>> ious;
  std::vector<double> precision_curve;  // fraction with error <= t, averaged per sequence
  std::vector<double> success_curve;    // fraction with iou >= t, averaged per sequence
  double precision20 = 0;
  double auc = 0;
  long total_frames = 0;
};

using TrackerRunner = std::function<std::vector<BBox>(const Sequence&)>;

/// One-pass evaluation: initialize from frame 1's ground truth only, track
/// once, aggregate per-sequence-averaged precision/success curves. A runner
/// failure on a sequence counts its remaining frames as misses (IoU 0,
/// infinite center error) and the run continues.
inline OPEResult run_ope(const TrackerRunner& runner, const std::vector<Sequence>& seqs,
                         int workers = 1) {
  OPEResult out;
  out.seq_names.resize(seqs.size());
  out.errors.resize(seqs.size());
  out.ious.resize(seqs.size());

  auto eval_one = [&](std::size_t si) {
    const Sequence& seq = seqs[si];
    out.seq_names[si] = seq.name;
    std::vector<BBox> boxes;
    try {
      boxes = runner(seq);
    } catch (const Error&) {
      boxes.clear();
    }
    auto& errs = out.errors[si];
    auto& ios = out.ious[si];
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      if (f < boxes.size()) {
        errs.push_back(center_error(boxes[f], seq.gt[f]));
        ios.push_back(iou(boxes[f], seq.gt[f]));
      } else {
        errs.push_back(HUGE_VAL);
        ios.push_back(0.0);
      }
    }
  };

  if (workers <= 1) {
    for (std::size_t i = 0; i < seqs.size(); ++i) eval_one(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < seqs.size(); i = next++) eval_one(i);
      });
    for (auto& t : pool) t.join();
  }

  out.precision_curve.assign(kPrecisionThresholds, 0.0);
  out.success_curve.assign(kSuccessThresholds, 0.0);
  for (std::size_t si = 0; si < seqs.size(); ++si) {
    const double n = static_cast<double>(out.errors[si].size());
    out.total_frames += static_cast<long>(n);
    for (int t = 0; t < kPrecisionThresholds; ++t) {
      double hits = 0;
      for (double e : out.errors[si])
        if (e <= t) hits += 1;
      out.precision_curve[static_cast<std::size_t>(t)] += hits / n / seqs.size();
    }
    for (int t = 0; t < kSuccessThresholds; ++t) {
      const double thr = t / 20.0;
      double hits = 0;
      for (double v : out.ious[si])
        if (v >= thr) hits += 1;
      out.success_curve[static_cast<std::size_t>(t)] += hits / n / seqs.size();
    }
  }
  out.precision20 = out.precision_curve[20];
  double auc = 0;
  for (double v : out.success_curve) auc += v;
  out.auc = auc / kSuccessThresholds;
  return out;
}

/// Per-frame failures surface as zero-area boxes (zero IoU) and the run
/// continues with the tracker state untouched.
inline TrackerRunner make_tracker_runner(const NetConfig& cfg, const ModelParams& model,
                                         const TrackParams& params) {
  return [&cfg, &model, params](const Sequence& seq) {
    std::vector<BBox> boxes;
    TrackerState st = tracker_init(cfg, model, params, seq.frames.at(0), seq.gt.at(0));
    boxes.push_back(st.bbox);
    for (std::size_t i = 1; i < seq.frames.size(); ++i) {
      try {
        boxes.push_back(track_step(st, seq.frames[i]));
      } catch (const Error&) {
        boxes.push_back(BBox{0, 0, 0, 0});
      }
    }
    return boxes;
  };
}

struct AblationRow {
  std::string variant;
  double precision20 = 0;
  double auc = 0;
};

/// OPE per named tracker over the same suite; rows in input order.
inline std::vector<AblationRow> run_ablation(
    const std::vector<std::pair<std::string, TrackerRunner>>& trackers,
    const std::vector<Sequence>& suite, int workers = 1) {
  std::vector<AblationRow> rows;
  for (const auto& [name, runner] : trackers) {
    OPEResult r = run_ope(runner, suite, workers);
    rows.push_back({name, r.precision20, r.auc});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// diagnostics

struct ScoreMapStats {
  double mean_entropy_initial = 0;  // Shannon entropy of softmax(S), nats
  double mean_loss_drop = 0;        // mean (L - L*)
  std::vector<Tensor> initial_maps;
  std::vector<Tensor> final_maps;
};

inline double softmax_entropy(const Tensor& s) {
  const double mx = s.max();
  double z = 0;
  for (std::size_t i = 0; i < s.numel(); ++i) z += std::exp(s[i] - mx);
  double h = 0;
  for (std::size_t i = 0; i < s.numel(); ++i) {
    const double p = std::exp(s[i] - mx) / z;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

/// Initial/final score maps over probe pairs plus the summary statistics the
/// training-analysis figures are built from.
inline ScoreMapStats score_map_diagnostics(const NetConfig& cfg, const ModelParams& model,
                                           const PairDataset& probes,
                                           bool keep_maps = false) {
  ScoreMapStats st;
  if (probes.pairs.empty()) return st;
  for (const auto& p : probes.pairs) {
    Tensor f2z = extract_shallow_features(cfg, to_tensor(p.z), model);
    Tensor fx = extract_search_features(cfg, to_tensor(p.x), model);
    TemplateGenResult r = generate_template(cfg, f2z, {fx}, {p.y}, model);
    st.mean_entropy_initial += softmax_entropy(r.scores[0]);
    st.mean_loss_drop += r.loss_initial - r.loss_final;
    if (keep_maps) {
      st.initial_maps.push_back(r.scores[0]);
      st.final_maps.push_back(r.scores_star[0]);
    }
  }
  st.mean_entropy_initial /= static_cast<double>(probes.pairs.size());
  st.mean_loss_drop /= static_cast<double>(probes.pairs.size());
  return st;
}

struct CurvePoint {
  long step = 0;
  double value = 0;
};

struct OverfitCurves {
  std::vector<CurvePoint> train_loss;      // final loss per logged step
  std::vector<CurvePoint> heldout_metric;  // held-out final loss per probe step
};

/// Pairs a training log with its held-out trace for plotting; tolerant of
/// empty inputs.
inline OverfitCurves overfit_diagnostic(const std::vector<TrainLogRow>& log,
                                        const std::vector<std::pair<long, OneStepStats>>& heldout) {
  OverfitCurves c;
  for (const auto& row : log) c.train_loss.push_back({row.step, row.loss_final});
  for (const auto& [step, st] : heldout) c.heldout_metric.push_back({step, st.mean_loss_final});
  return c;
}

}  // namespace gradnet
