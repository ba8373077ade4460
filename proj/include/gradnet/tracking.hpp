#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradnet/data.hpp"
#include "gradnet/update_branch.hpp"

namespace gradnet {

struct TrackParams {
  double context = 0.5;         // Z context margin
  int scales = 3;               // odd scale-pyramid size
  double scale_step = 1.0375;
  double scale_penalty = 0.9745;
  double scale_damping = 0.59;
  double window_influence = 0.176;
  int upsample = 16;            // score-map upsampling factor
  int update_every = 5;         // template refresh cadence, in frames
  double reliability = 0.5;     // reliable-sample factor on thre
  double blend = 0.5;           // gamma: weight of the fresh template
  double label_radius = 2.0;    // online label radius, score-map cells
  bool updates_enabled = true;
};

struct TrackerEvent {
  long frame = 0;
  std::string kind;  // "store" | "update"
  double value = 0;
};

struct TrackerState {
  NetConfig cfg;
  const ModelParams* model = nullptr;
  TrackParams params;
  BBox bbox;
  int frame_w = 0, frame_h = 0;
  double thre = 0;
  Tensor h2z1;            // persisted updated target feature from frame 1
  Tensor tmpl_initial;    // beta* of frame 1, the blending anchor
  Tensor tmpl;            // template in use
  std::optional<std::pair<Image, LabelMap>> reliable;
  long frame_count = 0;
  std::vector<TrackerEvent> events;
  std::vector<double> max_scores;
  Tensor window;          // cosine window over the upsampled map, sums to 1
};

struct TrackResult {
  std::vector<BBox> boxes;
  std::vector<double> max_scores;
  std::vector<TrackerEvent> events;
  double thre = 0;
};

namespace detail {

inline double cubic_kernel(double t) {
  // Catmull-Rom
  t = std::abs(t);
  if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
  if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
  return 0.0;
}

/// Catmull-Rom upsampling to (S-1)*factor+1, so source cells sit exactly on
/// knots and sub-cell positions are multiples of 1/factor.
inline Tensor bicubic_upsample(const Tensor& m, int factor) {
  const int S = m.dim(0);
  const int U = (S - 1) * factor + 1;
  Tensor out({U, U});
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, S - 1);
    x = std::clamp(x, 0, S - 1);
    return m(y, x);
  };
  const double step = 1.0 / factor;
  for (int uy = 0; uy < U; ++uy)
    for (int ux = 0; ux < U; ++ux) {
      const double sy = uy * step, sx = ux * step;
      const int iy = static_cast<int>(std::floor(sy)), ix = static_cast<int>(std::floor(sx));
      double acc = 0;
      for (int dy = -1; dy <= 2; ++dy)
        for (int dx = -1; dx <= 2; ++dx)
          acc += at(iy + dy, ix + dx) * cubic_kernel(sy - (iy + dy)) *
                 cubic_kernel(sx - (ix + dx));
      out(uy, ux) = acc;
    }
  return out;
}

inline Tensor cosine_window(int n) {
  Tensor w({n, n});
  double total = 0;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double hy = 0.5 * (1 - std::cos(2 * M_PI * y / (n - 1)));
      const double hx = 0.5 * (1 - std::cos(2 * M_PI * x / (n - 1)));
      w(y, x) = hy * hx;
      total += hy * hx;
    }
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] /= total;
  return w;
}

inline LabelMap center_label(const NetConfig& cfg, double radius) {
  const int c = (cfg.score_size - 1) / 2;
  return make_label(cfg.score_size, cfg.score_size, c, c, radius);
}

}  // namespace detail

inline Tensor blend_template(const Tensor& initial, const Tensor& updated, double gamma) {
  if (!initial.same_shape(updated))
    throw ShapeError(detail::cat("blend_template: ", initial.shape_str(), " vs ",
                                 updated.shape_str()));
  if (gamma < 0 || gamma > 1) throw ConfigError("blend_template: gamma must be in [0,1]");
  Tensor out = initial;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = (1 - gamma) * initial[i] + gamma * updated[i];
  return out;
}

/// First-frame setup: crop Z1/X1 around the given box, run the full template
/// generation once, persist h2(Z1) for later updates, and take the score peak
/// as the reliability threshold.
inline TrackerState tracker_init(const NetConfig& cfg, const ModelParams& model,
                                 const TrackParams& params, const Image& frame,
                                 const BBox& bbox) {
  if (bbox.w <= 0 || bbox.h <= 0)
    throw ConfigError(detail::cat("tracker_init: degenerate box ", bbox.w, "x", bbox.h));
  TrackerState st;
  st.cfg = cfg;
  st.model = &model;
  st.params = params;
  st.bbox = bbox;
  st.frame_w = frame.w;
  st.frame_h = frame.h;
  const double s_z = context_size(bbox, params.context);
  const double s_x = s_z * cfg.x_crop / cfg.z_crop;
  Image z1 = crop_patch(frame, bbox.cx(), bbox.cy(), s_z, cfg.z_crop);
  Image x1 = crop_patch(frame, bbox.cx(), bbox.cy(), s_x, cfg.x_crop);
  Tensor f2z = extract_shallow_features(cfg, to_tensor(z1), model);
  Tensor fx = extract_search_features(cfg, to_tensor(x1), model);
  LabelMap y1 = detail::center_label(cfg, params.label_radius);
  TemplateGenResult r = generate_template(cfg, f2z, {fx}, {y1}, model);
  st.h2z1 = r.h2z;
  st.tmpl_initial = r.beta_star;
  st.tmpl = r.beta_star;
  st.thre = r.scores_star[0].max();
  st.frame_count = 1;
  st.max_scores.push_back(st.thre);
  st.window = detail::cosine_window((cfg.score_size - 1) * params.upsample + 1);
  return st;
}

/// Scale-pyramid search around the previous center with the current template;
/// moves the box and returns the raw peak score of the chosen scale.
inline double track_frame(TrackerState& st, const Image& frame) {
  const NetConfig& cfg = st.cfg;
  const TrackParams& p = st.params;
  const double s_z = context_size(st.bbox, p.context);
  const double s_x = s_z * cfg.x_crop / cfg.z_crop;

  const int mid = p.scales / 2;
  int best = mid;
  double best_peak = -HUGE_VAL;
  Tensor best_map;
  for (int si = 0; si < p.scales; ++si) {
    const double factor = std::pow(p.scale_step, si - mid);
    Image crop = crop_patch(frame, st.bbox.cx(), st.bbox.cy(), s_x * factor, cfg.x_crop);
    Tensor fx = extract_search_features(cfg, to_tensor(crop), *st.model);
    Tensor score = score_map(st.tmpl, fx, *st.model);
    const double penalty = si == mid ? 1.0 : p.scale_penalty;
    const double peak = score.max() * penalty;
    if (peak > best_peak) {
      best_peak = peak;
      best = si;
      best_map = score;
    }
  }
  const double raw_max = best_map.max();

  // normalized upsampled response mixed with the cosine window
  Tensor resp = best_map;
  const double mn = resp.min();
  double total = 0;
  for (std::size_t i = 0; i < resp.numel(); ++i) {
    resp[i] -= mn;
    total += resp[i];
  }
  if (total > 0)
    for (std::size_t i = 0; i < resp.numel(); ++i) resp[i] /= total;
  Tensor up = detail::bicubic_upsample(resp, p.upsample);
  for (std::size_t i = 0; i < up.numel(); ++i)
    up[i] = (1 - p.window_influence) * up[i] + p.window_influence * st.window[i];

  const int U = up.dim(0);
  const std::size_t am = up.argmax();
  const int uy = static_cast<int>(am) / U, ux = static_cast<int>(am) % U;
  const double half = (cfg.score_size - 1) / 2.0;
  const double dy_cells = static_cast<double>(uy) / p.upsample - half;
  const double dx_cells = static_cast<double>(ux) / p.upsample - half;
  const double chosen_factor = std::pow(p.scale_step, best - mid);
  const double crop_to_src = s_x * chosen_factor / cfg.x_crop;
  const double dy_src = dy_cells * cfg.total_stride() * crop_to_src;
  const double dx_src = dx_cells * cfg.total_stride() * crop_to_src;

  double cx = st.bbox.cx() + dx_src;
  double cy = st.bbox.cy() + dy_src;
  cx = std::clamp(cx, 0.0, static_cast<double>(st.frame_w - 1));
  cy = std::clamp(cy, 0.0, static_cast<double>(st.frame_h - 1));
  const double size_change = (1 - p.scale_damping) + p.scale_damping * chosen_factor;
  const double w = st.bbox.w * size_change;
  const double h = st.bbox.h * size_change;
  st.bbox = BBox{cx - w / 2, cy - h / 2, w, h};
  st.frame_count += 1;
  st.max_scores.push_back(raw_max);
  return raw_max;
}

/// Keep the current frame's search crop as the single reliable sample when
/// the peak clears reliability*thre.
inline void select_reliable_sample(TrackerState& st, const Image& frame, double max_score) {
  if (max_score <= st.params.reliability * st.thre) return;
  const double s_z = context_size(st.bbox, st.params.context);
  const double s_x = s_z * st.cfg.x_crop / st.cfg.z_crop;
  Image crop = crop_patch(frame, st.bbox.cx(), st.bbox.cy(), s_x, st.cfg.x_crop);
  st.reliable = {std::move(crop), detail::center_label(st.cfg, st.params.label_radius)};
  st.events.push_back({st.frame_count, "store", max_score});
}

/// Every update_every frames, re-run the update branch from the persisted
/// h2(Z1) on the stored reliable sample and re-blend against the initial
/// template.
inline void maybe_update(TrackerState& st) {
  if (!st.params.updates_enabled) return;
  if (st.frame_count % st.params.update_every != 0) return;
  if (!st.reliable) return;
  Tensor fx = extract_search_features(st.cfg, to_tensor(st.reliable->first), *st.model);
  TemplateGenResult r =
      generate_template(st.cfg, st.h2z1, {fx}, {st.reliable->second}, *st.model);
  st.tmpl = blend_template(st.tmpl_initial, r.beta_star, st.params.blend);
  st.events.push_back({st.frame_count, "update", r.loss_final});
}

/// One full per-frame step: localize, consider storing a reliable sample,
/// consider refreshing the template.
inline BBox track_step(TrackerState& st, const Image& frame) {
  const double max_score = track_frame(st, frame);
  select_reliable_sample(st, frame, max_score);
  maybe_update(st);
  return st.bbox;
}

inline TrackResult run_tracker(const NetConfig& cfg, const ModelParams& model,
                               const TrackParams& params, const Sequence& seq) {
  if (seq.frames.empty()) throw ConfigError("run_tracker: empty sequence");
  TrackerState st = tracker_init(cfg, model, params, seq.frames[0], seq.gt.at(0));
  TrackResult out;
  out.boxes.push_back(st.bbox);
  for (std::size_t i = 1; i < seq.frames.size(); ++i)
    out.boxes.push_back(track_step(st, seq.frames[i]));
  out.max_scores = st.max_scores;
  out.events = st.events;
  out.thre = st.thre;
  return out;
}

}  // namespace gradnet
