#include <gtest/gtest.h>

#include <cmath>

#include "gradnet/eval.hpp"
#include "gradnet/tracking.hpp"

using namespace gradnet;

namespace {

// Hand-built pass-through model: conv1 projects mean brightness minus a
// floor, every later layer is a centered delta kernel on channel 0, U2 is
// zero. Correlation peaks land exactly where the bright pattern matches,
// which makes the geometry tests deterministic without training.
ModelParams delta_model(const NetConfig& cfg) {
  ModelParams m = ModelParams::init(cfg, 0);
  for (auto& [name, t] : m.named_tensors()) t->fill(0.0);
  m.adjust_gain = Tensor::scalar(1.0);  // scores equal raw correlations
  const int k0 = cfg.conv[0].kernel / 2;
  for (int c = 0; c < 3; ++c) m.backbone[0].w(0, c, k0, k0) = 1.0 / 3.0;
  m.backbone[0].b[0] = -0.55;
  for (int i = 1; i < 5; ++i) {
    const int kc = cfg.conv[i].kernel / 2;
    m.backbone[i].w(0, 0, kc, kc) = 1.0;
  }
  for (int i = 0; i < 3; ++i) {
    const int kc = cfg.conv[2 + i].kernel / 2;
    m.u1[i].w(0, 0, kc, kc) = 1.0;
  }
  m.u1_final = m.u1;
  return m;
}

Image flat_frame(int w, int h, std::uint8_t gray = 110) {
  Image img(w, h);
  for (auto& b : img.rgb) b = gray;
  return img;
}

// Aperiodic bright texture anchored to the object so shifted paints are
// exact pixel translations.
void paint_pattern(Image& img, int cx, int cy, int size) {
  const int x0 = cx - size / 2, y0 = cy - size / 2;
  for (int v = 0; v < size; ++v)
    for (int u = 0; u < size; ++u) {
      const int x = x0 + u, y = y0 + v;
      if (x < 0 || y < 0 || x >= img.w || y >= img.h) continue;
      const std::uint8_t val = static_cast<std::uint8_t>(170 + (u * 37 + v * 73) % 80);
      auto* p = img.px(x, y);
      p[0] = p[1] = p[2] = val;
    }
}

BBox pattern_box(int cx, int cy, int size) {
  return BBox{static_cast<double>(cx - size / 2), static_cast<double>(cy - size / 2),
              static_cast<double>(size), static_cast<double>(size)};
}

struct Rig {
  NetConfig cfg = NetConfig::desk();
  ModelParams model = delta_model(NetConfig::desk());
  TrackParams params;
};

}  // namespace

TEST(BlendTemplate, EndpointsAndMidpoint) {
  Rng rng(3);
  Tensor a = random_normal({2, 3, 3}, rng);
  Tensor b = random_normal({2, 3, 3}, rng);
  EXPECT_DOUBLE_EQ(max_abs_diff(blend_template(a, b, 0.0), a), 0.0);
  EXPECT_DOUBLE_EQ(max_abs_diff(blend_template(a, b, 1.0), b), 0.0);
  Tensor neg = a;
  for (std::size_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
  EXPECT_DOUBLE_EQ(blend_template(a, neg, 0.5).abs_max(), 0.0);
  EXPECT_THROW(blend_template(a, Tensor({2, 2, 2}), 0.5), ShapeError);
  EXPECT_THROW(blend_template(a, b, 1.5), ConfigError);
}

TEST(TrackerInit, ReturnsGivenBoxAndCenteredPeak) {
  Rig rig;
  Image f = flat_frame(96, 96);
  paint_pattern(f, 40, 44, 14);
  BBox box = pattern_box(40, 44, 14);
  TrackerState st = tracker_init(rig.cfg, rig.model, rig.params, f, box);
  EXPECT_DOUBLE_EQ(st.bbox.x, box.x);
  EXPECT_DOUBLE_EQ(st.bbox.y, box.y);
  EXPECT_GT(st.thre, 0.0);
  EXPECT_EQ(st.frame_count, 1);

  // zero-init U2 checkpoint: the stored template is the plain embedding
  Image z = crop_patch(f, box.cx(), box.cy(), context_size(box, rig.params.context),
                       rig.cfg.z_crop);
  Tensor beta = embed_initial(rig.cfg, extract_shallow_features(rig.cfg, to_tensor(z), rig.model),
                              rig.model);
  EXPECT_DOUBLE_EQ(max_abs_diff(st.tmpl, beta), 0.0);

  // the first-frame final score map peaks at the center cell
  Image x = crop_patch(f, box.cx(), box.cy(),
                       context_size(box, rig.params.context) * rig.cfg.x_crop / rig.cfg.z_crop,
                       rig.cfg.x_crop);
  Tensor s = cross_correlate(st.tmpl, extract_search_features(rig.cfg, to_tensor(x), rig.model));
  const int S = rig.cfg.score_size;
  EXPECT_EQ(static_cast<int>(s.argmax()), (S / 2) * S + S / 2);

  EXPECT_THROW(tracker_init(rig.cfg, rig.model, rig.params, f, BBox{10, 10, 0, 5}),
               ConfigError);
}

TEST(TrackFrame, StaticTargetStaysPut) {
  Rig rig;
  rig.params.scales = 1;
  rig.params.upsample = 1;
  rig.params.updates_enabled = false;
  Image f = flat_frame(96, 96);
  paint_pattern(f, 40, 40, 14);
  BBox box = pattern_box(40, 40, 14);
  TrackerState st = tracker_init(rig.cfg, rig.model, rig.params, f, box);
  for (int t = 0; t < 5; ++t) {
    track_step(st, f);
    EXPECT_DOUBLE_EQ(st.bbox.x, box.x) << "frame " << t;
    EXPECT_DOUBLE_EQ(st.bbox.y, box.y);
    EXPECT_DOUBLE_EQ(iou(st.bbox, box), 1.0);
  }
}

TEST(TrackFrame, OneStrideShiftMovesBoxOneStride) {
  Rig rig;
  rig.params.scales = 1;
  rig.params.upsample = 1;
  rig.params.window_influence = 0.0;
  rig.params.updates_enabled = false;
  const int stride = rig.cfg.total_stride();
  Image f1 = flat_frame(96, 96);
  paint_pattern(f1, 40, 40, 14);
  Image f2 = flat_frame(96, 96);
  paint_pattern(f2, 40 + stride, 40, 14);
  TrackerState st = tracker_init(rig.cfg, rig.model, rig.params, f1, pattern_box(40, 40, 14));
  track_step(st, f2);
  EXPECT_NEAR(st.bbox.cx(), 40.0 + stride, 1e-9);
  EXPECT_NEAR(st.bbox.cy(), 40.0, 1e-9);
}

TEST(TrackFrame, BlackFrameZeroScoreKeepsBox) {
  Rig rig;
  rig.params.scales = 1;
  rig.params.upsample = 1;
  rig.params.updates_enabled = false;
  Image f = flat_frame(96, 96);
  paint_pattern(f, 48, 48, 14);
  TrackerState st = tracker_init(rig.cfg, rig.model, rig.params, f, pattern_box(48, 48, 14));
  Image black(96, 96);
  const BBox before = st.bbox;
  const double ms = track_frame(st, black);
  EXPECT_LE(ms, 0.0);
  EXPECT_DOUBLE_EQ(st.bbox.x, before.x);
  EXPECT_DOUBLE_EQ(st.bbox.y, before.y);
  EXPECT_DOUBLE_EQ(st.bbox.w, before.w);
}

TEST(ReliableSample, ThresholdRule) {
  Rig rig;
  Image f = flat_frame(96, 96);
  paint_pattern(f, 48, 48, 14);
  TrackerState st = tracker_init(rig.cfg, rig.model, rig.params, f, pattern_box(48, 48, 14));
  st.thre = 10.0;
  select_reliable_sample(st, f, 4.0);  // 0.4*thre: below
  EXPECT_FALSE(st.reliable.has_value());
  select_reliable_sample(st, f, 10.0);  // == thre: above 0.5*thre
  EXPECT_TRUE(st.reliable.has_value());
}

TEST(ReliableSample, OcclusionWindowStoresNothing) {
  Rig rig;
  rig.params.scales = 1;
  Image visible = flat_frame(96, 96);
  paint_pattern(visible, 48, 48, 14);
  Image hidden = flat_frame(96, 96);  // full occlusion: target gone
  TrackerState st =
      tracker_init(rig.cfg, rig.model, rig.params, visible, pattern_box(48, 48, 14));
  std::vector<Image> frames{visible, visible, hidden, hidden, hidden, visible, visible};
  for (const auto& fr : frames) track_step(st, fr);
  // frame_count: init=1, then 2..8; hidden frames are 4,5,6
  for (const auto& e : st.events)
    if (e.kind == "store") EXPECT_TRUE(e.frame < 4 || e.frame > 6) << "frame " << e.frame;
  bool stored_any = false;
  for (const auto& e : st.events) stored_any |= (e.kind == "store");
  EXPECT_TRUE(stored_any);
}

TEST(MaybeUpdate, CadenceAndNoSampleRules) {
  Rig rig;
  rig.params.scales = 1;
  Image f = flat_frame(96, 96);
  paint_pattern(f, 48, 48, 14);
  TrackerState st = tracker_init(rig.cfg, rig.model, rig.params, f, pattern_box(48, 48, 14));
  for (int i = 0; i < 10; ++i) track_step(st, f);  // frames 2..11
  std::vector<long> updates;
  for (const auto& e : st.events)
    if (e.kind == "update") updates.push_back(e.frame);
  ASSERT_FALSE(updates.empty());
  for (long fr : updates) EXPECT_EQ(fr % 5, 0) << fr;

  // without any reliable sample there is never an update
  TrackerState st2 = tracker_init(rig.cfg, rig.model, rig.params, f, pattern_box(48, 48, 14));
  Tensor tmpl_before = st2.tmpl;
  Image blank = flat_frame(96, 96);
  for (int i = 0; i < 6; ++i) track_step(st2, blank);
  for (const auto& e : st2.events) EXPECT_NE(e.kind, "update");
  EXPECT_DOUBLE_EQ(max_abs_diff(st2.tmpl, tmpl_before), 0.0);
}

TEST(MaybeUpdate, TemplateConstantBetweenUpdates) {
  Rig rig;
  rig.params.scales = 1;
  Image f = flat_frame(96, 96);
  paint_pattern(f, 48, 48, 14);
  TrackerState st = tracker_init(rig.cfg, rig.model, rig.params, f, pattern_box(48, 48, 14));
  std::vector<Tensor> templates;
  for (int i = 0; i < 9; ++i) {
    track_step(st, f);
    templates.push_back(st.tmpl);
  }
  // frames 6..9 sit between the frame-5 and frame-10 updates
  for (std::size_t i = 5; i + 1 < templates.size(); ++i)
    EXPECT_DOUBLE_EQ(max_abs_diff(templates[i + 1], templates[i]), 0.0);
}

TEST(ReliableSample, FactorMonotonicityOnFixedTrace) {
  // raising the reliability factor never increases the number of stores
  Rng rng(5);
  std::vector<double> trace;
  for (int i = 0; i < 200; ++i) trace.push_back(std::abs(rng.normal()) * 3.0);
  const double thre = 2.0;
  int prev = 201;
  for (double f = 0.5; f <= 1.0001; f += 0.05) {
    int stores = 0;
    for (double s : trace)
      if (s > f * thre) ++stores;
    EXPECT_LE(stores, prev);
    prev = stores;
  }
}

TEST(RunTracker, DeterministicEndToEnd) {
  Rig rig;
  SceneConfig sc;
  sc.frame_w = 96;
  sc.frame_h = 96;
  sc.frames = 12;
  sc.target_size = 14;
  sc.seed = 9;
  Sequence seq = generate_sequence(sc);
  TrackResult a = run_tracker(rig.cfg, rig.model, rig.params, seq);
  TrackResult b = run_tracker(rig.cfg, rig.model, rig.params, seq);
  ASSERT_EQ(a.boxes.size(), b.boxes.size());
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    EXPECT_DOUBLE_EQ(a.boxes[i].x, b.boxes[i].x);
    EXPECT_DOUBLE_EQ(a.boxes[i].y, b.boxes[i].y);
    EXPECT_DOUBLE_EQ(a.boxes[i].w, b.boxes[i].w);
  }
  EXPECT_EQ(a.max_scores, b.max_scores);
}
