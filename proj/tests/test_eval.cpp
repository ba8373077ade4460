#include <gtest/gtest.h>

#include "gradnet/eval.hpp"

using namespace gradnet;

namespace {

std::vector<Sequence> toy_suite(int n, int frames = 12) {
  std::vector<Sequence> out;
  for (int i = 0; i < n; ++i) {
    SceneConfig c;
    c.frame_w = 64;
    c.frame_h = 64;
    c.frames = frames;
    c.target_size = 12;
    c.vel_x = 1.2;
    c.vel_y = 0.8;
    c.seed = 100 + static_cast<std::uint64_t>(i);
    out.push_back(generate_sequence(c, "toy" + std::to_string(i)));
  }
  return out;
}

TrackerRunner oracle_runner() {
  return [](const Sequence& seq) { return seq.gt; };
}

TrackerRunner constant_runner() {
  return [](const Sequence& seq) {
    return std::vector<BBox>(seq.frames.size(), seq.gt.at(0));
  };
}

}  // namespace

TEST(CenterError, Basics) {
  BBox a{0, 0, 10, 10};
  EXPECT_DOUBLE_EQ(center_error(a, a), 0.0);
  BBox b{0, 0, 2, 2};   // center (1,1)
  BBox c{3, 4, 2, 2};   // center (4,5): 3-4-5 triangle
  EXPECT_DOUBLE_EQ(center_error(b, c), 5.0);
  EXPECT_DOUBLE_EQ(center_error(c, b), center_error(b, c));
}

TEST(Iou, Basics) {
  BBox a{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  BBox far{5, 5, 1, 1};
  EXPECT_DOUBLE_EQ(iou(a, far), 0.0);
  BBox half{0.5, 0, 1, 1};  // intersection 0.5, union 1.5
  EXPECT_NEAR(iou(a, half), 1.0 / 3.0, 1e-12);
  BBox zero{2, 2, 0, 0};
  EXPECT_DOUBLE_EQ(iou(zero, zero), 0.0);
}

TEST(RunOpe, OracleTrackerIsPerfect) {
  auto suite = toy_suite(3);
  OPEResult r = run_ope(oracle_runner(), suite);
  EXPECT_DOUBLE_EQ(r.precision20, 1.0);
  EXPECT_DOUBLE_EQ(r.auc, 1.0);
  EXPECT_EQ(r.total_frames, 36);
}

TEST(RunOpe, ConstantTrackerDominatedByOracle) {
  auto suite = toy_suite(3, 16);
  OPEResult oracle = run_ope(oracle_runner(), suite);
  OPEResult fixed = run_ope(constant_runner(), suite);
  EXPECT_LT(fixed.auc, oracle.auc);
}

TEST(RunOpe, CurveMonotonicityAndAucIdentity) {
  auto suite = toy_suite(4);
  for (const auto& runner : {oracle_runner(), constant_runner()}) {
    OPEResult r = run_ope(runner, suite);
    for (std::size_t i = 0; i + 1 < r.precision_curve.size(); ++i)
      EXPECT_LE(r.precision_curve[i], r.precision_curve[i + 1] + 1e-12);
    for (std::size_t i = 0; i + 1 < r.success_curve.size(); ++i)
      EXPECT_GE(r.success_curve[i], r.success_curve[i + 1] - 1e-12);
    double mean = 0;
    for (double v : r.success_curve) mean += v;
    mean /= static_cast<double>(r.success_curve.size());
    EXPECT_DOUBLE_EQ(r.auc, mean);
    EXPECT_DOUBLE_EQ(r.precision20, r.precision_curve[20]);
  }
}

TEST(RunOpe, DeterministicAndWorkerInvariant) {
  auto suite = toy_suite(4);
  OPEResult a = run_ope(constant_runner(), suite, 1);
  OPEResult b = run_ope(constant_runner(), suite, 1);
  OPEResult c = run_ope(constant_runner(), suite, 2);
  EXPECT_EQ(a.precision_curve, b.precision_curve);
  EXPECT_EQ(a.success_curve, b.success_curve);
  EXPECT_EQ(a.precision_curve, c.precision_curve);
  EXPECT_EQ(a.success_curve, c.success_curve);
}

TEST(RunOpe, RunnerFailureCountsAsMisses) {
  auto suite = toy_suite(2);
  int calls = 0;
  TrackerRunner flaky = [&calls](const Sequence& seq) -> std::vector<BBox> {
    if (calls++ == 0) throw Error("boom");
    return seq.gt;
  };
  OPEResult r = run_ope(flaky, suite);
  EXPECT_EQ(r.total_frames, 24);
  // one sequence perfect, one all-miss: per-sequence averaging gives 0.5 at
  // any positive overlap threshold
  EXPECT_DOUBLE_EQ(r.success_curve[10], 0.5);
  EXPECT_LT(r.auc, 0.6);
}

TEST(RunAblation, IdenticalRunnersIdenticalRows) {
  auto suite = toy_suite(2);
  auto rows = run_ablation({{"a", constant_runner()}, {"b", constant_runner()}}, suite);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[0].auc, rows[1].auc);
  EXPECT_DOUBLE_EQ(rows[0].precision20, rows[1].precision20);
  EXPECT_EQ(rows[0].variant, "a");
}

TEST(Diagnostics, IdenticalModelsIdenticalStats) {
  NetConfig cfg = NetConfig::desk();
  ModelParams model = ModelParams::init(cfg, 3);
  std::vector<Sequence> vids = toy_suite(2, 8);
  PairOptions opt;
  opt.pairs_per_video = 3;
  opt.max_frame_gap = 7;
  PairDataset probes = build_training_set(vids, cfg, opt);
  ScoreMapStats a = score_map_diagnostics(cfg, model, probes);
  ScoreMapStats b = score_map_diagnostics(cfg, model, probes);
  EXPECT_DOUBLE_EQ(a.mean_entropy_initial, b.mean_entropy_initial);
  EXPECT_DOUBLE_EQ(a.mean_loss_drop, b.mean_loss_drop);
  // zero-init U2: the update is the identity, so the loss drop is exactly 0
  EXPECT_DOUBLE_EQ(a.mean_loss_drop, 0.0);
}

TEST(Diagnostics, SoftmaxEntropyBounds) {
  Tensor flat({5, 5}, 1.0);
  EXPECT_NEAR(softmax_entropy(flat), std::log(25.0), 1e-12);
  Tensor peaked({5, 5});
  peaked(2, 2) = 60.0;
  EXPECT_LT(softmax_entropy(peaked), 1e-12);
}

TEST(Diagnostics, OverfitCurvesMirrorLogs) {
  OverfitCurves empty = overfit_diagnostic({}, {});
  EXPECT_TRUE(empty.train_loss.empty());
  EXPECT_TRUE(empty.heldout_metric.empty());

  std::vector<TrainLogRow> log{{1, 1.0, 0.9, 0.01, 0.1}, {2, 0.8, 0.7, 0.01, 0.2}};
  std::vector<std::pair<long, OneStepStats>> held{{2, {0.8, 0.6, 1.0}}};
  OverfitCurves c = overfit_diagnostic(log, held);
  ASSERT_EQ(c.train_loss.size(), 2u);
  ASSERT_EQ(c.heldout_metric.size(), 1u);
  EXPECT_DOUBLE_EQ(c.train_loss[1].value, 0.7);
  EXPECT_DOUBLE_EQ(c.heldout_metric[0].value, 0.6);
}
