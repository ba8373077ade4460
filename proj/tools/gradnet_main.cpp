// gradnet: train / track / eval / ablate / diag / gradcheck / synth

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradnet/gradnet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gradnet;

namespace {

fs::path default_out(const std::string& sub) {
  const char* root = std::getenv("GRADNET_OUTPUT_ROOT");
  return fs::path(root ? root : ".") / "gradnet_out" / sub;
}

KvConfig load_kv(const std::string& path) {
  return path.empty() ? KvConfig{} : KvConfig::parse_file(path);
}

std::vector<Sequence> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  if (fs::exists(dir / "groundtruth_rect.txt") || fs::exists(dir / "groundtruth.txt"))
    return {load_sequence(dir)};
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subs.push_back(e.path());
  std::sort(subs.begin(), subs.end());
  std::vector<Sequence> out;
  for (const auto& s : subs) out.push_back(load_sequence(s));
  if (out.empty()) throw IoError("no sequences under " + dir.string());
  return out;
}

PairDataset pairs_from(const std::vector<Sequence>& seqs, const NetConfig& net,
                       const TrainConfig& tc) {
  PairOptions opt;
  opt.pairs_per_video = tc.pairs_per_video;
  opt.max_frame_gap = tc.max_frame_gap;
  opt.label_radius = tc.label_radius;
  opt.gaussian_weights = tc.gaussian_label_weights;
  opt.seed = tc.seed;
  return build_training_set(seqs, net, opt);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

struct TrackerSpec {
  std::string name;
  std::string checkpoint;
  bool updates = true;
};

TrackerSpec parse_tracker_spec(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos)
    throw ConfigError("tracker spec must be name=checkpoint[:no-update], got '" + s + "'");
  TrackerSpec spec;
  spec.name = s.substr(0, eq);
  std::string rest = s.substr(eq + 1);
  const std::string suffix = ":no-update";
  if (rest.size() > suffix.size() &&
      rest.compare(rest.size() - suffix.size(), suffix.size(), suffix) == 0) {
    spec.updates = false;
    rest.resize(rest.size() - suffix.size());
  }
  spec.checkpoint = rest;
  return spec;
}

json ope_to_json(const OPEResult& r) {
  json j;
  j["precision_curve"] = r.precision_curve;
  j["success_curve"] = r.success_curve;
  j["precision20"] = r.precision20;
  j["auc"] = r.auc;
  j["total_frames"] = r.total_frames;
  j["sequences"] = json::array();
  for (std::size_t i = 0; i < r.seq_names.size(); ++i) {
    double mean_iou = 0;
    for (double v : r.ious[i]) mean_iou += v;
    if (!r.ious[i].empty()) mean_iou /= static_cast<double>(r.ious[i].size());
    j["sequences"].push_back({{"name", r.seq_names[i]},
                              {"frames", r.ious[i].size()},
                              {"mean_iou", mean_iou}});
  }
  return j;
}

void write_ope_plots(const OPEResult& r, const fs::path& dir) {
  PlotSeries prec;
  for (int t = 0; t < kPrecisionThresholds; ++t) {
    prec.xs.push_back(t);
    prec.ys.push_back(r.precision_curve[static_cast<std::size_t>(t)]);
  }
  prec.color = {200, 30, 30};
  write_ppm(plot_curves({prec}), dir / "precision_curve.ppm");
  PlotSeries succ;
  for (int t = 0; t < kSuccessThresholds; ++t) {
    succ.xs.push_back(t / 20.0);
    succ.ys.push_back(r.success_curve[static_cast<std::size_t>(t)]);
  }
  succ.color = {30, 30, 200};
  write_ppm(plot_curves({succ}), dir / "success_curve.ppm");
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& config_path, std::string out, int count, long seed_flag) {
  KvConfig kv = load_kv(config_path);
  SceneConfig base = scene_config_from(kv);
  if (seed_flag >= 0) base.seed = static_cast<std::uint64_t>(seed_flag);
  if (out.empty()) out = default_out("synth").string();
  fs::create_directories(out);
  for (int i = 0; i < count; ++i) {
    SceneConfig c = base;
    c.seed = base.seed + static_cast<std::uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof(name), "seq%03d", i);
    save_sequence_otb(generate_sequence(c, name), fs::path(out) / name);
    std::printf("wrote %s (%d frames, seed %llu)\n", (fs::path(out) / name).c_str(),
                c.frames, static_cast<unsigned long long>(c.seed));
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& dataset,
              const std::string& heldout_path, std::string out, long steps_flag,
              long seed_flag, const std::string& variant_flag, double lr_flag,
              long k_flag, const std::string& init_from_flag) {
  KvConfig kv = load_kv(config_path);
  NetConfig net = net_config_from(kv);
  TrainConfig tc = train_config_from(kv);
  if (steps_flag >= 0) tc.steps = static_cast<int>(steps_flag);
  if (seed_flag >= 0) tc.seed = static_cast<std::uint64_t>(seed_flag);
  if (!variant_flag.empty()) tc.variant = variant_from(variant_flag);
  if (lr_flag > 0) tc.lr = lr_flag;
  if (k_flag > 0) tc.k = static_cast<int>(k_flag);
  if (!init_from_flag.empty()) tc.init_from = init_from_flag;
  tc.validate();
  if (out.empty()) out = default_out("train").string();
  fs::create_directories(out);

  PairDataset data = pairs_from(load_dataset(dataset), net, tc);
  PairDataset held;
  if (!heldout_path.empty()) held = pairs_from(load_dataset(heldout_path), net, tc);
  std::printf("training %s: %zu pairs from %d videos, %d steps\n",
              variant_name(tc.variant), data.pairs.size(), data.num_videos(), tc.steps);
  TrainResult r = train(net, tc, data, out, heldout_path.empty() ? nullptr : &held);

  CheckpointMeta meta;
  meta.step = tc.steps;
  meta.seed = tc.seed;
  meta.variant = variant_name(tc.variant);
  meta.config_echo = kv.entries();
  const fs::path ckpt = fs::path(out) / "checkpoint.ckpt";
  save_checkpoint(ckpt, r.model, meta);
  std::printf("wrote %s\n", ckpt.c_str());
  if (!r.log.empty())
    std::printf("loss: %.4f -> %.4f\n", r.log.front().loss_final, r.log.back().loss_final);
  return 0;
}

TrackParams track_params_from(const KvConfig& kv) {
  kv.check_known("track", {"context", "scales", "scale_step", "scale_penalty",
                           "scale_damping", "window_influence", "upsample", "update_every",
                           "reliability", "blend", "label_radius"});
  TrackParams p;
  p.context = kv.get_double("track.context", p.context);
  p.scales = kv.get_int("track.scales", p.scales);
  p.scale_step = kv.get_double("track.scale_step", p.scale_step);
  p.scale_penalty = kv.get_double("track.scale_penalty", p.scale_penalty);
  p.scale_damping = kv.get_double("track.scale_damping", p.scale_damping);
  p.window_influence = kv.get_double("track.window_influence", p.window_influence);
  p.upsample = kv.get_int("track.upsample", p.upsample);
  p.update_every = kv.get_int("track.update_every", p.update_every);
  p.reliability = kv.get_double("track.reliability", p.reliability);
  p.blend = kv.get_double("track.blend", p.blend);
  p.label_radius = kv.get_double("track.label_radius", p.label_radius);
  return p;
}

int cmd_track(const std::string& checkpoint, const std::string& sequence,
              const std::string& config_path, std::string out, bool no_update) {
  KvConfig kv = load_kv(config_path);
  TrackParams params = track_params_from(kv);
  params.updates_enabled = !no_update;
  ModelParams model = load_checkpoint(checkpoint);
  Sequence seq = load_sequence(sequence);
  if (out.empty()) out = default_out("track").string();
  fs::create_directories(out);

  TrackResult r = run_tracker(model.cfg, model, params, seq);
  const fs::path results = fs::path(out) / (seq.name + "_results.txt");
  std::ofstream os(results);
  for (const auto& b : r.boxes)
    os << b.x + 1 << "," << b.y + 1 << "," << b.w << "," << b.h << "\n";

  json events;
  events["sequence"] = seq.name;
  events["frames"] = r.boxes.size();
  events["thre"] = r.thre;
  events["max_scores"] = r.max_scores;
  events["updates_enabled"] = params.updates_enabled;
  events["events"] = json::array();
  for (const auto& e : r.events)
    events["events"].push_back({{"frame", e.frame}, {"kind", e.kind}, {"value", e.value}});
  write_json(fs::path(out) / (seq.name + "_events.json"), events);
  std::printf("wrote %s (%zu frames)\n", results.c_str(), r.boxes.size());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset,
             const std::string& config_path, std::string out, bool no_update, int workers) {
  KvConfig kv = load_kv(config_path);
  TrackParams params = track_params_from(kv);
  params.updates_enabled = !no_update;
  ModelParams model = load_checkpoint(checkpoint);
  std::vector<Sequence> suite = load_dataset(dataset);
  if (out.empty()) out = default_out("eval").string();
  fs::create_directories(out);

  OPEResult r = run_ope(make_tracker_runner(model.cfg, model, params), suite, workers);
  write_json(fs::path(out) / "ope.json", ope_to_json(r));
  std::ofstream csv(fs::path(out) / "ope.csv");
  csv << "metric,value\nprecision20," << r.precision20 << "\nauc," << r.auc << "\n";
  write_ope_plots(r, out);
  std::printf("precision@20 %.4f  success AUC %.4f  (%ld frames)\n", r.precision20, r.auc,
              r.total_frames);
  return 0;
}

int cmd_ablate(const std::vector<std::string>& tracker_specs, const std::string& dataset,
               const std::string& config_path, std::string out, int workers) {
  if (tracker_specs.empty()) throw ConfigError("ablate: need at least one --tracker");
  KvConfig kv = load_kv(config_path);
  TrackParams base_params = track_params_from(kv);
  std::vector<Sequence> suite = load_dataset(dataset);
  if (out.empty()) out = default_out("ablate").string();
  fs::create_directories(out);

  std::vector<std::pair<std::string, ModelParams>> models;
  std::vector<std::pair<std::string, TrackerRunner>> runners;
  models.reserve(tracker_specs.size());
  for (const auto& s : tracker_specs) {
    TrackerSpec spec = parse_tracker_spec(s);
    models.emplace_back(spec.name, load_checkpoint(spec.checkpoint));
    TrackParams p = base_params;
    p.updates_enabled = spec.updates;
    runners.emplace_back(spec.name,
                         make_tracker_runner(models.back().second.cfg,
                                             models.back().second, p));
  }
  auto rows = run_ablation(runners, suite, workers);
  std::ofstream csv(fs::path(out) / "ablation.csv");
  csv << "variant,precision20,auc\n";
  json j = json::array();
  std::printf("%-12s %-12s %s\n", "variant", "precision@20", "auc");
  for (const auto& row : rows) {
    csv << row.variant << "," << row.precision20 << "," << row.auc << "\n";
    j.push_back({{"variant", row.variant},
                 {"precision20", row.precision20},
                 {"auc", row.auc}});
    std::printf("%-12s %-12.4f %.4f\n", row.variant.c_str(), row.precision20, row.auc);
  }
  write_json(fs::path(out) / "ablation.json", j);
  return 0;
}

// diag helpers -------------------------------------------------------------

std::vector<std::pair<std::string, ModelParams>> load_named_checkpoints(
    const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, ModelParams>> out;
  for (const auto& s : specs) {
    TrackerSpec spec = parse_tracker_spec(s);
    out.emplace_back(spec.name, load_checkpoint(spec.checkpoint));
  }
  if (out.empty()) throw ConfigError("diag: need at least one --checkpoint name=path");
  return out;
}

int diag_sgd_baseline(const std::vector<std::string>& ckpts, const std::string& dataset,
                      const fs::path& out, double base_lr, int probes) {
  auto models = load_named_checkpoints(ckpts);
  const ModelParams& model = models.front().second;
  TrainConfig tc;
  std::vector<Sequence> seqs = load_dataset(dataset);
  PairDataset all = pairs_from(seqs, model.cfg, tc);
  PairDataset probe;
  for (int i = 0; i < probes && i < static_cast<int>(all.pairs.size()); ++i)
    probe.pairs.push_back(all.pairs[static_cast<std::size_t>(i)]);
  probe.by_video.push_back({0});
  const std::vector<double> grid{1, 3, 10, 30, 100, 300, 1000, 3000, 10000};
  SgdBaselineResult r = one_step_sgd_baseline(model.cfg, model, probe, grid, base_lr);
  json j;
  j["threshold"] = r.threshold;
  j["initial_mean_loss"] = r.initial_mean_loss;
  j["gradnet_mean_loss"] = r.gradnet_mean_loss;
  j["base_lr"] = base_lr;
  std::ofstream csv(out / "sgd_baseline.csv");
  csv << "lr_multiple,median_iterations,mean_one_step_loss\n";
  std::printf("%-12s %-18s %s\n", "lr", "iters(median)", "1-step loss");
  for (const auto& e : r.entries) {
    csv << e.lr_multiple << ","
        << (std::isinf(e.median_iterations) ? std::string("inf")
                                            : std::to_string(e.median_iterations))
        << "," << e.mean_one_step_loss << "\n";
    j["entries"].push_back({{"lr_multiple", e.lr_multiple},
                            {"median_iterations", std::isinf(e.median_iterations)
                                                      ? -1.0
                                                      : e.median_iterations},
                            {"mean_one_step_loss", e.mean_one_step_loss}});
    std::printf("x%-11g %-18g %.5f\n", e.lr_multiple, e.median_iterations,
                e.mean_one_step_loss);
  }
  std::printf("learned one-step loss %.5f (initial %.5f)\n", r.gradnet_mean_loss,
              r.initial_mean_loss);
  write_json(out / "sgd_baseline.json", j);
  return 0;
}

int diag_weight_ratio(const std::vector<std::string>& ckpts, const std::string& dataset,
                      const fs::path& out) {
  auto models = load_named_checkpoints(ckpts);
  TrainConfig tc;
  std::vector<Sequence> seqs = load_dataset(dataset);
  json j = json::array();
  std::vector<PlotSeries> series;
  const std::array<std::array<std::uint8_t, 3>, 4> palette{
      {{200, 30, 30}, {30, 30, 200}, {30, 160, 30}, {160, 30, 160}}};
  for (std::size_t i = 0; i < models.size(); ++i) {
    PairDataset probes = pairs_from(seqs, models[i].second.cfg, tc);
    WeightRatioSummary s = gradient_weight_ratio(models[i].second.cfg, models[i].second, probes);
    j.push_back({{"name", models[i].first},
                 {"median", s.median},
                 {"samples", s.samples},
                 {"histogram", s.histogram}});
    PlotSeries ps;
    for (std::size_t b = 0; b < s.histogram.size(); ++b) {
      ps.xs.push_back((b + 0.5) / s.histogram.size());
      ps.ys.push_back(s.histogram[b]);
    }
    ps.color = palette[i % palette.size()];
    series.push_back(ps);
    std::printf("%s: median weight ratio %.4f over %ld elements\n", models[i].first.c_str(),
                s.median, s.samples);
  }
  write_json(out / "weight_ratio.json", j);
  write_ppm(plot_curves(series), out / "weight_ratio_hist.ppm");
  return 0;
}

int diag_scoremaps(const std::vector<std::string>& ckpts, const std::string& dataset,
                   const fs::path& out) {
  auto models = load_named_checkpoints(ckpts);
  TrainConfig tc;
  std::vector<Sequence> seqs = load_dataset(dataset);
  json j = json::array();
  for (auto& [name, model] : models) {
    PairDataset probes = pairs_from(seqs, model.cfg, tc);
    ScoreMapStats s = score_map_diagnostics(model.cfg, model, probes, /*keep_maps=*/true);
    j.push_back({{"name", name},
                 {"mean_entropy_initial", s.mean_entropy_initial},
                 {"mean_loss_drop", s.mean_loss_drop}});
    const std::size_t n = std::min<std::size_t>(6, s.initial_maps.size());
    std::vector<Tensor> strip(s.initial_maps.begin(), s.initial_maps.begin() + n);
    write_ppm(heatmap_grid(strip), out / (name + "_initial_maps.ppm"));
    strip.assign(s.final_maps.begin(), s.final_maps.begin() + n);
    write_ppm(heatmap_grid(strip), out / (name + "_final_maps.ppm"));
    std::printf("%s: initial-map entropy %.4f, loss drop %.4f\n", name.c_str(),
                s.mean_entropy_initial, s.mean_loss_drop);
  }
  write_json(out / "scoremap_stats.json", j);
  return 0;
}

int diag_overfit(const std::vector<std::string>& log_specs, const fs::path& out) {
  // each spec: name=train_log.csv[:heldout.csv]
  json j = json::array();
  std::vector<PlotSeries> series;
  const std::array<std::array<std::uint8_t, 3>, 4> palette{
      {{200, 30, 30}, {30, 30, 200}, {30, 160, 30}, {160, 30, 160}}};
  std::size_t color_at = 0;
  for (const auto& spec : log_specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw ConfigError("overfit: expected name=train_log.csv[:heldout.csv]");
    const std::string name = spec.substr(0, eq);
    std::string rest = spec.substr(eq + 1);
    std::string held_path;
    const auto colon = rest.find(':');
    if (colon != std::string::npos) {
      held_path = rest.substr(colon + 1);
      rest.resize(colon);
    }
    auto parse_csv = [](const std::string& path, int value_col) {
      std::vector<CurvePoint> pts;
      std::ifstream is(path);
      if (!is) throw IoError("cannot read " + path);
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#' || !std::isdigit(line[0])) continue;
        std::vector<std::string> cells;
        std::string tok;
        for (char c : line + ",") {
          if (c == ',') {
            cells.push_back(tok);
            tok.clear();
          } else
            tok += c;
        }
        if (static_cast<int>(cells.size()) <= value_col) continue;
        pts.push_back({std::stol(cells[0]), std::stod(cells[static_cast<std::size_t>(value_col)])});
      }
      return pts;
    };
    std::vector<CurvePoint> train_pts = parse_csv(rest, 2);   // loss_final
    std::vector<CurvePoint> held_pts;
    if (!held_path.empty()) held_pts = parse_csv(held_path, 2);
    json entry;
    entry["name"] = name;
    for (const auto& p : train_pts)
      entry["train"].push_back({{"step", p.step}, {"loss", p.value}});
    for (const auto& p : held_pts)
      entry["heldout"].push_back({{"step", p.step}, {"loss", p.value}});
    j.push_back(entry);
    PlotSeries ps;
    for (const auto& p : train_pts) {
      ps.xs.push_back(static_cast<double>(p.step));
      ps.ys.push_back(p.value);
    }
    ps.color = palette[color_at++ % palette.size()];
    series.push_back(ps);
    std::printf("%s: %zu train points, %zu held-out points\n", name.c_str(),
                train_pts.size(), held_pts.size());
  }
  write_json(out / "overfit.json", j);
  if (!series.empty()) write_ppm(plot_curves(series), out / "overfit_train_loss.ppm");
  return 0;
}

// gradcheck -----------------------------------------------------------------

int cmd_gradcheck(bool second_order, bool fault_inject, long seed_flag) {
  NetConfig cfg = NetConfig::desk();
  const std::uint64_t seed = seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : 29;
  double worst = 0;
  int checks = 0;
  const double tol = 1e-4;
  const int instances = 20;

  for (int inst = 0; inst < instances; ++inst) {
    ModelParams model = ModelParams::init(cfg, seed + static_cast<std::uint64_t>(inst));
    Rng rng(seed * 977 + static_cast<std::uint64_t>(inst));
    for (auto& l : model.u2) {
      l.w = random_normal(l.w.dims(), rng, 0.05);
      l.b = random_normal(l.b.dims(), rng, 0.01);
    }
    const int fs = cfg.spatial_after(cfg.x_crop, 5, "X");
    Tensor f2z = random_normal({cfg.f2_channels(), cfg.f2_spatial(), cfg.f2_spatial()}, rng, 0.5);
    std::vector<Tensor> xf{random_normal({cfg.template_channels(), fs, fs}, rng, 0.5),
                           random_normal({cfg.template_channels(), fs, fs}, rng, 0.5)};
    std::vector<LabelMap> labels{
        make_label(cfg.score_size, cfg.score_size, 3 + inst % 7, 4 + inst % 5, 2.0),
        make_label(cfg.score_size, cfg.score_size, 8, 9, 2.0)};

    NetVars vars = NetVars::make(model, false, true);
    std::vector<Var> xfv{constant(xf[0]), constant(xf[1])};
    Var zv = leaf(f2z, true);
    TemplateGenGraph g = template_generation_graph(cfg, zv, xfv, labels, vars);
    auto trainable = vars.trainable();
    std::vector<Var> wrt{zv};
    for (auto& [n, v] : trainable) wrt.push_back(v);
    auto grads = grad(g.loss_final, wrt);
    if (fault_inject && inst == 0)
      for (std::size_t i = 0; i < grads[0]->val.numel(); ++i)
        grads[0]->val[i] = -grads[0]->val[i];

    auto loss_at = [&](const Tensor& z, const ModelParams& m) {
      TemplateGenResult r = generate_template(cfg, z, xf, labels, m);
      return r.loss_final;
    };
    // a few coordinates of each tensor, central differences at h=1e-4
    Rng pick(seed + 31 * static_cast<std::uint64_t>(inst));
    auto check_coord = [&](double analytic, double numeric) {
      const double d = std::abs(analytic - numeric);
      if (d > 1e-9) {
        const double rel = d / (std::abs(analytic) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, rel);
      }
      ++checks;
    };
    for (int probe = 0; probe < 6; ++probe) {
      const std::size_t i = pick.raw() % f2z.numel();
      const double keep = f2z[i];
      const double h = 1e-4;
      f2z[i] = keep + h;
      const double fp = loss_at(f2z, model);
      f2z[i] = keep - h;
      const double fm = loss_at(f2z, model);
      f2z[i] = keep;
      check_coord(grads[0]->val[i], (fp - fm) / (2 * h));
    }
    auto named = model.named_tensors();
    for (std::size_t t = 0; t < trainable.size(); ++t) {
      Tensor* host = nullptr;
      for (auto& [n, ptr] : named)
        if (n == trainable[t].first) host = ptr;
      for (int probe = 0; probe < 3; ++probe) {
        const std::size_t i = pick.raw() % host->numel();
        const double keep = (*host)[i];
        const double h = 1e-4;
        (*host)[i] = keep + h;
        const double fp = loss_at(f2z, model);
        (*host)[i] = keep - h;
        const double fm = loss_at(f2z, model);
        (*host)[i] = keep;
        check_coord(grads[t + 1]->val[i], (fp - fm) / (2 * h));
      }
    }
  }
  std::printf("gradcheck: %d coordinates over %d instances, max relative error %.3g (tol %g)\n",
              checks, instances, worst, tol);

  bool ok = worst < tol;
  if (second_order) {
    ModelParams model = ModelParams::init(cfg, seed + 500);
    Rng rng(seed + 501);
    for (auto& l : model.u2) l.w = random_normal(l.w.dims(), rng, 0.05);
    const int fs = cfg.spatial_after(cfg.x_crop, 5, "X");
    Tensor f2z = random_normal({cfg.f2_channels(), cfg.f2_spatial(), cfg.f2_spatial()}, rng, 0.5);
    std::vector<Tensor> xf{random_normal({cfg.template_channels(), fs, fs}, rng, 0.5)};
    std::vector<LabelMap> labels{make_label(cfg.score_size, cfg.score_size, 6, 6, 2.0)};
    auto u1_grad = [&](bool detach_g) {
      NetVars vars = NetVars::make(model, false, true);
      GenOptions opt;
      opt.detach_gradient = detach_g;
      TemplateGenGraph g = template_generation_graph(cfg, leaf(f2z, true),
                                                     {constant(xf[0])}, labels, vars, opt);
      std::vector<Var> wrt;
      for (int i = 0; i < 3; ++i) wrt.push_back(vars.u1[i].w);
      return grad(g.loss_final, wrt);
    };
    auto full = u1_grad(false), det = u1_grad(true);
    double norm2 = 0;
    for (int i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < full[i]->val.numel(); ++j) {
        const double d = full[i]->val[j] - det[i]->val[j];
        norm2 += d * d;
      }
    const double norm = std::sqrt(norm2);
    std::printf("second-order path difference norm %.6g (must exceed 1e-6)\n", norm);
    ok = ok && norm > 1e-6;
  }
  std::printf("gradcheck %s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradient-guided template-update tracker toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic sequences in OTB layout");
  std::string sy_config, sy_out;
  int sy_count = 1;
  long sy_seed = -1;
  synth->add_option("--config", sy_config, "scene config file");
  synth->add_option("--out", sy_out, "output directory");
  synth->add_option("--count", sy_count, "number of sequences");
  synth->add_option("--seed", sy_seed, "base seed (overrides config)");

  // train
  auto* tr = app.add_subcommand("train", "offline training");
  std::string tr_config, tr_dataset, tr_heldout, tr_out, tr_variant, tr_init;
  long tr_steps = -1, tr_seed = -1, tr_k = -1;
  double tr_lr = -1;
  tr->add_option("--config", tr_config, "net/train config file");
  tr->add_option("--dataset", tr_dataset, "directory of training sequences")->required();
  tr->add_option("--heldout", tr_heldout, "directory of held-out sequences");
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--steps", tr_steps, "training steps (overrides config)");
  tr->add_option("--seed", tr_seed, "seed (overrides config)");
  tr->add_option("--variant", tr_variant, "ours|no_M|no_MG|no_U|two_U");
  tr->add_option("--lr", tr_lr, "learning rate (overrides config)");
  tr->add_option("--k", tr_k, "batch size (overrides config)");
  tr->add_option("--init-from", tr_init, "checkpoint to initialize from");

  // track
  auto* tk = app.add_subcommand("track", "track one sequence");
  std::string tk_ckpt, tk_seq, tk_config, tk_out;
  bool tk_noupd = false;
  tk->add_option("--checkpoint", tk_ckpt, "model checkpoint")->required();
  tk->add_option("--sequence", tk_seq, "sequence directory")->required();
  tk->add_option("--config", tk_config, "track config file");
  tk->add_option("--out", tk_out, "output directory");
  tk->add_flag("--no-update", tk_noupd, "disable online template updates");

  // eval
  auto* ev = app.add_subcommand("eval", "one-pass evaluation over a dataset");
  std::string ev_ckpt, ev_dataset, ev_config, ev_out;
  bool ev_noupd = false;
  int ev_workers = 1;
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--dataset", ev_dataset, "directory of sequences")->required();
  ev->add_option("--config", ev_config, "track config file");
  ev->add_option("--out", ev_out, "output directory");
  ev->add_flag("--no-update", ev_noupd, "disable online template updates");
  ev->add_option("--workers", ev_workers, "parallel sequence workers");

  // ablate
  auto* ab = app.add_subcommand("ablate", "compare tracker variants on one suite");
  std::vector<std::string> ab_trackers;
  std::string ab_dataset, ab_config, ab_out;
  int ab_workers = 1;
  ab->add_option("--tracker", ab_trackers, "name=checkpoint[:no-update] (repeatable)");
  ab->add_option("--dataset", ab_dataset, "directory of sequences")->required();
  ab->add_option("--config", ab_config, "track config file");
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--workers", ab_workers, "parallel sequence workers");

  // diag
  auto* dg = app.add_subcommand("diag", "diagnostic experiments");
  std::string dg_mode, dg_dataset, dg_out;
  std::vector<std::string> dg_ckpts, dg_logs;
  double dg_base_lr = 0.5;
  int dg_probes = 16;
  dg->add_option("--mode", dg_mode, "sgd-baseline|weight-ratio|scoremaps|overfit")->required();
  dg->add_option("--checkpoint", dg_ckpts, "name=path (repeatable)");
  dg->add_option("--dataset", dg_dataset, "probe sequence directory");
  dg->add_option("--log", dg_logs, "overfit: name=train_log.csv[:heldout.csv] (repeatable)");
  dg->add_option("--out", dg_out, "output directory");
  dg->add_option("--base-lr", dg_base_lr, "sgd-baseline: base learning rate");
  dg->add_option("--probes", dg_probes, "sgd-baseline: number of probe pairs");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference verification");
  bool gc_second = false, gc_fault = false;
  long gc_seed = -1;
  gc->add_flag("--second-order", gc_second, "also verify the second-order path");
  gc->add_flag("--fault-inject", gc_fault, "flip one gradient sign (harness self-test)");
  gc->add_option("--seed", gc_seed, "seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(sy_config, sy_out, sy_count, sy_seed);
    if (tr->parsed())
      return cmd_train(tr_config, tr_dataset, tr_heldout, tr_out, tr_steps, tr_seed,
                       tr_variant, tr_lr, tr_k, tr_init);
    if (tk->parsed()) return cmd_track(tk_ckpt, tk_seq, tk_config, tk_out, tk_noupd);
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_dataset, ev_config, ev_out, ev_noupd, ev_workers);
    if (ab->parsed()) return cmd_ablate(ab_trackers, ab_dataset, ab_config, ab_out, ab_workers);
    if (dg->parsed()) {
      fs::path out = dg_out.empty() ? default_out("diag") : fs::path(dg_out);
      fs::create_directories(out);
      if (dg_mode == "sgd-baseline")
        return diag_sgd_baseline(dg_ckpts, dg_dataset, out, dg_base_lr, dg_probes);
      if (dg_mode == "weight-ratio") return diag_weight_ratio(dg_ckpts, dg_dataset, out);
      if (dg_mode == "scoremaps") return diag_scoremaps(dg_ckpts, dg_dataset, out);
      if (dg_mode == "overfit") return diag_overfit(dg_logs, out);
      throw ConfigError("unknown diag mode '" + dg_mode + "'");
    }
    if (gc->parsed()) return cmd_gradcheck(gc_second, gc_fault, gc_seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
