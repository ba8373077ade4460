#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "gradnet/image.hpp"
#include "gradnet/labels.hpp"
#include "gradnet/net.hpp"

namespace gradnet {

/// Axis-aligned box, 0-based top-left corner, sizes in pixels. OTB ground
/// truth files are 1-based; the readers/writers convert.
struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
  double cx() const { return x + w / 2.0; }
  double cy() const { return y + h / 2.0; }
  double area() const { return w * h; }
};

struct Sequence {
  std::string name;
  std::vector<Image> frames;
  std::vector<BBox> gt;
};

// ---------------------------------------------------------------------------
// synthetic scenes

struct SceneConfig {
  int frame_w = 96;
  int frame_h = 96;
  int frames = 80;
  double target_size = 18;   // nominal diameter of the textured ellipse
  double vel_x = 1.5;        // px/frame
  double vel_y = 0.6;
  double jitter = 0.0;       // stddev of per-frame positional noise
  int distractors = 2;
  double similarity = 0.8;   // 1 = distractors clone the initial target look
  double drift = 0.0;        // appearance drift per frame (hue/phase rate)
  double clutter = 0.3;      // background texture amplitude
  std::vector<std::pair<int, int>> occlusions;  // inclusive frame ranges
  double start_x = -1;       // <0: seeded placement inside the safe region
  double start_y = -1;
  std::uint64_t seed = 1;
};

namespace detail {

struct Rgb {
  double r, g, b;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct BlobLook {
  double hue_a = 0, hue_b = 0;     // two stripe tones
  double sat = 0.85;
  double val_a = 0.9, val_b = 0.5;
  double stripe_dir = 0;           // radians
  double stripe_freq = 0.8;        // radians per pixel
  double phase = 0;
  double axis_a = 8, axis_b = 8;   // ellipse half extents
  double orient = 0;
};

struct Track {
  std::vector<double> xs, ys;  // per-frame centers
};

inline Rgb blob_color(const BlobLook& look, double u, double v, double drift_t) {
  const double coord = u * std::cos(look.stripe_dir) + v * std::sin(look.stripe_dir);
  const double s = std::sin(look.stripe_freq * coord + look.phase + drift_t * 6.0);
  const double hue = (s > 0 ? look.hue_a : look.hue_b) + drift_t;
  return hsv_to_rgb(hue, look.sat, s > 0 ? look.val_a : look.val_b);
}

inline bool blob_inside(const BlobLook& look, double u, double v) {
  const double c = std::cos(look.orient), s = std::sin(look.orient);
  const double p = (u * c + v * s) / look.axis_a;
  const double q = (-u * s + v * c) / look.axis_b;
  return p * p + q * q <= 1.0;
}

}  // namespace detail

/// Deterministic procedural sequence: a striped ellipse target over static
/// value-noise clutter, with perturbed-clone distractors, optional scripted
/// occlusion, and optional appearance drift. Ground truth is the tight box of
/// the rendered target mask, so it is exact by construction.
class SyntheticScene {
 public:
  explicit SyntheticScene(const SceneConfig& cfg) : cfg_(cfg) {
    if (cfg.target_size >= std::min(cfg.frame_w, cfg.frame_h) / 2.0)
      throw ConfigError(detail::cat("scene: target size ", cfg.target_size,
                                    " infeasible for ", cfg.frame_w, "x", cfg.frame_h,
                                    " frame"));
    if (cfg.frames < 1) throw ConfigError("scene: need at least one frame");
    Rng rng(cfg.seed);
    target_ = random_look(rng, cfg.target_size);
    target_track_ = make_track(rng, cfg.vel_x, cfg.vel_y, cfg.start_x, cfg.start_y);
    for (int d = 0; d < cfg.distractors; ++d) {
      detail::BlobLook look = target_;
      const double wobble = 1.0 - cfg.similarity;
      look.hue_a += wobble * rng.uniform(-0.25, 0.25);
      look.hue_b += wobble * rng.uniform(-0.25, 0.25);
      look.stripe_dir += wobble * rng.uniform(-1.0, 1.0);
      look.stripe_freq *= 1.0 + wobble * rng.uniform(-0.4, 0.4);
      look.phase = rng.uniform(0, 2 * M_PI);
      distractors_.push_back(look);
      const double speed = rng.uniform(0.5, 1.4);
      const double ang = rng.uniform(0, 2 * M_PI);
      distractor_tracks_.push_back(
          make_track(rng, speed * std::cos(ang), speed * std::sin(ang), -1, -1));
    }
    // static background noise grid
    const int gw = cfg.frame_w / kNoiseCell + 2, gh = cfg.frame_h / kNoiseCell + 2;
    noise_.assign(static_cast<std::size_t>(gw) * gh * 3, 0.0);
    noise_w_ = gw;
    for (auto& v : noise_) v = rng.uniform(-1.0, 1.0);
    occluder_hue_ = rng.uniform(0, 1);
  }

  int num_frames() const { return cfg_.frames; }

  bool occluded(int t) const {
    for (auto [a, b] : cfg_.occlusions)
      if (t >= a && t <= b) return true;
    return false;
  }

  BBox target_bbox(int t) const {
    int minx = cfg_.frame_w, miny = cfg_.frame_h, maxx = -1, maxy = -1;
    scan_mask(t, [&](int x, int y) {
      minx = std::min(minx, x);
      maxx = std::max(maxx, x);
      miny = std::min(miny, y);
      maxy = std::max(maxy, y);
    });
    if (maxx < 0) throw Error("scene: target mask empty");
    return BBox{static_cast<double>(minx), static_cast<double>(miny),
                static_cast<double>(maxx - minx + 1), static_cast<double>(maxy - miny + 1)};
  }

  Image render_frame(int t) const {
    Image img(cfg_.frame_w, cfg_.frame_h);
    const double amp = cfg_.clutter * 70.0;
    for (int y = 0; y < cfg_.frame_h; ++y)
      for (int x = 0; x < cfg_.frame_w; ++x) {
        auto* p = img.px(x, y);
        for (int c = 0; c < 3; ++c) {
          const double v = 128.0 + amp * noise_at(x, y, c);
          p[c] = clamp_byte(v);
        }
      }
    const double drift_t = cfg_.drift * t;
    for (std::size_t d = 0; d < distractors_.size(); ++d)
      draw_blob(img, distractors_[d], distractor_tracks_[d].xs[static_cast<std::size_t>(t)],
                distractor_tracks_[d].ys[static_cast<std::size_t>(t)], 0.0);
    draw_blob(img, target_, target_track_.xs[static_cast<std::size_t>(t)],
              target_track_.ys[static_cast<std::size_t>(t)], drift_t);
    if (occluded(t)) draw_occluder(img, t);
    return img;
  }

  Sequence sequence(const std::string& name = "synthetic") const {
    Sequence s;
    s.name = name;
    s.frames.reserve(static_cast<std::size_t>(cfg_.frames));
    s.gt.reserve(static_cast<std::size_t>(cfg_.frames));
    for (int t = 0; t < cfg_.frames; ++t) {
      s.frames.push_back(render_frame(t));
      s.gt.push_back(target_bbox(t));
    }
    return s;
  }

 private:
  static constexpr int kNoiseCell = 12;

  detail::BlobLook random_look(Rng& rng, double size) const {
    detail::BlobLook look;
    look.hue_a = rng.uniform(0, 1);
    look.hue_b = look.hue_a + rng.uniform(0.25, 0.55);
    look.stripe_dir = rng.uniform(0, M_PI);
    look.stripe_freq = rng.uniform(0.55, 0.95);
    look.phase = rng.uniform(0, 2 * M_PI);
    look.axis_a = size / 2.0 * (1.0 + rng.uniform(-0.12, 0.12));
    look.axis_b = size / 2.0 * (1.0 + rng.uniform(-0.12, 0.12));
    look.orient = rng.uniform(0, M_PI);
    return look;
  }

  detail::Track make_track(Rng& rng, double vx, double vy, double sx, double sy) const {
    const double margin = 1.5 * cfg_.target_size;
    const double lox = margin, hix = cfg_.frame_w - 1 - margin;
    const double loy = margin, hiy = cfg_.frame_h - 1 - margin;
    if (lox >= hix || loy >= hiy)
      throw ConfigError("scene: target too large for the frame margin");
    double x = sx >= 0 ? sx : rng.uniform(lox, hix);
    double y = sy >= 0 ? sy : rng.uniform(loy, hiy);
    detail::Track tr;
    for (int t = 0; t < cfg_.frames; ++t) {
      tr.xs.push_back(x);
      tr.ys.push_back(y);
      x += vx + (cfg_.jitter > 0 ? cfg_.jitter * rng.normal() : 0.0);
      y += vy + (cfg_.jitter > 0 ? cfg_.jitter * rng.normal() : 0.0);
      if (x < lox) { x = 2 * lox - x; vx = -vx; }
      if (x > hix) { x = 2 * hix - x; vx = -vx; }
      if (y < loy) { y = 2 * loy - y; vy = -vy; }
      if (y > hiy) { y = 2 * hiy - y; vy = -vy; }
    }
    return tr;
  }

  template <typename F>
  void scan_mask(int t, F&& fn) const {
    const double cx = target_track_.xs[static_cast<std::size_t>(t)];
    const double cy = target_track_.ys[static_cast<std::size_t>(t)];
    const double r = std::max(target_.axis_a, target_.axis_b) + 2;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
    const int x1 = std::min(cfg_.frame_w - 1, static_cast<int>(std::ceil(cx + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
    const int y1 = std::min(cfg_.frame_h - 1, static_cast<int>(std::ceil(cy + r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (detail::blob_inside(target_, x - cx, y - cy)) fn(x, y);
  }

  void draw_blob(Image& img, const detail::BlobLook& look, double cx, double cy,
                 double drift_t) const {
    const double r = std::max(look.axis_a, look.axis_b) + 2;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
    const int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(cx + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
    const int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(cy + r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double u = x - cx, v = y - cy;
        if (!detail::blob_inside(look, u, v)) continue;
        const detail::Rgb c = detail::blob_color(look, u, v, drift_t);
        auto* p = img.px(x, y);
        p[0] = clamp_byte(c.r * 255.0);
        p[1] = clamp_byte(c.g * 255.0);
        p[2] = clamp_byte(c.b * 255.0);
      }
  }

  void draw_occluder(Image& img, int t) const {
    const double cx = target_track_.xs[static_cast<std::size_t>(t)];
    const double cy = target_track_.ys[static_cast<std::size_t>(t)];
    const double half = 1.1 * std::max(target_.axis_a, target_.axis_b) + 3;
    const int x0 = std::max(0, static_cast<int>(cx - half));
    const int x1 = std::min(img.w - 1, static_cast<int>(cx + half));
    const int y0 = std::max(0, static_cast<int>(cy - half));
    const int y1 = std::min(img.h - 1, static_cast<int>(cy + half));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        // flat occluder with faint diagonal texture
        const double tone = 0.55 + 0.1 * std::sin(0.9 * (x + 2 * y));
        const detail::Rgb c = detail::hsv_to_rgb(occluder_hue_, 0.4, tone);
        auto* p = img.px(x, y);
        p[0] = clamp_byte(c.r * 255.0);
        p[1] = clamp_byte(c.g * 255.0);
        p[2] = clamp_byte(c.b * 255.0);
      }
  }

  double noise_at(int x, int y, int c) const {
    const double gx = static_cast<double>(x) / kNoiseCell;
    const double gy = static_cast<double>(y) / kNoiseCell;
    const int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
    const double fx = gx - ix, fy = gy - iy;
    auto at = [&](int xx, int yy) {
      return noise_[(static_cast<std::size_t>(yy) * noise_w_ + xx) * 3 +
                    static_cast<std::size_t>(c)];
    };
    const double top = at(ix, iy) * (1 - fx) + at(ix + 1, iy) * fx;
    const double bot = at(ix, iy + 1) * (1 - fx) + at(ix + 1, iy + 1) * fx;
    return top * (1 - fy) + bot * fy;
  }

  static std::uint8_t clamp_byte(double v) {
    return static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : std::lround(v)));
  }

  SceneConfig cfg_;
  detail::BlobLook target_;
  detail::Track target_track_;
  std::vector<detail::BlobLook> distractors_;
  std::vector<detail::Track> distractor_tracks_;
  std::vector<double> noise_;
  int noise_w_ = 0;
  double occluder_hue_ = 0;
};

inline Sequence generate_sequence(const SceneConfig& cfg,
                                  const std::string& name = "synthetic") {
  return SyntheticScene(cfg).sequence(name);
}

// ---------------------------------------------------------------------------
// OTB-layout sequence directories: <dir>/img/0001.ppm ... plus
// groundtruth_rect.txt with one 1-based "x,y,w,h" line per frame.

inline void save_sequence_otb(const Sequence& seq, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "img");
  char name[32];
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    std::snprintf(name, sizeof(name), "%04zu.ppm", i + 1);
    write_ppm(seq.frames[i], dir / "img" / name);
  }
  std::ofstream os(dir / "groundtruth_rect.txt");
  if (!os) throw IoError(detail::cat("cannot write ", (dir / "groundtruth_rect.txt").string()));
  for (const auto& b : seq.gt)
    os << b.x + 1 << "," << b.y + 1 << "," << b.w << "," << b.h << "\n";
}

namespace detail {

inline std::vector<double> parse_gt_line(const std::string& line,
                                         const std::string& file, int lineno) {
  std::vector<double> out;
  std::string tok;
  for (char ch : line) {
    if (ch == ',' || ch == '\t' || ch == ' ' || ch == '\r') {
      if (!tok.empty()) {
        out.push_back(std::stod(tok));
        tok.clear();
      }
    } else {
      tok += ch;
    }
  }
  if (!tok.empty()) out.push_back(std::stod(tok));
  if (out.size() != 4)
    throw IoError(detail::cat(file, ":", lineno, ": expected x,y,w,h, got '", line, "'"));
  return out;
}

}  // namespace detail

inline Sequence load_sequence(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir))
    throw IoError(detail::cat("sequence directory not found: ", dir.string()));
  fs::path img_dir = fs::is_directory(dir / "img") ? dir / "img" : dir;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(img_dir)) {
    if (!e.is_regular_file()) continue;
    if (e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw IoError(detail::cat("no .ppm frames under ", img_dir.string()));

  fs::path gt_path = dir / "groundtruth_rect.txt";
  if (!fs::exists(gt_path)) gt_path = dir / "groundtruth.txt";
  if (!fs::exists(gt_path))
    throw IoError(detail::cat("no ground-truth file under ", dir.string()));
  std::ifstream is(gt_path);
  Sequence seq;
  seq.name = dir.filename().string();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto v = detail::parse_gt_line(line, gt_path.string(), lineno);
      seq.gt.push_back(BBox{v[0] - 1, v[1] - 1, v[2], v[3]});
    } catch (const std::invalid_argument&) {
      throw IoError(detail::cat(gt_path.string(), ":", lineno, ": malformed line '", line, "'"));
    }
  }
  if (seq.gt.size() != files.size())
    throw IoError(detail::cat(gt_path.string(), ": ", seq.gt.size(),
                              " ground-truth lines for ", files.size(), " frames"));
  seq.frames.reserve(files.size());
  for (const auto& f : files) seq.frames.push_back(read_ppm(f));
  return seq;
}

// ---------------------------------------------------------------------------
// training pairs

struct TrainingPair {
  Image z;  // target patch crop (z_crop sized)
  Image x;  // search region crop (x_crop sized)
  LabelMap y;
  int target_cy = 0, target_cx = 0;  // score-map cell of the target inside x
  int video_id = 0;
  int z_frame = 0, x_frame = 0;
  // features memoized while the backbone is frozen
  mutable Tensor fx_cache, f2z_cache;
  mutable std::int64_t cache_version = -1;
};

struct PairDataset {
  std::vector<TrainingPair> pairs;
  std::vector<std::vector<int>> by_video;  // pair indices per video
  int num_videos() const { return static_cast<int>(by_video.size()); }
};

struct PairOptions {
  int pairs_per_video = 8;
  int max_frame_gap = 30;
  double label_radius = 2.0;
  bool gaussian_weights = false;
  double context = 0.5;     // Z context margin as a fraction of (w+h)
  double shift_frac = 0.6;  // max target offset as a fraction of the map half-range
  std::uint64_t seed = 1;
};

/// Scaled-crop size of the target-plus-context square, in source pixels.
inline double context_size(const BBox& b, double context) {
  const double m = context * (b.w + b.h);
  return std::sqrt((b.w + m) * (b.h + m));
}

/// Z and X crops for one (z_frame, x_frame) pair; the target inside X is
/// offset by a bounded random shift so the positive cell varies.
inline TrainingPair make_training_pair(const NetConfig& cfg, const Sequence& seq,
                                       int z_frame, int x_frame, Rng& rng,
                                       const PairOptions& opt) {
  TrainingPair p;
  p.z_frame = z_frame;
  p.x_frame = x_frame;
  const BBox& zb = seq.gt[static_cast<std::size_t>(z_frame)];
  const double s_z = context_size(zb, opt.context);
  p.z = crop_patch(seq.frames[static_cast<std::size_t>(z_frame)], zb.cx(), zb.cy(), s_z,
                   cfg.z_crop);

  const BBox& xb = seq.gt[static_cast<std::size_t>(x_frame)];
  const double s_x = context_size(xb, opt.context) * cfg.x_crop / cfg.z_crop;
  const int half = (cfg.score_size - 1) / 2;
  const double max_cells = opt.shift_frac * half;
  const double crop_per_cell = cfg.total_stride();
  const double src_per_crop = s_x / cfg.x_crop;
  const double dx_cells = rng.uniform(-max_cells, max_cells);
  const double dy_cells = rng.uniform(-max_cells, max_cells);
  const double off_x = dx_cells * crop_per_cell * src_per_crop;
  const double off_y = dy_cells * crop_per_cell * src_per_crop;
  p.x = crop_patch(seq.frames[static_cast<std::size_t>(x_frame)], xb.cx() - off_x,
                   xb.cy() - off_y, s_x, cfg.x_crop);
  p.target_cy = half + static_cast<int>(std::lround(dy_cells));
  p.target_cx = half + static_cast<int>(std::lround(dx_cells));
  p.y = make_label(cfg.score_size, cfg.score_size, p.target_cy, p.target_cx,
                   opt.label_radius, opt.gaussian_weights);
  return p;
}

inline PairDataset build_training_set(const std::vector<Sequence>& videos,
                                      const NetConfig& cfg, const PairOptions& opt) {
  if (opt.max_frame_gap < 1)
    throw ConfigError("build_training_set: max_frame_gap must be >= 1 (Z and X must differ)");
  Rng rng(opt.seed);
  PairDataset ds;
  int vid = 0;
  for (const auto& seq : videos) {
    if (seq.frames.size() < 2) {
      std::fprintf(stderr, "build_training_set: skipping '%s' (needs >= 2 frames)\n",
                   seq.name.c_str());
      continue;
    }
    std::vector<int> indices;
    const int n = static_cast<int>(seq.frames.size());
    for (int i = 0; i < opt.pairs_per_video; ++i) {
      const int zf = rng.uniform_int(n);
      const int lo = std::max(0, zf - opt.max_frame_gap);
      const int hi = std::min(n - 1, zf + opt.max_frame_gap);
      int xf = zf;
      while (xf == zf) xf = lo + rng.uniform_int(hi - lo + 1);
      TrainingPair p = make_training_pair(cfg, seq, zf, xf, rng, opt);
      p.video_id = vid;
      indices.push_back(static_cast<int>(ds.pairs.size()));
      ds.pairs.push_back(std::move(p));
    }
    ds.by_video.push_back(std::move(indices));
    ++vid;
  }
  return ds;
}

}  // namespace gradnet
