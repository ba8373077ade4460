#pragma once

#include <string>
#include <vector>

#include "gradnet/image.hpp"
#include "gradnet/tensor.hpp"

// Minimal raster plotting so the CLI can emit curve and heatmap images
// without an external plotting dependency.

namespace gradnet {

struct PlotSeries {
  std::vector<double> xs, ys;
  std::array<std::uint8_t, 3> color{0, 0, 0};
};

namespace detail {

inline void put_px(Image& img, int x, int y, const std::array<std::uint8_t, 3>& c) {
  if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
  auto* p = img.px(x, y);
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

inline void draw_line(Image& img, double x0, double y0, double x1, double y1,
                      const std::array<std::uint8_t, 3>& c) {
  const int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    put_px(img, static_cast<int>(std::lround(x0 + t * (x1 - x0))),
           static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
  }
}

}  // namespace detail

/// Line plot of one or more series on auto-scaled axes.
inline Image plot_curves(const std::vector<PlotSeries>& series, int w = 480, int h = 320) {
  Image img(w, h);
  std::fill(img.rgb.begin(), img.rgb.end(), 255);
  const int m = 24;  // margin
  double xmin = HUGE_VAL, xmax = -HUGE_VAL, ymin = HUGE_VAL, ymax = -HUGE_VAL;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      xmin = std::min(xmin, s.xs[i]);
      xmax = std::max(xmax, s.xs[i]);
      ymin = std::min(ymin, s.ys[i]);
      ymax = std::max(ymax, s.ys[i]);
    }
  if (!(xmax > xmin)) xmax = xmin + 1;
  if (!(ymax > ymin)) ymax = ymin + 1;
  const std::array<std::uint8_t, 3> axis{60, 60, 60};
  detail::draw_line(img, m, h - m, w - m, h - m, axis);
  detail::draw_line(img, m, m, m, h - m, axis);
  auto px = [&](double x) { return m + (x - xmin) / (xmax - xmin) * (w - 2 * m); };
  auto py = [&](double y) { return h - m - (y - ymin) / (ymax - ymin) * (h - 2 * m); };
  for (const auto& s : series)
    for (std::size_t i = 0; i + 1 < s.xs.size(); ++i) {
      if (!std::isfinite(s.ys[i]) || !std::isfinite(s.ys[i + 1])) continue;
      detail::draw_line(img, px(s.xs[i]), py(s.ys[i]), px(s.xs[i + 1]), py(s.ys[i + 1]),
                        s.color);
    }
  return img;
}

/// Blue-to-red heatmap of a 2-D map, scaled up by an integer factor.
inline Image heatmap(const Tensor& map, int scale = 8) {
  const int H = map.dim(0), W = map.dim(1);
  const double lo = map.min(), hi = map.max();
  Image img(W * scale, H * scale);
  for (int y = 0; y < H * scale; ++y)
    for (int x = 0; x < W * scale; ++x) {
      const double v = map(y / scale, x / scale);
      const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
      auto* p = img.px(x, y);
      p[0] = static_cast<std::uint8_t>(std::lround(255 * t));
      p[1] = static_cast<std::uint8_t>(std::lround(80 * (1 - std::abs(2 * t - 1))));
      p[2] = static_cast<std::uint8_t>(std::lround(255 * (1 - t)));
    }
  return img;
}

/// Horizontal strip of heatmaps (e.g. initial vs final score-map grids).
inline Image heatmap_grid(const std::vector<Tensor>& maps, int scale = 8, int gap = 2) {
  if (maps.empty()) return Image(1, 1);
  std::vector<Image> tiles;
  int w = 0, h = 0;
  for (const auto& m : maps) {
    tiles.push_back(heatmap(m, scale));
    w += tiles.back().w + gap;
    h = std::max(h, tiles.back().h);
  }
  Image img(w, h);
  std::fill(img.rgb.begin(), img.rgb.end(), 255);
  int xoff = 0;
  for (const auto& t : tiles) {
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) {
        auto* src = t.px(x, y);
        auto* dst = img.px(xoff + x, y);
        dst[0] = src[0];
        dst[1] = src[1];
        dst[2] = src[2];
      }
    xoff += t.w + gap;
  }
  return img;
}

}  // namespace gradnet
