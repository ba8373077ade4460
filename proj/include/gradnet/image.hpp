#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gradnet/tensor.hpp"

namespace gradnet {

/// 8-bit RGB raster, row-major.
struct Image {
  int w = 0;
  int h = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w_, int h_) : w(w_), h(h_), rgb(static_cast<std::size_t>(w_) * h_ * 3, 0) {}

  std::uint8_t* px(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
  const std::uint8_t* px(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3;
  }
};

inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(detail::cat("cannot write ", path.string()));
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw IoError(detail::cat("short write to ", path.string()));
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(detail::cat("cannot read ", path.string()));
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError(detail::cat(path.string(), ": not a binary PPM (P6)"));
  auto next_int = [&]() {
    // skip whitespace and '#' comments
    int c = is.get();
    while (c == '#' || std::isspace(c)) {
      if (c == '#')
        while (c != '\n' && c != EOF) c = is.get();
      c = is.get();
    }
    int v = 0;
    bool any = false;
    while (std::isdigit(c)) {
      v = v * 10 + (c - '0');
      any = true;
      c = is.get();
    }
    if (!any) throw IoError(detail::cat(path.string(), ": malformed PPM header"));
    return v;
  };
  Image img;
  img.w = next_int();
  img.h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw IoError(detail::cat(path.string(), ": PPM maxval must be 255"));
  img.rgb.resize(static_cast<std::size_t>(img.w) * img.h * 3);
  is.read(reinterpret_cast<char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw IoError(detail::cat(path.string(), ": truncated pixel data"));
  return img;
}

inline std::array<double, 3> mean_color(const Image& img) {
  std::array<double, 3> m{0, 0, 0};
  const std::size_t n = static_cast<std::size_t>(img.w) * img.h;
  if (n == 0) return m;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) m[static_cast<std::size_t>(c)] += img.rgb[i * 3 + c];
  for (auto& v : m) v /= static_cast<double>(n);
  return m;
}

/// Square crop of side `size` (source pixels) centered at (cx, cy), resampled
/// bilinearly to out_size. Taps outside the frame read the frame's mean
/// color. When size == out_size and the crop is axis-aligned on integer
/// pixels this is an exact copy.
inline Image crop_patch(const Image& frame, double cx, double cy, double size,
                        int out_size) {
  if (size <= 0) throw ConfigError("crop_patch: size must be positive");
  if (out_size <= 0) throw ConfigError("crop_patch: out_size must be positive");
  const std::array<double, 3> pad = mean_color(frame);
  Image out(out_size, out_size);
  const double scale = size / out_size;
  const double x0 = cx - size / 2.0;
  const double y0 = cy - size / 2.0;
  auto sample = [&](double sx, double sy, int c) -> double {
    const int ix = static_cast<int>(std::floor(sx));
    const int iy = static_cast<int>(std::floor(sy));
    const double fx = sx - ix, fy = sy - iy;
    auto at = [&](int x, int y) -> double {
      if (x < 0 || y < 0 || x >= frame.w || y >= frame.h)
        return pad[static_cast<std::size_t>(c)];
      return frame.px(x, y)[c];
    };
    const double top = at(ix, iy) * (1 - fx) + at(ix + 1, iy) * fx;
    const double bot = at(ix, iy + 1) * (1 - fx) + at(ix + 1, iy + 1) * fx;
    return top * (1 - fy) + bot * fy;
  };
  for (int y = 0; y < out_size; ++y)
    for (int x = 0; x < out_size; ++x) {
      const double sx = x0 + (x + 0.5) * scale - 0.5;
      const double sy = y0 + (y + 0.5) * scale - 0.5;
      for (int c = 0; c < 3; ++c) {
        double v = sample(sx, sy, c);
        v = v < 0 ? 0 : (v > 255 ? 255 : v);
        out.px(x, y)[c] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  return out;
}

inline constexpr double frame_byte_to_unit(std::uint8_t b) {
  return static_cast<double>(b) / 255.0;
}

/// 3xHxW tensor in [0,1].
inline Tensor to_tensor(const Image& img) {
  Tensor t({3, img.h, img.w});
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        t(c, y, x) = frame_byte_to_unit(img.px(x, y)[c]);
  return t;
}

}  // namespace gradnet
