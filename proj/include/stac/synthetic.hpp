#pragma once

// Procedural fixtures: textured frames with exact sub-pixel shifts and a
// moving-shapes sequence with ground-truth labels.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "stac/image.hpp"

namespace stac::synthetic {

using LabelPlane = Plane<std::uint8_t>;

/// Sum of random plane waves; sampled at (x - shift_x, y - shift_y) so a
/// shifted frame is an exact translation of the unshifted one.
class Texture {
 public:
  explicit Texture(std::uint64_t seed, int waves = 6, double min_period = 10.0, double max_period = 40.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> period(min_period, max_period);
    std::uniform_real_distribution<double> amp(6.0, 14.0);
    for (int i = 0; i < waves; ++i) {
      const double a = angle(rng);
      const double k = 2.0 * std::numbers::pi / period(rng);
      waves_.push_back({k * std::cos(a), k * std::sin(a), angle(rng), amp(rng)});
    }
  }

  double operator()(double x, double y) const {
    double v = 0;
    for (const auto& w : waves_) v += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
    return v;
  }

 private:
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::vector<Wave> waves_;
};

inline Frame textured_frame(int width, int height, std::uint64_t seed, double shift_x = 0.0, double shift_y = 0.0,
                            Subsampling s = Subsampling::k420) {
  Texture luma(seed);
  Texture chroma(seed ^ 0x9e3779b97f4a7c15ull, 3, 20.0, 60.0);
  Frame f = Frame::blank(width, height, s);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) f.planes[0](x, y) = clamp_u8(128.0 + 2.0 * luma(x - shift_x, y - shift_y));
  const int sh = chroma_shift(s);
  const double scale = 1 << sh;
  for (int c = 1; c < 3; ++c)
    for (int y = 0; y < f.visible_height(c); ++y)
      for (int x = 0; x < f.visible_width(c); ++x) {
        const double lx = (x + 0.5) * scale - 0.5, ly = (y + 0.5) * scale - 0.5;
        f.planes[c](x, y) = clamp_u8(128.0 + (c == 1 ? 1.0 : -1.0) * chroma(lx - shift_x, ly - shift_y));
      }
  f.pad_edges();
  return f;
}

/// Uniform noise frame.
inline Frame noise_frame(int width, int height, std::uint64_t seed, Subsampling s = Subsampling::k420) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, 255);
  Frame f = Frame::blank(width, height, s);
  for (auto& p : f.planes)
    for (auto& v : p.data()) v = static_cast<std::uint8_t>(d(rng));
  f.pad_edges();
  return f;
}

struct Shape {
  enum Kind { kDisk, kBox } kind;
  double x, y;    // center at t = 0
  double vx, vy;  // pixels per frame
  double size;    // radius or half-extent
  std::uint8_t label;
};

struct Sequence {
  std::vector<Frame> frames;
  std::vector<LabelPlane> labels;  // visible luma dims
};

/// Label values: 0 background, 1 bright disks, 2 dark boxes.
class MovingShapes {
 public:
  MovingShapes(int width, int height, std::uint64_t seed, int shape_count = 6)
      : width_(width), height_(height), texture_(seed, 5, 16.0, 64.0) {
    std::mt19937_64 rng(seed * 7919 + 1);
    std::uniform_real_distribution<double> px(0.15 * width, 0.85 * width), py(0.15 * height, 0.85 * height);
    std::uniform_real_distribution<double> vel(-1.6, 1.6), size(0.06 * std::min(width, height), 0.14 * std::min(width, height));
    for (int i = 0; i < shape_count; ++i) {
      const bool disk = i % 2 == 0;
      shapes_.push_back({disk ? Shape::kDisk : Shape::kBox, px(rng), py(rng), vel(rng), vel(rng), size(rng),
                         static_cast<std::uint8_t>(disk ? 1 : 2)});
    }
  }

  /// Background pans slowly; shapes bounce inside the frame.
  Frame frame(int t, Subsampling s = Subsampling::k420) const {
    Frame f = Frame::blank(width_, height_, s);
    f.frame_id = static_cast<std::uint32_t>(t);
    const auto lab = labels(t);
    Plane<double> u(width_, height_), v(width_, height_);
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x) {
        const double bg = texture_(x - 0.5 * t, y - 0.25 * t);
        double Y = 128.0 + 0.8 * bg, U = 128.0 + 0.3 * bg, V = 128.0 - 0.3 * bg;
        switch (lab(x, y)) {
          case 1: Y = 215.0 + 0.6 * bg; U = 150.0; V = 120.0; break;
          case 2: Y = 40.0 + 0.6 * bg; U = 118.0; V = 146.0; break;
          default: break;
        }
        f.planes[0](x, y) = clamp_u8(Y);
        u(x, y) = U;
        v(x, y) = V;
      }
    const int n = 1 << chroma_shift(s);
    for (int cy = 0; cy < f.visible_height(1); ++cy)
      for (int cx = 0; cx < f.visible_width(1); ++cx) {
        double su = 0, sv = 0;
        int cnt = 0;
        for (int dy = 0; dy < n; ++dy)
          for (int dx = 0; dx < n; ++dx) {
            const int x = cx * n + dx, y = cy * n + dy;
            if (x >= width_ || y >= height_) continue;
            su += u(x, y);
            sv += v(x, y);
            ++cnt;
          }
        f.planes[1](cx, cy) = clamp_u8(su / cnt);
        f.planes[2](cx, cy) = clamp_u8(sv / cnt);
      }
    f.pad_edges();
    return f;
  }

  LabelPlane labels(int t) const {
    LabelPlane lab(width_, height_, 0);
    for (const auto& sh : shapes_) {
      const double cx = bounce(sh.x + sh.vx * t, sh.size, width_);
      const double cy = bounce(sh.y + sh.vy * t, sh.size, height_);
      for (int y = 0; y < height_; ++y)
        for (int x = 0; x < width_; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const bool inside = sh.kind == Shape::kDisk ? dx * dx + dy * dy <= sh.size * sh.size
                                                      : std::abs(dx) <= sh.size && std::abs(dy) <= 0.7 * sh.size;
          if (inside) lab(x, y) = sh.label;
        }
    }
    return lab;
  }

  Sequence sequence(int frames, Subsampling s = Subsampling::k420) const {
    Sequence seq;
    for (int t = 0; t < frames; ++t) {
      seq.frames.push_back(frame(t, s));
      seq.labels.push_back(labels(t));
    }
    return seq;
  }

 private:
  static double bounce(double p, double margin, int extent) {
    const double lo = margin, hi = extent - margin;
    const double span = hi - lo;
    double q = std::fmod(p - lo, 2 * span);
    if (q < 0) q += 2 * span;
    return q <= span ? lo + q : lo + 2 * span - q;
  }

  int width_;
  int height_;
  Texture texture_;
  std::vector<Shape> shapes_;
};

}  // namespace stac::synthetic
