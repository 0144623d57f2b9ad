#pragma once

// Dense optical flow in the style of DIS (coarse-to-fine inverse search over
// patches followed by weighted densification, no variational refinement),
// flow composition, and backward warping of frames, labels and strategies.
//
// Convention: a FlowField lives on the grid of frame dst_id and points into
// frame src_id, so warp(src)(x) = src(x + d(x)).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "stac/binary_io.hpp"
#include "stac/image.hpp"
#include "stac/region.hpp"
#include "stac/segmentation.hpp"

namespace stac {

struct FlowField {
  Plane<float> dx, dy;
  Plane<std::uint8_t> valid;
  std::uint32_t src_id = 0;
  std::uint32_t dst_id = 0;

  static FlowField zero(int width, int height, std::uint32_t src = 0, std::uint32_t dst = 0) {
    return {Plane<float>(width, height, 0.f), Plane<float>(width, height, 0.f), Plane<std::uint8_t>(width, height, 1),
            src, dst};
  }

  static FlowField constant(int width, int height, float dx, float dy, std::uint32_t src = 0, std::uint32_t dst = 0) {
    FlowField f = zero(width, height, src, dst);
    std::fill(f.dx.data().begin(), f.dx.data().end(), dx);
    std::fill(f.dy.data().begin(), f.dy.data().end(), dy);
    f.update_bounds_validity();
    return f;
  }

  int width() const { return dx.width(); }
  int height() const { return dx.height(); }

  /// Marks pixels whose source position falls outside the frame.
  void update_bounds_validity() {
    for (int y = 0; y < height(); ++y)
      for (int x = 0; x < width(); ++x) {
        const double sx = x + dx(x, y), sy = y + dy(x, y);
        if (!(sx >= 0 && sy >= 0 && sx <= width() - 1 && sy <= height() - 1)) valid(x, y) = 0;
      }
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;
};

struct FlowParams {
  int levels = 4;
  int patch = 8;
  int stride = 4;
  int iterations = 12;
  bool forward_backward_check = false;
  double fb_threshold = 1.0;
};

namespace detail {

inline Plane<float> to_float(const Plane<std::uint8_t>& p) {
  Plane<float> out(p.width(), p.height());
  for (std::size_t i = 0; i < p.data().size(); ++i) out.data()[i] = p.data()[i];
  return out;
}

/// 2x2 box average; odd trailing rows/columns are replicated.
inline Plane<float> downsample(const Plane<float>& p) {
  const int w = std::max(1, (p.width() + 1) / 2), h = std::max(1, (p.height() + 1) / 2);
  Plane<float> out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out(x, y) = 0.25f * (p.clamped(2 * x, 2 * y) + p.clamped(2 * x + 1, 2 * y) + p.clamped(2 * x, 2 * y + 1) +
                           p.clamped(2 * x + 1, 2 * y + 1));
  return out;
}

inline float bilinear(const Plane<float>& p, double x, double y) { return static_cast<float>(sample_bilinear(p, x, y)); }

/// Central-difference gradients with edge clamping.
inline void gradients(const Plane<float>& p, Plane<float>& gx, Plane<float>& gy) {
  gx = Plane<float>(p.width(), p.height());
  gy = Plane<float>(p.width(), p.height());
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x) {
      gx(x, y) = 0.5f * (p.clamped(x + 1, y) - p.clamped(x - 1, y));
      gy(x, y) = 0.5f * (p.clamped(x, y + 1) - p.clamped(x, y - 1));
    }
}

/// Patch origins along one axis: stride steps plus a final patch flush
/// with the far edge so every pixel is covered.
inline std::vector<int> patch_origins(int extent, int patch, int stride) {
  std::vector<int> o;
  if (extent <= patch) return {0};
  for (int v = 0; v + patch <= extent; v += stride) o.push_back(v);
  if (o.back() + patch < extent) o.push_back(extent - patch);
  return o;
}

/// One pyramid level: inverse search per patch, then densification.
inline void refine_level(const Plane<float>& image, const Plane<float>& templ, Plane<float>& fx, Plane<float>& fy,
                         const FlowParams& params) {
  const int w = templ.width(), h = templ.height();
  const int ps = std::min({params.patch, w, h});
  Plane<float> tgx, tgy;
  gradients(templ, tgx, tgy);
  const auto ox = patch_origins(w, ps, params.stride), oy = patch_origins(h, ps, params.stride);

  struct Patch {
    int x0, y0;
    double u, v;
  };
  std::vector<Patch> patches;
  patches.reserve(ox.size() * oy.size());
  for (int y0 : oy)
    for (int x0 : ox) {
      // Start from the mean incoming flow over the patch.
      double u = 0, v = 0;
      for (int y = y0; y < y0 + ps; ++y)
        for (int x = x0; x < x0 + ps; ++x) {
          u += fx(x, y);
          v += fy(x, y);
        }
      u /= ps * ps;
      v /= ps * ps;
      double h11 = 1e-6, h12 = 0, h22 = 1e-6;
      for (int y = y0; y < y0 + ps; ++y)
        for (int x = x0; x < x0 + ps; ++x) {
          h11 += tgx(x, y) * tgx(x, y);
          h12 += tgx(x, y) * tgy(x, y);
          h22 += tgy(x, y) * tgy(x, y);
        }
      const double det = h11 * h22 - h12 * h12;
      const double u0 = u, v0 = v;
      if (det > 1e-9) {
        for (int it = 0; it < params.iterations; ++it) {
          double bx = 0, by = 0;
          for (int y = y0; y < y0 + ps; ++y)
            for (int x = x0; x < x0 + ps; ++x) {
              const double e = bilinear(image, x + u, y + v) - templ(x, y);
              bx += tgx(x, y) * e;
              by += tgy(x, y) * e;
            }
          const double du = (h22 * bx - h12 * by) / det;
          const double dv = (h11 * by - h12 * bx) / det;
          u -= du;
          v -= dv;
          if (du * du + dv * dv < 1e-6) break;
        }
        // Reject patches that wander further than their own size.
        if (std::hypot(u - u0, v - v0) > ps) {
          u = u0;
          v = v0;
        }
      }
      patches.push_back({x0, y0, u, v});
    }

  Plane<double> su(w, h, 0.0), sv(w, h, 0.0), sw(w, h, 0.0);
  for (const auto& p : patches)
    for (int y = p.y0; y < p.y0 + ps; ++y)
      for (int x = p.x0; x < p.x0 + ps; ++x) {
        const double err = std::abs(bilinear(image, x + p.u, y + p.v) - templ(x, y));
        const double lambda = 1.0 / std::max(1.0, err);
        su(x, y) += lambda * p.u;
        sv(x, y) += lambda * p.v;
        sw(x, y) += lambda;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (sw(x, y) > 0) {
        fx(x, y) = static_cast<float>(su(x, y) / sw(x, y));
        fy(x, y) = static_cast<float>(sv(x, y) / sw(x, y));
      }
}

inline void upsample_flow(const Plane<float>& cx, const Plane<float>& cy, Plane<float>& fx, Plane<float>& fy, int w,
                          int h) {
  fx = Plane<float>(w, h);
  fy = Plane<float>(w, h);
  const double sx = static_cast<double>(cx.width()) / w, sy = static_cast<double>(cx.height()) / h;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double px = (x + 0.5) * sx - 0.5, py = (y + 0.5) * sy - 0.5;
      fx(x, y) = static_cast<float>(sample_bilinear(cx, px, py) / sx);
      fy(x, y) = static_cast<float>(sample_bilinear(cy, px, py) / sy);
    }
}

inline FlowField dis_flow(const Plane<float>& image, const Plane<float>& templ, const FlowParams& params) {
  std::vector<Plane<float>> pi{image}, pt{templ};
  for (int l = 1; l < params.levels; ++l) {
    if (pi.back().width() < 2 * params.patch || pi.back().height() < 2 * params.patch) break;
    pi.push_back(downsample(pi.back()));
    pt.push_back(downsample(pt.back()));
  }
  Plane<float> fx(pt.back().width(), pt.back().height(), 0.f), fy = fx;
  for (int l = static_cast<int>(pt.size()) - 1; l >= 0; --l) {
    if (fx.width() != pt[l].width() || fx.height() != pt[l].height()) {
      Plane<float> ux, uy;
      upsample_flow(fx, fy, ux, uy, pt[l].width(), pt[l].height());
      fx = std::move(ux);
      fy = std::move(uy);
    }
    refine_level(pi[l], pt[l], fx, fy, params);
  }
  FlowField out;
  out.dx = std::move(fx);
  out.dy = std::move(fy);
  out.valid = Plane<std::uint8_t>(out.dx.width(), out.dx.height(), 1);
  out.update_bounds_validity();
  return out;
}

/// Multi-source BFS (4-neighbour) from valid pixels; returns for every pixel
/// the index of its nearest valid pixel, or -1 when nothing is valid.
inline std::vector<int> nearest_valid(const Plane<std::uint8_t>& valid) {
  const int w = valid.width(), h = valid.height();
  std::vector<int> src(static_cast<std::size_t>(w) * h, -1);
  std::deque<int> q;
  for (int i = 0; i < w * h; ++i)
    if (valid.data()[i]) {
      src[i] = i;
      q.push_back(i);
    }
  while (!q.empty()) {
    const int i = q.front();
    q.pop_front();
    const int x = i % w, y = i / w;
    const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
    for (const auto& n : nb) {
      if (n[0] < 0 || n[1] < 0 || n[0] >= w || n[1] >= h) continue;
      const int j = n[1] * w + n[0];
      if (src[j] < 0) {
        src[j] = src[i];
        q.push_back(j);
      }
    }
  }
  return src;
}

template <typename T>
void fill_invalid(Plane<T>& p, const Plane<std::uint8_t>& valid) {
  const auto src = nearest_valid(valid);
  if (!src.empty() && src[0] < 0) return;  // nothing valid: leave as sampled
  for (std::size_t i = 0; i < src.size(); ++i)
    if (!valid.data()[i]) p.data()[i] = p.data()[src[i]];
}

}  // namespace detail

/// Flow on cur's grid pointing into prev (luma only).
inline FlowField compute_flow(const Frame& prev, const Frame& cur, const FlowParams& params = {}) {
  require(prev.same_geometry(cur), ErrorCode::kDimensionMismatch, "flow frames differ in geometry");
  const auto image = detail::to_float(prev.planes[0]);
  const auto templ = detail::to_float(cur.planes[0]);
  FlowField f = detail::dis_flow(image, templ, params);
  f.src_id = prev.frame_id;
  f.dst_id = cur.frame_id;
  if (params.forward_backward_check) {
    const FlowField back = detail::dis_flow(templ, image, params);
    for (int y = 0; y < f.height(); ++y)
      for (int x = 0; x < f.width(); ++x) {
        if (!f.valid(x, y)) continue;
        const double sx = x + f.dx(x, y), sy = y + f.dy(x, y);
        const double rx = f.dx(x, y) + sample_bilinear(back.dx, sx, sy);
        const double ry = f.dy(x, y) + sample_bilinear(back.dy, sx, sy);
        if (std::hypot(rx, ry) > params.fb_threshold) f.valid(x, y) = 0;
      }
  }
  return f;
}

/// f1: a -> b, f2: b -> c; result a -> c with d(x) = f2(x) + f1(x + f2(x)).
inline FlowField compose_flow(const FlowField& f1, const FlowField& f2) {
  require(f1.dst_id == f2.src_id, ErrorCode::kChainMismatch,
          "cannot compose flow ending at " + std::to_string(f1.dst_id) + " with flow starting at " +
              std::to_string(f2.src_id));
  require(f1.width() == f2.width() && f1.height() == f2.height(), ErrorCode::kDimensionMismatch, "flow dims differ");
  const int w = f2.width(), h = f2.height();
  FlowField out = FlowField::zero(w, h, f1.src_id, f2.dst_id);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sx = x + f2.dx(x, y), sy = y + f2.dy(x, y);
      const bool inside = sx >= 0 && sy >= 0 && sx <= w - 1 && sy <= h - 1;
      out.dx(x, y) = static_cast<float>(f2.dx(x, y) + detail::bilinear(f1.dx, sx, sy));
      out.dy(x, y) = static_cast<float>(f2.dy(x, y) + detail::bilinear(f1.dy, sx, sy));
      const bool v1 = inside && f1.valid(static_cast<int>(std::lround(sx)), static_cast<int>(std::lround(sy)));
      out.valid(x, y) = f2.valid(x, y) && v1;
    }
  return out;
}

namespace detail {

/// Flow sampled at plane resolution (chroma uses the co-sited luma position).
inline void plane_flow(const FlowField& flow, int shift, int w, int h, Plane<float>& fx, Plane<float>& fy,
                       Plane<std::uint8_t>& valid) {
  fx = Plane<float>(w, h);
  fy = Plane<float>(w, h);
  valid = Plane<std::uint8_t>(w, h);
  const double s = 1 << shift;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double lx = (x + 0.5) * s - 0.5, ly = (y + 0.5) * s - 0.5;
      fx(x, y) = static_cast<float>(sample_bilinear(flow.dx, lx, ly) / s);
      fy(x, y) = static_cast<float>(sample_bilinear(flow.dy, lx, ly) / s);
      const int nx = std::clamp(static_cast<int>(std::lround(lx)), 0, flow.width() - 1);
      const int ny = std::clamp(static_cast<int>(std::lround(ly)), 0, flow.height() - 1);
      const double sx = x + fx(x, y), sy = y + fy(x, y);
      valid(x, y) = flow.valid(nx, ny) && sx >= 0 && sy >= 0 && sx <= w - 1 && sy <= h - 1;
    }
}

}  // namespace detail

/// Backward bilinear warp of every plane; invalid samples copy the nearest valid one.
inline Frame warp_frame(const Frame& src, const FlowField& flow) {
  require(flow.width() == src.padded_width() && flow.height() == src.padded_height(), ErrorCode::kDimensionMismatch,
          "flow dims differ from frame");
  Frame out = src;
  out.frame_id = flow.dst_id;
  const int sh = chroma_shift(src.subsampling);
  for (int c = 0; c < 3; ++c) {
    const auto& p = src.planes[c];
    Plane<float> fx, fy;
    Plane<std::uint8_t> valid;
    if (c == 0) {
      fx = flow.dx;
      fy = flow.dy;
      valid = flow.valid;
    } else {
      detail::plane_flow(flow, sh, p.width(), p.height(), fx, fy, valid);
    }
    auto& q = out.planes[c];
    for (int y = 0; y < p.height(); ++y)
      for (int x = 0; x < p.width(); ++x) q(x, y) = clamp_u8(sample_bilinear(p, x + fx(x, y), y + fy(x, y)));
    detail::fill_invalid(q, valid);
  }
  return out;
}

/// Nearest-neighbour backward warp; invalid pixels take the nearest valid class.
inline SegmentationMap warp_labels(const SegmentationMap& seg, const FlowField& flow) {
  require(flow.width() == seg.width() && flow.height() == seg.height(), ErrorCode::kDimensionMismatch,
          "flow dims differ from segmentation map");
  SegmentationMap out{Plane<std::uint8_t>(seg.width(), seg.height()), flow.dst_id};
  for (int y = 0; y < seg.height(); ++y)
    for (int x = 0; x < seg.width(); ++x)
      out.labels(x, y) = seg.labels.clamped(static_cast<int>(std::floor(x + flow.dx(x, y) + 0.5)),
                                            static_cast<int>(std::floor(y + flow.dy(x, y) + 0.5)));
  detail::fill_invalid(out.labels, flow.valid);
  return out;
}

/// Region centres are traced through the flow; unresolved regions copy the
/// nearest resolved region (Euclidean centre distance, row-major ties). If
/// nothing resolves, every region takes source region (0,0)'s level.
inline StrategyMap warp_strategy(const StrategyMap& strategy, const FlowField& flow, const RegionGrid& grid) {
  require(flow.width() == grid.luma_width() && flow.height() == grid.luma_height() && strategy.matches(grid),
          ErrorCode::kDimensionMismatch, "flow, grid and strategy disagree");
  const int n = grid.count();
  StrategyMap out = strategy;
  std::vector<char> resolved(n, 0);
  for (int r = 0; r < n; ++r) {
    const auto [cx, cy] = grid.center(r);
    const int nx = std::clamp(static_cast<int>(std::lround(cx)), 0, flow.width() - 1);
    const int ny = std::clamp(static_cast<int>(std::lround(cy)), 0, flow.height() - 1);
    const double sx = cx + sample_bilinear(flow.dx, cx, cy), sy = cy + sample_bilinear(flow.dy, cx, cy);
    if (!flow.valid(nx, ny) || !(sx > -0.5 && sy > -0.5 && sx < flow.width() - 0.5 && sy < flow.height() - 0.5)) continue;
    const int px = std::clamp(static_cast<int>(std::floor(sx + 0.5)), 0, flow.width() - 1);
    const int py = std::clamp(static_cast<int>(std::floor(sy + 0.5)), 0, flow.height() - 1);
    out.levels[r] = strategy.levels[grid.region_of_luma_pixel(px, py)];
    resolved[r] = 1;
  }
  if (std::none_of(resolved.begin(), resolved.end(), [](char v) { return v; })) {
    std::fill(out.levels.begin(), out.levels.end(), strategy.levels[0]);
    return out;
  }
  const StrategyMap traced = out;
  for (int r = 0; r < n; ++r) {
    if (resolved[r]) continue;
    const auto [cx, cy] = grid.center(r);
    double best = std::numeric_limits<double>::infinity();
    int best_r = -1;
    for (int s = 0; s < n; ++s) {
      if (!resolved[s]) continue;
      const auto [sx, sy] = grid.center(s);
      const double d = std::hypot(sx - cx, sy - cy);
      if (d < best) {
        best = d;
        best_r = s;
      }
    }
    out.levels[r] = traced.levels[best_r];
  }
  return out;
}

inline constexpr double kPsnrCap = 99.0;

/// Luma PSNR over the visible area; identical frames give kPsnrCap.
inline double psnr(const Frame& a, const Frame& b) {
  require(a.width == b.width && a.height == b.height, ErrorCode::kDimensionMismatch, "PSNR frames differ in size");
  double se = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      const double d = static_cast<double>(a.planes[0](x, y)) - b.planes[0](x, y);
      se += d * d;
    }
  const double mse = se / (static_cast<double>(a.width) * a.height);
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

// ---- Middlebury .flo interchange ----
//
//   "PIEH" | width i32 | height i32 | width*height interleaved (dx, dy) f32.
// Invalid pixels are written as 1e10 in both components.

inline constexpr float kUnknownFlow = 1e10f;

inline Bytes serialize_flo(const FlowField& f) {
  ByteWriter w;
  w.magic("PIEH");
  w.u32(static_cast<std::uint32_t>(f.width()));
  w.u32(static_cast<std::uint32_t>(f.height()));
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x) {
      w.f32(f.valid(x, y) ? f.dx(x, y) : kUnknownFlow);
      w.f32(f.valid(x, y) ? f.dy(x, y) : kUnknownFlow);
    }
  return w.take();
}

inline FlowField parse_flo(std::span<const std::uint8_t> data) {
  ByteReader r(data);
  if (!r.magic("PIEH")) fail(ErrorCode::kBadMagic, "not a .flo file");
  const auto w = r.u32(), h = r.u32();
  require(w > 0 && h > 0 && w < (1u << 16) && h < (1u << 16), ErrorCode::kCorruptStream, "bad .flo dims");
  FlowField f = FlowField::zero(static_cast<int>(w), static_cast<int>(h));
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x) {
      f.dx(x, y) = r.f32();
      f.dy(x, y) = r.f32();
      if (std::abs(f.dx(x, y)) > 1e9f || std::abs(f.dy(x, y)) > 1e9f) {
        f.dx(x, y) = f.dy(x, y) = 0.f;
        f.valid(x, y) = 0;
      }
    }
  return f;
}

}  // namespace stac
