#pragma once

#include <algorithm>
#include <cctype>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stac/binary_io.hpp"
#include "stac/error.hpp"

namespace stac {

inline constexpr int kBlock = 8;
inline constexpr int kBlockArea = kBlock * kBlock;

template <typename T>
class Plane {
 public:
  Plane() = default;
  Plane(int width, int height, T fill = T{})
      : width_(width), height_(height), data_(static_cast<std::size_t>(width) * height, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& operator()(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  /// Edge-replicating access.
  const T& clamped(int x, int y) const {
    return (*this)(std::clamp(x, 0, width_ - 1), std::clamp(y, 0, height_ - 1));
  }

  bool contains(double x, double y) const {
    return x >= 0.0 && y >= 0.0 && x <= width_ - 1 && y <= height_ - 1;
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const Plane& o) const { return width_ == o.width_ && height_ == o.height_; }

  friend bool operator==(const Plane&, const Plane&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

/// Bilinear sample with edge replication outside the plane.
template <typename T>
double sample_bilinear(const Plane<T>& p, double x, double y) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = x - fx;
  const double ay = y - fy;
  const double v00 = p.clamped(x0, y0);
  const double v10 = p.clamped(x0 + 1, y0);
  const double v01 = p.clamped(x0, y0 + 1);
  const double v11 = p.clamped(x0 + 1, y0 + 1);
  return (1 - ay) * ((1 - ax) * v00 + ax * v10) + ay * ((1 - ax) * v01 + ax * v11);
}

enum class Subsampling : std::uint8_t { k420 = 0, k444 = 1 };

inline int chroma_shift(Subsampling s) { return s == Subsampling::k420 ? 1 : 0; }

/// Luma padding unit: one chroma block must cover whole luma blocks.
inline int mcu_size(Subsampling s) { return kBlock << chroma_shift(s); }

inline int round_up(int v, int unit) { return (v + unit - 1) / unit * unit; }

/// Planar YUV 8-bit frame. Planes are stored at padded size; the padded
/// area replicates the frame's right/bottom edge.
struct Frame {
  int width = 0;
  int height = 0;
  Subsampling subsampling = Subsampling::k420;
  std::uint32_t frame_id = 0;
  std::array<Plane<std::uint8_t>, 3> planes;

  static Frame blank(int width, int height, Subsampling s = Subsampling::k420, std::uint8_t luma = 0,
                     std::uint8_t chroma = 128) {
    require(width > 0 && height > 0, ErrorCode::kInvalidArgument, "frame dims must be positive");
    Frame f;
    f.width = width;
    f.height = height;
    f.subsampling = s;
    const int pw = round_up(width, mcu_size(s));
    const int ph = round_up(height, mcu_size(s));
    const int sh = chroma_shift(s);
    f.planes[0] = Plane<std::uint8_t>(pw, ph, luma);
    f.planes[1] = Plane<std::uint8_t>(pw >> sh, ph >> sh, chroma);
    f.planes[2] = Plane<std::uint8_t>(pw >> sh, ph >> sh, chroma);
    return f;
  }

  int padded_width() const { return planes[0].width(); }
  int padded_height() const { return planes[0].height(); }
  int pixel_count() const { return padded_width() * padded_height(); }

  /// Visible (unpadded) extent of plane `c`.
  int visible_width(int c) const { return c == 0 ? width : (width + (1 << chroma_shift(subsampling)) - 1) >> chroma_shift(subsampling); }
  int visible_height(int c) const { return c == 0 ? height : (height + (1 << chroma_shift(subsampling)) - 1) >> chroma_shift(subsampling); }

  Plane<std::uint8_t>& y() { return planes[0]; }
  const Plane<std::uint8_t>& y() const { return planes[0]; }

  /// Re-replicate the padding from the visible area.
  void pad_edges() {
    for (int c = 0; c < 3; ++c) {
      auto& p = planes[c];
      const int vw = visible_width(c);
      const int vh = visible_height(c);
      for (int yy = 0; yy < p.height(); ++yy)
        for (int xx = 0; xx < p.width(); ++xx)
          if (xx >= vw || yy >= vh) p(xx, yy) = p(std::min(xx, vw - 1), std::min(yy, vh - 1));
    }
  }

  bool same_geometry(const Frame& o) const {
    return width == o.width && height == o.height && subsampling == o.subsampling;
  }

  friend bool operator==(const Frame& a, const Frame& b) {
    return a.same_geometry(b) && a.planes == b.planes;
  }
};

/// Continuous-valued frame, the input domain of sensitivity oracles.
struct RealFrame {
  Subsampling subsampling = Subsampling::k420;
  std::array<Plane<double>, 3> planes;

  static RealFrame from(const Frame& f) {
    RealFrame r;
    r.subsampling = f.subsampling;
    for (int c = 0; c < 3; ++c) {
      const auto& src = f.planes[c];
      r.planes[c] = Plane<double>(src.width(), src.height());
      std::transform(src.data().begin(), src.data().end(), r.planes[c].data().begin(),
                     [](std::uint8_t v) { return static_cast<double>(v); });
    }
    return r;
  }
};

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// BT.601 full-range.
namespace bt601 {
inline constexpr double kYr = 0.299000, kYg = 0.587000, kYb = 0.114000;
inline constexpr double kUr = -0.168736, kUg = -0.331264, kUb = 0.500000;
inline constexpr double kVr = 0.500000, kVg = -0.418688, kVb = -0.081312;
inline constexpr double kRv = 1.402000, kGu = -0.344136, kGv = -0.714136, kBu = 1.772000;
}  // namespace bt601

struct Rgb {
  Plane<std::uint8_t> r, g, b;
};

inline Frame frame_from_rgb(const Rgb& rgb, Subsampling s, std::uint32_t frame_id = 0) {
  using namespace bt601;
  const int w = rgb.r.width();
  const int h = rgb.r.height();
  Frame f = Frame::blank(w, h, s);
  f.frame_id = frame_id;
  Plane<double> u(w, h), v(w, h);
  for (int yy = 0; yy < h; ++yy)
    for (int xx = 0; xx < w; ++xx) {
      const double R = rgb.r(xx, yy), G = rgb.g(xx, yy), B = rgb.b(xx, yy);
      f.planes[0](xx, yy) = clamp_u8(kYr * R + kYg * G + kYb * B);
      u(xx, yy) = kUr * R + kUg * G + kUb * B + 128.0;
      v(xx, yy) = kVr * R + kVg * G + kVb * B + 128.0;
    }
  const int sh = chroma_shift(s);
  const int n = 1 << sh;
  for (int cy = 0; cy < f.visible_height(1); ++cy)
    for (int cx = 0; cx < f.visible_width(1); ++cx) {
      double su = 0, sv = 0;
      int cnt = 0;
      for (int dy = 0; dy < n; ++dy)
        for (int dx = 0; dx < n; ++dx) {
          const int xx = cx * n + dx, yy = cy * n + dy;
          if (xx >= w || yy >= h) continue;
          su += u(xx, yy);
          sv += v(xx, yy);
          ++cnt;
        }
      f.planes[1](cx, cy) = clamp_u8(su / cnt);
      f.planes[2](cx, cy) = clamp_u8(sv / cnt);
    }
  f.pad_edges();
  return f;
}

inline Rgb frame_to_rgb(const Frame& f) {
  using namespace bt601;
  Rgb out{Plane<std::uint8_t>(f.width, f.height), Plane<std::uint8_t>(f.width, f.height),
          Plane<std::uint8_t>(f.width, f.height)};
  const int sh = chroma_shift(f.subsampling);
  for (int yy = 0; yy < f.height; ++yy)
    for (int xx = 0; xx < f.width; ++xx) {
      const double Y = f.planes[0](xx, yy);
      const double U = f.planes[1](xx >> sh, yy >> sh) - 128.0;
      const double V = f.planes[2](xx >> sh, yy >> sh) - 128.0;
      out.r(xx, yy) = clamp_u8(Y + kRv * V);
      out.g(xx, yy) = clamp_u8(Y + kGu * U + kGv * V);
      out.b(xx, yy) = clamp_u8(Y + kBu * U);
    }
  return out;
}

// ---- PNM (binary P5/P6, maxval 255) ----

namespace detail {
inline int pnm_int(std::istream& in) {
  int c = in.peek();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int v = 0;
  if (!(in >> v)) fail(ErrorCode::kIo, "malformed PNM header");
  return v;
}
}  // namespace detail

struct PnmImage {
  int channels = 1;  // 1 = P5, 3 = P6
  Plane<std::uint8_t> r, g, b;  // gray images use only r
};

inline PnmImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") fail(ErrorCode::kIo, path + ": only binary P5/P6 supported");
  const int w = detail::pnm_int(in);
  const int h = detail::pnm_int(in);
  const int maxval = detail::pnm_int(in);
  if (w <= 0 || h <= 0 || maxval != 255) fail(ErrorCode::kIo, path + ": unsupported PNM geometry/maxval");
  in.get();
  PnmImage img;
  img.channels = magic == "P5" ? 1 : 3;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * img.channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) fail(ErrorCode::kIo, path + ": truncated PNM data");
  img.r = Plane<std::uint8_t>(w, h);
  if (img.channels == 3) {
    img.g = Plane<std::uint8_t>(w, h);
    img.b = Plane<std::uint8_t>(w, h);
  }
  for (int i = 0; i < w * h; ++i) {
    if (img.channels == 1) {
      img.r.data()[i] = raw[i];
    } else {
      img.r.data()[i] = raw[3 * i];
      img.g.data()[i] = raw[3 * i + 1];
      img.b.data()[i] = raw[3 * i + 2];
    }
  }
  return img;
}

inline void write_pgm(const std::string& path, const Plane<std::uint8_t>& p, int width = -1, int height = -1) {
  const int w = width < 0 ? p.width() : width;
  const int h = height < 0 ? p.height() : height;
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  for (int yy = 0; yy < h; ++yy) out.write(reinterpret_cast<const char*>(&p(0, yy)), w);
}

inline void write_ppm(const std::string& path, const Rgb& rgb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  const int w = rgb.r.width(), h = rgb.r.height();
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  for (int yy = 0; yy < h; ++yy) {
    for (int xx = 0; xx < w; ++xx) {
      row[3 * xx] = rgb.r(xx, yy);
      row[3 * xx + 1] = rgb.g(xx, yy);
      row[3 * xx + 2] = rgb.b(xx, yy);
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

/// P5 becomes a neutral-chroma frame, P6 goes through BT.601.
inline Frame read_frame(const std::string& path, Subsampling s, std::uint32_t frame_id = 0) {
  PnmImage img = read_pnm(path);
  if (img.channels == 3) return frame_from_rgb(Rgb{img.r, img.g, img.b}, s, frame_id);
  Frame f = Frame::blank(img.r.width(), img.r.height(), s);
  f.frame_id = frame_id;
  for (int yy = 0; yy < img.r.height(); ++yy)
    for (int xx = 0; xx < img.r.width(); ++xx) f.planes[0](xx, yy) = img.r(xx, yy);
  f.pad_edges();
  return f;
}

inline void write_frame(const std::string& path, const Frame& f) { write_ppm(path, frame_to_rgb(f)); }

}  // namespace stac
