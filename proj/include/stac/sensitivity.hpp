#pragma once

// Loss sensitivity of a segmentation oracle: pixel gradients, their exact
// conversion to DCT-coefficient gradients, fake-label gradients, and
// per-frequency averages over a calibration corpus.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "stac/binary_io.hpp"
#include "stac/dct.hpp"
#include "stac/image.hpp"
#include "stac/quant.hpp"
#include "stac/segmentation.hpp"

namespace stac {

struct PixelDomain {};
struct CoeffDomain {};

/// Signed per-sample gradients for the three planes at codec resolution.
/// In the coefficient domain each 8x8 tile holds one block's gradients in
/// natural order.
template <typename Domain>
struct GradientField {
  Subsampling subsampling = Subsampling::k420;
  std::uint32_t frame_id = 0;
  std::array<Plane<double>, 3> planes;

  static GradientField zeros_like(const Frame& f) {
    GradientField g;
    g.subsampling = f.subsampling;
    g.frame_id = f.frame_id;
    for (int c = 0; c < 3; ++c) g.planes[c] = Plane<double>(f.planes[c].width(), f.planes[c].height(), 0.0);
    return g;
  }

  bool same_shape(const GradientField& o) const {
    for (int c = 0; c < 3; ++c)
      if (!planes[c].same_shape(o.planes[c])) return false;
    return true;
  }

  friend bool operator==(const GradientField&, const GradientField&) = default;
};

using PixelGradientMap = GradientField<PixelDomain>;
using CoeffGradientMap = GradientField<CoeffDomain>;

namespace detail {
template <typename To, typename From, typename Transform>
GradientField<To> blockwise(const GradientField<From>& in, Transform&& t) {
  GradientField<To> out;
  out.subsampling = in.subsampling;
  out.frame_id = in.frame_id;
  for (int c = 0; c < 3; ++c) {
    const auto& p = in.planes[c];
    require(p.width() % kBlock == 0 && p.height() % kBlock == 0, ErrorCode::kDimensionMismatch,
            "gradient plane is not a block multiple");
    out.planes[c] = Plane<double>(p.width(), p.height());
    for (int by = 0; by < p.height() / kBlock; ++by)
      for (int bx = 0; bx < p.width() / kBlock; ++bx) store_block(out.planes[c], bx, by, t(load_block(p, bx, by)));
  }
  return out;
}
}  // namespace detail

/// x = IDCT(s) is orthonormal-linear, so dQ/ds = DCT(dQ/dx) per block.
inline CoeffGradientMap pixel_to_coeff_gradients(const PixelGradientMap& gx) {
  return detail::blockwise<CoeffDomain>(gx, [](const Block& b) { return forward_dct(b); });
}

inline PixelGradientMap coeff_to_pixel_gradients(const CoeffGradientMap& gs) {
  return detail::blockwise<PixelDomain>(gs, [](const Block& b) { return inverse_dct(b); });
}

// ---- Oracle contract ----

struct OracleOutput {
  std::vector<Plane<double>> scores;  // one plane per class, padded luma dims
  SegmentationMap prediction;         // argmax of scores
  double loss = 0.0;                  // summed over pixels
  PixelGradientMap gradient;          // dQ/dx at the evaluated labels
};

/// A differentiable segmenter. `labels == nullptr` evaluates the loss at
/// the oracle's own argmax prediction (the fake label).
class SensitivityOracle {
 public:
  virtual ~SensitivityOracle() = default;
  virtual int class_count() const = 0;
  virtual OracleOutput evaluate(const RealFrame& frame, const Plane<std::uint8_t>* labels) const = 0;
  /// Loss only; used by finite-difference checks.
  virtual double loss(const RealFrame& frame, const Plane<std::uint8_t>& labels) const = 0;
};

/// Small fixed convolutional segmenter: per class, a bias plus one k x k
/// kernel per input plane (chroma upsampled by replication), softmax and
/// summed cross-entropy. Stateless after construction, so reentrant.
class ToySegmenter final : public SensitivityOracle {
 public:
  static constexpr int kChannels = 3;

  ToySegmenter(int classes, int ksize, std::vector<double> bias, std::vector<double> weights)
      : classes_(classes), ksize_(ksize), bias_(std::move(bias)), weights_(std::move(weights)) {
    require(classes > 0 && classes < 256 && ksize > 0 && ksize % 2 == 1, ErrorCode::kInvalidArgument,
            "bad segmenter shape");
    require(static_cast<int>(bias_.size()) == classes &&
                weights_.size() == static_cast<std::size_t>(classes) * kChannels * ksize * ksize,
            ErrorCode::kInvalidArgument, "weight count does not match shape");
  }

  /// Intensity-band segmenter: 0 background, 1 bright, 2 dark, with a weak
  /// chroma cue and a Laplacian texture term.
  static ToySegmenter reference() {
    constexpr int k = 5, kk = k * k;
    const double g1[k] = {1, 4, 6, 4, 1};
    std::array<double, kk> smooth{}, lap{};
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x) smooth[y * k + x] = g1[x] * g1[y] / 256.0;
    lap[1 * k + 2] = lap[3 * k + 2] = lap[2 * k + 1] = lap[2 * k + 3] = 1.0;
    lap[2 * k + 2] = -4.0;
    const double a = 0.15;
    std::vector<double> w(3 * kChannels * kk, 0.0);
    auto at = [&](int cls, int ch, int i) -> double& { return w[(cls * kChannels + ch) * kk + i]; };
    for (int i = 0; i < kk; ++i) {
      at(0, 0, i) = 0.02 * lap[i];
      at(1, 0, i) = a * smooth[i];
      at(2, 0, i) = -a * smooth[i];
    }
    at(1, 1, 2 * k + 2) = 0.05;  // U
    at(2, 2, 2 * k + 2) = 0.05;  // V
    return ToySegmenter(3, k, {0.0, -a * 42.0, -a * 43.0}, std::move(w));
  }

  int class_count() const override { return classes_; }
  int kernel_size() const { return ksize_; }
  const std::vector<double>& bias() const { return bias_; }
  const std::vector<double>& weights() const { return weights_; }

  OracleOutput evaluate(const RealFrame& frame, const Plane<std::uint8_t>* labels) const override {
    OracleOutput out;
    out.scores = scores(frame);
    const int w = frame.planes[0].width(), h = frame.planes[0].height();
    out.prediction.labels = Plane<std::uint8_t>(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int best = 0;
        for (int k = 1; k < classes_; ++k)
          if (out.scores[k](x, y) > out.scores[best](x, y)) best = k;
        out.prediction.labels(x, y) = static_cast<std::uint8_t>(best);
      }
    const Plane<std::uint8_t>& target = labels ? *labels : out.prediction.labels;
    require(target.width() == w && target.height() == h, ErrorCode::kDimensionMismatch, "label map dims");

    // dQ/dscore_k = softmax_k - [k == label]
    std::vector<Plane<double>> dscore(classes_, Plane<double>(w, h));
    double loss = 0;
    std::vector<double> e(classes_);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < classes_; ++k) mx = std::max(mx, out.scores[k](x, y));
        double sum = 0;
        for (int k = 0; k < classes_; ++k) sum += e[k] = std::exp(out.scores[k](x, y) - mx);
        const int t = target(x, y);
        require(t < classes_, ErrorCode::kOracleFailure, "label outside class range");
        loss += mx + std::log(sum) - out.scores[t](x, y);
        for (int k = 0; k < classes_; ++k) dscore[k](x, y) = e[k] / sum - (k == t ? 1.0 : 0.0);
      }
    out.loss = loss;

    const int r = ksize_ / 2;
    const int sh = chroma_shift(frame.subsampling);
    std::array<Plane<double>, kChannels> up;
    for (int ch = 0; ch < kChannels; ++ch) up[ch] = Plane<double>(w, h, 0.0);
    for (int k = 0; k < classes_; ++k)
      for (int ch = 0; ch < kChannels; ++ch) {
        const double* kern = &weights_[(static_cast<std::size_t>(k) * kChannels + ch) * ksize_ * ksize_];
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double g = dscore[k](x, y);
            if (g == 0.0) continue;
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const double wt = kern[(dy + r) * ksize_ + dx + r];
                if (wt != 0.0) up[ch](std::clamp(x + dx, 0, w - 1), std::clamp(y + dy, 0, h - 1)) += g * wt;
              }
          }
      }
    out.gradient.subsampling = frame.subsampling;
    for (int ch = 0; ch < kChannels; ++ch) {
      const auto& src = frame.planes[ch];
      out.gradient.planes[ch] = Plane<double>(src.width(), src.height(), 0.0);
      const int s = ch == 0 ? 0 : sh;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.gradient.planes[ch](x >> s, y >> s) += up[ch](x, y);
    }
    return out;
  }

  double loss(const RealFrame& frame, const Plane<std::uint8_t>& labels) const override {
    const auto sc = scores(frame);
    double loss = 0;
    for (int y = 0; y < labels.height(); ++y)
      for (int x = 0; x < labels.width(); ++x) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < classes_; ++k) mx = std::max(mx, sc[k](x, y));
        double sum = 0;
        for (int k = 0; k < classes_; ++k) sum += std::exp(sc[k](x, y) - mx);
        loss += mx + std::log(sum) - sc[labels(x, y)](x, y);
      }
    return loss;
  }

  // Text format:
  //   TOYSEG 1
  //   classes <K> ksize <k>
  //   then per class: bias, then 3 x k*k weights (Y, U, V kernels, row-major)
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "TOYSEG 1\nclasses " << classes_ << " ksize " << ksize_ << "\n";
    const int kk = ksize_ * ksize_;
    for (int k = 0; k < classes_; ++k) {
      os << "bias " << bias_[k] << "\n";
      for (int ch = 0; ch < kChannels; ++ch) {
        for (int i = 0; i < kk; ++i) os << (i ? " " : "") << weights_[(k * kChannels + ch) * kk + i];
        os << "\n";
      }
    }
    return os.str();
  }

  static ToySegmenter from_text(const std::string& text) {
    std::istringstream is(text);
    std::string tag, word;
    int version = 0, classes = 0, ksize = 0;
    is >> tag >> version >> word >> classes >> word >> ksize;
    require(is && tag == "TOYSEG" && version == 1, ErrorCode::kBadConfig, "not a TOYSEG v1 weight file");
    require(classes > 0 && classes < 256 && ksize > 0 && ksize < 64, ErrorCode::kBadConfig, "bad TOYSEG shape");
    std::vector<double> bias(classes), w(static_cast<std::size_t>(classes) * kChannels * ksize * ksize);
    const int kk = ksize * ksize;
    for (int k = 0; k < classes; ++k) {
      is >> word >> bias[k];
      require(is && word == "bias", ErrorCode::kBadConfig, "expected bias line");
      for (int i = 0; i < kChannels * kk; ++i) is >> w[k * kChannels * kk + i];
      require(static_cast<bool>(is), ErrorCode::kBadConfig, "truncated TOYSEG weights");
    }
    return ToySegmenter(classes, ksize, std::move(bias), std::move(w));
  }

  static ToySegmenter load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::kIo, "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
  }

 private:
  std::vector<Plane<double>> scores(const RealFrame& frame) const {
    const int w = frame.planes[0].width(), h = frame.planes[0].height();
    const int r = ksize_ / 2;
    const int sh = chroma_shift(frame.subsampling);
    std::vector<Plane<double>> out(classes_, Plane<double>(w, h));
    for (int k = 0; k < classes_; ++k)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double s = bias_[k];
          for (int ch = 0; ch < kChannels; ++ch) {
            const double* kern = &weights_[(static_cast<std::size_t>(k) * kChannels + ch) * ksize_ * ksize_];
            const auto& p = frame.planes[ch];
            const int cs = ch == 0 ? 0 : sh;
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const double wt = kern[(dy + r) * ksize_ + dx + r];
                if (wt == 0.0) continue;
                const int px = std::clamp(x + dx, 0, w - 1) >> cs;
                const int py = std::clamp(y + dy, 0, h - 1) >> cs;
                s += wt * (p(px, py) - 128.0);
              }
          }
          out[k](x, y) = s;
        }
    return out;
  }

  int classes_;
  int ksize_;
  std::vector<double> bias_;
  std::vector<double> weights_;
};

// ---- Gradient procedures ----

struct FakeGradient {
  PixelGradientMap gradient;
  SegmentationMap segmentation;
  double loss = 0.0;
};

/// Gradient of the loss at the oracle's own prediction on the (compressed)
/// frame; the prediction doubles as the returned segmentation.
inline FakeGradient fake_gradient(const Frame& compressed, const SensitivityOracle& oracle) {
  OracleOutput out;
  try {
    out = oracle.evaluate(RealFrame::from(compressed), nullptr);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorCode::kOracleFailure, e.what());
  }
  out.gradient.frame_id = compressed.frame_id;
  out.prediction.frame_id = compressed.frame_id;
  return {std::move(out.gradient), std::move(out.prediction), out.loss};
}

/// Gradient at supplied ground-truth labels (visible or padded extent).
inline PixelGradientMap actual_gradient(const Frame& frame, const Plane<std::uint8_t>& labels,
                                        const SensitivityOracle& oracle) {
  const auto padded = pad_labels(labels, frame.padded_width(), frame.padded_height());
  auto out = oracle.evaluate(RealFrame::from(frame), &padded);
  out.gradient.frame_id = frame.frame_id;
  return std::move(out.gradient);
}

/// Mean |g_s| per frequency (zigzag order) for luma and chroma planes.
struct FrequencyGradients {
  std::array<std::array<double, kBlockArea>, 2> mean{};
  std::array<std::uint64_t, 2> blocks{};

  const std::array<double, kBlockArea>& of(PlaneClass cls) const { return mean[static_cast<int>(cls)]; }

  // SFRQ layout: "SFRQ" | version u16 | classes u8 (=2) | per class: blocks u64-as-2xu32, 64 f64
  Bytes serialize() const {
    ByteWriter w;
    w.magic("SFRQ");
    w.u16(1);
    w.u8(2);
    for (int c = 0; c < 2; ++c) {
      w.u32(static_cast<std::uint32_t>(blocks[c] & 0xffffffffu));
      w.u32(static_cast<std::uint32_t>(blocks[c] >> 32));
      for (double v : mean[c]) w.f64(v);
    }
    return w.take();
  }

  static FrequencyGradients parse(std::span<const std::uint8_t> data) {
    ByteReader r(data);
    if (!r.magic("SFRQ")) fail(ErrorCode::kBadMagic, "not an SFRQ file");
    require(r.u16() == 1, ErrorCode::kCorruptStream, "unsupported SFRQ version");
    require(r.u8() == 2, ErrorCode::kCorruptStream, "SFRQ must hold two plane classes");
    FrequencyGradients f;
    for (int c = 0; c < 2; ++c) {
      const std::uint64_t lo = r.u32(), hi = r.u32();
      f.blocks[c] = lo | (hi << 32);
      for (double& v : f.mean[c]) v = r.f64();
    }
    return f;
  }
};

inline FrequencyGradients average_frequency_gradients(std::span<const CoeffGradientMap> maps) {
  require(!maps.empty(), ErrorCode::kEmptyCorpus, "no gradient maps");
  for (const auto& m : maps)
    require(m.same_shape(maps.front()), ErrorCode::kDimensionMismatch, "corpus maps differ in shape");
  std::array<std::array<double, kBlockArea>, 2> sum{};
  FrequencyGradients out;
  for (const auto& m : maps)
    for (int c = 0; c < 3; ++c) {
      const int cls = c == 0 ? 0 : 1;
      const auto& p = m.planes[c];
      for (int by = 0; by < p.height() / kBlock; ++by)
        for (int bx = 0; bx < p.width() / kBlock; ++bx) {
          const Block b = load_block(p, bx, by);
          for (int i = 0; i < kBlockArea; ++i) sum[cls][kNaturalToZigzag[i]] += std::abs(b[i]);
          ++out.blocks[cls];
        }
    }
  for (int cls = 0; cls < 2; ++cls)
    for (int n = 0; n < kBlockArea; ++n)
      out.mean[cls][n] = out.blocks[cls] ? sum[cls][n] / static_cast<double>(out.blocks[cls]) : 0.0;
  return out;
}

// ---- SGRD gradient-map files ----
//
//   "SGRD" | version u16 | kind u8 (0 pixel, 1 coefficient) |
//   loss normalization u8 (0 sum, 1 mean) | frame_id u32 | subsampling u8 |
//   planes u8 (=3) | per plane: width u32, height u32 |
//   per plane: width*height f32, row-major

enum class GradientKind : std::uint8_t { kPixel = 0, kCoeff = 1 };
enum class LossNormalization : std::uint8_t { kSum = 0, kMean = 1 };

struct SgrdFile {
  GradientKind kind = GradientKind::kPixel;
  LossNormalization normalization = LossNormalization::kSum;
  Subsampling subsampling = Subsampling::k420;
  std::uint32_t frame_id = 0;
  std::array<Plane<double>, 3> planes;
};

inline Bytes serialize_sgrd(const SgrdFile& f) {
  ByteWriter w;
  w.magic("SGRD");
  w.u16(1);
  w.u8(static_cast<std::uint8_t>(f.kind));
  w.u8(static_cast<std::uint8_t>(f.normalization));
  w.u32(f.frame_id);
  w.u8(static_cast<std::uint8_t>(f.subsampling));
  w.u8(3);
  for (const auto& p : f.planes) {
    w.u32(static_cast<std::uint32_t>(p.width()));
    w.u32(static_cast<std::uint32_t>(p.height()));
  }
  for (const auto& p : f.planes)
    for (double v : p.data()) w.f32(static_cast<float>(v));
  return w.take();
}

inline SgrdFile parse_sgrd(std::span<const std::uint8_t> data) {
  ByteReader r(data);
  if (!r.magic("SGRD")) fail(ErrorCode::kBadMagic, "not an SGRD file");
  require(r.u16() == 1, ErrorCode::kCorruptStream, "unsupported SGRD version");
  SgrdFile f;
  const auto kind = r.u8();
  const auto norm = r.u8();
  require(kind <= 1 && norm <= 1, ErrorCode::kCorruptStream, "bad SGRD kind/normalization");
  f.kind = static_cast<GradientKind>(kind);
  f.normalization = static_cast<LossNormalization>(norm);
  f.frame_id = r.u32();
  const auto ss = r.u8();
  require(ss <= 1, ErrorCode::kCorruptStream, "bad subsampling");
  f.subsampling = static_cast<Subsampling>(ss);
  require(r.u8() == 3, ErrorCode::kCorruptStream, "SGRD must hold 3 planes");
  std::array<std::pair<std::uint32_t, std::uint32_t>, 3> dims;
  for (auto& d : dims) d = {r.u32(), r.u32()};
  for (int c = 0; c < 3; ++c) {
    const auto [w, h] = dims[c];
    require(w > 0 && h > 0 && w < (1u << 16) && h < (1u << 16), ErrorCode::kCorruptStream, "bad plane dims");
    f.planes[c] = Plane<double>(static_cast<int>(w), static_cast<int>(h));
    for (auto& v : f.planes[c].data()) v = r.f32();
  }
  return f;
}

inline SgrdFile to_sgrd(const PixelGradientMap& g) { return {GradientKind::kPixel, LossNormalization::kSum, g.subsampling, g.frame_id, g.planes}; }
inline SgrdFile to_sgrd(const CoeffGradientMap& g) { return {GradientKind::kCoeff, LossNormalization::kSum, g.subsampling, g.frame_id, g.planes}; }

/// Coefficient gradients from a file of either kind.
inline CoeffGradientMap coeff_gradients_from(const SgrdFile& f) {
  if (f.kind == GradientKind::kCoeff) return CoeffGradientMap{f.subsampling, f.frame_id, f.planes};
  return pixel_to_coeff_gradients(PixelGradientMap{f.subsampling, f.frame_id, f.planes});
}

}  // namespace stac
