#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stac/binary_io.hpp"
#include "stac/dct.hpp"

namespace stac {

inline constexpr int kMinStep = 1;
inline constexpr int kMaxStep = 255;
inline constexpr int kMaxLevels = 16;  // levels travel as 4-bit nibbles

/// Round half away from zero.
inline long quantize_value(double s, int q) { return std::lround(s / q); }

/// 64 quantization steps in zigzag order.
struct QuantTable {
  std::array<std::uint8_t, kBlockArea> steps{};

  static QuantTable uniform(int q) {
    QuantTable t;
    t.steps.fill(static_cast<std::uint8_t>(std::clamp(q, kMinStep, kMaxStep)));
    return t;
  }

  /// Step applied to the coefficient at natural index i.
  int step_natural(int i) const { return steps[kNaturalToZigzag[i]]; }

  double mean_step() const {
    double s = 0;
    for (auto q : steps) s += q;
    return s / kBlockArea;
  }

  friend bool operator==(const QuantTable&, const QuantTable&) = default;
};

/// Quantized coefficients, natural order.
using QuantBlock = std::array<int, kBlockArea>;

inline QuantBlock quantize_block(const Block& coeffs, const QuantTable& table) {
  QuantBlock out{};
  for (int i = 0; i < kBlockArea; ++i) out[i] = static_cast<int>(quantize_value(coeffs[i], table.step_natural(i)));
  return out;
}

inline Block dequantize_block(const QuantBlock& q, const QuantTable& table) {
  Block out{};
  for (int i = 0; i < kBlockArea; ++i) out[i] = static_cast<double>(q[i]) * table.step_natural(i);
  return out;
}

enum class PlaneClass : int { kLuma = 0, kChroma = 1 };

inline PlaneClass plane_class(int plane) { return plane == 0 ? PlaneClass::kLuma : PlaneClass::kChroma; }

/// L-level ladder of tables per plane class, ordered by increasing upperbound.
///
/// STBL layout (little-endian):
///   "STBL" | version u8 | L u8 | shared_chroma u8 | B_1..B_L f64 |
///   luma tables L x 64 u8 (zigzag) | chroma tables L x 64 u8 (zigzag)
/// The digest is the first 8 bytes of SHA-256 over everything after the magic.
class QuantTableSet {
 public:
  static constexpr std::uint8_t kVersion = 1;

  QuantTableSet() = default;
  QuantTableSet(std::vector<QuantTable> luma, std::vector<QuantTable> chroma, std::vector<double> upperbounds,
                bool shared_chroma = false)
      : luma_(std::move(luma)), chroma_(std::move(chroma)), upperbounds_(std::move(upperbounds)),
        shared_chroma_(shared_chroma) {
    require(!luma_.empty(), ErrorCode::kEmptyLadder, "table set needs at least one level");
    require(luma_.size() <= kMaxLevels, ErrorCode::kInvalidArgument, "at most 16 levels");
    if (shared_chroma_) chroma_ = luma_;
    require(chroma_.size() == luma_.size() && upperbounds_.size() == luma_.size(), ErrorCode::kInvalidArgument,
            "ladder sizes disagree");
    const Bytes b = body();
    digest_ = truncated_sha256(b);
  }

  /// Single-level set, e.g. a fixed table applied uniformly.
  static QuantTableSet single(const QuantTable& luma, const QuantTable& chroma, double upperbound = 0.0) {
    return QuantTableSet({luma}, {chroma}, {upperbound});
  }

  int level_count() const { return static_cast<int>(luma_.size()); }
  bool shared_chroma() const { return shared_chroma_; }
  const std::vector<double>& upperbounds() const { return upperbounds_; }
  const std::vector<QuantTable>& luma() const { return luma_; }
  const std::vector<QuantTable>& chroma() const { return chroma_; }

  /// `level` is 1-based.
  const QuantTable& table(PlaneClass cls, int level) const {
    require(level >= 1 && level <= level_count(), ErrorCode::kUnknownLevel,
            "level " + std::to_string(level) + " outside [1," + std::to_string(level_count()) + "]");
    return cls == PlaneClass::kLuma ? luma_[level - 1] : chroma_[level - 1];
  }

  const Digest& digest() const { return digest_; }

  bool monotone() const {
    for (const auto* ladder : {&luma_, &chroma_})
      for (std::size_t l = 1; l < ladder->size(); ++l)
        for (int n = 0; n < kBlockArea; ++n)
          if ((*ladder)[l].steps[n] < (*ladder)[l - 1].steps[n]) return false;
    return true;
  }

  Bytes serialize() const {
    ByteWriter w;
    w.magic("STBL");
    w.bytes(body());
    return w.take();
  }

  static QuantTableSet parse(std::span<const std::uint8_t> data) {
    ByteReader r(data);
    if (!r.magic("STBL")) fail(ErrorCode::kBadMagic, "not an STBL file");
    const auto version = r.u8();
    require(version == kVersion, ErrorCode::kCorruptStream, "unsupported STBL version");
    const int levels = r.u8();
    const bool shared = r.u8() != 0;
    std::vector<double> bounds(levels);
    for (auto& b : bounds) b = r.f64();
    auto read_ladder = [&] {
      std::vector<QuantTable> ladder(levels);
      for (auto& t : ladder) {
        auto raw = r.bytes(kBlockArea);
        std::copy(raw.begin(), raw.end(), t.steps.begin());
        for (auto q : t.steps) require(q >= kMinStep, ErrorCode::kCorruptStream, "zero quantization step");
      }
      return ladder;
    };
    auto luma = read_ladder();
    auto chroma = read_ladder();
    return QuantTableSet(std::move(luma), std::move(chroma), std::move(bounds), shared);
  }

  friend bool operator==(const QuantTableSet& a, const QuantTableSet& b) { return a.digest_ == b.digest_; }

 private:
  Bytes body() const {
    ByteWriter w;
    w.u8(kVersion);
    w.u8(static_cast<std::uint8_t>(luma_.size()));
    w.u8(shared_chroma_ ? 1 : 0);
    for (double b : upperbounds_) w.f64(b);
    for (const auto& t : luma_) w.bytes(t.steps);
    for (const auto& t : chroma_) w.bytes(t.steps);
    return w.take();
  }

  std::vector<QuantTable> luma_;
  std::vector<QuantTable> chroma_;
  std::vector<double> upperbounds_;
  bool shared_chroma_ = false;
  Digest digest_{};
};

}  // namespace stac
