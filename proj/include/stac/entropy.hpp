#pragma once

// Baseline-JPEG-style entropy coding: DC differences and zero-run/size AC
// symbols, canonical Huffman codes built from the Annex K default tables.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "stac/binary_io.hpp"
#include "stac/dct.hpp"
#include "stac/quant.hpp"

namespace stac {

namespace annex_k {
inline constexpr std::array<std::uint8_t, 16> kDcLumaBits = {0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
inline constexpr std::array<std::uint8_t, 16> kDcChromaBits = {0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
inline constexpr std::array<std::uint8_t, 12> kDcValues = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};

inline constexpr std::array<std::uint8_t, 16> kAcLumaBits = {0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 125};
inline constexpr std::array<std::uint8_t, 162> kAcLumaValues = {
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07, 0x22, 0x71, 0x14,
    0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09,
    0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28, 0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A,
    0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65,
    0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88,
    0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9,
    0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA,
    0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA,
    0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA};

inline constexpr std::array<std::uint8_t, 16> kAcChromaBits = {0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 119};
inline constexpr std::array<std::uint8_t, 162> kAcChromaValues = {
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71, 0x13, 0x22, 0x32,
    0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0, 0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16,
    0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26, 0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39,
    0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64,
    0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86,
    0x87, 0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8,
    0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9,
    0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA};
}  // namespace annex_k

/// Canonical Huffman code from a JPEG (bits-per-length, values) definition.
class HuffmanTable {
 public:
  HuffmanTable(std::span<const std::uint8_t, 16> bits, std::span<const std::uint8_t> values) {
    std::uint32_t code = 0;
    std::size_t k = 0;
    for (int len = 1; len <= 16; ++len) {
      const int n = bits[len - 1];
      min_code_[len] = static_cast<std::int32_t>(code);
      first_index_[len] = static_cast<std::int32_t>(k);
      for (int i = 0; i < n; ++i, ++k, ++code) {
        const std::uint8_t sym = values[k];
        code_[sym] = static_cast<std::uint16_t>(code);
        length_[sym] = static_cast<std::uint8_t>(len);
        symbols_.push_back(sym);
      }
      max_code_[len] = n == 0 ? -1 : static_cast<std::int32_t>(code - 1);
      code <<= 1;
    }
  }

  std::uint16_t code(std::uint8_t sym) const { return code_[sym]; }
  int length(std::uint8_t sym) const { return length_[sym]; }

  /// Reads one symbol with `next_bit`, which returns 0/1.
  template <typename NextBit>
  std::uint8_t decode(NextBit&& next_bit) const {
    std::int32_t c = 0;
    for (int len = 1; len <= 16; ++len) {
      c = (c << 1) | next_bit();
      if (max_code_[len] >= 0 && c <= max_code_[len] && c >= min_code_[len])
        return symbols_[first_index_[len] + (c - min_code_[len])];
    }
    fail(ErrorCode::kCorruptStream, "invalid Huffman code");
  }

 private:
  std::array<std::uint16_t, 256> code_{};
  std::array<std::uint8_t, 256> length_{};
  std::array<std::int32_t, 17> min_code_{};
  std::array<std::int32_t, 17> max_code_{};
  std::array<std::int32_t, 17> first_index_{};
  std::vector<std::uint8_t> symbols_;
};

struct HuffmanSet {
  HuffmanTable dc;
  HuffmanTable ac;
};

inline const HuffmanSet& huffman_for(PlaneClass cls) {
  static const HuffmanSet luma{HuffmanTable(annex_k::kDcLumaBits, annex_k::kDcValues),
                               HuffmanTable(annex_k::kAcLumaBits, annex_k::kAcLumaValues)};
  static const HuffmanSet chroma{HuffmanTable(annex_k::kDcChromaBits, annex_k::kDcValues),
                                 HuffmanTable(annex_k::kAcChromaBits, annex_k::kAcChromaValues)};
  return cls == PlaneClass::kLuma ? luma : chroma;
}

/// MSB-first bit packer. Final partial byte is padded with 1-bits.
class BitWriter {
 public:
  void put(std::uint32_t bits, int count) {
    for (int i = count - 1; i >= 0; --i) {
      acc_ = static_cast<std::uint8_t>((acc_ << 1) | ((bits >> i) & 1u));
      if (++filled_ == 8) {
        out_.push_back(acc_);
        acc_ = 0;
        filled_ = 0;
      }
    }
  }
  Bytes finish() {
    if (filled_ > 0) put((1u << (8 - filled_)) - 1, 8 - filled_);
    return std::move(out_);
  }

 private:
  Bytes out_;
  std::uint8_t acc_ = 0;
  int filled_ = 0;
};

/// Same interface as BitWriter, only counts.
class BitCounter {
 public:
  void put(std::uint32_t, int count) { bits_ += static_cast<std::size_t>(count); }
  std::size_t bytes() const { return (bits_ + 7) / 8; }

 private:
  std::size_t bits_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> data) : data_(data) {}

  int bit() {
    if (pos_ >= data_.size() * 8) fail(ErrorCode::kTruncatedStream, "entropy payload exhausted");
    const int b = (data_[pos_ / 8] >> (7 - pos_ % 8)) & 1;
    ++pos_;
    return b;
  }

  std::uint32_t bits(int count) {
    std::uint32_t v = 0;
    for (int i = 0; i < count; ++i) v = (v << 1) | static_cast<std::uint32_t>(bit());
    return v;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline int magnitude_category(int v) {
  int a = v < 0 ? -v : v;
  int n = 0;
  while (a) {
    ++n;
    a >>= 1;
  }
  return n;
}

inline std::uint32_t magnitude_bits(int v, int category) {
  return static_cast<std::uint32_t>(v < 0 ? v + (1 << category) - 1 : v) & ((1u << category) - 1);
}

inline int extend_magnitude(std::uint32_t bits, int category) {
  if (category == 0) return 0;
  const int v = static_cast<int>(bits);
  return v < (1 << (category - 1)) ? v - (1 << category) + 1 : v;
}

/// Emits one quantized block (natural order); `dc_pred` is updated.
template <typename Sink>
void encode_block(Sink& sink, const QuantBlock& q, int& dc_pred, const HuffmanSet& huff) {
  const int diff = q[0] - dc_pred;
  dc_pred = q[0];
  const int dc_cat = magnitude_category(diff);
  require(dc_cat <= 11, ErrorCode::kInvalidArgument, "DC difference out of range");
  sink.put(huff.dc.code(static_cast<std::uint8_t>(dc_cat)), huff.dc.length(static_cast<std::uint8_t>(dc_cat)));
  if (dc_cat) sink.put(magnitude_bits(diff, dc_cat), dc_cat);

  int run = 0;
  for (int n = 1; n < kBlockArea; ++n) {
    const int v = q[kZigzag[n]];
    if (v == 0) {
      ++run;
      continue;
    }
    while (run > 15) {
      sink.put(huff.ac.code(0xF0), huff.ac.length(0xF0));
      run -= 16;
    }
    const int cat = magnitude_category(v);
    require(cat <= 10, ErrorCode::kInvalidArgument, "AC coefficient out of range");
    const auto sym = static_cast<std::uint8_t>((run << 4) | cat);
    sink.put(huff.ac.code(sym), huff.ac.length(sym));
    sink.put(magnitude_bits(v, cat), cat);
    run = 0;
  }
  if (run > 0) sink.put(huff.ac.code(0x00), huff.ac.length(0x00));
}

inline QuantBlock decode_block(BitReader& in, int& dc_pred, const HuffmanSet& huff) {
  QuantBlock q{};
  auto next = [&] { return in.bit(); };
  const int dc_cat = huff.dc.decode(next);
  if (dc_cat > 11) fail(ErrorCode::kCorruptStream, "bad DC category");
  dc_pred += extend_magnitude(in.bits(dc_cat), dc_cat);
  q[0] = dc_pred;
  for (int n = 1; n < kBlockArea;) {
    const std::uint8_t sym = huff.ac.decode(next);
    if (sym == 0x00) break;
    if (sym == 0xF0) {
      n += 16;
      continue;
    }
    n += sym >> 4;
    const int cat = sym & 0x0f;
    if (n >= kBlockArea) fail(ErrorCode::kCorruptStream, "AC run past block end");
    q[kZigzag[n]] = extend_magnitude(in.bits(cat), cat);
    ++n;
  }
  return q;
}

}  // namespace stac
