#pragma once

// Orthonormal 8x8 type-II DCT, separable, double precision.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "stac/image.hpp"

namespace stac {

/// 64 values in natural (row-major, v*8+u) order.
using Block = std::array<double, kBlockArea>;

namespace detail {
struct DctBasis {
  // basis[k][x] = alpha(k) * cos((2x+1) k pi / 16)
  std::array<std::array<double, kBlock>, kBlock> basis{};
  DctBasis() {
    for (int k = 0; k < kBlock; ++k) {
      const double alpha = k == 0 ? std::sqrt(1.0 / kBlock) : std::sqrt(2.0 / kBlock);
      for (int x = 0; x < kBlock; ++x)
        basis[k][x] = alpha * std::cos((2 * x + 1) * k * std::numbers::pi / (2.0 * kBlock));
    }
  }
};
inline const DctBasis& dct_basis() {
  static const DctBasis b;
  return b;
}
}  // namespace detail

inline Block forward_dct(const Block& in) {
  const auto& c = detail::dct_basis().basis;
  Block tmp{}, out{};
  for (int y = 0; y < kBlock; ++y)
    for (int u = 0; u < kBlock; ++u) {
      double s = 0;
      for (int x = 0; x < kBlock; ++x) s += c[u][x] * in[y * kBlock + x];
      tmp[y * kBlock + u] = s;
    }
  for (int v = 0; v < kBlock; ++v)
    for (int u = 0; u < kBlock; ++u) {
      double s = 0;
      for (int y = 0; y < kBlock; ++y) s += c[v][y] * tmp[y * kBlock + u];
      out[v * kBlock + u] = s;
    }
  return out;
}

inline Block inverse_dct(const Block& in) {
  const auto& c = detail::dct_basis().basis;
  Block tmp{}, out{};
  for (int y = 0; y < kBlock; ++y)
    for (int u = 0; u < kBlock; ++u) {
      double s = 0;
      for (int v = 0; v < kBlock; ++v) s += c[v][y] * in[v * kBlock + u];
      tmp[y * kBlock + u] = s;
    }
  for (int y = 0; y < kBlock; ++y)
    for (int x = 0; x < kBlock; ++x) {
      double s = 0;
      for (int u = 0; u < kBlock; ++u) s += c[u][x] * tmp[y * kBlock + u];
      out[y * kBlock + x] = s;
    }
  return out;
}

/// Level-shifted (-128) forward transform of 8-bit samples.
inline Block dct_block(const Block& samples) {
  Block shifted;
  for (int i = 0; i < kBlockArea; ++i) shifted[i] = samples[i] - 128.0;
  return forward_dct(shifted);
}

/// Inverse of dct_block; returns real-valued samples (no clamping).
inline Block idct_block(const Block& coeffs) {
  Block out = inverse_dct(coeffs);
  for (auto& v : out) v += 128.0;
  return out;
}

template <typename T>
Block load_block(const Plane<T>& p, int bx, int by) {
  Block b;
  for (int y = 0; y < kBlock; ++y)
    for (int x = 0; x < kBlock; ++x) b[y * kBlock + x] = static_cast<double>(p(bx * kBlock + x, by * kBlock + y));
  return b;
}

template <typename T>
void store_block(Plane<T>& p, int bx, int by, const Block& b) {
  for (int y = 0; y < kBlock; ++y)
    for (int x = 0; x < kBlock; ++x) {
      if constexpr (std::is_same_v<T, std::uint8_t>)
        p(bx * kBlock + x, by * kBlock + y) = clamp_u8(b[y * kBlock + x]);
      else
        p(bx * kBlock + x, by * kBlock + y) = static_cast<T>(b[y * kBlock + x]);
    }
}

/// kZigzag[n] = natural index of the n-th coefficient in zigzag scan.
inline constexpr std::array<std::uint8_t, kBlockArea> kZigzag = {
    0,  1,  8,  16, 9,  2,  3,  10, 17, 24, 32, 25, 18, 11, 4,  5,  12, 19, 26, 33, 40, 48,
    41, 34, 27, 20, 13, 6,  7,  14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23,
    30, 37, 44, 51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};

/// kNaturalToZigzag[i] = zigzag position of natural index i.
inline constexpr std::array<std::uint8_t, kBlockArea> kNaturalToZigzag = [] {
  std::array<std::uint8_t, kBlockArea> inv{};
  for (int n = 0; n < kBlockArea; ++n) inv[kZigzag[n]] = static_cast<std::uint8_t>(n);
  return inv;
}();

}  // namespace stac
