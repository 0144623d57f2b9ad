#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "stac/binary_io.hpp"
#include "stac/image.hpp"

namespace stac {

inline constexpr int kDefaultRegionBlocks = 3;

/// Partition of a frame's luma block grid into region_w x region_h block
/// regions, row-major. Chroma blocks belong to the region containing the
/// luma pixel at their center.
class RegionGrid {
 public:
  RegionGrid() = default;
  RegionGrid(int luma_width, int luma_height, int region_w = kDefaultRegionBlocks,
             int region_h = kDefaultRegionBlocks, Subsampling subsampling = Subsampling::k420)
      : luma_w_(luma_width), luma_h_(luma_height), region_w_(region_w), region_h_(region_h),
        subsampling_(subsampling) {
    require(luma_width > 0 && luma_height > 0 && luma_width % kBlock == 0 && luma_height % kBlock == 0,
            ErrorCode::kInvalidArgument, "grid dims must be positive block multiples");
    require(region_w > 0 && region_h > 0 && region_w < 256 && region_h < 256, ErrorCode::kInvalidArgument,
            "region size out of range");
  }

  static RegionGrid for_frame(const Frame& f, int region_w = kDefaultRegionBlocks, int region_h = kDefaultRegionBlocks) {
    return RegionGrid(f.padded_width(), f.padded_height(), region_w, region_h, f.subsampling);
  }

  int luma_width() const { return luma_w_; }
  int luma_height() const { return luma_h_; }
  int region_w() const { return region_w_; }
  int region_h() const { return region_h_; }
  Subsampling subsampling() const { return subsampling_; }
  int blocks_x() const { return luma_w_ / kBlock; }
  int blocks_y() const { return luma_h_ / kBlock; }
  int regions_x() const { return (blocks_x() + region_w_ - 1) / region_w_; }
  int regions_y() const { return (blocks_y() + region_h_ - 1) / region_h_; }
  int count() const { return regions_x() * regions_y(); }

  int region_of_luma_block(int bx, int by) const { return (by / region_h_) * regions_x() + bx / region_w_; }

  int region_of_luma_pixel(int x, int y) const { return region_of_luma_block(x / kBlock, y / kBlock); }

  int region_of_block(int plane, int bx, int by) const {
    if (plane == 0) return region_of_luma_block(bx, by);
    const int sh = chroma_shift(subsampling_);
    const int cx = ((bx * kBlock) << sh) + (kBlock << sh) / 2;
    const int cy = ((by * kBlock) << sh) + (kBlock << sh) / 2;
    return region_of_luma_pixel(std::min(cx, luma_w_ - 1), std::min(cy, luma_h_ - 1));
  }

  /// Luma blocks covered by region r (trailing regions may be partial).
  int luma_blocks_in(int r) const {
    const int rx = r % regions_x(), ry = r / regions_x();
    const int w = std::min(region_w_, blocks_x() - rx * region_w_);
    const int h = std::min(region_h_, blocks_y() - ry * region_h_);
    return w * h;
  }

  /// Center of region r's covered area, luma pixel coordinates.
  std::pair<double, double> center(int r) const {
    const int rx = r % regions_x(), ry = r / regions_x();
    const double x0 = rx * region_w_ * kBlock;
    const double y0 = ry * region_h_ * kBlock;
    const double x1 = std::min<double>(x0 + region_w_ * kBlock, luma_w_);
    const double y1 = std::min<double>(y0 + region_h_ * kBlock, luma_h_);
    return {(x0 + x1) / 2.0 - 0.5, (y0 + y1) / 2.0 - 0.5};
  }

  friend bool operator==(const RegionGrid&, const RegionGrid&) = default;

 private:
  int luma_w_ = 0;
  int luma_h_ = 0;
  int region_w_ = kDefaultRegionBlocks;
  int region_h_ = kDefaultRegionBlocks;
  Subsampling subsampling_ = Subsampling::k420;
};

/// One table level (1-based) per region, row-major.
struct StrategyMap {
  int regions_x = 0;
  int regions_y = 0;
  std::vector<std::uint8_t> levels;

  static StrategyMap uniform(const RegionGrid& grid, int level) {
    return StrategyMap{grid.regions_x(), grid.regions_y(),
                       std::vector<std::uint8_t>(grid.count(), static_cast<std::uint8_t>(level))};
  }

  int count() const { return regions_x * regions_y; }
  int at(int rx, int ry) const { return levels[ry * regions_x + rx]; }

  bool matches(const RegionGrid& g) const {
    return regions_x == g.regions_x() && regions_y == g.regions_y() && static_cast<int>(levels.size()) == g.count();
  }

  bool is_uniform() const {
    return std::all_of(levels.begin(), levels.end(), [&](auto l) { return l == levels.front(); });
  }

  /// Two regions per byte, first region in the high nibble, level-1 stored;
  /// an odd tail is zero-padded.
  Bytes pack() const {
    Bytes out((levels.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < levels.size(); ++i) {
      require(levels[i] >= 1 && levels[i] <= 16, ErrorCode::kUnknownLevel, "level does not fit a nibble");
      const std::uint8_t nib = static_cast<std::uint8_t>(levels[i] - 1);
      out[i / 2] |= (i % 2 == 0) ? static_cast<std::uint8_t>(nib << 4) : nib;
    }
    return out;
  }

  static StrategyMap unpack(int regions_x, int regions_y, std::span<const std::uint8_t> packed) {
    StrategyMap m{regions_x, regions_y, {}};
    const std::size_t n = static_cast<std::size_t>(regions_x) * regions_y;
    require(packed.size() == (n + 1) / 2, ErrorCode::kCorruptStream, "packed strategy length mismatch");
    m.levels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t byte = packed[i / 2];
      m.levels[i] = static_cast<std::uint8_t>(((i % 2 == 0) ? (byte >> 4) : (byte & 0x0f)) + 1);
    }
    return m;
  }

  friend bool operator==(const StrategyMap&, const StrategyMap&) = default;
};

}  // namespace stac
