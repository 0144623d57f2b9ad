#pragma once

// Block-DCT intra codec with a per-region quantization table.
//
// Container ("STAC", little-endian):
//   magic "STAC"      4
//   version           u8
//   subsampling       u8   0 = 4:2:0, 1 = 4:4:4
//   width, height     u16, u16   visible luma dims
//   frame_id          u32
//   table digest      8 bytes    (QuantTableSet::digest)
//   region_w, region_h u8, u8    blocks per region
//   regions_x, regions_y u16, u16
//   level_count       u8
//   strategy          ceil(r_max/2) bytes, 4 bits/region (StrategyMap::pack)
//   payload_length    u32
//   payload           Huffman-coded blocks: plane Y, then U, then V, blocks
//                     in raster order, one DC predictor per plane.

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <utility>

#include "stac/binary_io.hpp"
#include "stac/dct.hpp"
#include "stac/entropy.hpp"
#include "stac/image.hpp"
#include "stac/quant.hpp"
#include "stac/region.hpp"

namespace stac {

inline constexpr std::uint8_t kCodecVersion = 1;

struct DecodedFrame {
  Frame frame;
  StrategyMap strategy;
  RegionGrid grid;
};

namespace detail {

inline void check_strategy(const Frame& frame, const StrategyMap& strategy, const QuantTableSet& tables,
                           const RegionGrid& grid) {
  require(grid.luma_width() == frame.padded_width() && grid.luma_height() == frame.padded_height() &&
              grid.subsampling() == frame.subsampling,
          ErrorCode::kDimensionMismatch, "region grid does not match frame");
  require(strategy.matches(grid), ErrorCode::kDimensionMismatch, "strategy map does not match region grid");
  for (auto l : strategy.levels)
    require(l >= 1 && l <= tables.level_count(), ErrorCode::kUnknownLevel,
            "strategy level " + std::to_string(l) + " outside ladder");
}

/// `table_for(plane, bx, by)` picks the table for each block.
template <typename Sink, typename TableFor>
void encode_planes(Sink& sink, const Frame& frame, TableFor&& table_for) {
  for (int c = 0; c < 3; ++c) {
    const auto& plane = frame.planes[c];
    const auto& huff = huffman_for(plane_class(c));
    int dc_pred = 0;
    for (int by = 0; by < plane.height() / kBlock; ++by)
      for (int bx = 0; bx < plane.width() / kBlock; ++bx) {
        const QuantTable& table = table_for(c, bx, by);
        encode_block(sink, quantize_block(dct_block(load_block(plane, bx, by)), table), dc_pred, huff);
      }
  }
}

inline void write_header(ByteWriter& w, const Frame& frame, const StrategyMap& strategy, const QuantTableSet& tables,
                         const RegionGrid& grid) {
  require(frame.width < 65536 && frame.height < 65536, ErrorCode::kInvalidArgument, "frame too large for container");
  w.magic("STAC");
  w.u8(kCodecVersion);
  w.u8(static_cast<std::uint8_t>(frame.subsampling));
  w.u16(static_cast<std::uint16_t>(frame.width));
  w.u16(static_cast<std::uint16_t>(frame.height));
  w.u32(frame.frame_id);
  w.bytes(tables.digest());
  w.u8(static_cast<std::uint8_t>(grid.region_w()));
  w.u8(static_cast<std::uint8_t>(grid.region_h()));
  w.u16(static_cast<std::uint16_t>(grid.regions_x()));
  w.u16(static_cast<std::uint16_t>(grid.regions_y()));
  w.u8(static_cast<std::uint8_t>(tables.level_count()));
  w.bytes(strategy.pack());
}

inline constexpr std::size_t kFixedHeaderBytes = 4 + 1 + 1 + 2 + 2 + 4 + 8 + 1 + 1 + 2 + 2 + 1 + 4;

inline Bytes encode_with(const Frame& frame, const StrategyMap& header_strategy, const QuantTableSet& tables,
                         const RegionGrid& grid,
                         const std::function<const QuantTable&(int, int, int)>& table_for) {
  BitWriter bits;
  encode_planes(bits, frame, table_for);
  Bytes payload = bits.finish();
  ByteWriter w;
  write_header(w, frame, header_strategy, tables, grid);
  w.u32(static_cast<std::uint32_t>(payload.size()));
  w.bytes(payload);
  return w.take();
}

}  // namespace detail

inline Bytes encode_frame(const Frame& frame, const StrategyMap& strategy, const QuantTableSet& tables,
                          const RegionGrid& grid) {
  detail::check_strategy(frame, strategy, tables, grid);
  return detail::encode_with(frame, strategy, tables, grid, [&](int c, int bx, int by) -> const QuantTable& {
    return tables.table(plane_class(c), strategy.levels[grid.region_of_block(c, bx, by)]);
  });
}

/// Spatially uniform encoding with one ladder level: every block uses the
/// level's table directly, without consulting a region map.
inline Bytes encode_single_table(const Frame& frame, const QuantTableSet& tables, int level, const RegionGrid& grid) {
  const QuantTable& luma = tables.table(PlaneClass::kLuma, level);
  const QuantTable& chroma = tables.table(PlaneClass::kChroma, level);
  const StrategyMap header = StrategyMap::uniform(grid, level);
  detail::check_strategy(frame, header, tables, grid);
  return detail::encode_with(frame, header, tables, grid,
                             [&](int c, int, int) -> const QuantTable& { return c == 0 ? luma : chroma; });
}

/// Exact byte length of encode_frame's output, without building it.
inline std::size_t encoded_size(const Frame& frame, const StrategyMap& strategy, const QuantTableSet& tables,
                                const RegionGrid& grid) {
  detail::check_strategy(frame, strategy, tables, grid);
  BitCounter counter;
  detail::encode_planes(counter, frame, [&](int c, int bx, int by) -> const QuantTable& {
    return tables.table(plane_class(c), strategy.levels[grid.region_of_block(c, bx, by)]);
  });
  return detail::kFixedHeaderBytes + (strategy.levels.size() + 1) / 2 + counter.bytes();
}

/// Peeks the digest of a container without decoding it.
inline Digest stream_digest(std::span<const std::uint8_t> bits) {
  ByteReader r(bits);
  if (!r.magic("STAC")) fail(ErrorCode::kBadMagic, "not a STAC stream");
  r.bytes(1 + 1 + 2 + 2 + 4);
  Digest d{};
  auto raw = r.bytes(d.size());
  std::copy(raw.begin(), raw.end(), d.begin());
  return d;
}

inline DecodedFrame decode_frame(std::span<const std::uint8_t> bits, const QuantTableSet& tables) {
  ByteReader r(bits);
  if (!r.magic("STAC")) fail(ErrorCode::kBadMagic, "not a STAC stream");
  require(r.u8() == kCodecVersion, ErrorCode::kCorruptStream, "unsupported container version");
  const std::uint8_t ss = r.u8();
  require(ss <= 1, ErrorCode::kCorruptStream, "bad subsampling");
  const int width = r.u16();
  const int height = r.u16();
  require(width > 0 && height > 0, ErrorCode::kCorruptStream, "zero frame dims");
  const std::uint32_t frame_id = r.u32();
  Digest digest{};
  auto raw = r.bytes(digest.size());
  std::copy(raw.begin(), raw.end(), digest.begin());
  if (digest != tables.digest())
    fail(ErrorCode::kDigestMismatch, "stream digest " + hex(digest) + " != table set " + hex(tables.digest()));
  const int region_w = r.u8();
  const int region_h = r.u8();
  const int regions_x = r.u16();
  const int regions_y = r.u16();
  const int levels = r.u8();
  require(levels == tables.level_count(), ErrorCode::kCorruptStream, "level count mismatch");

  DecodedFrame out;
  out.frame = Frame::blank(width, height, static_cast<Subsampling>(ss));
  out.frame.frame_id = frame_id;
  out.grid = RegionGrid::for_frame(out.frame, region_w, region_h);
  require(out.grid.regions_x() == regions_x && out.grid.regions_y() == regions_y, ErrorCode::kCorruptStream,
          "region grid inconsistent with frame dims");
  out.strategy = StrategyMap::unpack(regions_x, regions_y, r.bytes((static_cast<std::size_t>(regions_x) * regions_y + 1) / 2));
  for (auto l : out.strategy.levels)
    require(l <= levels, ErrorCode::kUnknownLevel, "stream references level beyond ladder");

  const std::uint32_t payload_len = r.u32();
  BitReader in(r.bytes(payload_len));
  for (int c = 0; c < 3; ++c) {
    auto& plane = out.frame.planes[c];
    const auto& huff = huffman_for(plane_class(c));
    int dc_pred = 0;
    for (int by = 0; by < plane.height() / kBlock; ++by)
      for (int bx = 0; bx < plane.width() / kBlock; ++bx) {
        const QuantTable& table =
            tables.table(plane_class(c), out.strategy.levels[out.grid.region_of_block(c, bx, by)]);
        const QuantBlock q = decode_block(in, dc_pred, huff);
        store_block(plane, bx, by, idct_block(dequantize_block(q, table)));
      }
  }
  return out;
}

/// Baseline JFIF export; only meaningful for a spatially uniform strategy,
/// since JPEG carries one table per component.
inline Bytes export_jpeg(const Frame& frame, const QuantTableSet& tables, int level) {
  const QuantTable* qt[2] = {&tables.table(PlaneClass::kLuma, level), &tables.table(PlaneClass::kChroma, level)};
  Bytes out;
  auto u8 = [&](int v) { out.push_back(static_cast<std::uint8_t>(v)); };
  auto u16be = [&](int v) {
    u8(v >> 8);
    u8(v & 0xff);
  };
  auto marker = [&](int m, int len) {
    u8(0xFF);
    u8(m);
    u16be(len);
  };
  u8(0xFF);
  u8(0xD8);
  marker(0xE0, 16);
  for (char ch : std::string_view("JFIF\0", 5)) u8(ch);
  u8(1); u8(1); u8(0); u16be(1); u16be(1); u8(0); u8(0);
  marker(0xDB, 2 + 2 * 65);
  for (int t = 0; t < 2; ++t) {
    u8(t);
    for (auto q : qt[t]->steps) u8(q);
  }
  const int hv = frame.subsampling == Subsampling::k420 ? 0x22 : 0x11;
  marker(0xC0, 2 + 6 + 3 * 3);
  u8(8);
  u16be(frame.height);
  u16be(frame.width);
  u8(3);
  u8(1); u8(hv); u8(0);
  u8(2); u8(0x11); u8(1);
  u8(3); u8(0x11); u8(1);
  auto dht = [&](int cls_id, std::span<const std::uint8_t, 16> bits, std::span<const std::uint8_t> vals) {
    marker(0xC4, 2 + 1 + 16 + static_cast<int>(vals.size()));
    u8(cls_id);
    for (auto b : bits) u8(b);
    for (auto v : vals) u8(v);
  };
  dht(0x00, annex_k::kDcLumaBits, annex_k::kDcValues);
  dht(0x10, annex_k::kAcLumaBits, annex_k::kAcLumaValues);
  dht(0x01, annex_k::kDcChromaBits, annex_k::kDcValues);
  dht(0x11, annex_k::kAcChromaBits, annex_k::kAcChromaValues);
  marker(0xDA, 2 + 1 + 3 * 2 + 3);
  u8(3);
  u8(1); u8(0x00);
  u8(2); u8(0x11);
  u8(3); u8(0x11);
  u8(0); u8(63); u8(0);

  BitWriter bits;
  int pred[3] = {0, 0, 0};
  const int sh = chroma_shift(frame.subsampling);
  const int mcu = mcu_size(frame.subsampling);
  for (int my = 0; my < frame.padded_height() / mcu; ++my)
    for (int mx = 0; mx < frame.padded_width() / mcu; ++mx) {
      for (int dy = 0; dy < (1 << sh); ++dy)
        for (int dx = 0; dx < (1 << sh); ++dx) {
          const int bx = (mx << sh) + dx, by = (my << sh) + dy;
          encode_block(bits, quantize_block(dct_block(load_block(frame.planes[0], bx, by)), *qt[0]), pred[0],
                       huffman_for(PlaneClass::kLuma));
        }
      for (int c = 1; c < 3; ++c)
        encode_block(bits, quantize_block(dct_block(load_block(frame.planes[c], mx, my)), *qt[1]), pred[c],
                     huffman_for(PlaneClass::kChroma));
    }
  for (auto b : bits.finish()) {
    out.push_back(b);
    if (b == 0xFF) out.push_back(0x00);
  }
  u8(0xFF);
  u8(0xD9);
  return out;
}

}  // namespace stac
