#pragma once

#include <cstdint>
#include <vector>

#include "stac/image.hpp"

namespace stac {

/// Per-pixel class ids at padded luma resolution.
struct SegmentationMap {
  Plane<std::uint8_t> labels;
  std::uint32_t frame_id = 0;

  int width() const { return labels.width(); }
  int height() const { return labels.height(); }

  friend bool operator==(const SegmentationMap&, const SegmentationMap&) = default;
};

/// Extend a visible-area label plane to `width` x `height` by edge replication.
inline Plane<std::uint8_t> pad_labels(const Plane<std::uint8_t>& labels, int width, int height) {
  require(width >= labels.width() && height >= labels.height(), ErrorCode::kDimensionMismatch,
          "labels larger than target");
  Plane<std::uint8_t> out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out(x, y) = labels.clamped(x, y);
  return out;
}

/// Mean over classes present in either map of |pred ∩ truth| / |pred ∪ truth|,
/// evaluated on the top-left `width` x `height` window (defaults to the truth
/// extent). Pixels labelled `void_label` in the truth are ignored.
inline double mean_iou(const Plane<std::uint8_t>& pred, const Plane<std::uint8_t>& truth, int void_label = -1) {
  require(pred.width() >= truth.width() && pred.height() >= truth.height(), ErrorCode::kDimensionMismatch,
          "prediction smaller than ground truth");
  std::vector<std::uint64_t> inter(256, 0), uni(256, 0);
  for (int y = 0; y < truth.height(); ++y)
    for (int x = 0; x < truth.width(); ++x) {
      const int t = truth(x, y), p = pred(x, y);
      if (t == void_label) continue;
      if (t == p) {
        ++inter[t];
        ++uni[t];
      } else {
        ++uni[t];
        ++uni[p];
      }
    }
  double sum = 0;
  int classes = 0;
  for (int c = 0; c < 256; ++c)
    if (uni[c] > 0) {
      sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
      ++classes;
    }
  return classes == 0 ? 1.0 : sum / classes;
}

inline double pixel_accuracy(const Plane<std::uint8_t>& pred, const Plane<std::uint8_t>& truth) {
  require(pred.width() >= truth.width() && pred.height() >= truth.height(), ErrorCode::kDimensionMismatch,
          "prediction smaller than ground truth");
  std::uint64_t ok = 0;
  for (int y = 0; y < truth.height(); ++y)
    for (int x = 0; x < truth.width(); ++x) ok += pred(x, y) == truth(x, y);
  return static_cast<double>(ok) / (static_cast<double>(truth.width()) * truth.height());
}

}  // namespace stac
