#pragma once

// Device-side temporal scheme: propagate the cached keyframe segmentation
// and strategy along optical flow, offload a new keyframe when the
// propagated frame's PSNR drops below a threshold, and ingest feedback.

#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <mutex>
#include <optional>
#include <set>
#include <utility>

#include "stac/flow.hpp"
#include "stac/region.hpp"
#include "stac/segmentation.hpp"

namespace stac {

inline constexpr double kDefaultPsnrThreshold = 26.0;

inline int default_mid_level(int levels) { return std::max(1, levels / 2); }

struct TemporalConfig {
  double threshold = kDefaultPsnrThreshold;
  int levels = 16;
  int mid_level = 0;  // 0 selects default_mid_level(levels)
  /// A trigger while a keyframe is in flight offloads anyway and supersedes it.
  bool offload_while_pending = true;
  FlowParams flow;

  int first_level() const { return mid_level > 0 ? mid_level : default_mid_level(levels); }
};

struct OffloadRequest {
  Frame frame;
  StrategyMap strategy;
};

struct StepOutcome {
  std::uint32_t frame_id = 0;
  SegmentationMap segmentation;
  std::optional<OffloadRequest> offload;
  bool is_keyframe = false;
  double psnr = kPsnrCap;
};

struct Feedback {
  std::uint32_t keyframe_id = 0;
  SegmentationMap segmentation;
  StrategyMap strategy;
};

enum class FeedbackResult { kApplied, kDuplicate, kStale };

class DeviceState {
 public:
  /// Frame 1 is always offloaded with a uniform middle-level strategy.
  static std::pair<DeviceState, OffloadRequest> init(const Frame& first, const RegionGrid& grid,
                                                     TemporalConfig cfg = {}) {
    require(grid.luma_width() == first.padded_width() && grid.luma_height() == first.padded_height(),
            ErrorCode::kDimensionMismatch, "region grid does not match frame");
    require(cfg.first_level() >= 1 && cfg.first_level() <= cfg.levels, ErrorCode::kInvalidArgument,
            "middle level outside the ladder");
    DeviceState s(grid, cfg);
    s.last_raw_ = first;
    OffloadRequest req{first, StrategyMap::uniform(grid, cfg.first_level())};
    s.begin_pending(first);
    return {std::move(s), std::move(req)};
  }

  const TemporalConfig& config() const { return cfg_; }
  const RegionGrid& grid() const { return grid_; }
  bool has_cache() const { return cache_.has_value(); }
  std::optional<std::uint32_t> pending() const {
    if (!pending_) return std::nullopt;
    return pending_->id;
  }
  std::uint32_t cached_keyframe() const { return cache().keyframe.frame_id; }
  std::uint32_t last_frame_id() const { return last_raw_.frame_id; }

  /// Current propagated segmentation; Unavailable until the first feedback.
  const SegmentationMap& segmentation() const { return cache().segmentation; }
  const StrategyMap& strategy() const { return cache().strategy; }
  const FlowField& chain() const { return cache().chain; }

  /// Flow chains are extended even when FeedbackMissing is raised, so a
  /// caller may keep stepping while the first feedback is in flight.
  StepOutcome step(const Frame& frame) {
    require(frame.same_geometry(last_raw_), ErrorCode::kDimensionMismatch, "frame geometry changed");
    require(frame.frame_id > last_raw_.frame_id, ErrorCode::kInvalidArgument, "frame ids must increase");
    const FlowField flow = compute_flow(last_raw_, frame, cfg_.flow);
    if (cache_) cache_->chain = compose_flow(cache_->chain, flow);
    if (pending_) pending_->chain = compose_flow(pending_->chain, flow);
    last_raw_ = frame;
    if (!cache_) fail(ErrorCode::kFeedbackMissing, "no keyframe feedback received yet");

    StepOutcome out;
    out.frame_id = frame.frame_id;
    out.segmentation = warp_labels(cache_->segmentation, cache_->chain);
    out.psnr = psnr(warp_frame(cache_->keyframe, cache_->chain), frame);
    if (out.psnr < cfg_.threshold && (!pending_ || cfg_.offload_while_pending)) {
      out.is_keyframe = true;
      out.offload = OffloadRequest{frame, warp_strategy(cache_->strategy, cache_->chain, grid_)};
      if (pending_) superseded_.insert(pending_->id);
      begin_pending(frame);
    }
    return out;
  }

  FeedbackResult handle_feedback(const Feedback& fb) {
    if (applied_.count(fb.keyframe_id)) return FeedbackResult::kDuplicate;
    if (superseded_.count(fb.keyframe_id)) return FeedbackResult::kStale;
    if (!pending_ || pending_->id != fb.keyframe_id)
      fail(ErrorCode::kUnknownKeyframe, "feedback for unknown keyframe " + std::to_string(fb.keyframe_id));
    require(fb.strategy.matches(grid_), ErrorCode::kDimensionMismatch, "feedback strategy does not match grid");
    require(fb.segmentation.width() == grid_.luma_width() && fb.segmentation.height() == grid_.luma_height(),
            ErrorCode::kDimensionMismatch, "feedback segmentation dims");
    cache_ = Cache{std::move(pending_->keyframe), fb.segmentation, fb.strategy, std::move(pending_->chain)};
    cache_->segmentation.frame_id = fb.keyframe_id;
    applied_.insert(fb.keyframe_id);
    pending_.reset();
    return FeedbackResult::kApplied;
  }

 private:
  struct Cache {
    Frame keyframe;  // raw capture
    SegmentationMap segmentation;
    StrategyMap strategy;
    FlowField chain;  // keyframe -> last processed frame
  };
  struct Pending {
    std::uint32_t id;
    Frame keyframe;
    FlowField chain;
  };

  DeviceState(const RegionGrid& grid, TemporalConfig cfg) : grid_(grid), cfg_(std::move(cfg)) {}

  const Cache& cache() const {
    if (!cache_) fail(ErrorCode::kUnavailable, "no keyframe feedback received yet");
    return *cache_;
  }

  void begin_pending(const Frame& f) {
    pending_ = Pending{f.frame_id, f, FlowField::zero(f.padded_width(), f.padded_height(), f.frame_id, f.frame_id)};
  }

  RegionGrid grid_;
  TemporalConfig cfg_;
  Frame last_raw_;
  std::optional<Cache> cache_;
  std::optional<Pending> pending_;
  std::set<std::uint32_t> applied_;
  std::set<std::uint32_t> superseded_;
};

/// Ordered hand-off of feedback from a transport thread to the thread that
/// owns the DeviceState.
class FeedbackMailbox {
 public:
  void post(Feedback fb) {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(fb));
  }

  /// Applies every queued feedback in arrival order; returns the results.
  std::vector<std::pair<std::uint32_t, FeedbackResult>> drain(DeviceState& state) {
    std::deque<Feedback> batch;
    {
      std::lock_guard lock(mu_);
      batch.swap(queue_);
    }
    std::vector<std::pair<std::uint32_t, FeedbackResult>> out;
    for (auto& fb : batch) out.emplace_back(fb.keyframe_id, state.handle_feedback(fb));
    return out;
  }

 private:
  std::mutex mu_;
  std::deque<Feedback> queue_;
};

}  // namespace stac
