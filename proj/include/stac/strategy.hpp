#pragma once

// Offline quantization-ladder generation and upperbound search, online
// per-region level selection, and analysis helpers for the step-size
// optimum and the region-constraint expectation ratio.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "stac/codec.hpp"
#include "stac/quant.hpp"
#include "stac/region.hpp"
#include "stac/segmentation.hpp"
#include "stac/sensitivity.hpp"

namespace stac {

inline constexpr int kDefaultLevels = 16;

/// Total number of DCT coefficients (all planes, padded) in a frame.
inline std::int64_t coefficient_count(const Frame& f) {
  std::int64_t m = 0;
  for (const auto& p : f.planes) m += static_cast<std::int64_t>(p.width()) * p.height();
  return m;
}

template <typename D>
std::int64_t coefficient_count(const GradientField<D>& g) {
  std::int64_t m = 0;
  for (const auto& p : g.planes) m += static_cast<std::int64_t>(p.width()) * p.height();
  return m;
}

struct UpperboundLadder {
  double B = 0.0;
  std::vector<double> levels;  // ascending

  /// Geometric from B/8 to 8B; a single level is B itself.
  static UpperboundLadder geometric(double B, int L = kDefaultLevels) {
    require(B > 0 && std::isfinite(B), ErrorCode::kInvalidArgument, "upperbound must be positive");
    require(L >= 1 && L <= kMaxLevels, ErrorCode::kInvalidArgument, "level count outside [1,16]");
    UpperboundLadder out{B, {}};
    if (L == 1) {
      out.levels.push_back(B);
      return out;
    }
    for (int l = 1; l <= L; ++l) out.levels.push_back(B * std::pow(8.0, 2.0 * (l - 1) / (L - 1) - 1.0));
    return out;
  }
};

/// q = clamp(round(2 B_l / (M g)), 1, 255); g = 0 maps to 255.
inline int table_step(double B_l, std::int64_t M, double g) {
  if (!(g > 0)) return kMaxStep;
  const double q = 2.0 * B_l / (static_cast<double>(M) * g);
  if (q >= kMaxStep) return kMaxStep;
  return std::clamp(static_cast<int>(std::lround(q)), kMinStep, kMaxStep);
}

inline QuantTable table_for(const std::array<double, kBlockArea>& gbar, double B_l, std::int64_t M) {
  QuantTable t;
  for (int n = 0; n < kBlockArea; ++n) t.steps[n] = static_cast<std::uint8_t>(table_step(B_l, M, gbar[n]));
  return t;
}

inline QuantTableSet generate_table_levels(const FrequencyGradients& gbar, std::span<const double> levels,
                                           std::int64_t M, bool shared_chroma = false) {
  require(!levels.empty(), ErrorCode::kEmptyLadder, "empty upperbound ladder");
  require(M > 0, ErrorCode::kInvalidArgument, "coefficient count must be positive");
  for (std::size_t l = 0; l < levels.size(); ++l) {
    require(levels[l] > 0, ErrorCode::kInvalidArgument, "upperbounds must be positive");
    require(l == 0 || levels[l] > levels[l - 1], ErrorCode::kInvalidArgument, "upperbounds must be ascending");
  }
  std::vector<QuantTable> luma, chroma;
  for (double b : levels) {
    luma.push_back(table_for(gbar.of(PlaneClass::kLuma), b, M));
    chroma.push_back(table_for(gbar.of(PlaneClass::kChroma), b, M));
  }
  return QuantTableSet(std::move(luma), std::move(chroma), std::vector<double>(levels.begin(), levels.end()),
                       shared_chroma);
}

inline QuantTableSet generate_table_levels(const FrequencyGradients& gbar, const UpperboundLadder& ladder,
                                           std::int64_t M, bool shared_chroma = false) {
  return generate_table_levels(gbar, std::span<const double>(ladder.levels), M, shared_chroma);
}

// ---- Worst-case loss per region ----

/// Per-region sums of |g_s| by plane class and zigzag frequency, so that
/// the worst-case loss of any table pair is a 128-term dot product.
class RegionSensitivity {
 public:
  RegionSensitivity(const CoeffGradientMap& gs, const RegionGrid& grid) : grid_(grid), sums_(grid.count()) {
    require(gs.planes[0].width() == grid.luma_width() && gs.planes[0].height() == grid.luma_height() &&
                gs.subsampling == grid.subsampling(),
            ErrorCode::kDimensionMismatch, "gradient map does not match region grid");
    for (int c = 0; c < 3; ++c) {
      const auto& p = gs.planes[c];
      const int cls = c == 0 ? 0 : 1;
      for (int by = 0; by < p.height() / kBlock; ++by)
        for (int bx = 0; bx < p.width() / kBlock; ++bx) {
          auto& s = sums_[grid.region_of_block(c, bx, by)][cls];
          for (int v = 0; v < kBlock; ++v)
            for (int u = 0; u < kBlock; ++u)
              s[kNaturalToZigzag[v * kBlock + u]] += std::abs(p(bx * kBlock + u, by * kBlock + v));
        }
    }
  }

  const RegionGrid& grid() const { return grid_; }

  /// sum over coefficients in region r of |g| q / 2.
  double worst_case_loss(int r, const QuantTable& luma, const QuantTable& chroma) const {
    require(r >= 0 && r < grid_.count(), ErrorCode::kRegionOutOfBounds, "region " + std::to_string(r) + " out of grid");
    double dq = 0;
    for (int n = 0; n < kBlockArea; ++n) dq += sums_[r][0][n] * luma.steps[n] + sums_[r][1][n] * chroma.steps[n];
    return dq / 2.0;
  }

 private:
  RegionGrid grid_;
  std::vector<std::array<std::array<double, kBlockArea>, 2>> sums_;
};

inline double region_worst_case_loss(const CoeffGradientMap& gs, const RegionGrid& grid, int r,
                                     const QuantTable& luma, const QuantTable& chroma) {
  require(r >= 0 && r < grid.count(), ErrorCode::kRegionOutOfBounds, "region " + std::to_string(r) + " out of grid");
  return RegionSensitivity(gs, grid).worst_case_loss(r, luma, chroma);
}

/// Share of B assigned to region r, proportional to the luma blocks it holds.
inline double region_target(const RegionGrid& grid, int r, double B) {
  return B * grid.luma_blocks_in(r) / static_cast<double>(grid.blocks_x() * grid.blocks_y());
}

/// Per region, the level whose worst-case loss is closest to the region's
/// share of B; ties go to the coarser level.
inline StrategyMap select_levels(const RegionSensitivity& sens, const QuantTableSet& tables, double B) {
  const auto& grid = sens.grid();
  StrategyMap out = StrategyMap::uniform(grid, tables.level_count());
  for (int r = 0; r < grid.count(); ++r) {
    const double target = region_target(grid, r, B);
    double best = std::numeric_limits<double>::infinity();
    int best_l = tables.level_count();
    for (int l = 1; l <= tables.level_count(); ++l) {
      const double d = std::abs(sens.worst_case_loss(r, tables.table(PlaneClass::kLuma, l), tables.table(PlaneClass::kChroma, l)) - target);
      if (d <= best) {
        best = d;
        best_l = l;
      }
    }
    out.levels[r] = static_cast<std::uint8_t>(best_l);
  }
  return out;
}

inline StrategyMap select_levels(const CoeffGradientMap& gs, const QuantTableSet& tables, double B,
                                 const RegionGrid& grid) {
  return select_levels(RegionSensitivity(gs, grid), tables, B);
}

// ---- Analysis: ideal per-coefficient steps ----

/// Unclamped ideal steps q = 2B / (M |g|) per coefficient, where M counts
/// the coefficients with nonzero gradient. Coefficients with g = 0 do not
/// constrain the loss and get +infinity.
inline std::array<Plane<double>, 3> optimal_steps(const CoeffGradientMap& gs, double B) {
  require(B > 0, ErrorCode::kInvalidArgument, "upperbound must be positive");
  double M = 0;
  for (const auto& p : gs.planes)
    for (double g : p.data()) M += g != 0.0;
  std::array<Plane<double>, 3> out;
  for (int c = 0; c < 3; ++c) {
    const auto& p = gs.planes[c];
    out[c] = Plane<double>(p.width(), p.height());
    for (std::size_t i = 0; i < p.data().size(); ++i) {
      const double g = std::abs(p.data()[i]);
      out[c].data()[i] = g > 0 ? 2.0 * B / (M * g) : std::numeric_limits<double>::infinity();
    }
  }
  return out;
}

/// sum |g| q / 2 over coefficients with nonzero gradient.
inline double worst_case_loss(const CoeffGradientMap& gs, const std::array<Plane<double>, 3>& steps) {
  double sum = 0;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < gs.planes[c].data().size(); ++i) {
      const double g = std::abs(gs.planes[c].data()[i]);
      if (g > 0) sum += g * steps[c].data()[i] / 2.0;
    }
  return sum;
}

// ---- Analysis: region-constraint expectation ratio ----

/// E1/E2 = [(2M-r)(2M-2r)...M]^r / [(2M-1)(2M-2)...M], evaluated in log space.
inline double expectation_ratio(int M, int r_max) {
  require(M > 0 && r_max > 0, ErrorCode::kInvalidArgument, "M and r_max must be positive");
  require(M % r_max == 0, ErrorCode::kNonDivisible, "r_max must divide M");
  double log_num = 0, log_den = 0;
  for (int k = 1; k <= M / r_max; ++k) log_num += std::log(2.0 * M - static_cast<double>(k) * r_max);
  for (int j = M; j <= 2 * M - 1; ++j) log_den += std::log(static_cast<double>(j));
  return std::exp(r_max * log_num - log_den);
}

struct MonteCarloRatio {
  double e1 = 0;  // E[prod d] with sum d = 1
  double e2 = 0;  // same with every region summing to 1/r_max
  double ratio() const { return e1 / e2; }
};

/// Uniform samples on the simplex via normalized exponentials; the same
/// draws are renormalized per region for the constrained expectation.
inline MonteCarloRatio monte_carlo_expectation_ratio(int M, int r_max, std::int64_t samples, std::uint64_t seed) {
  require(M > 0 && r_max > 0, ErrorCode::kInvalidArgument, "M and r_max must be positive");
  require(M % r_max == 0, ErrorCode::kNonDivisible, "r_max must divide M");
  require(samples > 0, ErrorCode::kInvalidArgument, "need at least one sample");
  const int m = M / r_max;
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> e(M);
  // Scale products by M^M (resp. per-region factors) to stay well inside double range.
  double s1 = 0, s2 = 0;
  for (std::int64_t s = 0; s < samples; ++s) {
    double total = 0;
    for (auto& v : e) total += v = expo(rng);
    double p1 = 1, p2 = 1;
    for (int r = 0; r < r_max; ++r) {
      double part = 0;
      for (int i = 0; i < m; ++i) part += e[r * m + i];
      for (int i = 0; i < m; ++i) {
        p1 *= M * e[r * m + i] / total;
        p2 *= M * e[r * m + i] / (part * r_max);
      }
    }
    s1 += p1;
    s2 += p2;
  }
  const double scale = std::pow(static_cast<double>(M), -M);
  return {s1 / samples * scale, s2 / samples * scale};
}

// ---- Offline upperbound search ----

struct LabeledFrame {
  Frame frame;
  Plane<std::uint8_t> labels;  // visible luma extent
};

enum class AccuracyMetric { kMeanIou, kPixelAccuracy };

/// Geometric grid with `per_decade` points per factor of ten, lo..hi inclusive.
inline std::vector<double> upperbound_grid(double lo, double hi, int per_decade = 25) {
  require(lo > 0 && hi >= lo && per_decade > 0, ErrorCode::kInvalidArgument, "bad search grid");
  std::vector<double> pts;
  for (int k = 0;; ++k) {
    const double b = lo * std::pow(10.0, static_cast<double>(k) / per_decade);
    if (b > hi * (1 + 1e-12)) break;
    pts.push_back(b);
  }
  return pts;
}

/// Mean accuracy of the oracle on frames coded with the single table T(B).
inline double uniform_table_accuracy(const SensitivityOracle& oracle, std::span<const LabeledFrame> eval,
                                     const FrequencyGradients& gbar, double B, AccuracyMetric metric) {
  require(!eval.empty(), ErrorCode::kEmptyCorpus, "empty evaluation set");
  double acc = 0;
  for (const auto& s : eval) {
    const double b[1] = {B};
    const auto tables = generate_table_levels(gbar, b, coefficient_count(s.frame));
    const auto grid = RegionGrid::for_frame(s.frame);
    const auto dec = decode_frame(encode_single_table(s.frame, tables, 1, grid), tables);
    const auto pred = oracle.evaluate(RealFrame::from(dec.frame), nullptr).prediction.labels;
    acc += metric == AccuracyMetric::kMeanIou ? mean_iou(pred, s.labels) : pixel_accuracy(pred, s.labels);
  }
  return acc / static_cast<double>(eval.size());
}

struct UpperboundSearch {
  double B = 0;
  std::size_t index = 0;
  int evaluations = 0;
};

/// Largest grid point whose uniform table keeps accuracy >= target, found by
/// bisection under the assumption that accuracy is non-increasing in B.
inline UpperboundSearch search_max_upperbound(const SensitivityOracle& oracle, std::span<const LabeledFrame> eval,
                                              const FrequencyGradients& gbar, double target,
                                              std::span<const double> grid,
                                              AccuracyMetric metric = AccuracyMetric::kPixelAccuracy) {
  require(!grid.empty(), ErrorCode::kInvalidArgument, "empty search grid");
  UpperboundSearch out;
  auto ok = [&](std::size_t i) {
    ++out.evaluations;
    return uniform_table_accuracy(oracle, eval, gbar, grid[i], metric) >= target;
  };
  if (!ok(0)) fail(ErrorCode::kUnsatisfiable, "accuracy target unreachable even at the finest grid point");
  std::size_t lo = 0, hi = grid.size() - 1;
  if (ok(hi)) lo = hi;
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    (ok(mid) ? lo : hi) = mid;
  }
  out.index = lo;
  out.B = grid[lo];
  return out;
}

}  // namespace stac
