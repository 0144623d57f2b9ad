#pragma once

// Shared fixtures for tests that need a table set and a frame sequence.

#include <vector>

#include "stac/sensitivity.hpp"
#include "stac/strategy.hpp"
#include "stac/synthetic.hpp"

namespace stac::testing {

inline std::vector<Frame> moving_frames(int width, int height, std::uint64_t seed, int count, int first_id = 1) {
  const synthetic::MovingShapes scene(width, height, seed);
  std::vector<Frame> out;
  for (int t = 0; t < count; ++t) {
    Frame f = scene.frame(t);
    f.frame_id = static_cast<std::uint32_t>(first_id + t);
    out.push_back(std::move(f));
  }
  return out;
}

/// Ladder around B from the mean fake gradients of `corpus`.
inline QuantTableSet corpus_tables(const SensitivityOracle& oracle, const std::vector<Frame>& corpus, double B,
                                   int levels = kDefaultLevels) {
  std::vector<CoeffGradientMap> maps;
  for (const auto& f : corpus) maps.push_back(pixel_to_coeff_gradients(fake_gradient(f, oracle).gradient));
  return generate_table_levels(average_frequency_gradients(maps), UpperboundLadder::geometric(B, levels),
                               coefficient_count(corpus.front()));
}

}  // namespace stac::testing
