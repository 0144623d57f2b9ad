#pragma once

// RunConfig: `key = value` lines, `#` starts a comment. Unknown keys and
// malformed values are rejected with BadConfig.

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "stac/transport.hpp"

namespace stac {

struct RunConfig {
  std::string frames_dir;
  std::string labels_dir;  // optional
  std::string tables;      // STBL path
  std::string output_dir;  // per-frame segmentation PGMs; empty skips them
  std::string oracle = "toyseg";  // "toyseg" or a weights file
  std::string edge = "loopback";  // "loopback" or host:port
  double B = 1.0;
  int L = kDefaultLevels;
  double thr = kDefaultPsnrThreshold;
  int region_w = kDefaultRegionBlocks;
  int region_h = kDefaultRegionBlocks;
  Subsampling subsampling = Subsampling::k420;
  RunMode mode = RunMode::kStac;
  int uniform_level = 1;
  double fps = 30.0;
  int feedback_lag = 0;
  std::uint64_t seed = 1;

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = {"frames_dir", "labels_dir", "tables", "output_dir", "oracle",
                                               "edge",       "B",          "L",      "thr",        "region",
                                               "subsampling", "mode",      "fps",    "feedback_lag", "seed"};
    return k;
  }

  /// Applies one key; throws BadConfig on unknown keys or bad values.
  void set(const std::string& key, const std::string& value) {
    auto bad = [&](const std::string& why) { fail(ErrorCode::kBadConfig, key + " = '" + value + "': " + why); };
    auto as_int = [&](int lo, int hi) {
      int v = 0;
      const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size()) bad("not an integer");
      if (v < lo || v > hi) bad("outside [" + std::to_string(lo) + "," + std::to_string(hi) + "]");
      return v;
    };
    auto as_double = [&] {
      if (value == "inf" || value == "+inf") return std::numeric_limits<double>::infinity();
      if (value == "-inf") return -std::numeric_limits<double>::infinity();
      double v = 0;
      const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size() || std::isnan(v)) bad("not a number");
      return v;
    };

    if (key == "frames_dir") frames_dir = value;
    else if (key == "labels_dir") labels_dir = value;
    else if (key == "tables") tables = value;
    else if (key == "output_dir") output_dir = value;
    else if (key == "oracle") oracle = value;
    else if (key == "edge") edge = value;
    else if (key == "B") {
      B = as_double();
      if (!(B > 0) || !std::isfinite(B)) bad("must be positive and finite");
    } else if (key == "L") L = as_int(1, kMaxLevels);
    else if (key == "thr") thr = as_double();
    else if (key == "region") {
      const auto x = value.find('x');
      if (x == std::string::npos) bad("expected WxH blocks, e.g. 3x3");
      const std::string w = value.substr(0, x), h = value.substr(x + 1);
      region_w = RunConfig::parse_int(w, 1, 255, key, value);
      region_h = RunConfig::parse_int(h, 1, 255, key, value);
    } else if (key == "subsampling") {
      if (value == "420") subsampling = Subsampling::k420;
      else if (value == "444") subsampling = Subsampling::k444;
      else bad("expected 420 or 444");
    } else if (key == "mode") {
      if (value == "stac") mode = RunMode::kStac;
      else if (value == "per-frame") mode = RunMode::kPerFrame;
      else if (value.rfind("uniform:", 0) == 0) {
        mode = RunMode::kUniform;
        uniform_level = RunConfig::parse_int(value.substr(8), 1, kMaxLevels, key, value);
      } else bad("expected stac, per-frame or uniform:<level>");
    } else if (key == "fps") {
      fps = as_double();
      if (!(fps > 0) || !std::isfinite(fps)) bad("must be positive");
    } else if (key == "feedback_lag") feedback_lag = as_int(0, 1000);
    else if (key == "seed") {
      std::uint64_t v = 0;
      const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size()) bad("not an unsigned integer");
      seed = v;
    } else
      fail(ErrorCode::kBadConfig, "unknown key '" + key + "'");
  }

  static RunConfig parse(std::istream& in) {
    RunConfig c;
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) fail(ErrorCode::kBadConfig, "line " + std::to_string(n) + ": expected key = value");
      c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
  }

  static RunConfig parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::kBadConfig, "cannot open config " + path);
    return parse(in);
  }

  DeviceConfig device() const {
    DeviceConfig d;
    d.mode = mode;
    d.uniform_level = uniform_level;
    d.temporal.threshold = thr;
    d.temporal.levels = L;
    d.fps = fps;
    d.feedback_lag = feedback_lag;
    d.region_w = region_w;
    d.region_h = region_h;
    return d;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static int parse_int(const std::string& s, int lo, int hi, const std::string& key, const std::string& value) {
    int v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v < lo || v > hi)
      fail(ErrorCode::kBadConfig, key + " = '" + value + "': bad integer");
    return v;
  }
};

}  // namespace stac
