#pragma once

// File-level glue for the command-line tool: directory ingest, table
// generation from gradient files, and CSV reports.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "stac/config.hpp"

namespace stac {

inline constexpr const char* kRunCsvSchema = "stac.run.v1";

/// Regular files in `dir` whose extension is one of `exts`, sorted by name.
inline std::vector<std::filesystem::path> list_files(const std::string& dir, std::initializer_list<const char*> exts) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) fail(ErrorCode::kIo, "not a directory: " + dir);
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (std::any_of(exts.begin(), exts.end(), [&](const char* x) { return ext == x; })) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Frames are numbered from 1 in lexicographic file order.
inline std::vector<Frame> load_frames(const std::string& dir, Subsampling s) {
  std::vector<Frame> out;
  std::uint32_t id = 1;
  for (const auto& p : list_files(dir, {".ppm", ".pgm", ".pnm"})) out.push_back(read_frame(p.string(), s, id++));
  return out;
}

inline std::vector<Plane<std::uint8_t>> load_label_planes(const std::string& dir) {
  std::vector<Plane<std::uint8_t>> out;
  for (const auto& p : list_files(dir, {".pgm"})) {
    auto img = read_pnm(p.string());
    require(img.channels == 1, ErrorCode::kBadConfig, "label file is not P5: " + p.string());
    out.push_back(std::move(img.r));
  }
  return out;
}

inline std::unique_ptr<SensitivityOracle> load_oracle(const std::string& name) {
  if (name.empty() || name == "toyseg") return std::make_unique<ToySegmenter>(ToySegmenter::reference());
  return std::make_unique<ToySegmenter>(ToySegmenter::load(name));
}

inline std::vector<CoeffGradientMap> load_gradient_corpus(const std::string& dir) {
  std::vector<CoeffGradientMap> maps;
  for (const auto& p : list_files(dir, {".sgrd"})) maps.push_back(coeff_gradients_from(parse_sgrd(read_file(p.string()))));
  require(!maps.empty(), ErrorCode::kEmptyCorpus, "no .sgrd files in " + dir);
  return maps;
}

/// Ladder of L tables around B from the corpus' mean coefficient gradients.
inline QuantTableSet tables_from_corpus(std::span<const CoeffGradientMap> maps, double B, int L) {
  const FrequencyGradients gbar = average_frequency_gradients(maps);
  return generate_table_levels(gbar, UpperboundLadder::geometric(B, L), coefficient_count(maps.front()));
}

/// "host:port" -> pair; throws BadConfig.
inline std::pair<std::string, int> parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  require(colon != std::string::npos && colon > 0, ErrorCode::kBadConfig, "edge must be loopback or host:port");
  int port = 0;
  const std::string ps = s.substr(colon + 1);
  const auto [p, ec] = std::from_chars(ps.data(), ps.data() + ps.size(), port);
  require(ec == std::errc() && p == ps.data() + ps.size() && port > 0 && port < 65536, ErrorCode::kBadConfig,
          "bad port in " + s);
  return {s.substr(0, colon), port};
}

struct RunOutput {
  RunReport report;
  std::vector<double> miou;  // per frame; NaN without a segmentation or labels
};

/// Runs `frames` against the edge named in the config.
inline RunOutput run_frames(std::span<const Frame> frames, const RunConfig& cfg, const QuantTableSet& tables,
                            std::span<const Plane<std::uint8_t>> labels = {}) {
  require(labels.empty() || labels.size() == frames.size(), ErrorCode::kDimensionMismatch,
          "label count differs from frame count");
  RunOutput out;
  if (cfg.edge == "loopback") {
    const auto oracle = load_oracle(cfg.oracle);
    out.report = run_loopback(frames, *oracle, tables, cfg.B, cfg.device()).first;
  } else {
    const auto [host, port] = parse_endpoint(cfg.edge);
    auto link = TcpLink::connect(host, port);
    out.report = device_run(frames, *link, tables, cfg.device());
  }
  for (std::size_t i = 0; i < out.report.frames.size(); ++i) {
    const auto& rec = out.report.frames[i];
    double m = std::nan("");
    if (!labels.empty() && rec.segmentation) m = mean_iou(rec.segmentation->labels, labels[i]);
    out.miou.push_back(m);
  }
  return out;
}

inline void write_run_csv(std::ostream& os, const RunOutput& run, bool with_miou) {
  auto num = [&](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  os << "# schema " << kRunCsvSchema << "\n";
  os << "frame_id,is_keyframe,psnr,uplink_bytes,cumulative_kbps" << (with_miou ? ",miou" : "") << "\n";
  for (std::size_t i = 0; i < run.report.frames.size(); ++i) {
    const auto& r = run.report.frames[i];
    os << r.frame_id << ',' << (r.is_keyframe ? 1 : 0) << ',' << num(r.psnr) << ',' << r.uplink_bytes << ','
       << num(r.cumulative_kbps);
    if (with_miou) os << ',' << num(run.miou[i]);
    os << "\n";
  }
}

/// One PGM per frame that has a segmentation, cropped to the visible area.
inline int write_segmentations(const std::string& dir, std::span<const Frame> frames, const RunReport& report) {
  std::filesystem::create_directories(dir);
  int n = 0;
  for (std::size_t i = 0; i < report.frames.size(); ++i) {
    const auto& rec = report.frames[i];
    if (!rec.segmentation) continue;
    char name[64];
    std::snprintf(name, sizeof name, "seg_%06u.pgm", rec.frame_id);
    write_pgm((std::filesystem::path(dir) / name).string(), rec.segmentation->labels, frames[i].width,
              frames[i].height);
    ++n;
  }
  return n;
}

}  // namespace stac
