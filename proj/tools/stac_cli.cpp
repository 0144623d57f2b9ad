// stac: command-line front end.
//
// Exit codes: 0 ok, 1 other failure, 2 bad configuration or arguments,
// 3 empty corpus, 4 link failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "stac/stac.hpp"

namespace fs = std::filesystem;
using namespace stac;

namespace {

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::kBadConfig:
    case ErrorCode::kNonDivisible: return 2;
    case ErrorCode::kEmptyCorpus: return 3;
    case ErrorCode::kLinkLost: return 4;
    default: return 1;
  }
}

/// Loads `config` (if given) then applies any flag that mirrors a key.
struct ConfigFlags {
  std::string path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", path, "RunConfig file (key = value)");
    for (const auto& k : RunConfig::keys()) cmd->add_option("--" + k, values[k], "overrides config key " + k);
  }

  RunConfig resolve(std::optional<std::uint64_t> seed) const {
    RunConfig c = path.empty() ? RunConfig{} : RunConfig::load(path);
    for (const auto& [k, v] : values)
      if (!v.empty()) c.set(k, v);
    if (seed) c.seed = *seed;
    return c;
  }
};

std::string frame_name(const char* prefix, int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", prefix, i, ext);
  return buf;
}

QuantTableSet load_tables(const std::string& path) {
  require(!path.empty(), ErrorCode::kBadConfig, "no tables file given");
  return QuantTableSet::parse(read_file(path));
}

void print_tables(const QuantTableSet& t) {
  std::printf("digest %s\n", hex(t.digest()).c_str());
  std::printf("level  upperbound  luma_mean_step  chroma_mean_step\n");
  for (int l = 1; l <= t.level_count(); ++l) {
    const double ub = l <= static_cast<int>(t.upperbounds().size()) ? t.upperbounds()[l - 1] : 0.0;
    std::printf("%5d  %10.4g  %14.3f  %16.3f\n", l, ub, t.luma()[l - 1].mean_step(), t.chroma()[l - 1].mean_step());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatiotemporal adaptive compression for offloaded video segmentation"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "seed for every stochastic path");

  // gen-sequence
  auto* gen_seq = app.add_subcommand("gen-sequence", "write a synthetic moving-shapes sequence as PPM + label PGM");
  std::string seq_out, seq_labels;
  int seq_frames = 60, seq_w = 320, seq_h = 192;
  gen_seq->add_option("-o,--out", seq_out, "frame directory")->required();
  gen_seq->add_option("--labels", seq_labels, "label directory");
  gen_seq->add_option("-n,--frames", seq_frames)->check(CLI::Range(1, 100000));
  gen_seq->add_option("--width", seq_w)->check(CLI::Range(8, 8192));
  gen_seq->add_option("--height", seq_h)->check(CLI::Range(8, 8192));

  // toyseg-weights
  auto* weights = app.add_subcommand("toyseg-weights", "write the reference ToySegmenter weights");
  std::string weights_out;
  weights->add_option("-o,--out", weights_out)->required();

  // export-gradients
  auto* exp_grad = app.add_subcommand("export-gradients", "fake gradients of each frame as SGRD files");
  ConfigFlags exp_cfg;
  exp_cfg.attach(exp_grad);
  std::string grad_out, grad_kind = "pixel", sfrq_out;
  exp_grad->add_option("-o,--out", grad_out, "SGRD directory")->required();
  exp_grad->add_option("--kind", grad_kind)->check(CLI::IsMember({"pixel", "coeff"}));
  exp_grad->add_option("--sfrq", sfrq_out, "also write the frequency averages");

  // gen-tables
  auto* gen_tables = app.add_subcommand("gen-tables", "SGRD corpus -> STBL table ladder");
  ConfigFlags tab_cfg;
  tab_cfg.attach(gen_tables);
  std::string grad_dir, tables_out;
  gen_tables->add_option("-g,--gradients", grad_dir, "directory of .sgrd files")->required();
  gen_tables->add_option("-o,--out", tables_out, "STBL output")->required();

  // run
  auto* run = app.add_subcommand("run", "device pipeline over a frame directory");
  ConfigFlags run_cfg;
  run_cfg.attach(run);
  std::string csv_out = "-";
  run->add_option("--csv", csv_out, "report path, - for stdout");

  // serve
  auto* serve = app.add_subcommand("serve", "edge server");
  ConfigFlags srv_cfg;
  srv_cfg.attach(serve);
  int port = 0, max_sessions = 0;
  bool any_addr = false;
  std::string port_file;
  serve->add_option("-p,--port", port)->check(CLI::Range(0, 65535));
  serve->add_option("--max-sessions", max_sessions, "exit after this many sessions (0 = never)");
  serve->add_flag("--any", any_addr, "listen on all interfaces instead of loopback");
  serve->add_option("--port-file", port_file, "write the bound port here");

  // verify-theorem
  auto* theorem = app.add_subcommand("verify-theorem", "closed-form and Monte-Carlo E1/E2");
  int th_M = 8, th_r = 4;
  std::int64_t th_samples = 1000000;
  theorem->add_option("-M", th_M)->check(CLI::PositiveNumber);
  theorem->add_option("-r,--r-max", th_r)->check(CLI::PositiveNumber);
  theorem->add_option("-s,--samples", th_samples)->check(CLI::PositiveNumber);

  // codec utilities
  auto* encode = app.add_subcommand("encode", "encode one frame at a uniform level");
  auto* decode = app.add_subcommand("decode", "decode a STAC stream to PPM");
  auto* jpeg = app.add_subcommand("export-jpeg", "baseline JPEG at one table level");
  std::string io_in, io_out, io_tables;
  int io_level = 1;
  std::string io_ss = "420";
  for (auto* c : {encode, decode, jpeg}) {
    c->add_option("-i,--in", io_in)->required();
    c->add_option("-o,--out", io_out)->required();
    c->add_option("-t,--tables", io_tables)->required();
  }
  for (auto* c : {encode, jpeg}) {
    c->add_option("-l,--level", io_level)->check(CLI::Range(1, kMaxLevels));
    c->add_option("--subsampling", io_ss)->check(CLI::IsMember({"420", "444"}));
  }

  // search-upperbound
  auto* search = app.add_subcommand("search-upperbound", "largest B whose uniform table keeps accuracy");
  ConfigFlags srch_cfg;
  srch_cfg.attach(search);
  std::string srch_sfrq, srch_metric = "miou";
  double srch_target = 0.9, srch_lo = 1, srch_hi = 10000;
  search->add_option("--sfrq", srch_sfrq, "frequency averages")->required();
  search->add_option("--target", srch_target)->required();
  search->add_option("--lo", srch_lo)->check(CLI::PositiveNumber);
  search->add_option("--hi", srch_hi)->check(CLI::PositiveNumber);
  search->add_option("--metric", srch_metric)->check(CLI::IsMember({"miou", "pixel"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen_seq) {
      const synthetic::MovingShapes scene(seq_w, seq_h, seed.value_or(2024));
      fs::create_directories(seq_out);
      if (!seq_labels.empty()) fs::create_directories(seq_labels);
      for (int t = 0; t < seq_frames; ++t) {
        write_frame((fs::path(seq_out) / frame_name("frame", t, "ppm")).string(), scene.frame(t, Subsampling::k444));
        if (!seq_labels.empty())
          write_pgm((fs::path(seq_labels) / frame_name("label", t, "pgm")).string(), scene.labels(t));
      }
      std::printf("wrote %d frames to %s\n", seq_frames, seq_out.c_str());
      return 0;
    }

    if (*weights) {
      std::ofstream out(weights_out);
      if (!out) fail(ErrorCode::kIo, "cannot write " + weights_out);
      out << ToySegmenter::reference().to_text();
      return 0;
    }

    if (*exp_grad) {
      const RunConfig cfg = exp_cfg.resolve(seed);
      require(!cfg.frames_dir.empty(), ErrorCode::kBadConfig, "frames_dir is required");
      const auto oracle = load_oracle(cfg.oracle);
      const auto frames = load_frames(cfg.frames_dir, cfg.subsampling);
      require(!frames.empty(), ErrorCode::kEmptyCorpus, "no frames in " + cfg.frames_dir);
      fs::create_directories(grad_out);
      std::vector<CoeffGradientMap> maps;
      for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto g = fake_gradient(frames[i], *oracle).gradient;
        maps.push_back(pixel_to_coeff_gradients(g));
        const SgrdFile f = grad_kind == "pixel" ? to_sgrd(g) : to_sgrd(maps.back());
        write_file((fs::path(grad_out) / frame_name("grad", static_cast<int>(i), "sgrd")).string(), serialize_sgrd(f));
      }
      if (!sfrq_out.empty()) write_file(sfrq_out, average_frequency_gradients(maps).serialize());
      std::printf("wrote %zu gradient maps to %s\n", frames.size(), grad_out.c_str());
      return 0;
    }

    if (*gen_tables) {
      const RunConfig cfg = tab_cfg.resolve(seed);
      const auto maps = load_gradient_corpus(grad_dir);
      const QuantTableSet tables = tables_from_corpus(maps, cfg.B, cfg.L);
      write_file(tables_out, tables.serialize());
      print_tables(tables);
      return 0;
    }

    if (*run) {
      const RunConfig cfg = run_cfg.resolve(seed);
      require(!cfg.frames_dir.empty(), ErrorCode::kBadConfig, "frames_dir is required");
      const QuantTableSet tables = load_tables(cfg.tables);
      const auto frames = load_frames(cfg.frames_dir, cfg.subsampling);
      require(!frames.empty(), ErrorCode::kEmptyCorpus, "no frames in " + cfg.frames_dir);
      std::vector<Plane<std::uint8_t>> labels;
      if (!cfg.labels_dir.empty()) labels = load_label_planes(cfg.labels_dir);
      const RunOutput out = run_frames(frames, cfg, tables, labels);
      if (csv_out == "-") {
        write_run_csv(std::cout, out, !labels.empty());
      } else {
        std::ofstream os(csv_out);
        if (!os) fail(ErrorCode::kIo, "cannot write " + csv_out);
        write_run_csv(os, out, !labels.empty());
      }
      if (!cfg.output_dir.empty()) write_segmentations(cfg.output_dir, frames, out.report);
      const auto& r = out.report;
      std::fprintf(stderr, "frames %zu offloads %d (%.2f/s) uplink %.1f kbps edge_errors %d\n", r.frames.size(),
                   r.offloads, r.offloads_per_second(), r.uplink_kbps(), r.edge_errors);
      if (r.link_lost) {
        std::fprintf(stderr, "link lost: %s\n", r.error.c_str());
        return 4;
      }
      return 0;
    }

    if (*serve) {
      const RunConfig cfg = srv_cfg.resolve(seed);
      const QuantTableSet tables = load_tables(cfg.tables);
      const auto oracle = load_oracle(cfg.oracle);
      TcpListener listener(port, !any_addr);
      std::printf("listening on port %d\n", listener.port());
      std::fflush(stdout);
      if (!port_file.empty()) {
        std::ofstream pf(port_file);
        pf << listener.port() << "\n";
      }
      const SessionStats s = edge_serve(listener, *oracle, tables, cfg.B, max_sessions);
      std::printf("served %d frames, %d errors, up %llu B, down %llu B\n", s.frames_served, s.errors,
                  static_cast<unsigned long long>(s.bytes_up), static_cast<unsigned long long>(s.bytes_down));
      return 0;
    }

    if (*theorem) {
      const double closed = expectation_ratio(th_M, th_r);
      const auto mc = monte_carlo_expectation_ratio(th_M, th_r, th_samples, seed.value_or(1));
      std::printf("M %d r_max %d samples %lld\n", th_M, th_r, static_cast<long long>(th_samples));
      std::printf("closed_form %.6f\n", closed);
      std::printf("monte_carlo E1 %.6e E2 %.6e ratio %.6f\n", mc.e1, mc.e2, mc.ratio());
      std::printf("relative_gap %.4f\n", std::abs(mc.ratio() - closed) / closed);
      return th_r > 1 && closed >= 1.0 ? 1 : 0;
    }

    if (*encode) {
      const QuantTableSet tables = load_tables(io_tables);
      const Frame f = read_frame(io_in, io_ss == "444" ? Subsampling::k444 : Subsampling::k420, 1);
      const Bytes bits = encode_single_table(f, tables, io_level, RegionGrid::for_frame(f));
      write_file(io_out, bits);
      std::printf("%zu bytes digest %s\n", bits.size(), hex(stream_digest(bits)).c_str());
      return 0;
    }

    if (*decode) {
      const QuantTableSet tables = load_tables(io_tables);
      write_frame(io_out, decode_frame(read_file(io_in), tables).frame);
      return 0;
    }

    if (*jpeg) {
      const QuantTableSet tables = load_tables(io_tables);
      const Frame f = read_frame(io_in, io_ss == "444" ? Subsampling::k444 : Subsampling::k420, 1);
      write_file(io_out, export_jpeg(f, tables, io_level));
      return 0;
    }

    if (*search) {
      const RunConfig cfg = srch_cfg.resolve(seed);
      require(!cfg.frames_dir.empty() && !cfg.labels_dir.empty(), ErrorCode::kBadConfig,
              "frames_dir and labels_dir are required");
      const auto oracle = load_oracle(cfg.oracle);
      const auto frames = load_frames(cfg.frames_dir, cfg.subsampling);
      const auto labels = load_label_planes(cfg.labels_dir);
      require(!frames.empty() && frames.size() == labels.size(), ErrorCode::kEmptyCorpus,
              "need one label file per frame");
      std::vector<LabeledFrame> eval;
      for (std::size_t i = 0; i < frames.size(); ++i) eval.push_back({frames[i], labels[i]});
      const auto gbar = FrequencyGradients::parse(read_file(srch_sfrq));
      const auto grid = upperbound_grid(srch_lo, srch_hi);
      const auto res = search_max_upperbound(*oracle, eval, gbar, srch_target, grid,
                                             srch_metric == "miou" ? AccuracyMetric::kMeanIou
                                                                   : AccuracyMetric::kPixelAccuracy);
      std::printf("B %.6g grid_index %zu evaluations %d\n", res.B, res.index, res.evaluations);
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
