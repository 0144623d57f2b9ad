#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "stac/stac.hpp"

namespace stac {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string out;
};

Result sh(const std::string& args) {
  const std::string cmd = std::string(STAC_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("stac_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// Sequence + gradients + 16-level tables at B.
  void prepare(int n, int w, int h, double B, std::uint64_t seed = 9) {
    ASSERT_EQ(sh("--seed " + std::to_string(seed) + " gen-sequence -o " + path("frames") + " --labels " +
                 path("labels") + " -n " + std::to_string(n) + " --width " + std::to_string(w) + " --height " +
                 std::to_string(h))
                  .code,
              0);
    ASSERT_EQ(sh("export-gradients --frames_dir " + path("frames") + " -o " + path("grads")).code, 0);
    ASSERT_EQ(sh("gen-tables -g " + path("grads") + " -o " + path("t.stbl") + " --B " + std::to_string(B)).code, 0);
  }

  fs::path dir_;
};

const std::string kFixtures = STAC_FIXTURE_DIR;

TEST(RunConfig, DefaultsAndParsing) {
  const RunConfig d;
  EXPECT_EQ(d.L, 16);
  EXPECT_EQ(d.region_w, 3);
  EXPECT_EQ(d.region_h, 3);
  EXPECT_DOUBLE_EQ(d.thr, 26.0);
  EXPECT_EQ(d.mode, RunMode::kStac);

  const RunConfig c = RunConfig::parse_string(
      "# comment\n"
      "frames_dir = /data/f   # trailing comment\n"
      "B=250.5\n"
      "  L = 8\n"
      "thr = inf\n"
      "region = 4x2\n"
      "subsampling = 444\n"
      "mode = uniform:3\n"
      "fps = 12.5\n"
      "feedback_lag = 2\n"
      "edge = 10.0.0.1:9000\n"
      "seed = 77\n");
  EXPECT_EQ(c.frames_dir, "/data/f");
  EXPECT_DOUBLE_EQ(c.B, 250.5);
  EXPECT_EQ(c.L, 8);
  EXPECT_TRUE(std::isinf(c.thr));
  EXPECT_EQ(c.region_w, 4);
  EXPECT_EQ(c.region_h, 2);
  EXPECT_EQ(c.subsampling, Subsampling::k444);
  EXPECT_EQ(c.mode, RunMode::kUniform);
  EXPECT_EQ(c.uniform_level, 3);
  EXPECT_DOUBLE_EQ(c.fps, 12.5);
  EXPECT_EQ(c.feedback_lag, 2);
  EXPECT_EQ(c.seed, 77u);
  const DeviceConfig dc = c.device();
  EXPECT_EQ(dc.region_w, 4);
  EXPECT_EQ(dc.uniform_level, 3);
  EXPECT_EQ(RunConfig::parse_string("mode = per-frame").mode, RunMode::kPerFrame);
}

TEST(RunConfig, Rejections) {
  for (const char* bad : {"colour = red", "B = -1", "B = abc", "L = 17", "L = 0", "region = 3", "region = 0x3",
                          "mode = grace", "mode = uniform:0", "subsampling = 422", "fps = 0", "feedback_lag = -1",
                          "just a line", "thr = nan", "seed = -3"}) {
    try {
      RunConfig::parse_string(bad);
      ADD_FAILURE() << "accepted: " << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kBadConfig) << bad;
    }
  }
}

TEST(Pipeline, EndpointParsing) {
  EXPECT_EQ(parse_endpoint("localhost:7000"), (std::pair<std::string, int>{"localhost", 7000}));
  EXPECT_THROW(parse_endpoint("localhost"), Error);
  EXPECT_THROW(parse_endpoint(":80"), Error);
  EXPECT_THROW(parse_endpoint("h:70000"), Error);
}

TEST_F(CliTest, PgmRoundTripAndFileOrder) {
  Plane<std::uint8_t> lab(13, 7);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 13; ++x) lab(x, y) = static_cast<std::uint8_t>((x * 7 + y * 3) % 5);
  fs::create_directories(path("l"));
  // Written out of order; ingest sorts by name.
  for (const char* n : {"b.pgm", "a.pgm", "c.pgm"}) write_pgm(path("l/") + n, lab);
  std::ofstream(path("l/notes.txt")) << "ignored";
  const auto files = list_files(path("l"), {".pgm"});
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[0].filename(), "a.pgm");
  EXPECT_EQ(files[2].filename(), "c.pgm");
  const auto planes = load_label_planes(path("l"));
  ASSERT_EQ(planes.size(), 3u);
  EXPECT_EQ(planes[1], lab);

  // Cropped write of a padded plane keeps the visible window.
  Plane<std::uint8_t> padded(16, 8, 9);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 13; ++x) padded(x, y) = lab(x, y);
  write_pgm(path("crop.pgm"), padded, 13, 7);
  EXPECT_EQ(read_pnm(path("crop.pgm")).r, lab);

  fs::create_directories(path("rgb"));
  write_frame(path("rgb/x.pgm"), synthetic::textured_frame(16, 16, 1));  // P6 bytes under a .pgm name
  EXPECT_THROW(load_label_planes(path("rgb")), Error);
  EXPECT_THROW(list_files(path("missing"), {".pgm"}), Error);
}

TEST_F(CliTest, GenTablesMatchesGoldenFile) {
  const auto r = sh("gen-tables -g " + kFixtures + "/sgrd -o " + path("t.stbl") + " --B 100");
  ASSERT_EQ(r.code, 0);
  const Bytes golden = read_file(kFixtures + "/golden_tables.stbl");
  EXPECT_EQ(read_file(path("t.stbl")), golden);
  const auto tables = QuantTableSet::parse(golden);
  EXPECT_NE(r.out.find("digest " + hex(tables.digest())), std::string::npos);
  EXPECT_EQ(tables.level_count(), 16);

  // Same ladder through the library.
  const auto maps = load_gradient_corpus(kFixtures + "/sgrd");
  EXPECT_EQ(tables_from_corpus(maps, 100, 16), tables);
  // One mean-step row per level.
  int rows = 0;
  std::istringstream lines(r.out);
  for (std::string l; std::getline(lines, l);) rows += !l.empty() && std::isdigit(static_cast<unsigned char>(l[4]));
  EXPECT_EQ(rows, 16);
}

TEST_F(CliTest, GenTablesZeroCorpusAndSingleLevel) {
  fs::create_directories(path("zero"));
  const auto src = parse_sgrd(read_file(kFixtures + "/sgrd/grad_0000.sgrd"));
  SgrdFile z = src;
  for (auto& p : z.planes) std::fill(p.data().begin(), p.data().end(), 0.0);
  write_file(path("zero/a.sgrd"), serialize_sgrd(z));
  ASSERT_EQ(sh("gen-tables -g " + path("zero") + " -o " + path("z.stbl") + " --B 5").code, 0);
  const auto zt = QuantTableSet::parse(read_file(path("z.stbl")));
  for (int l = 0; l < zt.level_count(); ++l)
    for (int c = 0; c < 2; ++c)
      for (auto q : zt.table(static_cast<PlaneClass>(c), l + 1).steps) ASSERT_EQ(q, 255);

  ASSERT_EQ(sh("gen-tables -g " + kFixtures + "/sgrd -o " + path("one.stbl") + " --B 100 --L 1").code, 0);
  const auto one = QuantTableSet::parse(read_file(path("one.stbl")));
  EXPECT_EQ(one.level_count(), 1);
  ASSERT_EQ(one.upperbounds().size(), 1u);
  EXPECT_DOUBLE_EQ(one.upperbounds()[0], 100.0);
}

TEST_F(CliTest, ExitCodes) {
  std::ofstream(path("bad.cfg")) << "B = 10\nsharpness = 3\n";
  EXPECT_EQ(sh("gen-tables -c " + path("bad.cfg") + " -g " + kFixtures + "/sgrd -o " + path("x.stbl")).code, 2);
  EXPECT_EQ(sh("gen-tables -g " + kFixtures + "/sgrd -o " + path("x.stbl") + " --B -4").code, 2);
  EXPECT_EQ(sh("gen-tables --no-such-flag").code, 2);
  fs::create_directories(path("empty"));
  EXPECT_EQ(sh("gen-tables -g " + path("empty") + " -o " + path("x.stbl")).code, 3);
  EXPECT_EQ(sh("verify-theorem -M 8 -r 3").code, 2);
  EXPECT_FALSE(fs::exists(path("x.stbl")));

  // Nothing listens on the port a just-closed listener held.
  int dead_port;
  {
    TcpListener l(0);
    dead_port = l.port();
  }
  ASSERT_EQ(sh("gen-sequence -o " + path("f") + " -n 2 --width 32 --height 32").code, 0);
  EXPECT_EQ(sh("run --frames_dir " + path("f") + " --tables " + kFixtures + "/golden_tables.stbl --edge 127.0.0.1:" +
               std::to_string(dead_port))
                .code,
            4);
}

TEST_F(CliTest, VerifyTheorem) {
  auto r = sh("verify-theorem -M 2 -r 2 -s 20000");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("closed_form 0.666667"), std::string::npos) << r.out;
  r = sh("verify-theorem -M 4 -r 1 -s 1000");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("closed_form 1.000000"), std::string::npos) << r.out;
  r = sh("--seed 5 verify-theorem -M 8 -r 4 -s 200000");
  EXPECT_EQ(r.code, 0);
  double gap = 1;
  std::sscanf(r.out.substr(r.out.find("relative_gap")).c_str(), "relative_gap %lf", &gap);
  EXPECT_LT(gap, 0.05);
  EXPECT_EQ(sh("--seed 5 verify-theorem -M 8 -r 4 -s 200000").out, r.out);
}

TEST_F(CliTest, StaticSequenceHasOneKeyframeRow) {
  prepare(1, 64, 48, 50);
  // Eight copies of one frame.
  fs::create_directories(path("still"));
  for (int i = 0; i < 8; ++i)
    fs::copy_file(path("frames/frame_0000.ppm"), path("still/s" + std::to_string(i) + ".ppm"));
  ASSERT_EQ(sh("run --frames_dir " + path("still") + " --tables " + path("t.stbl") + " --B 50 --csv " + path("r.csv"))
                .code,
            0);
  const auto rows = read_csv(path("r.csv"));
  ASSERT_EQ(rows.size(), 9u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"frame_id", "is_keyframe", "psnr", "uplink_bytes", "cumulative_kbps"}));
  int keys = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) keys += rows[i][1] == "1";
  EXPECT_EQ(keys, 1);
  EXPECT_EQ(rows[1][1], "1");
  std::ifstream in(path("r.csv"));
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, std::string("# schema ") + kRunCsvSchema);
}

TEST_F(CliTest, PredictionsAsLabelsGiveUnitMiou) {
  prepare(6, 64, 48, 50);
  const std::string base = "run --frames_dir " + path("frames") + " --tables " + path("t.stbl") + " --B 50";
  ASSERT_EQ(sh(base + " --output_dir " + path("seg") + " --csv " + path("a.csv")).code, 0);
  int pgms = 0;
  for (const auto& e : fs::directory_iterator(path("seg"))) {
    const auto img = read_pnm(e.path().string());
    EXPECT_EQ(img.r.width(), 64);
    EXPECT_EQ(img.r.height(), 48);
    ++pgms;
  }
  ASSERT_EQ(pgms, 6);
  ASSERT_EQ(sh(base + " --labels_dir " + path("seg") + " --csv " + path("b.csv")).code, 0);
  const auto rows = read_csv(path("b.csv"));
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0].back(), "miou");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].back(), "1.0000");
  // The true labels score lower but sensibly.
  ASSERT_EQ(sh(base + " --labels_dir " + path("labels") + " --csv " + path("c.csv")).code, 0);
  const auto truth = read_csv(path("c.csv"));
  ASSERT_EQ(truth.size(), 7u);
  for (std::size_t i = 1; i < truth.size(); ++i) EXPECT_GT(std::stod(truth[i].back()), 0.5);
}

TEST_F(CliTest, RunIsDeterministicAndMatchesTcpEdge) {
  prepare(8, 64, 48, 50);
  std::ofstream(path("run.cfg")) << "frames_dir = " << path("frames") << "\ntables = " << path("t.stbl")
                                 << "\nB = 50\nthr = 30\n";
  ASSERT_EQ(sh("run -c " + path("run.cfg") + " --csv " + path("a.csv")).code, 0);
  ASSERT_EQ(sh("run -c " + path("run.cfg") + " --csv " + path("b.csv")).code, 0);
  EXPECT_EQ(read_file(path("a.csv")), read_file(path("b.csv")));

  std::thread server([&] {
    sh("serve --tables " + path("t.stbl") + " --B 50 --max-sessions 1 --port-file " + path("port"));
  });
  std::string port;
  for (int i = 0; i < 200 && port.empty(); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    std::ifstream(path("port")) >> port;
  }
  ASSERT_FALSE(port.empty());
  const int rc = sh("run -c " + path("run.cfg") + " --edge 127.0.0.1:" + port + " --csv " + path("tcp.csv")).code;
  server.join();
  ASSERT_EQ(rc, 0);
  EXPECT_EQ(read_file(path("tcp.csv")), read_file(path("a.csv")));
}

TEST_F(CliTest, StacUplinkNotAboveUniformOnMovingShapes) {
  // Tables from every third frame of a training sequence; the uniform
  // baseline is the single table T(B) from the same averages.
  ASSERT_EQ(sh("--seed 7 gen-sequence -o " + path("train") + " -n 60").code, 0);
  fs::create_directories(path("sub"));
  int i = 0;
  for (const auto& p : list_files(path("train"), {".ppm"}))
    if (i++ % 3 == 0) fs::copy_file(p, path("sub") + "/" + p.filename().string());
  ASSERT_EQ(sh("export-gradients --frames_dir " + path("sub") + " -o " + path("g")).code, 0);
  const std::string B = "1778.28";
  ASSERT_EQ(sh("gen-tables -g " + path("g") + " -o " + path("stac.stbl") + " --B " + B).code, 0);
  ASSERT_EQ(sh("gen-tables -g " + path("g") + " -o " + path("one.stbl") + " --B " + B + " --L 1").code, 0);
  ASSERT_EQ(sh("--seed 2024 gen-sequence -o " + path("test") + " -n 60").code, 0);
  const std::string base = "run --frames_dir " + path("test") + " --B " + B;
  ASSERT_EQ(sh(base + " --tables " + path("stac.stbl") + " --csv " + path("s.csv")).code, 0);
  ASSERT_EQ(sh(base + " --tables " + path("one.stbl") + " --mode uniform:1 --csv " + path("u.csv")).code, 0);
  const double stac = std::stod(read_csv(path("s.csv")).back()[4]);
  const double uniform = std::stod(read_csv(path("u.csv")).back()[4]);
  EXPECT_LE(stac, uniform);
  std::printf("cumulative kbps: stac %.1f uniform %.1f\n", stac, uniform);
}

TEST_F(CliTest, CodecCommands) {
  ASSERT_EQ(sh("gen-sequence -o " + path("f") + " -n 1 --width 48 --height 32").code, 0);
  const std::string frame = path("f/frame_0000.ppm"), tables = kFixtures + "/golden_tables.stbl";
  const auto r = sh("encode -i " + frame + " -t " + tables + " -l 5 -o " + path("x.stac"));
  ASSERT_EQ(r.code, 0);
  const Bytes bits = read_file(path("x.stac"));
  const auto t = QuantTableSet::parse(read_file(tables));
  const Frame f = read_frame(frame, Subsampling::k420, 1);
  EXPECT_EQ(bits, encode_single_table(f, t, 5, RegionGrid::for_frame(f)));
  EXPECT_NE(r.out.find(hex(stream_digest(bits))), std::string::npos);

  ASSERT_EQ(sh("decode -i " + path("x.stac") + " -t " + tables + " -o " + path("x.ppm")).code, 0);
  const Frame back = read_frame(path("x.ppm"), Subsampling::k420);
  EXPECT_EQ(back.width, 48);
  EXPECT_GT(psnr(back, decode_frame(bits, t).frame), 35.0);

  ASSERT_EQ(sh("export-jpeg -i " + frame + " -t " + tables + " -l 5 -o " + path("x.jpg")).code, 0);
  const Bytes jpg = read_file(path("x.jpg"));
  ASSERT_GT(jpg.size(), 4u);
  EXPECT_EQ(jpg[0], 0xFF);
  EXPECT_EQ(jpg[1], 0xD8);
  EXPECT_EQ(jpg[jpg.size() - 1], 0xD9);
}

TEST_F(CliTest, ExportedFilesParse) {
  ASSERT_EQ(sh("toyseg-weights -o " + path("w.txt")).code, 0);
  const auto w = ToySegmenter::load(path("w.txt"));
  EXPECT_EQ(w.weights(), ToySegmenter::reference().weights());

  ASSERT_EQ(sh("gen-sequence -o " + path("f") + " -n 2 --width 32 --height 32").code, 0);
  ASSERT_EQ(sh("export-gradients --frames_dir " + path("f") + " --oracle " + path("w.txt") + " --kind coeff -o " +
               path("g") + " --sfrq " + path("avg.sfrq"))
                .code,
            0);
  const auto maps = load_gradient_corpus(path("g"));
  ASSERT_EQ(maps.size(), 2u);
  const auto avg = FrequencyGradients::parse(read_file(path("avg.sfrq")));
  const auto expect = average_frequency_gradients(maps);
  for (int c = 0; c < 2; ++c)
    for (int n = 0; n < 64; ++n) EXPECT_NEAR(avg.mean[c][n], expect.mean[c][n], 1e-6 * (1 + expect.mean[c][n]));
  EXPECT_EQ(parse_sgrd(read_file(path("g/grad_0000.sgrd"))).kind, GradientKind::kCoeff);
}

TEST_F(CliTest, SearchUpperbound) {
  ASSERT_EQ(sh("--seed 4 gen-sequence -o " + path("f") + " --labels " + path("l") + " -n 2 --width 48 --height 32").code,
            0);
  ASSERT_EQ(sh("export-gradients --frames_dir " + path("f") + " -o " + path("g") + " --sfrq " + path("a.sfrq")).code, 0);
  const auto r = sh("search-upperbound --frames_dir " + path("f") + " --labels_dir " + path("l") + " --sfrq " +
                    path("a.sfrq") + " --target 0.5 --lo 1 --hi 100");
  ASSERT_EQ(r.code, 0);
  double B = 0;
  ASSERT_EQ(std::sscanf(r.out.c_str(), "B %lf", &B), 1);
  EXPECT_GE(B, 1.0);
  EXPECT_LE(B, 100.0 * (1 + 1e-9));
}

}  // namespace
}  // namespace stac
