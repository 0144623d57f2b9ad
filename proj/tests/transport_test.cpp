#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <thread>

#include "stac/transport.hpp"
#include "support.hpp"

namespace stac {
namespace {

constexpr double kB = 40.0;

class TransportTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    oracle_ = new ToySegmenter(ToySegmenter::reference());
    frames_ = new std::vector<Frame>(testing::moving_frames(96, 64, 31, 12));
    tables_ = new QuantTableSet(testing::corpus_tables(*oracle_, testing::moving_frames(96, 64, 5, 4), kB));
  }
  static void TearDownTestSuite() {
    delete oracle_;
    delete frames_;
    delete tables_;
  }

  static ToySegmenter* oracle_;
  static std::vector<Frame>* frames_;
  static QuantTableSet* tables_;
};

ToySegmenter* TransportTest::oracle_ = nullptr;
std::vector<Frame>* TransportTest::frames_ = nullptr;
QuantTableSet* TransportTest::tables_ = nullptr;

Plane<std::uint8_t> random_labels(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Plane<std::uint8_t> p(w, h);
  std::uint8_t cls = 0;
  for (auto& v : p.data()) {
    if (rng() % 7 == 0) cls = static_cast<std::uint8_t>(rng() % 4);
    v = cls;
  }
  return p;
}

std::vector<Message> sample_messages() {
  Hello h;
  h.digest = {1, 2, 3, 4, 5, 6, 7, 8};
  h.width = 96;
  h.height = 64;
  h.levels = 16;
  StrategyMap s{3, 2, {1, 16, 4, 8, 2, 9}};
  return {h,
          HelloAck{true, {}},
          HelloAck{false, "digest mismatch"},
          OffloadMsg{7, {0x53, 0x54, 0x41, 0x43, 9, 9}},
          FeedbackMsg{7, random_labels(24, 16, 3), s},
          ErrorMsg{9, ErrorCode::kOracleFailure, "boom"},
          Bye{}};
}

TEST(Wire, RoundTripEveryMessage) {
  for (const auto& m : sample_messages()) {
    const Bytes b = serialize_message(m);
    EXPECT_EQ(b.size(), frame_length(std::span(b).first(kFrameHeaderBytes)));
    const Message back = parse_message(b);
    EXPECT_EQ(back, m) << "tag " << static_cast<int>(tag_of(m));
    EXPECT_EQ(serialize_message(back), b);
  }
}

TEST(Wire, HeaderLayout) {
  const Bytes b = serialize_message(OffloadMsg{0x01020304, {0xaa, 0xbb}});
  const Bytes expect = {'S', 'T', 'W', 'P', 1, 0, 3, 10, 0, 0, 0, 4, 3, 2, 1, 2, 0, 0, 0, 0xaa, 0xbb};
  EXPECT_EQ(b, expect);
  EXPECT_EQ(serialize_message(Bye{}).size(), kFrameHeaderBytes);
}

TEST(Wire, StrategyPayloadIsHalfBytePerRegion) {
  // Five regions pack into three bytes; an all-one-class 1x1 plane costs
  // a run count plus one run.
  FeedbackMsg m{1, Plane<std::uint8_t>(1, 1, 2), StrategyMap{5, 1, {1, 2, 3, 4, 5}}};
  const Bytes b = serialize_message(m);
  const std::size_t body = 4 + 2 + 2 + 1 + 2 + 2 + 2 + 3;
  EXPECT_EQ(b.size(), kFrameHeaderBytes + body);
  const Bytes tail(b.end() - 3, b.end());
  EXPECT_EQ(tail, (Bytes{0x01, 0x23, 0x40}));
}

TEST(Wire, RleIsExact) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const FeedbackMsg m{static_cast<std::uint32_t>(seed), random_labels(40 + seed, 17, seed), StrategyMap{1, 1, {3}}};
    const auto back = std::get<FeedbackMsg>(parse_message(serialize_message(m)));
    EXPECT_EQ(back.labels, m.labels);
  }
  // Long runs need multi-byte varints.
  const FeedbackMsg big{0, Plane<std::uint8_t>(640, 480, 1), StrategyMap{1, 1, {1}}};
  EXPECT_EQ(std::get<FeedbackMsg>(parse_message(serialize_message(big))).labels, big.labels);
}

ErrorCode code_of(const Bytes& b) {
  try {
    parse_message(b);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInvalidArgument;
}

TEST(Wire, Errors) {
  const Bytes good = serialize_message(FeedbackMsg{1, random_labels(8, 8, 1), StrategyMap{1, 1, {2}}});
  Bytes longer = good;
  longer[7] += 5;  // length prefix claims more than is present
  EXPECT_EQ(code_of(longer), ErrorCode::kTruncated);
  EXPECT_EQ(code_of(Bytes(good.begin(), good.begin() + 5)), ErrorCode::kTruncated);
  EXPECT_EQ(code_of(Bytes(good.begin(), good.end() - 1)), ErrorCode::kTruncated);

  Bytes magic = good;
  magic[0] = 'X';
  EXPECT_EQ(code_of(magic), ErrorCode::kProtocolError);
  Bytes version = good;
  version[4] = 9;
  EXPECT_EQ(code_of(version), ErrorCode::kProtocolError);
  Bytes tag = good;
  tag[6] = 42;
  EXPECT_EQ(code_of(tag), ErrorCode::kProtocolError);
  Bytes trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(code_of(trailing), ErrorCode::kProtocolError);

  // Runs that do not cover the plane.
  ByteWriter w;
  w.u32(1);
  w.u16(4);
  w.u16(4);
  w.varint(1);
  w.u8(0);
  w.varint(15);
  w.u16(1);
  w.u16(1);
  w.u8(0);
  ByteWriter f;
  f.magic("STWP");
  f.u16(kWireVersion);
  f.u8(4);
  f.u32(static_cast<std::uint32_t>(w.size()));
  f.bytes(w.buffer());
  EXPECT_EQ(code_of(f.take()), ErrorCode::kProtocolError);

  // Body shorter than its own fields, with a consistent length prefix.
  ByteWriter s;
  s.magic("STWP");
  s.u16(kWireVersion);
  s.u8(3);
  s.u32(2);
  s.u16(0);
  EXPECT_EQ(code_of(s.take()), ErrorCode::kTruncated);
}

TEST(Wire, LoopbackCountsBytes) {
  auto [a, b] = LoopbackLink::pair();
  std::size_t expect = 0;
  for (const auto& m : sample_messages()) {
    expect += a->send(m);
    EXPECT_EQ(b->receive(), m);
  }
  EXPECT_EQ(a->bytes_sent(), expect);
  EXPECT_EQ(b->bytes_received(), expect);
  a->close();
  EXPECT_THROW(b->receive(), Error);
  EXPECT_THROW(b->send(Bye{}), Error);
}

Hello hello_for(const Frame& f, const QuantTableSet& t) {
  return Hello{t.digest(), static_cast<std::uint16_t>(f.width), static_cast<std::uint16_t>(f.height), f.subsampling,
               3, 3, static_cast<std::uint8_t>(t.level_count())};
}

TEST_F(TransportTest, FeedbackEqualsLocalSelection) {
  auto [device, edge] = LoopbackLink::pair();
  SessionStats stats;
  std::thread server([&, link = edge.get()] { stats = serve_session(*link, *oracle_, *tables_, kB); });
  device->send(hello_for((*frames_)[0], *tables_));
  ASSERT_TRUE(std::get<HelloAck>(device->receive()).accepted);

  const RegionGrid grid = RegionGrid::for_frame((*frames_)[0]);
  for (int k : {0, 5}) {
    const Frame& f = (*frames_)[k];
    StrategyMap strat = StrategyMap::uniform(grid, 8);
    for (std::size_t i = 0; i < strat.levels.size(); ++i) strat.levels[i] = 1 + (i * 5 + k) % 16;
    const Bytes bits = encode_frame(f, strat, *tables_, grid);
    device->send(OffloadMsg{f.frame_id, bits});
    const auto fb = std::get<FeedbackMsg>(device->receive());
    EXPECT_EQ(fb.frame_id, f.frame_id);

    // The edge pipeline, spelled out step by step.
    Frame decoded = decode_frame(bits, *tables_).frame;
    const OracleOutput out = oracle_->evaluate(RealFrame::from(decoded), nullptr);
    const CoeffGradientMap gs = pixel_to_coeff_gradients(out.gradient);
    EXPECT_EQ(fb.strategy, select_levels(gs, *tables_, kB, grid));
    EXPECT_EQ(fb.labels, out.prediction.labels);
  }
  device->send(Bye{});
  server.join();
  EXPECT_TRUE(stats.accepted);
  EXPECT_EQ(stats.frames_served, 2);
  EXPECT_EQ(stats.bytes_up, device->bytes_sent());
  EXPECT_EQ(stats.bytes_down, device->bytes_received());
}

TEST_F(TransportTest, MismatchedDigestIsRefused) {
  const QuantTableSet other = testing::corpus_tables(*oracle_, testing::moving_frames(96, 64, 5, 2), kB * 2);
  ASSERT_NE(other.digest(), tables_->digest());
  auto [device, edge] = LoopbackLink::pair();
  SessionStats stats;
  std::thread server([&, link = edge.get()] { stats = serve_session(*link, *oracle_, *tables_, kB); });
  try {
    device_run(*frames_, *device, other, DeviceConfig{});
    ADD_FAILURE() << "expected DigestMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDigestMismatch);
  }
  device->close();
  server.join();
  EXPECT_FALSE(stats.accepted);
  EXPECT_EQ(stats.frames_served, 0);
}

TEST_F(TransportTest, StaticSequenceAccounting) {
  std::vector<Frame> frames;
  for (int t = 1; t <= 10; ++t) {
    Frame f = (*frames_)[0];
    f.frame_id = t;
    frames.push_back(f);
  }
  DeviceConfig cfg;
  cfg.fps = 10.0;
  auto [report, stats] = run_loopback(frames, *oracle_, *tables_, kB, cfg);
  ASSERT_FALSE(report.link_lost);
  EXPECT_EQ(report.offloads, 1);
  ASSERT_EQ(report.frames.size(), 10u);
  EXPECT_TRUE(report.frames[0].is_keyframe);

  const RegionGrid grid = RegionGrid::for_frame(frames[0]);
  const std::size_t keyframe_bytes =
      kFrameHeaderBytes + 8 + encode_frame(frames[0], StrategyMap::uniform(grid, 8), *tables_, grid).size();
  EXPECT_EQ(report.uplink_bytes, keyframe_bytes);
  EXPECT_EQ(report.frames[0].uplink_bytes, keyframe_bytes);
  EXPECT_DOUBLE_EQ(report.uplink_kbps(), keyframe_bytes * 8.0 / 1000.0 / 1.0);
  EXPECT_DOUBLE_EQ(report.offloads_per_second(), 1.0);
  EXPECT_DOUBLE_EQ(report.frames[9].cumulative_kbps, report.uplink_kbps());

  const std::size_t hello = serialize_message(hello_for(frames[0], *tables_)).size();
  EXPECT_EQ(report.bytes_sent, hello + keyframe_bytes + kFrameHeaderBytes);
  EXPECT_EQ(stats.bytes_up, report.bytes_sent);
  EXPECT_EQ(stats.bytes_down, report.bytes_received);
  for (const auto& r : report.frames) {
    ASSERT_TRUE(r.segmentation.has_value());
    EXPECT_EQ(r.segmentation->width(), frames[0].padded_width());
  }
}

TEST_F(TransportTest, PerFrameModeOffloadsAtNominalRate) {
  DeviceConfig cfg;
  cfg.mode = RunMode::kPerFrame;
  cfg.fps = 15.0;
  auto [report, stats] = run_loopback(*frames_, *oracle_, *tables_, kB, cfg);
  EXPECT_EQ(report.offloads, static_cast<int>(frames_->size()));
  EXPECT_DOUBLE_EQ(report.offloads_per_second(), cfg.fps);
  EXPECT_EQ(stats.frames_served, report.offloads);
  std::uint64_t sum = 0;
  for (const auto& r : report.frames) sum += r.uplink_bytes;
  EXPECT_EQ(sum, report.uplink_bytes);
}

TEST_F(TransportTest, UniformModeEncodesOneLevel) {
  DeviceConfig cfg;
  cfg.mode = RunMode::kUniform;
  cfg.uniform_level = 5;
  cfg.temporal.threshold = 40.0;
  auto [report, stats] = run_loopback(*frames_, *oracle_, *tables_, kB, cfg);
  EXPECT_GT(report.offloads, 1);
  const RegionGrid grid = RegionGrid::for_frame((*frames_)[0]);
  for (const auto& r : report.frames)
    if (r.is_keyframe) {
      ASSERT_TRUE(r.strategy.has_value());
      EXPECT_EQ(*r.strategy, StrategyMap::uniform(grid, 5));
    }
}

TEST_F(TransportTest, LoopbackIsDeterministic) {
  DeviceConfig cfg;
  cfg.temporal.threshold = 35.0;
  const auto a = run_loopback(*frames_, *oracle_, *tables_, kB, cfg).first;
  const auto b = run_loopback(*frames_, *oracle_, *tables_, kB, cfg).first;
  ASSERT_EQ(a.frames.size(), b.frames.size());
  EXPECT_EQ(a.uplink_bytes, b.uplink_bytes);
  EXPECT_EQ(a.bytes_received, b.bytes_received);
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    EXPECT_EQ(a.frames[i].is_keyframe, b.frames[i].is_keyframe);
    EXPECT_EQ(a.frames[i].uplink_bytes, b.frames[i].uplink_bytes);
    EXPECT_EQ(a.frames[i].segmentation, b.frames[i].segmentation);
  }
}

TEST_F(TransportTest, FeedbackLagLeavesEarlyFramesUnsegmented) {
  DeviceConfig cfg;
  cfg.feedback_lag = 2;
  auto [report, stats] = run_loopback(*frames_, *oracle_, *tables_, kB, cfg);
  ASSERT_FALSE(report.link_lost);
  EXPECT_FALSE(report.frames[0].segmentation.has_value());
  EXPECT_FALSE(report.frames[1].segmentation.has_value());
  EXPECT_TRUE(std::isnan(report.frames[1].psnr));
  for (std::size_t i = 3; i < report.frames.size(); ++i) EXPECT_TRUE(report.frames[i].segmentation.has_value());
  EXPECT_EQ(stats.frames_served, report.offloads);
}

class FailingOracle : public SensitivityOracle {
 public:
  int class_count() const override { return 3; }
  OracleOutput evaluate(const RealFrame&, const Plane<std::uint8_t>*) const override {
    throw std::runtime_error("model crashed");
  }
  double loss(const RealFrame&, const Plane<std::uint8_t>&) const override { return 0.0; }
};

TEST_F(TransportTest, OracleFailureKeepsSession) {
  const FailingOracle bad;
  DeviceConfig cfg;
  cfg.mode = RunMode::kPerFrame;
  const std::vector<Frame> few(frames_->begin(), frames_->begin() + 3);
  auto [report, stats] = run_loopback(few, bad, *tables_, kB, cfg);
  // The first keyframe never gets feedback, so later frames cannot step.
  EXPECT_FALSE(report.link_lost);
  EXPECT_EQ(report.edge_errors, 1);
  EXPECT_EQ(stats.errors, 1);
  EXPECT_EQ(stats.frames_served, 0);
}

TEST_F(TransportTest, LinkLossReportsPartialRun) {
  auto [device, edge] = LoopbackLink::pair();
  std::thread server([&, link = edge.get()] {
    // Serve the handshake and one keyframe, then drop the link.
    EdgeSession s(*oracle_, *tables_, kB);
    link->send(s.accept(std::get<Hello>(link->receive())));
    link->send(s.handle(std::get<OffloadMsg>(link->receive())));
    link->close();
  });
  DeviceConfig cfg;
  cfg.mode = RunMode::kPerFrame;
  const RunReport report = device_run(*frames_, *device, *tables_, cfg);
  server.join();
  EXPECT_TRUE(report.link_lost);
  EXPECT_FALSE(report.error.empty());
  EXPECT_GE(report.frames.size(), 1u);
  EXPECT_LT(report.frames.size(), frames_->size());
}

TEST_F(TransportTest, TcpMatchesLoopback) {
  TcpListener listener(0);
  SessionStats served;
  std::thread server([&] { served = edge_serve(listener, *oracle_, *tables_, kB, 1); });
  DeviceConfig cfg;
  cfg.temporal.threshold = 35.0;
  auto link = TcpLink::connect("127.0.0.1", listener.port());
  const RunReport tcp = device_run(*frames_, *link, *tables_, cfg);
  link->close();
  server.join();
  const RunReport loop = run_loopback(*frames_, *oracle_, *tables_, kB, cfg).first;
  ASSERT_FALSE(tcp.link_lost);
  EXPECT_EQ(tcp.bytes_sent, loop.bytes_sent);
  EXPECT_EQ(tcp.bytes_received, loop.bytes_received);
  EXPECT_EQ(tcp.offloads, loop.offloads);
  EXPECT_EQ(served.bytes_up, tcp.bytes_sent);
  EXPECT_EQ(served.frames_served, tcp.offloads);
}

}  // namespace
}  // namespace stac
