#pragma once

// Wire protocol, reference edge server and device client.
//
// Every message travels as one frame (little-endian):
//   magic "STWP" 4 | version u16 | tag u8 | body_length u32 | body
//
// Bodies by tag:
//   1 Hello     digest 8 | width u16 | height u16 | subsampling u8 |
//               region_w u8 | region_h u8 | levels u8
//   2 HelloAck  accepted u8 | reason_length varint | reason bytes
//   3 Offload   frame_id u32 | bitstream_length u32 | STAC container
//   4 Feedback  frame_id u32 | width u16 | height u16 | run_count varint |
//               run_count x (class u8, run_length varint) |
//               regions_x u16 | regions_y u16 | ceil(r/2) packed levels
//   5 Error     frame_id u32 | code u8 | message_length varint | message bytes
//   6 Bye       empty

#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>

#include "stac/codec.hpp"
#include "stac/sensitivity.hpp"
#include "stac/strategy.hpp"
#include "stac/temporal.hpp"

namespace stac {

inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 4 + 2 + 1 + 4;
inline constexpr std::uint32_t kMaxBodyBytes = 64u << 20;

enum class MessageTag : std::uint8_t { kHello = 1, kHelloAck = 2, kOffload = 3, kFeedback = 4, kError = 5, kBye = 6 };

struct Hello {
  Digest digest{};
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  Subsampling subsampling = Subsampling::k420;
  std::uint8_t region_w = kDefaultRegionBlocks;
  std::uint8_t region_h = kDefaultRegionBlocks;
  std::uint8_t levels = 0;
  friend bool operator==(const Hello&, const Hello&) = default;
};

struct HelloAck {
  bool accepted = false;
  std::string reason;
  friend bool operator==(const HelloAck&, const HelloAck&) = default;
};

struct OffloadMsg {
  std::uint32_t frame_id = 0;
  Bytes bitstream;
  friend bool operator==(const OffloadMsg&, const OffloadMsg&) = default;
};

struct FeedbackMsg {
  std::uint32_t frame_id = 0;
  Plane<std::uint8_t> labels;
  StrategyMap strategy;
  friend bool operator==(const FeedbackMsg&, const FeedbackMsg&) = default;
};

struct ErrorMsg {
  std::uint32_t frame_id = 0;
  ErrorCode code = ErrorCode::kProtocolError;
  std::string message;
  friend bool operator==(const ErrorMsg&, const ErrorMsg&) = default;
};

struct Bye {
  friend bool operator==(const Bye&, const Bye&) = default;
};

using Message = std::variant<Hello, HelloAck, OffloadMsg, FeedbackMsg, ErrorMsg, Bye>;

inline MessageTag tag_of(const Message& m) { return static_cast<MessageTag>(m.index() + 1); }

namespace detail {

inline void put_string(ByteWriter& w, const std::string& s) {
  w.varint(s.size());
  w.bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

inline std::string get_string(ByteReader& r) {
  const auto n = r.varint();
  require(n <= kMaxBodyBytes, ErrorCode::kProtocolError, "string length out of range");
  auto b = r.bytes(static_cast<std::size_t>(n));
  return {b.begin(), b.end()};
}

inline void put_rle(ByteWriter& w, const Plane<std::uint8_t>& labels) {
  std::vector<std::pair<std::uint8_t, std::uint64_t>> runs;
  for (auto v : labels.data()) {
    if (!runs.empty() && runs.back().first == v)
      ++runs.back().second;
    else
      runs.emplace_back(v, 1);
  }
  w.varint(runs.size());
  for (const auto& [cls, len] : runs) {
    w.u8(cls);
    w.varint(len);
  }
}

inline Plane<std::uint8_t> get_rle(ByteReader& r, int width, int height) {
  Plane<std::uint8_t> out(width, height);
  const std::uint64_t total = static_cast<std::uint64_t>(width) * height;
  const std::uint64_t count = r.varint();
  require(count <= total, ErrorCode::kProtocolError, "more runs than pixels");
  std::uint64_t pos = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint8_t cls = r.u8();
    const std::uint64_t len = r.varint();
    require(len > 0 && len <= total - pos, ErrorCode::kProtocolError, "run overflows the label plane");
    std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(pos), len, cls);
    pos += len;
  }
  require(pos == total, ErrorCode::kProtocolError, "runs do not cover the label plane");
  return out;
}

inline void put_body(ByteWriter& w, const Hello& m) {
  w.bytes(m.digest);
  w.u16(m.width);
  w.u16(m.height);
  w.u8(m.subsampling == Subsampling::k420 ? 0 : 1);
  w.u8(m.region_w);
  w.u8(m.region_h);
  w.u8(m.levels);
}
inline void put_body(ByteWriter& w, const HelloAck& m) {
  w.u8(m.accepted ? 1 : 0);
  put_string(w, m.reason);
}
inline void put_body(ByteWriter& w, const OffloadMsg& m) {
  w.u32(m.frame_id);
  w.u32(static_cast<std::uint32_t>(m.bitstream.size()));
  w.bytes(m.bitstream);
}
inline void put_body(ByteWriter& w, const FeedbackMsg& m) {
  require(m.labels.width() <= 0xffff && m.labels.height() <= 0xffff, ErrorCode::kInvalidArgument, "label plane too large");
  w.u32(m.frame_id);
  w.u16(static_cast<std::uint16_t>(m.labels.width()));
  w.u16(static_cast<std::uint16_t>(m.labels.height()));
  put_rle(w, m.labels);
  w.u16(static_cast<std::uint16_t>(m.strategy.regions_x));
  w.u16(static_cast<std::uint16_t>(m.strategy.regions_y));
  w.bytes(m.strategy.pack());
}
inline void put_body(ByteWriter& w, const ErrorMsg& m) {
  w.u32(m.frame_id);
  w.u8(static_cast<std::uint8_t>(m.code));
  put_string(w, m.message);
}
inline void put_body(ByteWriter&, const Bye&) {}

inline Message get_body(MessageTag tag, ByteReader& r) {
  switch (tag) {
    case MessageTag::kHello: {
      Hello m;
      auto d = r.bytes(m.digest.size());
      std::copy(d.begin(), d.end(), m.digest.begin());
      m.width = r.u16();
      m.height = r.u16();
      const auto ss = r.u8();
      require(ss <= 1, ErrorCode::kProtocolError, "bad subsampling");
      m.subsampling = ss == 0 ? Subsampling::k420 : Subsampling::k444;
      m.region_w = r.u8();
      m.region_h = r.u8();
      m.levels = r.u8();
      return m;
    }
    case MessageTag::kHelloAck: {
      HelloAck m;
      m.accepted = r.u8() != 0;
      m.reason = get_string(r);
      return m;
    }
    case MessageTag::kOffload: {
      OffloadMsg m;
      m.frame_id = r.u32();
      auto b = r.bytes(r.u32());
      m.bitstream.assign(b.begin(), b.end());
      return m;
    }
    case MessageTag::kFeedback: {
      FeedbackMsg m;
      m.frame_id = r.u32();
      const int w = r.u16(), h = r.u16();
      m.labels = get_rle(r, w, h);
      const int rx = r.u16(), ry = r.u16();
      m.strategy = StrategyMap::unpack(rx, ry, r.bytes((static_cast<std::size_t>(rx) * ry + 1) / 2));
      return m;
    }
    case MessageTag::kError: {
      ErrorMsg m;
      m.frame_id = r.u32();
      const auto code = r.u8();
      require(code <= static_cast<std::uint8_t>(ErrorCode::kBadConfig), ErrorCode::kProtocolError, "unknown error code");
      m.code = static_cast<ErrorCode>(code);
      m.message = get_string(r);
      return m;
    }
    case MessageTag::kBye:
      return Bye{};
  }
  fail(ErrorCode::kProtocolError, "unknown message tag " + std::to_string(static_cast<int>(tag)));
}

}  // namespace detail

inline Bytes serialize_message(const Message& m) {
  ByteWriter body;
  std::visit([&](const auto& v) { detail::put_body(body, v); }, m);
  require(body.size() <= kMaxBodyBytes, ErrorCode::kInvalidArgument, "message body too large");
  ByteWriter w;
  w.magic("STWP");
  w.u16(kWireVersion);
  w.u8(static_cast<std::uint8_t>(tag_of(m)));
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.bytes(body.buffer());
  return w.take();
}

/// Total frame length announced by a header; validates magic, version and tag.
inline std::size_t frame_length(std::span<const std::uint8_t> header) {
  ByteReader r(header, ErrorCode::kTruncated);
  if (!r.magic("STWP")) fail(ErrorCode::kProtocolError, "bad frame magic");
  const auto version = r.u16();
  require(version == kWireVersion, ErrorCode::kProtocolError, "unsupported wire version " + std::to_string(version));
  const auto tag = r.u8();
  require(tag >= 1 && tag <= 6, ErrorCode::kProtocolError, "unknown message tag " + std::to_string(tag));
  const auto len = r.u32();
  require(len <= kMaxBodyBytes, ErrorCode::kProtocolError, "body length out of range");
  return kFrameHeaderBytes + len;
}

/// Parses exactly one frame.
inline Message parse_message(std::span<const std::uint8_t> frame) {
  const std::size_t total = frame_length(frame.first(std::min(frame.size(), kFrameHeaderBytes)));
  require(frame.size() >= total, ErrorCode::kTruncated, "frame shorter than its length prefix");
  require(frame.size() == total, ErrorCode::kProtocolError, "trailing bytes after frame");
  const auto tag = static_cast<MessageTag>(frame[6]);
  ByteReader body(frame.subspan(kFrameHeaderBytes), ErrorCode::kTruncated);
  Message m = detail::get_body(tag, body);
  require(body.remaining() == 0, ErrorCode::kProtocolError, "unparsed bytes in message body");
  return m;
}

// ---- Links ----

/// Bidirectional message channel with exact byte accounting.
class Link {
 public:
  virtual ~Link() = default;

  /// Returns the number of bytes put on the wire.
  std::size_t send(const Message& m) {
    const Bytes b = serialize_message(m);
    write_frame(b);
    bytes_sent_ += b.size();
    ++messages_sent_;
    return b.size();
  }

  Message receive() { return receive_sized().first; }

  std::pair<Message, std::size_t> receive_sized() {
    const Bytes b = read_frame();
    bytes_received_ += b.size();
    ++messages_received_;
    return {parse_message(b), b.size()};
  }

  virtual void close() = 0;

  std::uint64_t bytes_sent() const { return bytes_sent_; }
  std::uint64_t bytes_received() const { return bytes_received_; }
  std::uint64_t messages_sent() const { return messages_sent_; }
  std::uint64_t messages_received() const { return messages_received_; }

 protected:
  virtual void write_frame(std::span<const std::uint8_t> frame) = 0;
  /// One whole frame; LinkLost when the peer is gone.
  virtual Bytes read_frame() = 0;

 private:
  std::uint64_t bytes_sent_ = 0;
  std::uint64_t bytes_received_ = 0;
  std::uint64_t messages_sent_ = 0;
  std::uint64_t messages_received_ = 0;
};

/// In-process pair of links joined by two queues.
class LoopbackLink : public Link {
 public:
  static std::pair<std::unique_ptr<LoopbackLink>, std::unique_ptr<LoopbackLink>> pair() {
    auto a = std::make_shared<Pipe>(), b = std::make_shared<Pipe>();
    return {std::unique_ptr<LoopbackLink>(new LoopbackLink(a, b)), std::unique_ptr<LoopbackLink>(new LoopbackLink(b, a))};
  }

  ~LoopbackLink() override { close(); }

  void close() override {
    for (auto* p : {in_.get(), out_.get()}) {
      std::lock_guard lock(p->mu);
      p->closed = true;
      p->cv.notify_all();
    }
  }

 protected:
  void write_frame(std::span<const std::uint8_t> frame) override {
    std::lock_guard lock(out_->mu);
    if (out_->closed) fail(ErrorCode::kLinkLost, "loopback peer closed");
    out_->queue.emplace_back(frame.begin(), frame.end());
    out_->cv.notify_all();
  }

  Bytes read_frame() override {
    std::unique_lock lock(in_->mu);
    in_->cv.wait(lock, [&] { return !in_->queue.empty() || in_->closed; });
    if (in_->queue.empty()) fail(ErrorCode::kLinkLost, "loopback peer closed");
    Bytes b = std::move(in_->queue.front());
    in_->queue.pop_front();
    return b;
  }

 private:
  struct Pipe {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Bytes> queue;
    bool closed = false;
  };

  LoopbackLink(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out) : in_(std::move(in)), out_(std::move(out)) {}

  std::shared_ptr<Pipe> in_;
  std::shared_ptr<Pipe> out_;
};

class TcpLink : public Link {
 public:
  explicit TcpLink(int fd) : fd_(fd) {}
  TcpLink(const TcpLink&) = delete;
  TcpLink& operator=(const TcpLink&) = delete;
  ~TcpLink() override { close(); }

  static std::unique_ptr<TcpLink> connect(const std::string& host, int port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
    if (rc != 0) fail(ErrorCode::kLinkLost, "resolve " + host + ": " + ::gai_strerror(rc));
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
    for (auto* ai = res; ai; ai = ai->ai_next) {
      const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) return std::make_unique<TcpLink>(fd);
      ::close(fd);
    }
    fail(ErrorCode::kLinkLost, "cannot connect to " + host + ":" + std::to_string(port));
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 protected:
  void write_frame(std::span<const std::uint8_t> frame) override {
    std::size_t off = 0;
    while (off < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) fail(ErrorCode::kLinkLost, std::string("send: ") + std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
  }

  Bytes read_frame() override {
    Bytes frame(kFrameHeaderBytes);
    read_exact(frame.data(), kFrameHeaderBytes);
    const std::size_t total = frame_length(frame);
    frame.resize(total);
    read_exact(frame.data() + kFrameHeaderBytes, total - kFrameHeaderBytes);
    return frame;
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t off = 0;
    while (off < n) {
      if (fd_ < 0) fail(ErrorCode::kLinkLost, "link closed");
      const ssize_t r = ::recv(fd_, dst + off, n - off, 0);
      if (r < 0 && errno == EINTR) continue;
      if (r == 0) fail(ErrorCode::kLinkLost, "peer closed the connection");
      if (r < 0) fail(ErrorCode::kLinkLost, std::string("recv: ") + std::strerror(errno));
      off += static_cast<std::size_t>(r);
    }
  }

  int fd_ = -1;
};

class TcpListener {
 public:
  /// Port 0 picks an ephemeral port.
  explicit TcpListener(int port = 0, bool loopback_only = true) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(ErrorCode::kIo, std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(loopback_only ? INADDR_LOOPBACK : INADDR_ANY);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 8) != 0) {
      const std::string msg = std::strerror(errno);
      ::close(fd_);
      fail(ErrorCode::kIo, "listen on port " + std::to_string(port) + ": " + msg);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() { close(); }

  int port() const { return port_; }

  std::unique_ptr<TcpLink> accept() {
    while (true) {
      const int fd = ::accept(fd_, nullptr, nullptr);
      if (fd >= 0) return std::make_unique<TcpLink>(fd);
      if (errno != EINTR) fail(ErrorCode::kLinkLost, std::string("accept: ") + std::strerror(errno));
    }
  }

  void close() {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

// ---- Edge ----

struct SessionStats {
  std::uint64_t bytes_up = 0;    // received from the device
  std::uint64_t bytes_down = 0;  // sent to the device
  int frames_served = 0;
  int errors = 0;
  bool accepted = false;

  SessionStats& operator+=(const SessionStats& o) {
    bytes_up += o.bytes_up;
    bytes_down += o.bytes_down;
    frames_served += o.frames_served;
    errors += o.errors;
    return *this;
  }
};

/// The edge's per-keyframe work: segment the decoded frame and pick a level
/// per region from the fake gradient.
inline Feedback edge_feedback(const Frame& decoded, const SensitivityOracle& oracle, const QuantTableSet& tables,
                              double B, const RegionGrid& grid) {
  FakeGradient fake = fake_gradient(decoded, oracle);
  const CoeffGradientMap gs = pixel_to_coeff_gradients(fake.gradient);
  return {decoded.frame_id, std::move(fake.segmentation), select_levels(gs, tables, B, grid)};
}

class EdgeSession {
 public:
  EdgeSession(const SensitivityOracle& oracle, const QuantTableSet& tables, double B)
      : oracle_(oracle), tables_(tables), B_(B) {}

  HelloAck accept(const Hello& h) {
    if (h.digest != tables_.digest())
      return {false, "table digest " + hex(h.digest) + " != " + hex(tables_.digest())};
    if (h.levels != tables_.level_count()) return {false, "level count mismatch"};
    try {
      Frame probe = Frame::blank(h.width, h.height, h.subsampling);
      grid_ = RegionGrid::for_frame(probe, h.region_w, h.region_h);
    } catch (const Error& e) {
      return {false, e.what()};
    }
    hello_ = h;
    return {true, {}};
  }

  /// Feedback or an error report; DigestMismatch and geometry errors escape
  /// so the caller can close the session.
  Message handle(const OffloadMsg& m) {
    require(hello_.has_value(), ErrorCode::kProtocolError, "offload before hello");
    DecodedFrame d = decode_frame(m.bitstream, tables_);
    require(d.frame.width == hello_->width && d.frame.height == hello_->height && d.grid == grid_,
            ErrorCode::kProtocolError, "offloaded frame does not match session geometry");
    d.frame.frame_id = m.frame_id;
    try {
      Feedback fb = edge_feedback(d.frame, oracle_, tables_, B_, grid_);
      return FeedbackMsg{m.frame_id, std::move(fb.segmentation.labels), std::move(fb.strategy)};
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kOracleFailure) throw;
      return ErrorMsg{m.frame_id, e.code(), e.what()};
    }
  }

 private:
  const SensitivityOracle& oracle_;
  const QuantTableSet& tables_;
  double B_;
  std::optional<Hello> hello_;
  RegionGrid grid_;
};

/// Serves one device until Bye or link loss.
inline SessionStats serve_session(Link& link, const SensitivityOracle& oracle, const QuantTableSet& tables, double B) {
  SessionStats stats;
  EdgeSession session(oracle, tables, B);
  auto finish = [&] {
    stats.bytes_up = link.bytes_received();
    stats.bytes_down = link.bytes_sent();
    return stats;
  };
  try {
    const Message first = link.receive();
    const auto* hello = std::get_if<Hello>(&first);
    if (!hello) {
      link.send(ErrorMsg{0, ErrorCode::kProtocolError, "expected hello"});
      ++stats.errors;
      return finish();
    }
    const HelloAck ack = session.accept(*hello);
    link.send(ack);
    if (!ack.accepted) return finish();
    stats.accepted = true;
    while (true) {
      const Message m = link.receive();
      if (std::holds_alternative<Bye>(m)) break;
      const auto* off = std::get_if<OffloadMsg>(&m);
      if (!off) {
        link.send(ErrorMsg{0, ErrorCode::kProtocolError, "unexpected message"});
        ++stats.errors;
        break;
      }
      try {
        const Message reply = session.handle(*off);
        if (std::holds_alternative<ErrorMsg>(reply)) ++stats.errors;
        else ++stats.frames_served;
        link.send(reply);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kLinkLost) throw;
        link.send(ErrorMsg{off->frame_id, e.code(), e.what()});
        ++stats.errors;
        break;
      }
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kLinkLost && e.code() != ErrorCode::kProtocolError && e.code() != ErrorCode::kTruncated)
      throw;
    ++stats.errors;
  }
  return finish();
}

/// Accepts sessions, each served on its own thread; stops after
/// `max_sessions` sessions when positive.
inline SessionStats edge_serve(TcpListener& listener, const SensitivityOracle& oracle, const QuantTableSet& tables,
                               double B, int max_sessions = 0) {
  std::mutex mu;
  SessionStats total;
  std::vector<std::thread> workers;
  for (int n = 0; max_sessions <= 0 || n < max_sessions; ++n) {
    std::shared_ptr<TcpLink> link;
    try {
      link = listener.accept();
    } catch (const Error&) {
      break;  // listener closed
    }
    workers.emplace_back([&, link] {
      const SessionStats s = serve_session(*link, oracle, tables, B);
      std::lock_guard lock(mu);
      total += s;
      total.accepted = total.accepted || s.accepted;
    });
  }
  for (auto& w : workers) w.join();
  return total;
}

// ---- Device ----

enum class RunMode { kStac, kUniform, kPerFrame };

struct DeviceConfig {
  RunMode mode = RunMode::kStac;
  int uniform_level = 1;  // kUniform only
  TemporalConfig temporal;
  double fps = 30.0;
  /// Frames processed after a keyframe before its feedback must be applied.
  int feedback_lag = 0;
  int region_w = kDefaultRegionBlocks;
  int region_h = kDefaultRegionBlocks;
};

struct FrameRecord {
  std::uint32_t frame_id = 0;
  bool is_keyframe = false;
  double psnr = kPsnrCap;  // NaN before the first feedback
  std::uint64_t uplink_bytes = 0;
  double cumulative_kbps = 0.0;
  /// Propagated map, or the edge's own result for a keyframe whose feedback
  /// arrived before the next frame. Empty before the first feedback.
  std::optional<SegmentationMap> segmentation;
  std::optional<StrategyMap> strategy;  // strategy the keyframe was encoded with
};

struct RunReport {
  std::vector<FrameRecord> frames;
  double fps = 30.0;
  int offloads = 0;
  int edge_errors = 0;
  std::uint64_t uplink_bytes = 0;  // Offload messages only
  std::uint64_t bytes_sent = 0;    // every device -> edge message
  std::uint64_t bytes_received = 0;
  bool link_lost = false;
  std::string error;

  double duration_s() const { return static_cast<double>(frames.size()) / fps; }
  double offloads_per_second() const { return frames.empty() ? 0.0 : offloads / duration_s(); }
  double uplink_kbps() const { return frames.empty() ? 0.0 : uplink_bytes * 8.0 / 1000.0 / duration_s(); }
};

/// Drives the temporal scheme over `frames`, offloading keyframes over
/// `link`. Link loss ends the run early with `link_lost` set.
inline RunReport device_run(std::span<const Frame> frames, Link& link, const QuantTableSet& tables,
                            const DeviceConfig& cfg) {
  require(!frames.empty(), ErrorCode::kInvalidArgument, "no frames to run");
  require(cfg.fps > 0, ErrorCode::kInvalidArgument, "fps must be positive");
  require(cfg.feedback_lag >= 0, ErrorCode::kInvalidArgument, "negative feedback lag");
  const bool uniform = cfg.mode == RunMode::kUniform;
  if (uniform)
    require(cfg.uniform_level >= 1 && cfg.uniform_level <= tables.level_count(), ErrorCode::kUnknownLevel,
            "uniform level outside the ladder");

  const Frame& first = frames[0];
  const RegionGrid grid = RegionGrid::for_frame(first, cfg.region_w, cfg.region_h);
  TemporalConfig tc = cfg.temporal;
  tc.levels = tables.level_count();
  if (cfg.mode == RunMode::kPerFrame) tc.threshold = std::numeric_limits<double>::infinity();
  if (uniform) tc.mid_level = cfg.uniform_level;

  RunReport report;
  report.fps = cfg.fps;
  struct Expected {
    std::uint32_t id;
    std::size_t due;
  };
  std::deque<Expected> expected;
  std::optional<DeviceState> state;

  auto offload = [&](const OffloadRequest& req, std::size_t index, FrameRecord& rec) {
    const StrategyMap strategy = uniform ? StrategyMap::uniform(grid, cfg.uniform_level) : req.strategy;
    const std::size_t n = link.send(OffloadMsg{req.frame.frame_id, encode_frame(req.frame, strategy, tables, grid)});
    rec.is_keyframe = true;
    rec.uplink_bytes = n;
    rec.strategy = strategy;
    report.uplink_bytes += n;
    ++report.offloads;
    expected.push_back({req.frame.frame_id, index + static_cast<std::size_t>(cfg.feedback_lag)});
  };

  // Applies every feedback due by frame `index`, in arrival order.
  auto pump = [&](std::size_t index) {
    while (!expected.empty() && expected.front().due <= index) {
      const Message m = link.receive();
      const std::uint32_t want = expected.front().id;
      expected.pop_front();
      if (const auto* err = std::get_if<ErrorMsg>(&m)) {
        require(err->frame_id == want, ErrorCode::kProtocolError, "error report out of order");
        ++report.edge_errors;
        continue;
      }
      const auto* fbm = std::get_if<FeedbackMsg>(&m);
      require(fbm && fbm->frame_id == want, ErrorCode::kProtocolError, "expected feedback for frame " + std::to_string(want));
      Feedback fb{fbm->frame_id, {fbm->labels, fbm->frame_id},
                  uniform ? StrategyMap::uniform(grid, cfg.uniform_level) : fbm->strategy};
      const FeedbackResult res = state->handle_feedback(fb);
      FrameRecord& last = report.frames.back();
      if (res == FeedbackResult::kApplied && last.frame_id == fb.keyframe_id) last.segmentation = fb.segmentation;
    }
  };

  auto close_record = [&](FrameRecord& rec, std::size_t index) {
    rec.cumulative_kbps = report.uplink_bytes * 8.0 / 1000.0 / (static_cast<double>(index + 1) / cfg.fps);
  };

  try {
    const Hello hello{tables.digest(),
                      static_cast<std::uint16_t>(first.width),
                      static_cast<std::uint16_t>(first.height),
                      first.subsampling,
                      static_cast<std::uint8_t>(cfg.region_w),
                      static_cast<std::uint8_t>(cfg.region_h),
                      static_cast<std::uint8_t>(tables.level_count())};
    link.send(hello);
    const Message reply = link.receive();
    const auto* ack = std::get_if<HelloAck>(&reply);
    require(ack != nullptr, ErrorCode::kProtocolError, "expected hello ack");
    if (!ack->accepted) fail(ErrorCode::kDigestMismatch, "edge refused session: " + ack->reason);

    auto [s, req] = DeviceState::init(first, grid, tc);
    state.emplace(std::move(s));
    report.frames.emplace_back();
    report.frames.back().frame_id = first.frame_id;
    offload(req, 0, report.frames.back());
    close_record(report.frames.back(), 0);
    pump(0);

    for (std::size_t i = 1; i < frames.size(); ++i) {
      FrameRecord rec;
      rec.frame_id = frames[i].frame_id;
      try {
        StepOutcome out = state->step(frames[i]);
        rec.psnr = out.psnr;
        rec.segmentation = std::move(out.segmentation);
        report.frames.push_back(std::move(rec));
        if (out.offload) offload(*out.offload, i, report.frames.back());
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kFeedbackMissing) throw;
        rec.psnr = std::numeric_limits<double>::quiet_NaN();
        report.frames.push_back(std::move(rec));
      }
      close_record(report.frames.back(), i);
      pump(i);
    }
    pump(std::numeric_limits<std::size_t>::max());
    link.send(Bye{});
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kLinkLost) throw;
    report.link_lost = true;
    report.error = e.what();
  }
  report.bytes_sent = link.bytes_sent();
  report.bytes_received = link.bytes_received();
  return report;
}

/// Runs a device against an in-process edge on a loopback link.
inline std::pair<RunReport, SessionStats> run_loopback(std::span<const Frame> frames, const SensitivityOracle& oracle,
                                                       const QuantTableSet& tables, double B,
                                                       const DeviceConfig& cfg) {
  auto [device, edge] = LoopbackLink::pair();
  SessionStats stats;
  std::thread server([&, link = edge.get()] { stats = serve_session(*link, oracle, tables, B); });
  RunReport report;
  try {
    report = device_run(frames, *device, tables, cfg);
  } catch (...) {
    device->close();
    server.join();
    throw;
  }
  device->close();
  server.join();
  return {std::move(report), stats};
}

}  // namespace stac
