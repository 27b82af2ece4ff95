#ifndef EOS_GATEWAY_HPP
#define EOS_GATEWAY_HPP

#include <array>
#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "eos/chain_manager.hpp"
#include "eos/mma.hpp"
#include "eos/packet.hpp"
#include "eos/pcap.hpp"

namespace eos {

// ---- flow rules ----

struct FlowPattern {
  std::optional<std::uint32_t> src_addr;
  std::optional<std::uint32_t> dst_addr;
  std::optional<std::uint16_t> src_port;
  std::optional<std::uint16_t> dst_port;
  std::optional<std::uint8_t> proto;

  bool matches(const FlowKey& k) const noexcept;
};

enum class RuleAction : std::uint8_t { kSharedChain, kPerFlowChain };

struct FlowRule {
  FlowPattern match;
  int priority = 0;
  RuleAction action = RuleAction::kSharedChain;
  TemplateId tmpl;
};

// Highest priority wins; ties go to the earliest insertion.
class FlowTable {
 public:
  std::uint32_t add_rule(const FlowRule& rule);
  // Returns the selected rule and its id.
  const FlowRule* match(const FlowKey& key, std::uint32_t* rule_id = nullptr) const noexcept;
  std::size_t size() const noexcept { return order_.size(); }
  const FlowRule& rule(std::uint32_t id) const { return rules_.at(id); }

 private:
  std::vector<FlowRule> rules_;       // by id
  std::vector<std::uint32_t> order_;  // ids in match order
};

// ---- sources ----

struct Frame {
  std::array<std::byte, kMaxFrame> data{};
  std::size_t len = 0;
  std::span<const std::byte> bytes() const noexcept { return {data.data(), len}; }
};

class PacketSource {
 public:
  virtual ~PacketSource() = default;
  // Produces the next frame if one is due at `now_ns`.
  virtual bool next(Frame& out, std::uint64_t now_ns) = 0;
  virtual bool exhausted() const = 0;
};

// Writes a complete frame for message `seq` of flow `flow` into `out`;
// returns its length.
using FrameFn = std::function<std::size_t(std::uint64_t seq, std::uint32_t flow, const FlowKey& key,
                                          std::span<std::byte> out, std::mt19937_64& rng)>;

struct SyntheticSpec {
  double rate_pps = 0.0;       // 0 = as fast as the consumer polls
  std::size_t payload = 64;    // UDP payload bytes for the default frame
  std::uint32_t flows = 1;
  bool uniform_mix = false;    // random flow choice instead of round robin
  std::uint64_t count = 0;     // 0 = unbounded
  std::uint64_t seed = 1;
  std::uint32_t src_base = 0x0a000001;  // 10.0.0.1
  std::uint32_t dst_addr = 0x0a000101;  // 10.0.1.1
  std::uint16_t src_port_base = 10000;
  std::uint16_t dst_port = 9000;
  std::uint8_t proto = kProtoUdp;
  FrameFn frame;  // empty = default UDP frame with a sequence-stamped payload
};

// Default payload layout: u64 sequence, u32 flow index, then bytes derived
// from the sequence number.
std::size_t default_frame(std::uint64_t seq, std::uint32_t flow, const FlowKey& key, std::span<std::byte> out,
                          std::size_t payload);
void fill_pattern(std::span<std::byte> out, std::uint64_t seq) noexcept;

class SyntheticSource : public PacketSource {
 public:
  explicit SyntheticSource(SyntheticSpec spec);
  bool next(Frame& out, std::uint64_t now_ns) override;
  bool exhausted() const override { return spec_.count != 0 && seq_ >= spec_.count; }
  FlowKey flow_key(std::uint32_t flow) const noexcept;
  std::uint64_t produced() const noexcept { return seq_; }

 private:
  SyntheticSpec spec_;
  std::mt19937_64 rng_;
  std::uint64_t seq_ = 0;
  std::uint64_t start_ns_ = 0;
  double period_ns_ = 0.0;
};

class PcapSource : public PacketSource {
 public:
  explicit PcapSource(const std::string& path, std::uint64_t loops = 1);
  bool next(Frame& out, std::uint64_t now_ns) override;
  bool exhausted() const override { return done_; }
  std::uint64_t oversize() const noexcept { return oversize_; }

 private:
  std::string path_;
  std::unique_ptr<PcapReader> reader_;
  std::uint64_t loops_left_;
  bool done_ = false;
  std::uint64_t oversize_ = 0;
  std::vector<std::byte> buf_;
};

// UDP socket; each datagram becomes a synthesized Ethernet/IPv4/UDP frame.
class DatagramSource : public PacketSource {
 public:
  DatagramSource(const std::string& addr, std::uint16_t port);
  ~DatagramSource() override;
  bool next(Frame& out, std::uint64_t now_ns) override;
  bool exhausted() const override { return false; }
  std::uint16_t port() const noexcept { return port_; }
  int fd() const noexcept { return fd_; }

 private:
  int fd_ = -1;
  std::uint32_t addr_ = 0;
  std::uint16_t port_ = 0;
};

class VectorSource : public PacketSource {
 public:
  explicit VectorSource(std::vector<std::vector<std::byte>> frames) : frames_(std::move(frames)) {}
  bool next(Frame& out, std::uint64_t now_ns) override;
  bool exhausted() const override { return pos_ >= frames_.size(); }

 private:
  std::vector<std::vector<std::byte>> frames_;
  std::size_t pos_ = 0;
};

// ---- Net-In ----

struct NetInConfig {
  std::uint64_t idle_timeout_ns = 100'000'000;
  std::uint64_t expire_interval_ns = 1'000'000;
  std::size_t batch = 32;
  bool record_activations = true;
  bool log_assignments = false;
  // Keep a frame that found its ingress pool full and retry it on the next
  // poll instead of dropping it (closed-loop load).
  bool hold_on_full = false;
};

struct NetInStats {
  std::uint64_t received = 0;
  std::uint64_t admitted = 0;
  std::uint64_t bytes_admitted = 0;
  std::uint64_t dropped_pool_full = 0;
  std::uint64_t dropped_no_rule = 0;
  std::uint64_t dropped_oversize = 0;
  std::uint64_t activations = 0;  // per-flow
  std::uint64_t shared_activations = 0;
  std::uint64_t expired = 0;
};

enum class Admit : std::uint8_t { kAdmitted, kPoolFull, kNoRule, kOversize };

class NetIn {
 public:
  NetIn(ChainManager& manager, FlowTable table, NetInConfig config = {});

  void add_source(std::unique_ptr<PacketSource> src) { sources_.push_back(std::move(src)); }
  // One iteration: bump the epoch, admit up to `batch` frames per source,
  // flush ingress pools, expire idle flows.
  std::size_t poll();
  void run(const std::atomic<bool>& stop);

  Admit admit(std::span<const std::byte> frame, std::uint64_t now_ns) { return admit(frame, now_ns, false); }
  void flush();
  std::size_t flow_expire(std::uint64_t now_ns);
  // Scenario end: request teardown of every bound chain.
  std::size_t terminate_all();

  std::uint64_t epoch() const noexcept { return epoch_.load(std::memory_order_acquire); }
  bool sources_exhausted() const;
  NetInStats stats() const;
  std::size_t active_flows() const noexcept { return flows_.size(); }
  FlowTable& table() noexcept { return table_; }
  const std::vector<std::uint64_t>& activation_ns() const noexcept { return activation_ns_; }
  const std::vector<std::pair<FlowKey, TemplateId>>& assignments() const noexcept { return assignments_; }
  ChainInstance* chain_for(const FlowKey& key) const;

 private:
  struct Binding {
    ChainInstance* inst = nullptr;
    std::uint64_t generation = 0;  // instance activation count at bind time
    std::uint64_t last_seen_ns = 0;
  };

  Admit admit(std::span<const std::byte> frame, std::uint64_t now_ns, bool hold);
  bool live(const Binding& b) const noexcept;
  ChainInstance* resolve(const FlowKey& key, std::uint64_t now_ns);
  void count(std::atomic<std::uint64_t>& c, std::uint64_t n = 1) noexcept {
    c.store(c.load(std::memory_order_relaxed) + n, std::memory_order_relaxed);
  }

  ChainManager& manager_;
  FlowTable table_;
  NetInConfig config_;
  std::vector<std::unique_ptr<PacketSource>> sources_;
  std::unordered_map<FlowKey, Binding> flows_;
  std::unordered_map<std::uint32_t, Binding> shared_;
  std::vector<MessagePool*> touched_;
  std::vector<std::uint64_t> activation_ns_;
  std::vector<std::pair<FlowKey, TemplateId>> assignments_;
  std::uint64_t next_expire_ns_ = 0;
  Frame frame_;
  std::vector<Frame> held_;
  std::vector<char> holding_;
  std::atomic<std::uint64_t> epoch_{0};

  std::atomic<std::uint64_t> received_{0}, admitted_{0}, bytes_{0}, drop_full_{0}, drop_rule_{0}, drop_size_{0},
      activations_{0}, shared_activations_{0}, expired_{0};
};

// ---- sinks and Net-Out ----

class PacketSink {
 public:
  virtual ~PacketSink() = default;
  // False on a transient failure; the frame is offered again later.
  virtual bool emit(std::span<const std::byte> frame) = 0;
  virtual void flush() {}
};

class CounterSink : public PacketSink {
 public:
  bool emit(std::span<const std::byte> frame) override;
  std::uint64_t frames() const noexcept { return frames_.load(std::memory_order_acquire); }
  std::uint64_t bytes() const noexcept { return bytes_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> frames_{0};
  std::atomic<std::uint64_t> bytes_{0};
};

class CallbackSink : public PacketSink {
 public:
  explicit CallbackSink(std::function<bool(std::span<const std::byte>)> fn) : fn_(std::move(fn)) {}
  bool emit(std::span<const std::byte> frame) override { return fn_(frame); }

 private:
  std::function<bool(std::span<const std::byte>)> fn_;
};

class PcapSink : public PacketSink {
 public:
  explicit PcapSink(const std::string& path) : writer_(path) {}
  bool emit(std::span<const std::byte> frame) override { return writer_.write(frame, now_ns()); }
  void flush() override { writer_.flush(); }

 private:
  PcapWriter writer_;
};

// Sends the UDP payload of each frame to the frame's destination address.
class DatagramSink : public PacketSink {
 public:
  DatagramSink();
  ~DatagramSink() override;
  bool emit(std::span<const std::byte> frame) override;

 private:
  int fd_ = -1;
};

struct NetOutConfig {
  std::size_t batch = 64;
  std::uint32_t max_retries = 0;  // 0 = retry until the sink accepts
  bool record_latency = true;
};

struct NetOutStats {
  std::uint64_t emitted = 0;
  std::uint64_t bytes = 0;
  std::uint64_t sink_failures = 0;
  std::uint64_t dropped_after_retries = 0;
};

class NetOut {
 public:
  NetOut(MmaGroup& mma, std::unique_ptr<PacketSink> sink, NetOutConfig config = {});

  std::size_t poll();
  void run(const std::atomic<bool>& stop);

  NetOutStats stats() const;
  // Admission-to-emission latencies; read after the Net-Out context stopped.
  const std::vector<std::uint64_t>& latencies() const noexcept { return latency_ns_; }
  void clear_latencies() { latency_ns_.clear(); }
  PacketSink& sink() noexcept { return *sink_; }
  // Only while the Net-Out context is stopped.
  void set_sink(std::unique_ptr<PacketSink> sink) { sink_ = std::move(sink); }

 private:
  bool deliver(const EgressRef& ref);

  MmaGroup& mma_;
  std::unique_ptr<PacketSink> sink_;
  NetOutConfig config_;
  std::deque<EgressRef> retry_;
  std::uint32_t retries_ = 0;
  std::vector<std::uint64_t> latency_ns_;
  std::atomic<std::uint64_t> emitted_{0}, bytes_{0}, failures_{0}, dropped_{0};
};

}  // namespace eos

#endif  // EOS_GATEWAY_HPP
