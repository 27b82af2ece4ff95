#ifndef EOS_MMA_HPP
#define EOS_MMA_HPP

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "eos/common.hpp"
#include "eos/msgpool.hpp"
#include "eos/scheduler.hpp"
#include "eos/spsc_queue.hpp"

namespace eos {

enum class ChannelMode : std::uint8_t {
  kCopy,       // copy payload bytes between private arenas
  kReference,  // exchange slot indices between pools sharing one arena (benchmark reference)
  kEgress,     // forward references to Net-Out; Free is set after transmission
};

struct ChannelSpec {
  PoolId src;
  PoolId dst;            // unused for kEgress
  CoreId dst_core = 0;
  FwpId dst_fwp;         // notified on delivery to an idle owner; invalid = no notification
  bool zero_copy = false;
  ChannelMode mode = ChannelMode::kCopy;
  // Optional resolved pools; skip the directory lookup when the caller owns them.
  MessagePool* src_pool = nullptr;
  MessagePool* dst_pool = nullptr;
};

// Slot reference handed from the copier to Net-Out on a zero-copy channel.
struct EgressRef {
  MessagePool* pool = nullptr;
  std::uint64_t pos = 0;    // tx ring position to mark Free after emission
  std::uint64_t word = 0;   // entry word as forwarded (state Transmit)
  ChannelId channel;
};

struct ChannelCounters {
  std::atomic<std::uint64_t> moved{0};
  std::atomic<std::uint64_t> bytes_copied{0};
  std::atomic<std::uint64_t> forwarded{0};
  std::atomic<std::uint64_t> stalls{0};
  std::atomic<std::uint64_t> notifications{0};
  std::atomic<std::uint64_t> isolation_faults{0};
  std::atomic<std::uint64_t> recycle_wakeups{0};
  std::size_t live_index = 0;  // position in the engine's live list, control lock

  void reset() noexcept;
};

struct MmaStats {
  std::uint64_t moved = 0;
  std::uint64_t bytes_copied = 0;
  std::uint64_t forwarded = 0;
  std::uint64_t sweeps = 0;
  std::uint64_t stalls = 0;
  std::uint64_t notifications = 0;
  std::uint64_t notify_retries = 0;
  std::uint64_t isolation_faults = 0;
  std::uint64_t recycle_wakeups = 0;
};

// Completion flag for a control request that the engine applies between sweeps.
using Ticket = std::shared_ptr<std::atomic<bool>>;

inline bool ticket_done(const Ticket& t) { return !t || t->load(std::memory_order_acquire); }

// Per-channel state allocated once (at chain build) and reused by every
// registration, so registering a channel allocates nothing.
struct ChannelResources {
  std::shared_ptr<ChannelCounters> counters = std::make_shared<ChannelCounters>();
  Ticket added = std::make_shared<std::atomic<bool>>(false);
  Ticket removed = std::make_shared<std::atomic<bool>>(false);
};

// One copier engine. sweep()/run() execute in the engine's context; the
// register/deregister calls may come from any thread and take effect at the
// start of the next sweep.
class MmaEngine {
 public:
  static constexpr std::uint32_t kBatch = 8;

  explicit MmaEngine(PoolDirectory& pools, std::size_t egress_capacity = 4096);

  MmaEngine(const MmaEngine&) = delete;
  MmaEngine& operator=(const MmaEngine&) = delete;

  // Inbox producer port of the scheduler for `core`; must be set before any
  // channel targeting that core carries traffic.
  void attach_scheduler(CoreId core, SpscQueue<Event>& port);

  Result<ChannelId> register_channel(const ChannelSpec& spec);
  // Assigns an explicit id (used when channels are striped across engines).
  Result<ChannelId> register_channel(const ChannelSpec& spec, ChannelId id, ChannelResources* res = nullptr);
  Ticket deregister_channel(ChannelId id, ChannelResources* res = nullptr);
  Ticket pending_control() const;

  std::uint32_t sweep();
  void run(const std::atomic<bool>& stop);

  SpscQueue<EgressRef>& egress_queue() noexcept { return egress_; }

  std::size_t channel_count() const noexcept { return channels_.size(); }
  MmaStats stats() const;
  const ChannelCounters* channel_counters(ChannelId id) const;
  // Debug: appends the channel id for every message moved.
  void set_trace(std::vector<ChannelId>* trace) noexcept { trace_ = trace; }
  std::size_t pending_notifications() const noexcept { return pending_notify_.size(); }

 private:
  struct Channel {
    ChannelId id;
    ChannelSpec spec;
    MessagePool* src = nullptr;
    MessagePool* dst = nullptr;
    std::shared_ptr<ChannelCounters> counters;
    std::uint64_t wake_epoch = ~std::uint64_t{0};
    bool faulted = false;
  };
  struct Command {
    bool add = false;
    Channel channel;
    ChannelId remove;
    Ticket ticket;
  };

  Result<Channel> make_channel(const ChannelSpec& spec, ChannelId id) const;
  void apply_commands();
  std::uint32_t move_copy(Channel& ch);
  std::uint32_t move_egress(Channel& ch);
  void notify(const Channel& ch);
  void wake_for_recycle(Channel& ch);
  void retry_notifications();

  PoolDirectory& pools_;
  std::vector<Channel> channels_;  // registration order
  std::vector<SpscQueue<Event>*> notify_ports_;
  std::vector<Event> pending_notify_;
  SpscQueue<EgressRef> egress_;
  std::vector<ChannelId>* trace_ = nullptr;

  mutable std::mutex control_mu_;
  std::vector<Command> commands_;
  std::vector<Command> applying_;  // engine context; keeps its capacity
  std::atomic<bool> has_commands_{false};
  std::atomic<std::uint32_t> next_id_{0};
  std::vector<std::pair<ChannelId, std::shared_ptr<ChannelCounters>>> live_;  // control_mu_
  MmaStats retired_;                                                          // deregistered channels, control_mu_

  std::atomic<std::uint64_t> sweeps_{0};
  std::atomic<std::uint64_t> notify_retries_{0};
};

// k engines with channels striped by id.
class MmaGroup {
 public:
  MmaGroup(PoolDirectory& pools, std::size_t engines, std::size_t egress_capacity = 4096);

  std::size_t size() const noexcept { return engines_.size(); }
  MmaEngine& engine(std::size_t i) { return *engines_.at(i); }
  MmaEngine& engine_for(ChannelId id) { return *engines_[id.value % engines_.size()]; }

  Result<ChannelId> register_channel(const ChannelSpec& spec, ChannelResources* res = nullptr);
  Ticket deregister_channel(ChannelId id, ChannelResources* res = nullptr) {
    return engine_for(id).deregister_channel(id, res);
  }
  std::uint32_t sweep_all();
  MmaStats stats() const;

 private:
  std::vector<std::unique_ptr<MmaEngine>> engines_;
  std::atomic<std::uint32_t> next_id_{0};
};

}  // namespace eos

#endif  // EOS_MMA_HPP
