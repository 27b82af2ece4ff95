#ifndef EOS_SCHEDULER_HPP
#define EOS_SCHEDULER_HPP

#include <atomic>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <unordered_map>
#include <vector>

#include "eos/common.hpp"
#include "eos/spsc_queue.hpp"

namespace eos {

class Task;

// kExited/kFaulted travel only on a scheduler's exits ring.
enum class EventKind : std::uint8_t { kRegister, kActivate, kBlock, kRetire, kExited, kFaulted };
enum class ActivationReason : std::uint8_t { kMessageArrived, kChainActivated };

// Inbox record. Plain data so it can travel through SPSC rings.
struct Event {
  EventKind kind = EventKind::kActivate;
  ActivationReason reason = ActivationReason::kMessageArrived;
  FwpId fwp;
  CoreId core = 0;
  Task* task = nullptr;                  // kRegister only
  std::atomic<bool>* ack = nullptr;      // kRetire only; set once removed
};

enum class RunOutcome : std::uint8_t { kBlocked, kPreempted, kExited, kFaulted };

const char* to_string(RunOutcome o) noexcept;

struct RunBudget {
  std::uint64_t deadline_ns = 0;
  std::uint64_t quantum_ns = 0;
};

// Something a core scheduler can dispatch. run() returns kBlocked only after
// it has made sure no input is pending (the "block request").
class Task {
 public:
  static constexpr std::uint32_t kUnbound = 0xffffffffu;

  virtual ~Task() = default;
  virtual FwpId task_id() const noexcept = 0;
  virtual RunOutcome run(const RunBudget& budget) = 0;
  // Quiescence audit hook: true if the task has input it has not consumed.
  virtual bool has_pending_input() const noexcept { return false; }

  // Binds the task to one core for its active lifetime.
  Errc bind(CoreId core) noexcept {
    std::uint32_t expected = kUnbound;
    if (bound_core_.compare_exchange_strong(expected, core, std::memory_order_acq_rel)) return Errc::kOk;
    return Errc::kAlreadyRegistered;
  }
  void unbind() noexcept { bound_core_.store(kUnbound, std::memory_order_release); }
  std::uint32_t bound_core() const noexcept { return bound_core_.load(std::memory_order_acquire); }

 private:
  std::atomic<std::uint32_t> bound_core_{kUnbound};
};

enum class DispatchEnd : std::uint8_t { kBlock, kPreempt, kExit, kFault };

struct DispatchRecord {
  FwpId fwp;
  CoreId core = 0;
  std::uint64_t start_ns = 0;
  std::uint64_t end_ns = 0;
  DispatchEnd reason = DispatchEnd::kBlock;
};

void write_dispatch_csv(std::ostream& os, const std::vector<DispatchRecord>& log);

struct SchedulerStats {
  std::uint64_t dispatches = 0;
  std::uint64_t preemptions = 0;
  std::uint64_t blocks = 0;
  std::uint64_t activations = 0;          // Blocked -> Runnable
  std::uint64_t redundant_activations = 0;
  std::uint64_t exits = 0;
  std::uint64_t faults = 0;
  std::uint64_t inbox_events = 0;
  std::uint64_t idle_polls = 0;
};

// Per-core round-robin scheduler. Everything except the inbox ports and
// register_task() is touched only by the core's own execution context.
class CoreScheduler {
 public:
  static constexpr std::uint64_t kDefaultQuantumNs = 100'000;
  static constexpr std::uint64_t kMinQuantumNs = 10'000;
  static constexpr std::uint64_t kMaxQuantumNs = 10'000'000;

  enum class FwpState : std::uint8_t { kRunnable, kDispatched, kBlocked };

  CoreScheduler(CoreId core, std::size_t producer_ports, std::size_t inbox_capacity = 1024);

  CoreScheduler(const CoreScheduler&) = delete;
  CoreScheduler& operator=(const CoreScheduler&) = delete;

  CoreId core() const noexcept { return core_; }

  // Producer side: each producer identity uses its own port.
  SpscQueue<Event>& inbox_port(std::size_t producer) { return inbox_.port(producer); }
  std::size_t producer_ports() const noexcept { return inbox_.producers(); }
  // Binds `task` to this core and queues its registration through `port`.
  Errc register_task(Task& task, SpscQueue<Event>& port);

  // Exits and faults are reported here (consumer: the chain manager side).
  SpscQueue<Event>& exits() noexcept { return exits_; }

  // ---- core-local ----
  Errc set_quantum(std::uint64_t quantum_ns) noexcept;
  std::uint64_t quantum() const noexcept { return quantum_ns_; }

  std::size_t handle_inbox();
  void handle_event(const Event& ev);
  // Runs the head of the run queue for one quantum; returns false when idle.
  bool dispatch();
  // handle_inbox() + dispatch(); returns whether anything happened.
  bool poll_once();
  bool idle() const noexcept { return run_queue_.empty() && inbox_.empty(); }
  // Core loop; parks in short sleeps while idle.
  void run(const std::atomic<bool>& stop);

  std::size_t registered() const noexcept { return tasks_.size(); }
  std::size_t runnable() const noexcept { return run_queue_.size(); }
  std::optional<FwpState> state_of(FwpId id) const;
  // Tasks that are Blocked yet have unconsumed input while the inbox is empty.
  std::vector<FwpId> lost_wakeups() const;

  void enable_log(bool on, std::size_t reserve = 0);
  const std::vector<DispatchRecord>& log() const noexcept { return log_; }
  void clear_log() { log_.clear(); }
  const SchedulerStats& stats() const noexcept { return stats_; }

 private:
  struct Entry {
    Task* task = nullptr;
    FwpState state = FwpState::kBlocked;
    bool wake_pending = false;
    bool parked = false;  // exited or faulted, waiting to be retired
  };

  void make_runnable(FwpId id, Entry& e);
  void finish(FwpId id, Entry& e, RunOutcome outcome);

  CoreId core_;
  FanIn<Event> inbox_;
  SpscQueue<Event> exits_;
  std::uint64_t quantum_ns_ = kDefaultQuantumNs;
  std::unordered_map<FwpId, Entry> tasks_;
  std::deque<FwpId> run_queue_;
  bool log_enabled_ = false;
  std::vector<DispatchRecord> log_;
  SchedulerStats stats_;
};

}  // namespace eos

#endif  // EOS_SCHEDULER_HPP
