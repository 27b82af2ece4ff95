#include "eos/scheduler.hpp"

#include <algorithm>
#include <ostream>

#include "eos/backoff.hpp"

namespace eos {

const char* to_string(RunOutcome o) noexcept {
  switch (o) {
    case RunOutcome::kBlocked: return "blocked";
    case RunOutcome::kPreempted: return "preempted";
    case RunOutcome::kExited: return "exited";
    case RunOutcome::kFaulted: return "faulted";
  }
  return "?";
}

void write_dispatch_csv(std::ostream& os, const std::vector<DispatchRecord>& log) {
  static constexpr const char* kReason[] = {"block", "preempt", "exit", "fault"};
  os << "fwp,core,start_ns,end_ns,reason\n";
  for (const auto& r : log)
    os << r.fwp.value << ',' << r.core << ',' << r.start_ns << ',' << r.end_ns << ','
       << kReason[static_cast<int>(r.reason)] << '\n';
}

CoreScheduler::CoreScheduler(CoreId core, std::size_t producer_ports, std::size_t inbox_capacity)
    : core_(core), inbox_(producer_ports, inbox_capacity), exits_(4096) {}

Errc CoreScheduler::register_task(Task& task, SpscQueue<Event>& port) {
  if (Errc e = task.bind(core_); e != Errc::kOk) return e;
  Event ev;
  ev.kind = EventKind::kRegister;
  ev.fwp = task.task_id();
  ev.core = core_;
  ev.task = &task;
  if (!port.try_push(ev)) {
    task.unbind();
    return Errc::kInboxFull;
  }
  return Errc::kOk;
}

Errc CoreScheduler::set_quantum(std::uint64_t quantum_ns) noexcept {
  if (quantum_ns < kMinQuantumNs || quantum_ns > kMaxQuantumNs) return Errc::kOutOfRange;
  quantum_ns_ = quantum_ns;
  return Errc::kOk;
}

std::size_t CoreScheduler::handle_inbox() {
  return inbox_.drain([this](const Event& ev) { handle_event(ev); });
}

void CoreScheduler::make_runnable(FwpId id, Entry& e) {
  e.state = FwpState::kRunnable;
  e.wake_pending = false;
  run_queue_.push_back(id);
}

void CoreScheduler::handle_event(const Event& ev) {
  ++stats_.inbox_events;
  switch (ev.kind) {
    case EventKind::kRegister: {
      Entry e;
      e.task = ev.task;
      Entry& stored = tasks_[ev.fwp] = e;
      // Input delivered before registration produced an activation this core
      // could not attribute; pick it up here.
      if (ev.task->has_pending_input()) make_runnable(ev.fwp, stored);
      break;
    }
    case EventKind::kActivate: {
      auto it = tasks_.find(ev.fwp);
      if (it == tasks_.end()) {
        ++stats_.redundant_activations;
        break;
      }
      Entry& e = it->second;
      if (e.parked) {
        ++stats_.redundant_activations;
      } else if (e.state == FwpState::kBlocked) {
        ++stats_.activations;
        make_runnable(ev.fwp, e);
      } else if (e.state == FwpState::kDispatched) {
        e.wake_pending = true;
      } else {
        ++stats_.redundant_activations;
      }
      break;
    }
    case EventKind::kBlock: {
      auto it = tasks_.find(ev.fwp);
      if (it == tasks_.end()) break;
      Entry& e = it->second;
      if (e.state != FwpState::kDispatched) break;
      ++stats_.blocks;
      if (e.wake_pending) make_runnable(ev.fwp, e);
      else e.state = FwpState::kBlocked;
      break;
    }
    case EventKind::kRetire: {
      auto it = tasks_.find(ev.fwp);
      if (it != tasks_.end()) {
        if (it->second.state == FwpState::kRunnable)
          run_queue_.erase(std::remove(run_queue_.begin(), run_queue_.end(), ev.fwp), run_queue_.end());
        it->second.task->unbind();
        tasks_.erase(it);
      }
      if (ev.ack != nullptr) ev.ack->store(true, std::memory_order_release);
      break;
    }
    case EventKind::kExited:
    case EventKind::kFaulted:
      break;
  }
}

void CoreScheduler::finish(FwpId id, Entry& e, RunOutcome outcome) {
  switch (outcome) {
    case RunOutcome::kBlocked: {
      Event ev;
      ev.kind = EventKind::kBlock;
      ev.fwp = id;
      handle_event(ev);
      break;
    }
    case RunOutcome::kPreempted:
      ++stats_.preemptions;
      make_runnable(id, e);
      break;
    case RunOutcome::kExited:
    case RunOutcome::kFaulted: {
      const bool exited = outcome == RunOutcome::kExited;
      if (exited) ++stats_.exits;
      else ++stats_.faults;
      e.state = FwpState::kBlocked;
      e.wake_pending = false;
      e.parked = true;
      Event ev;
      ev.kind = exited ? EventKind::kExited : EventKind::kFaulted;
      ev.fwp = id;
      ev.core = core_;
      ev.task = e.task;
      // The exits ring is sized well above the number of tasks a core holds.
      exits_.try_push(ev);
      break;
    }
  }
}

bool CoreScheduler::dispatch() {
  while (!run_queue_.empty()) {
    const FwpId id = run_queue_.front();
    run_queue_.pop_front();
    auto it = tasks_.find(id);
    if (it == tasks_.end() || it->second.state != FwpState::kRunnable) continue;
    Entry& e = it->second;
    e.state = FwpState::kDispatched;
    ++stats_.dispatches;
    const std::uint64_t start = now_ns();
    const RunOutcome outcome = e.task->run(RunBudget{start + quantum_ns_, quantum_ns_});
    if (log_enabled_) {
      static constexpr DispatchEnd kEnd[] = {DispatchEnd::kBlock, DispatchEnd::kPreempt, DispatchEnd::kExit,
                                             DispatchEnd::kFault};
      log_.push_back(DispatchRecord{id, core_, start, now_ns(), kEnd[static_cast<int>(outcome)]});
    }
    finish(id, e, outcome);
    return true;
  }
  return false;
}

bool CoreScheduler::poll_once() {
  const std::size_t n = handle_inbox();
  const bool ran = dispatch();
  if (n == 0 && !ran) ++stats_.idle_polls;
  return n != 0 || ran;
}

std::optional<CoreScheduler::FwpState> CoreScheduler::state_of(FwpId id) const {
  auto it = tasks_.find(id);
  if (it == tasks_.end()) return std::nullopt;
  return it->second.state;
}

std::vector<FwpId> CoreScheduler::lost_wakeups() const {
  std::vector<FwpId> out;
  if (!inbox_.empty()) return out;
  for (const auto& [id, e] : tasks_)
    if (e.state == FwpState::kBlocked && !e.parked && e.task->has_pending_input()) out.push_back(id);
  return out;
}

void CoreScheduler::enable_log(bool on, std::size_t reserve) {
  log_enabled_ = on;
  if (reserve != 0) log_.reserve(reserve);
}

void CoreScheduler::run(const std::atomic<bool>& stop) {
  tighten_timer_slack();
  IdleBackoff backoff;
  while (!stop.load(std::memory_order_acquire)) {
    if (poll_once()) backoff.reset();
    else backoff.idle();
  }
}

}  // namespace eos
