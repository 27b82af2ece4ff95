#include "eos/mma.hpp"

#include <algorithm>
#include <cstring>

#include "eos/backoff.hpp"

namespace eos {

namespace {

inline void prefetch(const void* p) noexcept {
  __builtin_prefetch(p, 0, 3);
  __builtin_prefetch(static_cast<const char*>(p) + 64, 0, 3);
}

}  // namespace

MmaEngine::MmaEngine(PoolDirectory& pools, std::size_t egress_capacity) : pools_(pools), egress_(egress_capacity) {}

void MmaEngine::attach_scheduler(CoreId core, SpscQueue<Event>& port) {
  if (notify_ports_.size() <= core) notify_ports_.resize(core + 1, nullptr);
  notify_ports_[core] = &port;
}

namespace {

void add_counters(MmaStats& s, const ChannelCounters& c) noexcept {
  s.moved += c.moved.load(std::memory_order_relaxed);
  s.bytes_copied += c.bytes_copied.load(std::memory_order_relaxed);
  s.forwarded += c.forwarded.load(std::memory_order_relaxed);
  s.stalls += c.stalls.load(std::memory_order_relaxed);
  s.notifications += c.notifications.load(std::memory_order_relaxed);
  s.isolation_faults += c.isolation_faults.load(std::memory_order_relaxed);
  s.recycle_wakeups += c.recycle_wakeups.load(std::memory_order_relaxed);
}

}  // namespace

Result<MmaEngine::Channel> MmaEngine::make_channel(const ChannelSpec& spec, ChannelId id) const {
  Channel ch;
  ch.id = id;
  ch.spec = spec;
  if (spec.zero_copy) ch.spec.mode = ChannelMode::kEgress;
  ch.src = spec.src_pool != nullptr && spec.src_pool->id() == spec.src ? spec.src_pool : pools_.find(spec.src);
  if (ch.src == nullptr) return Errc::kUnknownPool;
  if (ch.spec.mode != ChannelMode::kEgress) {
    if (spec.src == spec.dst) return Errc::kSelfChannel;
    ch.dst = spec.dst_pool != nullptr && spec.dst_pool->id() == spec.dst ? spec.dst_pool : pools_.find(spec.dst);
    if (ch.dst == nullptr) return Errc::kUnknownPool;
    if (ch.spec.mode == ChannelMode::kReference && &ch.src->arena() != &ch.dst->arena())
      return Errc::kInvalidArgument;
  }
  return ch;
}

Result<ChannelId> MmaEngine::register_channel(const ChannelSpec& spec) {
  return register_channel(spec, ChannelId(next_id_.fetch_add(1, std::memory_order_relaxed)));
}

void ChannelCounters::reset() noexcept {
  for (auto* c : {&moved, &bytes_copied, &forwarded, &stalls, &notifications, &isolation_faults, &recycle_wakeups})
    c->store(0, std::memory_order_relaxed);
}

Result<ChannelId> MmaEngine::register_channel(const ChannelSpec& spec, ChannelId id, ChannelResources* res) {
  auto ch = make_channel(spec, id);
  if (!ch) return ch.error();
  Command cmd;
  cmd.add = true;
  if (res != nullptr) {
    res->counters->reset();
    res->added->store(false, std::memory_order_relaxed);
    ch->counters = res->counters;
    cmd.ticket = res->added;
  } else {
    ch->counters = std::make_shared<ChannelCounters>();
    cmd.ticket = std::make_shared<std::atomic<bool>>(false);
  }
  std::lock_guard lock(control_mu_);
  ch->counters->live_index = live_.size();
  live_.emplace_back(id, ch->counters);
  cmd.channel = std::move(*ch);
  commands_.push_back(std::move(cmd));
  has_commands_.store(true, std::memory_order_release);
  return id;
}

Ticket MmaEngine::deregister_channel(ChannelId id, ChannelResources* res) {
  Command cmd;
  cmd.remove = id;
  if (res != nullptr) {
    res->removed->store(false, std::memory_order_relaxed);
    cmd.ticket = res->removed;
  } else {
    cmd.ticket = std::make_shared<std::atomic<bool>>(false);
  }
  Ticket t = cmd.ticket;
  std::lock_guard lock(control_mu_);
  commands_.push_back(std::move(cmd));
  has_commands_.store(true, std::memory_order_release);
  return t;
}

Ticket MmaEngine::pending_control() const {
  std::lock_guard lock(control_mu_);
  return commands_.empty() ? Ticket{} : commands_.back().ticket;
}

void MmaEngine::apply_commands() {
  std::vector<Command>& cmds = applying_;
  {
    std::lock_guard lock(control_mu_);
    cmds.swap(commands_);
    has_commands_.store(false, std::memory_order_relaxed);
  }
  for (auto& cmd : cmds) {
    if (cmd.add) {
      channels_.push_back(std::move(cmd.channel));
    } else {
      auto it = std::find_if(channels_.begin(), channels_.end(), [&](const Channel& c) { return c.id == cmd.remove; });
      if (it != channels_.end()) {
        std::shared_ptr<ChannelCounters> c = std::move(it->counters);
        channels_.erase(it);
        std::lock_guard lock(control_mu_);
        const std::size_t i = c->live_index;
        add_counters(retired_, *c);
        if (i + 1 != live_.size()) {
          live_[i] = std::move(live_.back());
          live_[i].second->live_index = i;
        }
        live_.pop_back();
      }
    }
    cmd.ticket->store(true, std::memory_order_release);
  }
  cmds.clear();
}

void MmaEngine::notify(const Channel& ch) {
  if (!ch.spec.dst_fwp.valid()) return;
  Event ev;
  ev.kind = EventKind::kActivate;
  ev.reason = ActivationReason::kMessageArrived;
  ev.fwp = ch.spec.dst_fwp;
  ev.core = ch.spec.dst_core;
  ch.counters->notifications.fetch_add(1, std::memory_order_relaxed);
  SpscQueue<Event>* port = ch.spec.dst_core < notify_ports_.size() ? notify_ports_[ch.spec.dst_core] : nullptr;
  if (port == nullptr || !port->try_push(ev)) pending_notify_.push_back(ev);
}

// The destination ran out of Receive entries while its transmit ring holds
// Free ones only the owner can recycle. Wake it once per owner pass.
void MmaEngine::wake_for_recycle(Channel& ch) {
  MessagePool& d = *ch.dst;
  const std::uint64_t epoch = d.recycle_epoch();
  if (epoch == ch.wake_epoch) return;
  const Ring& tx = d.tx_ring();
  const std::uint64_t head = tx.published_head();
  if (head == tx.published_tail() || tx.peek(head).state != EntryState::kFree) return;
  ch.wake_epoch = epoch;
  ch.counters->recycle_wakeups.fetch_add(1, std::memory_order_relaxed);
  notify(ch);
}

void MmaEngine::retry_notifications() {
  if (pending_notify_.empty()) return;
  std::size_t kept = 0;
  for (const Event& ev : pending_notify_) {
    SpscQueue<Event>* port = ev.core < notify_ports_.size() ? notify_ports_[ev.core] : nullptr;
    if (port != nullptr && port->try_push(ev)) continue;
    pending_notify_[kept++] = ev;
  }
  notify_retries_.fetch_add(pending_notify_.size(), std::memory_order_relaxed);
  pending_notify_.resize(kept);
}

std::uint32_t MmaEngine::move_copy(Channel& ch) {
  Ring& tx = ch.src->tx_ring();
  const std::uint32_t avail = std::min(tx.available(), kBatch);
  if (avail == 0) return 0;
  const std::uint64_t spos = tx.cursor();

  // Validate the source batch before claiming any destination entries.
  std::uint32_t n = 0;
  for (; n < avail; ++n) {
    const RingEntry e = tx.peek(spos + n);
    if (e.state != EntryState::kTransmit || !ch.src->in_bounds(e.slot) ||
        ch.src->arena().length(e.slot) > ch.src->payload_capacity()) {
      ch.faulted = true;
      ch.counters->isolation_faults.fetch_add(1, std::memory_order_relaxed);
      break;
    }
  }
  if (n == 0) return 0;

  Ring& rx = ch.dst->rx_ring();
  const std::uint64_t dpos = rx.cursor();
  const std::uint32_t k = rx.claim(n);
  if (k < n) {
    ch.counters->stalls.fetch_add(1, std::memory_order_relaxed);
    wake_for_recycle(ch);
  }
  if (k == 0) return 0;

  SlotArena& sa = ch.src->arena();
  SlotArena& da = ch.dst->arena();
  const std::uint32_t dcap = ch.dst->payload_capacity();
  std::uint64_t bytes = 0;
  prefetch(sa.data(tx.peek(spos).slot));
  for (std::uint32_t i = 0; i < k; ++i) {
    RingEntry se = tx.peek(spos + i);
    RingEntry de = rx.peek(dpos + i);
    if (i + 1 < k) prefetch(sa.data(tx.peek(spos + i + 1).slot));
    if (de.state != EntryState::kReceive || !ch.dst->in_bounds(de.slot)) {
      // Destination ring corrupted by its owner; the position stays claimed.
      ch.faulted = true;
      ch.counters->isolation_faults.fetch_add(1, std::memory_order_relaxed);
      se.state = EntryState::kFree;
      tx.publish(spos + i, se);
      continue;
    }
    if (ch.spec.mode == ChannelMode::kReference) {
      const std::uint32_t s = se.slot;
      se.slot = de.slot;
      de.slot = s;
    } else {
      const std::uint32_t len = std::min(sa.length(se.slot), dcap);
      std::memcpy(da.data(de.slot), sa.data(se.slot), len);
      da.length(de.slot) = len;
      da.tag(de.slot) = sa.tag(se.slot);
      bytes += len;
    }
    de.state = EntryState::kReady;
    rx.publish(dpos + i, de);
    se.state = EntryState::kFree;
    tx.publish(spos + i, se);
    if (trace_ != nullptr) trace_->push_back(ch.id);
  }
  tx.advance(k);
  ch.counters->moved.fetch_add(k, std::memory_order_relaxed);
  if (bytes != 0) ch.counters->bytes_copied.fetch_add(bytes, std::memory_order_relaxed);
  if (rx.consumer_reached(dpos)) notify(ch);
  return k;
}

std::uint32_t MmaEngine::move_egress(Channel& ch) {
  Ring& tx = ch.src->tx_ring();
  const std::uint32_t avail = std::min(tx.available(), kBatch);
  const std::uint64_t spos = tx.cursor();
  std::uint32_t k = 0;
  for (; k < avail; ++k) {
    const std::uint64_t pos = spos + k;
    const RingEntry e = tx.peek(pos);
    if (e.state != EntryState::kTransmit || !ch.src->in_bounds(e.slot)) {
      ch.faulted = true;
      ch.counters->isolation_faults.fetch_add(1, std::memory_order_relaxed);
      break;
    }
    if (!egress_.try_push(EgressRef{ch.src, pos, e.encode(), ch.id})) {
      ch.counters->stalls.fetch_add(1, std::memory_order_relaxed);
      break;
    }
    if (trace_ != nullptr) trace_->push_back(ch.id);
  }
  if (k != 0) {
    tx.advance(k);
    ch.counters->forwarded.fetch_add(k, std::memory_order_relaxed);
  }
  return k;
}

std::uint32_t MmaEngine::sweep() {
  if (has_commands_.load(std::memory_order_acquire)) apply_commands();
  retry_notifications();
  std::uint32_t moved = 0;
  for (std::size_t i = 0; i < channels_.size(); ++i) {
    Channel& ch = channels_[i];
    if (ch.faulted) continue;
    if (i + 1 < channels_.size()) __builtin_prefetch(&channels_[i + 1], 0, 1);
    moved += ch.spec.mode == ChannelMode::kEgress ? move_egress(ch) : move_copy(ch);
  }
  sweeps_.fetch_add(1, std::memory_order_relaxed);
  return moved;
}

void MmaEngine::run(const std::atomic<bool>& stop) {
  tighten_timer_slack();
  IdleBackoff backoff;
  while (!stop.load(std::memory_order_acquire)) {
    if (sweep() != 0 || !pending_notify_.empty()) backoff.reset();
    else backoff.idle();
  }
}

MmaStats MmaEngine::stats() const {
  std::lock_guard lock(control_mu_);
  MmaStats s = retired_;
  s.sweeps = sweeps_.load(std::memory_order_relaxed);
  s.notify_retries = notify_retries_.load(std::memory_order_relaxed);
  for (const auto& [id, c] : live_) add_counters(s, *c);
  return s;
}

const ChannelCounters* MmaEngine::channel_counters(ChannelId id) const {
  std::lock_guard lock(control_mu_);
  for (const auto& [cid, c] : live_)
    if (cid == id) return c.get();
  return nullptr;
}

MmaGroup::MmaGroup(PoolDirectory& pools, std::size_t engines, std::size_t egress_capacity) {
  if (engines == 0) throw Error(Errc::kInvalidArgument, "at least one copier engine is required");
  for (std::size_t i = 0; i < engines; ++i) engines_.push_back(std::make_unique<MmaEngine>(pools, egress_capacity));
}

Result<ChannelId> MmaGroup::register_channel(const ChannelSpec& spec, ChannelResources* res) {
  const ChannelId id(next_id_.fetch_add(1, std::memory_order_relaxed));
  return engine_for(id).register_channel(spec, id, res);
}

std::uint32_t MmaGroup::sweep_all() {
  std::uint32_t n = 0;
  for (auto& e : engines_) n += e->sweep();
  return n;
}

MmaStats MmaGroup::stats() const {
  MmaStats total;
  for (const auto& e : engines_) {
    const MmaStats s = e->stats();
    total.moved += s.moved;
    total.bytes_copied += s.bytes_copied;
    total.forwarded += s.forwarded;
    total.sweeps += s.sweeps;
    total.stalls += s.stalls;
    total.notifications += s.notifications;
    total.notify_retries += s.notify_retries;
    total.isolation_faults += s.isolation_faults;
    total.recycle_wakeups += s.recycle_wakeups;
  }
  return total;
}

}  // namespace eos
