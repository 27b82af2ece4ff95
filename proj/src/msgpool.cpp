#include "eos/msgpool.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>

namespace eos {

namespace {

std::atomic<std::uint32_t> g_next_pool_id{1};

}  // namespace

const char* to_string(EntryState s) noexcept {
  switch (s) {
    case EntryState::kUnused: return "Unused";
    case EntryState::kReceive: return "Receive";
    case EntryState::kReady: return "Ready";
    case EntryState::kTransmit: return "Transmit";
    case EntryState::kFree: return "Free";
  }
  return "?";
}

// ---------------------------------------------------------------- Ring

Ring::Ring(std::uint32_t capacity) : capacity_(capacity), mask_(std::uint64_t{capacity} - 1) {
  if (!is_power_of_two(capacity)) throw Error(Errc::kInvalidArgument, "ring capacity must be a power of two");
  words_ = std::make_unique<std::atomic<std::uint64_t>[]>(capacity);
}

void Ring::notify(std::uint64_t pos, std::uint64_t new_word) noexcept {
  const RingEntry before = RingEntry::decode(words_[pos & mask_].load(std::memory_order_relaxed));
  const RingEntry after = RingEntry::decode(new_word);
  if (before.state != after.state) observer_->on_transition(*this, after.slot, before.state, after.state);
}

bool Ring::append(RingEntry e) noexcept {
  const std::uint64_t t = tail_.load(std::memory_order_relaxed);
  if (t - head_.load(std::memory_order_relaxed) >= capacity_) return false;
  store_word(t, e.encode(), std::memory_order_release);
  tail_.store(t + 1, std::memory_order_release);
  return true;
}

std::uint32_t Ring::append_bulk(std::span<const std::uint64_t> words) noexcept {
  const std::uint64_t t = tail_.load(std::memory_order_relaxed);
  const std::uint64_t room = capacity_ - (t - head_.load(std::memory_order_relaxed));
  const auto n = static_cast<std::uint32_t>(std::min<std::uint64_t>(room, words.size()));
  for (std::uint32_t i = 0; i < n; ++i) store_word(t + i, words[i], std::memory_order_relaxed);
  if (n != 0) tail_.store(t + n, std::memory_order_release);
  return n;
}

std::uint32_t Ring::retire_front(EntryState expected, std::span<std::uint64_t> out) noexcept {
  const std::uint64_t h = head_.load(std::memory_order_relaxed);
  const std::uint64_t t = tail_.load(std::memory_order_relaxed);
  const auto limit = static_cast<std::uint32_t>(std::min<std::uint64_t>(t - h, out.size()));
  std::uint32_t n = 0;
  for (; n < limit; ++n) {
    const std::uint64_t w = words_[(h + n) & mask_].load(std::memory_order_acquire);
    RingEntry e = RingEntry::decode(w);
    if (e.state != expected) break;
    out[n] = w;
    e.state = EntryState::kUnused;
    store_word(h + n, e.encode(), std::memory_order_relaxed);
  }
  if (n != 0) head_.store(h + n, std::memory_order_release);
  return n;
}

std::optional<RingEntry> Ring::retire_front(EntryState expected) noexcept {
  std::uint64_t w = 0;
  if (retire_front(expected, std::span<std::uint64_t>(&w, 1)) == 0) return std::nullopt;
  return RingEntry::decode(w);
}

std::optional<RingEntry> Ring::retract_back(EntryState expected) noexcept {
  const std::uint64_t t = tail_.load(std::memory_order_relaxed);
  if (t == head_.load(std::memory_order_relaxed)) return std::nullopt;
  // Withdraw the position first, then check the copier has not claimed it.
  // Paired with the store-then-load in claim().
  tail_.store(t - 1, std::memory_order_seq_cst);
  if (mid_.load(std::memory_order_seq_cst) > t - 1) {
    tail_.store(t, std::memory_order_release);
    return std::nullopt;
  }
  RingEntry e = RingEntry::decode(words_[(t - 1) & mask_].load(std::memory_order_acquire));
  if (e.state != expected) {
    tail_.store(t, std::memory_order_release);
    return std::nullopt;
  }
  RingEntry cleared = e;
  cleared.state = EntryState::kUnused;
  store_word(t - 1, cleared.encode(), std::memory_order_relaxed);
  return e;
}

bool Ring::front_is_fenced(EntryState s) const noexcept {
  std::atomic_thread_fence(std::memory_order_seq_cst);
  return front_is(s);
}

bool Ring::front_is(EntryState s) const noexcept {
  const std::uint64_t h = head_.load(std::memory_order_relaxed);
  if (h == tail_.load(std::memory_order_acquire)) return false;
  return RingEntry::decode(words_[h & mask_].load(std::memory_order_acquire)).state == s;
}

std::uint32_t Ring::claim(std::uint32_t want) noexcept {
  const std::uint64_t m = mid_.load(std::memory_order_relaxed);
  const std::uint64_t t = tail_.load(std::memory_order_acquire);
  auto k = static_cast<std::uint32_t>(std::min<std::uint64_t>(want, t - m));
  if (k == 0) return 0;
  mid_.store(m + k, std::memory_order_seq_cst);
  const std::uint64_t t2 = tail_.load(std::memory_order_seq_cst);
  if (t2 < m + k) {
    k = t2 > m ? static_cast<std::uint32_t>(t2 - m) : 0;
    mid_.store(m + k, std::memory_order_seq_cst);
  }
  return k;
}

void Ring::publish(std::uint64_t pos, RingEntry e) noexcept { store_word(pos, e.encode(), std::memory_order_release); }

bool Ring::consumer_reached(std::uint64_t pos) const noexcept {
  std::atomic_thread_fence(std::memory_order_seq_cst);
  return head_.load(std::memory_order_relaxed) == pos;
}

std::vector<RingEntry> Ring::entries() const {
  std::vector<RingEntry> out;
  const std::uint64_t h = head_.load(std::memory_order_acquire);
  const std::uint64_t t = tail_.load(std::memory_order_acquire);
  out.reserve(t - h);
  for (std::uint64_t p = h; p < t; ++p) out.push_back(peek(p));
  return out;
}

void Ring::reset(std::uint64_t head, std::uint64_t mid, std::span<const RingEntry> live,
                 const std::uint32_t* generations) {
  if (live.size() > capacity_ || mid < head || mid > head + live.size())
    throw Error(Errc::kInvalidArgument, "ring reset out of bounds");
  for (std::uint32_t i = 0; i < capacity_; ++i) words_[i].store(0, std::memory_order_relaxed);
  for (std::size_t i = 0; i < live.size(); ++i) {
    RingEntry e = live[i];
    if (generations != nullptr) e.generation = generations[e.slot];
    words_[(head + i) & mask_].store(e.encode(), std::memory_order_relaxed);
  }
  head_.store(head, std::memory_order_relaxed);
  mid_.store(mid, std::memory_order_relaxed);
  tail_.store(head + live.size(), std::memory_order_release);
}

// ---------------------------------------------------------------- SlotArena

void SlotArena::AlignedFree::operator()(std::byte* p) const noexcept { std::free(p); }

SlotArena::SlotArena(std::uint32_t slots, std::uint32_t slot_size) : slots_(slots), slot_size_(slot_size) {
  if (slots == 0 || slot_size == 0) throw Error(Errc::kInvalidArgument, "empty slot arena");
  std::size_t bytes = std::size_t{slots} * slot_size;
  bytes = (bytes + kCacheLine - 1) / kCacheLine * kCacheLine;
  auto* p = static_cast<std::byte*>(std::aligned_alloc(kCacheLine, bytes));
  if (p == nullptr) throw std::bad_alloc();
  std::memset(p, 0, bytes);
  bytes_.reset(p);
  len_ = std::make_unique<std::uint32_t[]>(slots);
  tag_ = std::make_unique<std::uint64_t[]>(slots);
}

void SlotArena::scrub(std::uint32_t slot) noexcept {
  std::memset(data(slot), 0, slot_size_);
  len_[slot] = 0;
  tag_[slot] = 0;
}

// ---------------------------------------------------------------- MessagePool

void MessagePool::validate_config(const PoolConfig& config) const {
  if (!is_power_of_two(config.slot_count))
    throw Error(Errc::kInvalidArgument, "slot_count must be a power of two");
  if (config.slot_size < kMinSlotSize) throw Error(Errc::kInvalidArgument, "slot_size must be at least 64 bytes");
}

MessagePool::MessagePool(PoolConfig config)
    : id_(g_next_pool_id.fetch_add(1, std::memory_order_relaxed)),
      slot_count_(config.slot_count),
      payload_capacity_(std::min(config.slot_size, kMaxPayload)),
      arena_((validate_config(config), std::make_shared<SlotArena>(config.slot_count, config.slot_size))),
      rx_(config.slot_count),
      tx_(config.slot_count) {
  populate(0);
}

MessagePool::MessagePool(PoolConfig config, std::shared_ptr<SlotArena> arena, std::uint32_t first_slot)
    : id_(g_next_pool_id.fetch_add(1, std::memory_order_relaxed)),
      slot_count_(config.slot_count),
      payload_capacity_(std::min(arena ? arena->slot_size() : config.slot_size, kMaxPayload)),
      shared_(true),
      arena_(std::move(arena)),
      rx_((validate_config(config), config.slot_count)),
      tx_(config.slot_count) {
  if (!arena_) throw Error(Errc::kInvalidArgument, "null arena");
  if (arena_->slot_size() < kMinSlotSize) throw Error(Errc::kInvalidArgument, "slot_size must be at least 64 bytes");
  if (std::uint64_t{first_slot} + slot_count_ > arena_->slots())
    throw Error(Errc::kInvalidArgument, "pool range exceeds arena");
  populate(first_slot);
}

void MessagePool::populate(std::uint32_t first_slot) {
  held_.assign(arena_->slots(), 0);
  gen_.assign(arena_->slots(), 0);
  for (std::uint32_t i = 0; i < slot_count_; ++i) rx_.append(RingEntry{first_slot + i, EntryState::kReceive, 0});
}

bool MessagePool::owns(MsgHandle h) const noexcept {
  return h.pool == id_ && h.slot < arena_->slots() && held_[h.slot] != 0 && gen_[h.slot] == h.generation;
}

bool MessagePool::check(MsgHandle h) noexcept {
  if (owns(h)) return true;
  ++counters_.rejected_handles;
  return false;
}

void MessagePool::refill() noexcept {
  deq_count_ = rx_.retire_front(EntryState::kReady, deq_cache_);
  deq_pos_ = 0;
}

std::optional<MsgHandle> MessagePool::recv() noexcept {
  recycle_freed();
  if (deq_pos_ == deq_count_) refill();
  if (deq_pos_ == deq_count_) return std::nullopt;
  const RingEntry e = RingEntry::decode(deq_cache_[deq_pos_++]);
  held_[e.slot] = 1;
  ++counters_.received;
  return MsgHandle{id_, e.slot, gen_[e.slot]};
}

Errc MessagePool::send(MsgHandle h) noexcept {
  if (!check(h)) return Errc::kInvalidHandle;
  const std::uint32_t gen = ++gen_[h.slot];
  held_[h.slot] = 0;
  enq_cache_[enq_count_++] = RingEntry{h.slot, EntryState::kTransmit, gen}.encode();
  ++counters_.sent;
  if (enq_count_ == kCacheEntries) flush();
  return Errc::kOk;
}

void MessagePool::flush() noexcept {
  if (enq_count_ == 0) return;
  const std::uint32_t n = tx_.append_bulk(std::span<const std::uint64_t>(enq_cache_.data(), enq_count_));
  if (n != 0) {
    ++counters_.writebacks;
    counters_.writeback_entries += n;
  }
  if (n < enq_count_) std::copy(enq_cache_.begin() + n, enq_cache_.begin() + enq_count_, enq_cache_.begin());
  enq_count_ -= n;
}

std::uint32_t MessagePool::recycle_freed() noexcept {
  std::uint32_t total = 0;
  std::array<std::uint64_t, kCacheEntries> buf{};
  for (;;) {
    const std::uint32_t n = tx_.retire_front(EntryState::kFree, buf);
    if (n == 0) break;
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::uint32_t slot = RingEntry::decode(buf[i]).slot;
      buf[i] = RingEntry{slot, EntryState::kReceive, gen_[slot]}.encode();
    }
    rx_.append_bulk(std::span<const std::uint64_t>(buf.data(), n));
    total += n;
    if (n < kCacheEntries) break;
  }
  counters_.recycled += total;
  recycle_epoch_.store(recycle_epoch_.load(std::memory_order_relaxed) + 1, std::memory_order_release);
  return total;
}

Result<MsgHandle> MessagePool::alloc(std::size_t size) noexcept {
  if (size > payload_capacity_) return Errc::kMessageTooLarge;
  std::optional<RingEntry> e = tx_.retire_front(EntryState::kFree);
  if (e) ++counters_.recycled;
  if (!e) e = rx_.retract_back(EntryState::kReceive);
  if (!e) return Errc::kPoolExhausted;
  held_[e->slot] = 1;
  arena_->length(e->slot) = static_cast<std::uint32_t>(size);
  arena_->tag(e->slot) = 0;
  ++counters_.allocated;
  return MsgHandle{id_, e->slot, gen_[e->slot]};
}

Errc MessagePool::free(MsgHandle h) noexcept {
  if (!check(h)) return Errc::kInvalidHandle;
  const std::uint32_t gen = ++gen_[h.slot];
  held_[h.slot] = 0;
  rx_.append(RingEntry{h.slot, EntryState::kReceive, gen});
  ++counters_.freed;
  return Errc::kOk;
}

std::span<std::byte> MessagePool::payload(MsgHandle h) noexcept {
  if (!owns(h)) return {};
  return {arena_->data(h.slot), payload_capacity_};
}

std::uint32_t MessagePool::length(MsgHandle h) const noexcept { return owns(h) ? arena_->length(h.slot) : 0; }

Errc MessagePool::set_length(MsgHandle h, std::size_t n) noexcept {
  if (!check(h)) return Errc::kInvalidHandle;
  if (n > payload_capacity_) return Errc::kMessageTooLarge;
  arena_->length(h.slot) = static_cast<std::uint32_t>(n);
  return Errc::kOk;
}

std::uint64_t MessagePool::tag(MsgHandle h) const noexcept {
  return owns(h) ? const_cast<SlotArena&>(*arena_).tag(h.slot) : 0;
}

void MessagePool::set_tag(MsgHandle h, std::uint64_t t) noexcept {
  if (owns(h)) arena_->tag(h.slot) = t;
}

bool MessagePool::rx_pending() const noexcept {
  return deq_pos_ < deq_count_ || rx_.front_is_fenced(EntryState::kReady);
}

std::vector<std::uint32_t> MessagePool::staged_slots() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < enq_count_; ++i) out.push_back(RingEntry::decode(enq_cache_[i]).slot);
  return out;
}

std::vector<std::uint32_t> MessagePool::cached_slots() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = deq_pos_; i < deq_count_; ++i) out.push_back(RingEntry::decode(deq_cache_[i]).slot);
  return out;
}

std::vector<std::uint32_t> MessagePool::held_slots() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t s = 0; s < held_.size(); ++s)
    if (held_[s] != 0) out.push_back(s);
  return out;
}

PoolCensus MessagePool::census() const {
  PoolCensus c;
  rx_.for_each([&](RingEntry e) {
    if (e.state == EntryState::kReceive) ++c.receive;
    else if (e.state == EntryState::kReady) ++c.ready;
  });
  tx_.for_each([&](RingEntry e) {
    if (e.state == EntryState::kTransmit) ++c.transmit;
    else if (e.state == EntryState::kFree) ++c.free;
  });
  c.staged = enq_count_;
  c.cached = deq_count_ - deq_pos_;
  c.held = static_cast<std::uint32_t>(std::count(held_.begin(), held_.end(), std::uint8_t{1}));
  return c;
}

bool MessagePool::audit(std::string* why) const {
  auto fail = [&](std::string msg) {
    if (why != nullptr) *why = std::move(msg);
    return false;
  };
  std::vector<std::uint32_t> seen(arena_->slots(), 0);
  std::uint64_t count = 0;
  auto mark = [&](std::uint32_t slot) {
    if (slot >= seen.size()) return false;
    ++seen[slot];
    ++count;
    return true;
  };
  for (const RingEntry& e : rx_.entries()) {
    if (e.state != EntryState::kReceive && e.state != EntryState::kReady)
      return fail(std::string("rx ring holds entry in state ") + to_string(e.state));
    if (!mark(e.slot)) return fail("rx entry slot out of bounds");
  }
  for (const RingEntry& e : tx_.entries()) {
    if (e.state != EntryState::kTransmit && e.state != EntryState::kFree)
      return fail(std::string("tx ring holds entry in state ") + to_string(e.state));
    if (!mark(e.slot)) return fail("tx entry slot out of bounds");
  }
  for (std::uint32_t i = 0; i < enq_count_; ++i)
    if (!mark(RingEntry::decode(enq_cache_[i]).slot)) return fail("staged slot out of bounds");
  for (std::uint32_t i = deq_pos_; i < deq_count_; ++i)
    if (!mark(RingEntry::decode(deq_cache_[i]).slot)) return fail("cached slot out of bounds");
  for (std::uint32_t s = 0; s < held_.size(); ++s)
    if (held_[s] != 0) mark(s);
  if (count != slot_count_)
    return fail("slot count mismatch: " + std::to_string(count) + " accounted, " + std::to_string(slot_count_) +
                " expected");
  for (std::uint32_t s = 0; s < seen.size(); ++s)
    if (seen[s] > 1) return fail("slot " + std::to_string(s) + " accounted " + std::to_string(seen[s]) + " times");
  return true;
}

MetadataAccounting MessagePool::metadata(std::uint32_t slot_count, std::uint32_t slot_size) {
  MetadataAccounting m;
  const std::size_t payload = std::min(slot_size, kMaxPayload);
  m.entry_bytes_per_slot = sizeof(std::uint64_t);
  m.ring_bytes = 2 * std::size_t{slot_count} * sizeof(std::uint64_t);
  m.tracking_bytes = std::size_t{slot_count} * sizeof(std::uint64_t);
  m.message_bytes = std::size_t{slot_count} * payload;
  m.byte_ratio = static_cast<double>(m.tracking_bytes) / static_cast<double>(m.message_bytes);
  m.word_bits_ratio = 64.0 / static_cast<double>(payload);
  return m;
}

PoolSnapshot MessagePool::snapshot() const {
  if (enq_count_ != 0 || deq_pos_ != deq_count_)
    throw Error(Errc::kInvalidArgument, "pool snapshot requires empty staging caches");
  PoolSnapshot s;
  s.rx = rx_.entries();
  s.tx = tx_.entries();
  for (auto& e : s.rx) e.generation = 0;
  for (auto& e : s.tx) e.generation = 0;
  s.rx_head = rx_.published_head();
  s.tx_head = tx_.published_head();
  for (std::uint32_t i = 0; i < held_.size(); ++i)
    if (held_[i] != 0) s.held.push_back(i);
  s.generations = gen_;
  return s;
}

PoolRestoreStats MessagePool::restore(const PoolSnapshot& snap) {
  if (shared_) throw Error(Errc::kInvalidArgument, "pools over a shared arena cannot be restored");
  if (snap.generations.size() != gen_.size()) throw Error(Errc::kInvalidArgument, "snapshot belongs to another pool");
  PoolRestoreStats st;
  st.live_discarded = census().live();

  // A slot is clean when it sits untouched in the rx ring as Receive with the
  // generation it had at checkpoint time. Everything else may carry bytes.
  std::vector<std::uint8_t>& clean = scratch_;
  clean.assign(gen_.size(), 0);
  rx_.for_each([&](RingEntry e) {
    if (e.state == EntryState::kReceive && gen_[e.slot] == snap.generations[e.slot]) clean[e.slot] = 1;
  });
  for (std::uint32_t s = 0; s < clean.size(); ++s) {
    if (clean[s] == 0) {
      arena_->scrub(s);
      ++st.slots_scrubbed;
      st.bytes_zeroed += arena_->slot_size();
    }
  }

  std::fill(held_.begin(), held_.end(), 0);
  for (std::uint32_t s : snap.held) {
    held_[s] = 1;
    gen_[s] = snap.generations[s];
  }
  rx_.reset(snap.rx_head, snap.rx_head, snap.rx, gen_.data());
  tx_.reset(snap.tx_head, snap.tx_head, snap.tx, gen_.data());
  enq_count_ = 0;
  deq_pos_ = deq_count_ = 0;
  return st;
}

// ---------------------------------------------------------------- PoolDirectory

void PoolDirectory::add(MessagePool& pool) {
  std::lock_guard lock(mu_);
  pools_[pool.id()] = &pool;
}

void PoolDirectory::remove(PoolId id) {
  std::lock_guard lock(mu_);
  pools_.erase(id);
}

MessagePool* PoolDirectory::find(PoolId id) const {
  std::lock_guard lock(mu_);
  auto it = pools_.find(id);
  return it == pools_.end() ? nullptr : it->second;
}

std::size_t PoolDirectory::size() const {
  std::lock_guard lock(mu_);
  return pools_.size();
}

}  // namespace eos
