#ifndef EOS_MSGPOOL_HPP
#define EOS_MSGPOOL_HPP

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "eos/common.hpp"

namespace eos {

// Liveness/transfer state carried by every ring entry.
//
//   Receive  - empty slot the copier may write into
//   Ready    - copier filled the slot; owner has not consumed it
//   Unused   - slot is in the owner's hands (or the ring position is empty)
//   Transmit - owner queued the slot for the copier
//   Free     - copier finished with the slot; owner may reuse it
enum class EntryState : std::uint8_t {
  kUnused = 0,
  kReceive = 1,
  kReady = 2,
  kTransmit = 3,
  kFree = 4,
};

const char* to_string(EntryState s) noexcept;

// One machine word per entry: slot index in the low 32 bits, 3 state bits,
// then a 29-bit generation tag. Publication of an entry is a single store.
struct RingEntry {
  std::uint32_t slot = 0;
  EntryState state = EntryState::kUnused;
  std::uint32_t generation = 0;

  static constexpr unsigned kStateShift = 32;
  static constexpr unsigned kGenShift = 35;
  static constexpr std::uint32_t kGenMask = (1u << 29) - 1;

  constexpr std::uint64_t encode() const noexcept {
    return std::uint64_t{slot} | (std::uint64_t{static_cast<std::uint8_t>(state)} << kStateShift) |
           (std::uint64_t{generation & kGenMask} << kGenShift);
  }
  static constexpr RingEntry decode(std::uint64_t w) noexcept {
    return RingEntry{static_cast<std::uint32_t>(w), static_cast<EntryState>((w >> kStateShift) & 0x7),
                     static_cast<std::uint32_t>(w >> kGenShift)};
  }
  friend constexpr bool operator==(const RingEntry&, const RingEntry&) = default;
};

static_assert(sizeof(std::uint64_t) == 8);

class Ring;

// Test hook: sees every entry state change. Never installed on the data path.
class TransitionObserver {
 public:
  virtual ~TransitionObserver() = default;
  virtual void on_transition(const Ring& ring, std::uint32_t slot, EntryState from, EntryState to) = 0;
};

// Circular array of entry words with three monotone cursors:
//
//   head  - owner retires entries here            (written by owner)
//   mid   - copier has processed up to here        (written by copier)
//   tail  - owner appends new entries here         (written by owner)
//
// head <= mid <= tail and tail - head <= capacity. No operation loops on the
// peer's progress; each completes in at most `capacity` steps.
class Ring {
 public:
  explicit Ring(std::uint32_t capacity);

  Ring(const Ring&) = delete;
  Ring& operator=(const Ring&) = delete;

  std::uint32_t capacity() const noexcept { return capacity_; }

  // ---- owner end ----
  std::uint64_t head() const noexcept { return head_.load(std::memory_order_relaxed); }
  std::uint64_t tail() const noexcept { return tail_.load(std::memory_order_relaxed); }
  std::uint32_t size() const noexcept { return static_cast<std::uint32_t>(tail() - head()); }

  bool append(RingEntry e) noexcept;
  // Writes a batch of entries then publishes tail once. Returns how many fit.
  std::uint32_t append_bulk(std::span<const std::uint64_t> words) noexcept;
  // Takes up to out.size() consecutive entries in `expected` state from head,
  // marking them Unused, and publishes head once.
  std::uint32_t retire_front(EntryState expected, std::span<std::uint64_t> out) noexcept;
  std::optional<RingEntry> retire_front(EntryState expected) noexcept;
  // Pulls back the newest entry if the copier has not claimed it.
  std::optional<RingEntry> retract_back(EntryState expected) noexcept;
  // Owner-side half of the sleep/wake handshake: orders the preceding head
  // store before reading the front entry.
  bool front_is_fenced(EntryState s) const noexcept;
  bool front_is(EntryState s) const noexcept;

  // ---- copier end ----
  std::uint64_t cursor() const noexcept { return mid_.load(std::memory_order_relaxed); }
  std::uint32_t available() const noexcept {
    return static_cast<std::uint32_t>(tail_.load(std::memory_order_acquire) - mid_.load(std::memory_order_relaxed));
  }
  // Claims up to `want` appended entries starting at cursor(); returns the
  // number claimed. Races against retract_back resolve so that no position is
  // both claimed and retracted.
  std::uint32_t claim(std::uint32_t want) noexcept;
  void advance(std::uint32_t n) noexcept { mid_.store(mid_.load(std::memory_order_relaxed) + n, std::memory_order_release); }
  RingEntry peek(std::uint64_t pos) const noexcept {
    return RingEntry::decode(words_[pos & mask_].load(std::memory_order_acquire));
  }
  void publish(std::uint64_t pos, RingEntry e) noexcept;
  // Copier-side half of the sleep/wake handshake: true when the owner has
  // consumed everything before `pos`.
  bool consumer_reached(std::uint64_t pos) const noexcept;

  // ---- inspection (quiescent callers) ----
  std::uint64_t published_head() const noexcept { return head_.load(std::memory_order_acquire); }
  std::uint64_t published_tail() const noexcept { return tail_.load(std::memory_order_acquire); }
  std::uint64_t published_cursor() const noexcept { return mid_.load(std::memory_order_acquire); }
  std::vector<RingEntry> entries() const;  // [head, tail)
  template <class F>
  void for_each(F&& f) const {
    const std::uint64_t t = tail_.load(std::memory_order_acquire);
    for (std::uint64_t p = head_.load(std::memory_order_acquire); p < t; ++p) f(peek(p));
  }
  // `generations`, when given, replaces each entry's generation by slot.
  void reset(std::uint64_t head, std::uint64_t mid, std::span<const RingEntry> live,
             const std::uint32_t* generations = nullptr);

  void set_observer(TransitionObserver* obs) noexcept { observer_ = obs; }

 private:
  void store_word(std::uint64_t pos, std::uint64_t word, std::memory_order order) noexcept {
    if (observer_ != nullptr) [[unlikely]]
      notify(pos, word);
    words_[pos & mask_].store(word, order);
  }
  void notify(std::uint64_t pos, std::uint64_t new_word) noexcept;

  const std::uint32_t capacity_;
  const std::uint64_t mask_;
  std::unique_ptr<std::atomic<std::uint64_t>[]> words_;
  TransitionObserver* observer_ = nullptr;

  alignas(kCacheLine) std::atomic<std::uint64_t> head_{0};
  alignas(kCacheLine) std::atomic<std::uint64_t> mid_{0};
  alignas(kCacheLine) std::atomic<std::uint64_t> tail_{0};
};

// Contiguous span of fixed-size message slots plus per-slot length and
// ingress timestamp. A pool normally owns a private arena; benchmark reference
// mode lets several pools share one so slots can change hands without copying.
class SlotArena {
 public:
  SlotArena(std::uint32_t slots, std::uint32_t slot_size);

  std::uint32_t slots() const noexcept { return slots_; }
  std::uint32_t slot_size() const noexcept { return slot_size_; }
  std::byte* data(std::uint32_t slot) noexcept { return bytes_.get() + std::size_t{slot} * slot_size_; }
  const std::byte* data(std::uint32_t slot) const noexcept {
    return bytes_.get() + std::size_t{slot} * slot_size_;
  }
  std::uint32_t& length(std::uint32_t slot) noexcept { return len_[slot]; }
  std::uint32_t length(std::uint32_t slot) const noexcept { return len_[slot]; }
  std::uint64_t& tag(std::uint32_t slot) noexcept { return tag_[slot]; }
  std::span<const std::byte> bytes() const noexcept {
    return {bytes_.get(), std::size_t{slots_} * slot_size_};
  }
  void scrub(std::uint32_t slot) noexcept;

 private:
  struct AlignedFree {
    void operator()(std::byte* p) const noexcept;
  };

  std::uint32_t slots_;
  std::uint32_t slot_size_;
  std::unique_ptr<std::byte[], AlignedFree> bytes_;
  std::unique_ptr<std::uint32_t[]> len_;
  std::unique_ptr<std::uint64_t[]> tag_;
};

struct MsgHandle {
  PoolId pool;
  std::uint32_t slot = 0;
  std::uint32_t generation = 0;

  friend bool operator==(const MsgHandle&, const MsgHandle&) = default;
};

struct PoolConfig {
  std::uint32_t slot_count = 256;
  std::uint32_t slot_size = 1536;
};

struct PoolCensus {
  std::uint32_t receive = 0;    // rx ring, Receive
  std::uint32_t ready = 0;      // rx ring, Ready
  std::uint32_t transmit = 0;   // tx ring, Transmit
  std::uint32_t free = 0;       // tx ring, Free
  std::uint32_t staged = 0;     // enqueue cache, not yet written back
  std::uint32_t cached = 0;     // dequeue cache, taken from rx but not handed out
  std::uint32_t held = 0;       // handles owned by the FWP
  std::uint32_t total() const noexcept { return receive + ready + transmit + free + staged + cached + held; }
  // Messages with content: everything that is not an empty Receive/Free slot.
  std::uint32_t live() const noexcept { return ready + transmit + staged + cached + held; }
};

struct MetadataAccounting {
  std::size_t entry_bytes_per_slot = 0;  // one live ring word per slot
  std::size_t ring_bytes = 0;            // storage of both rings
  std::size_t tracking_bytes = 0;        // slot_count * entry bytes
  std::size_t message_bytes = 0;         // slot_count * payload capacity
  double byte_ratio = 0.0;               // tracking_bytes / message_bytes
  double word_bits_ratio = 0.0;          // 64 bits per 1500-byte message, the "4%" figure
};

struct PoolSnapshot {
  std::vector<RingEntry> rx;  // generation fields cleared
  std::vector<RingEntry> tx;
  std::uint64_t rx_head = 0;
  std::uint64_t tx_head = 0;
  std::vector<std::uint32_t> held;
  std::vector<std::uint32_t> generations;

  // Layout equality ignores generation counters.
  bool same_layout(const PoolSnapshot& o) const {
    return rx == o.rx && tx == o.tx && rx_head == o.rx_head && tx_head == o.tx_head && held == o.held;
  }
};

struct PoolRestoreStats {
  std::uint32_t live_discarded = 0;
  std::uint32_t slots_scrubbed = 0;
  std::size_t bytes_zeroed = 0;
};

struct PoolCounters {
  std::uint64_t received = 0;          // Ready -> Unused
  std::uint64_t sent = 0;              // Unused -> Transmit (staged)
  std::uint64_t recycled = 0;          // Free -> Unused -> Receive
  std::uint64_t writebacks = 0;        // enqueue cache flushes
  std::uint64_t writeback_entries = 0;
  std::uint64_t allocated = 0;
  std::uint64_t freed = 0;
  std::uint64_t rejected_handles = 0;
};

// A message pool: slot span + receive ring + transmit ring. All members
// except the copier-side ring calls are for the owning execution context.
class MessagePool {
 public:
  static constexpr std::uint32_t kMaxPayload = 1500;
  static constexpr std::uint32_t kMinSlotSize = 64;
  static constexpr std::uint32_t kCacheEntries = 8;

  explicit MessagePool(PoolConfig config = {});
  // View over a shared arena; initially owns slots [first_slot, first_slot + slot_count).
  MessagePool(PoolConfig config, std::shared_ptr<SlotArena> arena, std::uint32_t first_slot);

  MessagePool(const MessagePool&) = delete;
  MessagePool& operator=(const MessagePool&) = delete;

  PoolId id() const noexcept { return id_; }
  std::uint32_t slot_count() const noexcept { return slot_count_; }
  std::uint32_t slot_size() const noexcept { return arena_->slot_size(); }
  std::uint32_t payload_capacity() const noexcept { return payload_capacity_; }
  bool shares_arena() const noexcept { return shared_; }

  // ---- owner API ----
  std::optional<MsgHandle> recv() noexcept;
  Errc send(MsgHandle h) noexcept;
  std::uint32_t recycle_freed() noexcept;
  void flush() noexcept;
  Result<MsgHandle> alloc(std::size_t size) noexcept;
  Errc free(MsgHandle h) noexcept;

  bool owns(MsgHandle h) const noexcept;
  std::span<std::byte> payload(MsgHandle h) noexcept;
  std::uint32_t length(MsgHandle h) const noexcept;
  Errc set_length(MsgHandle h, std::size_t n) noexcept;
  std::uint64_t tag(MsgHandle h) const noexcept;
  void set_tag(MsgHandle h, std::uint64_t t) noexcept;

  // True if a received message may be waiting. Ordered against the copier's
  // delivery so that either this returns true or the copier sees the owner idle.
  bool rx_pending() const noexcept;
  std::uint32_t staged() const noexcept { return enq_count_; }
  std::vector<std::uint32_t> staged_slots() const;
  std::vector<std::uint32_t> cached_slots() const;
  std::vector<std::uint32_t> held_slots() const;

  // ---- copier access ----
  Ring& rx_ring() noexcept { return rx_; }
  Ring& tx_ring() noexcept { return tx_; }
  SlotArena& arena() noexcept { return *arena_; }
  const SlotArena& arena() const noexcept { return *arena_; }
  bool in_bounds(std::uint32_t slot) const noexcept { return slot < arena_->slots(); }

  // ---- accounting (quiescent) ----
  PoolCensus census() const;
  // Conservation check; fills `why` on failure.
  bool audit(std::string* why = nullptr) const;
  static MetadataAccounting metadata(std::uint32_t slot_count, std::uint32_t slot_size);
  MetadataAccounting metadata() const { return metadata(slot_count_, arena_->slot_size()); }
  const PoolCounters& counters() const noexcept { return counters_; }
  // Bumped after every recycle pass; lets the copier tell whether the owner
  // has run since it was last woken for recycling.
  std::uint64_t recycle_epoch() const noexcept { return recycle_epoch_.load(std::memory_order_acquire); }

  PoolSnapshot snapshot() const;
  PoolRestoreStats restore(const PoolSnapshot& snap);

  void set_observer(TransitionObserver* obs) noexcept {
    rx_.set_observer(obs);
    tx_.set_observer(obs);
  }

 private:
  void validate_config(const PoolConfig& config) const;
  void populate(std::uint32_t first_slot);
  bool check(MsgHandle h) noexcept;
  void refill() noexcept;

  PoolId id_;
  std::uint32_t slot_count_;
  std::uint32_t payload_capacity_;
  bool shared_ = false;
  std::shared_ptr<SlotArena> arena_;
  Ring rx_;
  Ring tx_;

  // owner-local state
  std::vector<std::uint8_t> held_;
  std::vector<std::uint32_t> gen_;
  std::vector<std::uint8_t> scratch_;  // restore
  alignas(128) std::array<std::uint64_t, kCacheEntries> enq_cache_{};
  std::uint32_t enq_count_ = 0;
  alignas(128) std::array<std::uint64_t, kCacheEntries> deq_cache_{};
  std::uint32_t deq_pos_ = 0;
  std::uint32_t deq_count_ = 0;
  PoolCounters counters_;
  std::atomic<std::uint64_t> recycle_epoch_{0};
};

// Pool identity -> pool. Used by the copier when channels are wired by id.
class PoolDirectory {
 public:
  void add(MessagePool& pool);
  void remove(PoolId id);
  MessagePool* find(PoolId id) const;
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::unordered_map<PoolId, MessagePool*> pools_;
};

}  // namespace eos

#endif  // EOS_MSGPOOL_HPP
