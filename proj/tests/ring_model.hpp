#ifndef EOS_TESTS_RING_MODEL_HPP
#define EOS_TESTS_RING_MODEL_HPP

// Bounded exhaustive exploration of one pool driven by one owner and one
// copier. Every reachable state (up to a depth bound) is visited by replaying
// operation sequences against the real MessagePool, and every entry state
// change the implementation performs is recorded.

#include <array>
#include <cstdint>
#include <deque>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <unordered_set>
#include <vector>

#include "eos/msgpool.hpp"
#include "support.hpp"

namespace eos::test {

enum class ModelOp : std::uint8_t {
  kRecv,
  kSend,
  kFlush,
  kRecycle,
  kAlloc,
  kFree,
  kClaim,
  kPublish,
  kComplete,
};

inline constexpr std::array<ModelOp, 6> kCoreOps{ModelOp::kRecv,  ModelOp::kSend,    ModelOp::kFlush,
                                                 ModelOp::kClaim, ModelOp::kPublish, ModelOp::kComplete};
inline constexpr std::array<ModelOp, 9> kAllOps{ModelOp::kRecv,    ModelOp::kSend,  ModelOp::kFlush,
                                                ModelOp::kRecycle, ModelOp::kAlloc, ModelOp::kFree,
                                                ModelOp::kClaim,   ModelOp::kPublish, ModelOp::kComplete};

// (ring, from, to) with ring 0 = rx, 1 = tx.
using Transition = std::tuple<int, EntryState, EntryState>;

inline std::set<Transition> legal_transitions() {
  using S = EntryState;
  return {
      {0, S::kReceive, S::kReady},   // copier fills
      {0, S::kReady, S::kUnused},    // owner receives
      {1, S::kUnused, S::kTransmit}, // owner sends
      {1, S::kTransmit, S::kFree},   // copier completes
      {1, S::kFree, S::kUnused},     // owner recycles ...
      {0, S::kUnused, S::kReceive},  // ... back into the receive ring
  };
}

class TransitionLog : public TransitionObserver {
 public:
  explicit TransitionLog(const MessagePool& pool) : rx_(&const_cast<MessagePool&>(pool).rx_ring()) {}
  void on_transition(const Ring& ring, std::uint32_t, EntryState from, EntryState to) override {
    seen.insert({&ring == rx_ ? 0 : 1, from, to});
  }
  std::set<Transition> seen;

 private:
  const Ring* rx_;
};

class ModelHarness {
 public:
  explicit ModelHarness(std::uint32_t capacity)
      : pool_(PoolConfig{capacity, 64}), copier_(pool_), log_(pool_) {
    pool_.set_observer(&log_);
  }

  // Applies `op`; returns false when the op is not enabled in this state.
  bool apply(ModelOp op) {
    switch (op) {
      case ModelOp::kRecv:
        // Always enabled: an empty recv may still recycle freed entries.
        if (auto h = pool_.recv()) held_.push_back(*h);
        return true;
      case ModelOp::kSend:
        if (held_.empty()) return false;
        if (pool_.send(held_.front()) != Errc::kOk) throw std::logic_error("send of held handle failed");
        held_.pop_front();
        return true;
      case ModelOp::kFlush:
        if (pool_.staged() == 0) return false;
        pool_.flush();
        return true;
      case ModelOp::kRecycle:
        return pool_.recycle_freed() != 0;
      case ModelOp::kAlloc: {
        auto r = pool_.alloc(16);
        if (!r) return false;
        held_.push_back(*r);
        return true;
      }
      case ModelOp::kFree:
        if (held_.empty()) return false;
        if (pool_.free(held_.front()) != Errc::kOk) throw std::logic_error("free of held handle failed");
        held_.pop_front();
        return true;
      case ModelOp::kClaim:
        return copier_.claim();
      case ModelOp::kPublish: {
        static const std::vector<std::byte> payload(8, std::byte{0x5a});
        return copier_.publish(payload);
      }
      case ModelOp::kComplete:
        return copier_.complete().has_value();
    }
    return false;
  }

  // Canonical state: everything that determines future behaviour except
  // generation counters and absolute ring positions.
  std::string key() const {
    std::string k;
    auto put = [&](std::uint64_t v) {
      k += std::to_string(v);
      k += ',';
    };
    const Ring& rx = const_cast<MessagePool&>(pool_).rx_ring();
    const Ring& tx = const_cast<MessagePool&>(pool_).tx_ring();
    for (const Ring* r : {&rx, &tx}) {
      put(r->published_head() % r->capacity());
      put(r->published_cursor() - r->published_head());
      for (const RingEntry& e : r->entries()) {
        put(e.slot);
        put(static_cast<std::uint64_t>(e.state));
      }
      k += '|';
    }
    for (auto s : pool_.staged_slots()) put(s);
    k += '|';
    for (auto s : pool_.cached_slots()) put(s);
    k += '|';
    for (const auto& h : held_) put(h.slot);
    k += copier_.has_pending() ? "P" : "-";
    return k;
  }

  MessagePool& pool() { return pool_; }
  const std::set<Transition>& transitions() const { return log_.seen; }

 private:
  MessagePool pool_;
  HandCopier copier_;
  TransitionLog log_;
  std::deque<MsgHandle> held_;
};

struct ModelResult {
  std::size_t states = 0;
  std::size_t depth = 0;
  bool exhausted = false;  // frontier emptied before the depth bound
  std::set<Transition> transitions;
  std::string failure;
};

template <std::size_t N>
ModelResult explore(std::uint32_t capacity, const std::array<ModelOp, N>& ops, std::size_t max_depth) {
  ModelResult res;
  std::unordered_set<std::string> visited;
  std::vector<std::vector<ModelOp>> frontier{{}};
  visited.insert(ModelHarness(capacity).key());
  for (std::size_t depth = 0; depth < max_depth && !frontier.empty(); ++depth) {
    std::vector<std::vector<ModelOp>> next;
    for (const auto& path : frontier) {
      for (ModelOp op : ops) {
        ModelHarness h(capacity);
        for (ModelOp p : path) h.apply(p);
        if (!h.apply(op)) continue;
        res.transitions.insert(h.transitions().begin(), h.transitions().end());
        std::string why;
        if (!h.pool().audit(&why)) {
          res.failure = why;
          return res;
        }
        if (visited.insert(h.key()).second) {
          auto extended = path;
          extended.push_back(op);
          next.push_back(std::move(extended));
        }
      }
    }
    frontier = std::move(next);
    res.depth = depth + 1;
  }
  res.exhausted = frontier.empty();
  res.states = visited.size();
  return res;
}

}  // namespace eos::test

#endif  // EOS_TESTS_RING_MODEL_HPP
