#ifndef EOS_TESTS_SUPPORT_HPP
#define EOS_TESTS_SUPPORT_HPP

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eos/msgpool.hpp"

namespace eos::test {

// FNV-1a; independent of anything the runtime computes.
inline std::uint64_t fnv1a(std::span<const std::byte> bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint8_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::vector<std::byte> bytes_of(const std::string& s) {
  std::vector<std::byte> v(s.size());
  std::memcpy(v.data(), s.data(), s.size());
  return v;
}

inline std::string string_of(std::span<const std::byte> b) {
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

// Plays the copier side of one pool by hand: fills Receive entries of the rx
// ring and completes Transmit entries of the tx ring.
class HandCopier {
 public:
  explicit HandCopier(MessagePool& pool) : pool_(pool) {}

  bool claim() {
    if (pending_) return false;
    Ring& rx = pool_.rx_ring();
    const std::uint64_t pos = rx.cursor();
    if (rx.claim(1) != 1) return false;
    pending_ = pos;
    return true;
  }

  bool publish(std::span<const std::byte> data) {
    if (!pending_) return false;
    Ring& rx = pool_.rx_ring();
    RingEntry e = rx.peek(*pending_);
    if (e.state != EntryState::kReceive) return false;
    std::memcpy(pool_.arena().data(e.slot), data.data(), data.size());
    pool_.arena().length(e.slot) = static_cast<std::uint32_t>(data.size());
    e.state = EntryState::kReady;
    rx.publish(*pending_, e);
    pending_.reset();
    return true;
  }

  bool deliver(std::span<const std::byte> data) { return claim() && publish(data); }
  bool deliver(const std::string& s) { return deliver(bytes_of(s)); }

  // Takes the oldest Transmit entry, returning its bytes, and marks it Free.
  std::optional<std::vector<std::byte>> complete() {
    Ring& tx = pool_.tx_ring();
    if (tx.available() == 0) return std::nullopt;
    const std::uint64_t pos = tx.cursor();
    RingEntry e = tx.peek(pos);
    if (e.state != EntryState::kTransmit) return std::nullopt;
    const std::byte* p = pool_.arena().data(e.slot);
    std::vector<std::byte> out(p, p + pool_.arena().length(e.slot));
    e.state = EntryState::kFree;
    tx.publish(pos, e);
    tx.advance(1);
    return out;
  }

  bool has_pending() const { return pending_.has_value(); }

 private:
  MessagePool& pool_;
  std::optional<std::uint64_t> pending_;
};

}  // namespace eos::test

#endif  // EOS_TESTS_SUPPORT_HPP
