#ifndef EOS_APPS_HPP
#define EOS_APPS_HPP

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "eos/fwp.hpp"
#include "eos/packet.hpp"

namespace eos {

// Leading member of every bundled app's state, which lives in the FWP heap.
struct AppCounters {
  std::uint64_t received = 0;
  std::uint64_t forwarded = 0;  // sent on, including replies
  std::uint64_t dropped = 0;    // consumed without sending
  std::uint64_t errors = 0;     // app-specific: forged accesses that succeeded, kv protocol errors
};

// Registers fwd, firewall, monitor, ping, kv and the test apps forger and hog.
void register_builtin_apps(FwpRegistry& registry);

// Null when the FWP has no bundled-app state.
const AppCounters* app_counters(const Fwp& fwp) noexcept;

struct FlowStat {
  FlowKey key;
  std::uint64_t packets = 0;
  std::uint64_t bytes = 0;
};

// Monitor table snapshot, sorted by key.
std::vector<FlowStat> monitor_flows(const Fwp& fwp);
// Entries the monitor could not track because its table was full.
std::uint64_t monitor_overflow(const Fwp& fwp) noexcept;

// kv entries currently stored.
std::size_t kv_size(const Fwp& fwp) noexcept;

// ---- memcached UDP framing ----

inline constexpr std::size_t kMemcacheHeader = 8;

// Request id, sequence 0, one datagram, reserved.
std::vector<std::byte> memcache_request(std::uint16_t request_id, std::string_view ascii);
std::vector<std::byte> memcache_frame(const FlowKey& key, std::uint16_t request_id, std::string_view ascii);
// ASCII body of a memcached UDP reply frame; empty when the frame is not one.
std::string memcache_reply_text(std::span<const std::byte> frame);
std::uint16_t memcache_request_id(std::span<const std::byte> frame);

}  // namespace eos

#endif  // EOS_APPS_HPP
