#ifndef EOS_PACKET_HPP
#define EOS_PACKET_HPP

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace eos {

inline constexpr std::uint8_t kProtoIcmp = 1;
inline constexpr std::uint8_t kProtoTcp = 6;
inline constexpr std::uint8_t kProtoUdp = 17;

inline constexpr std::size_t kEthHeader = 14;
inline constexpr std::size_t kIpv4Header = 20;
inline constexpr std::size_t kUdpHeader = 8;
inline constexpr std::size_t kIcmpHeader = 8;
inline constexpr std::size_t kUdpOverhead = kEthHeader + kIpv4Header + kUdpHeader;
inline constexpr std::size_t kMaxFrame = 1500;

struct FlowKey {
  std::uint32_t src_addr = 0;
  std::uint32_t dst_addr = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint8_t proto = 0;

  friend constexpr auto operator<=>(const FlowKey&, const FlowKey&) = default;
  FlowKey reversed() const noexcept { return {dst_addr, src_addr, dst_port, src_port, proto}; }
};

std::string to_string(const FlowKey& k);
std::uint32_t parse_ipv4(const std::string& dotted);  // throws Error(kConfig)
std::string format_ipv4(std::uint32_t addr);

struct ParsedFrame {
  FlowKey key;
  bool ipv4 = false;
  std::size_t l4_offset = 0;       // start of the UDP/TCP/ICMP header
  std::size_t payload_offset = 0;  // start of the L4 payload
  std::size_t payload_len = 0;
};

// Minimal Ethernet/IPv4/UDP/TCP/ICMP parse. Non-IPv4 or truncated frames
// yield ipv4 = false and an all-zero key.
ParsedFrame parse_frame(std::span<const std::byte> frame) noexcept;

std::uint16_t internet_checksum(std::span<const std::byte> bytes) noexcept;

// Writes Ethernet + IPv4 + UDP headers for `key` in front of `payload_len`
// bytes that the caller places at kUdpOverhead. Returns the frame length.
std::size_t write_udp_headers(std::span<std::byte> frame, const FlowKey& key, std::size_t payload_len) noexcept;
std::vector<std::byte> build_udp_frame(const FlowKey& key, std::span<const std::byte> payload);
std::vector<std::byte> build_icmp_echo(const FlowKey& key, std::uint16_t id, std::uint16_t seq,
                                       std::span<const std::byte> data, bool reply = false);

// Swaps MAC, IPv4 and L4 port fields in place (reply direction).
void swap_endpoints(std::span<std::byte> frame, const ParsedFrame& p) noexcept;
// Rewrites IPv4 total length, UDP length and the IPv4 checksum after the UDP
// payload changed size. Returns the new frame length.
std::size_t set_udp_payload_len(std::span<std::byte> frame, const ParsedFrame& p, std::size_t payload_len) noexcept;

std::uint16_t load_be16(const std::byte* p) noexcept;
std::uint32_t load_be32(const std::byte* p) noexcept;
void store_be16(std::byte* p, std::uint16_t v) noexcept;
void store_be32(std::byte* p, std::uint32_t v) noexcept;

}  // namespace eos

template <>
struct std::hash<eos::FlowKey> {
  std::size_t operator()(const eos::FlowKey& k) const noexcept {
    std::uint64_t h = (std::uint64_t{k.src_addr} << 32) ^ k.dst_addr;
    h ^= (std::uint64_t{k.src_port} << 24) ^ (std::uint64_t{k.dst_port} << 8) ^ k.proto;
    h *= 0x9e3779b97f4a7c15ull;
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

#endif  // EOS_PACKET_HPP
