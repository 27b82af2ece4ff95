#include "eos/packet.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>

#include "eos/common.hpp"

namespace eos {

std::uint16_t load_be16(const std::byte* p) noexcept {
  return static_cast<std::uint16_t>((std::to_integer<unsigned>(p[0]) << 8) | std::to_integer<unsigned>(p[1]));
}

std::uint32_t load_be32(const std::byte* p) noexcept {
  return (std::uint32_t{load_be16(p)} << 16) | load_be16(p + 2);
}

void store_be16(std::byte* p, std::uint16_t v) noexcept {
  p[0] = std::byte(v >> 8);
  p[1] = std::byte(v & 0xff);
}

void store_be32(std::byte* p, std::uint32_t v) noexcept {
  store_be16(p, static_cast<std::uint16_t>(v >> 16));
  store_be16(p + 2, static_cast<std::uint16_t>(v));
}

std::string format_ipv4(std::uint32_t a) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", a >> 24, (a >> 16) & 0xff, (a >> 8) & 0xff, a & 0xff);
  return buf;
}

std::uint32_t parse_ipv4(const std::string& s) {
  unsigned a, b, c, d;
  char tail;
  if (std::sscanf(s.c_str(), "%u.%u.%u.%u%c", &a, &b, &c, &d, &tail) != 4 || a > 255 || b > 255 || c > 255 ||
      d > 255)
    throw Error(Errc::kConfig, "bad IPv4 address '" + s + "'");
  return (a << 24) | (b << 16) | (c << 8) | d;
}

std::string to_string(const FlowKey& k) {
  return format_ipv4(k.src_addr) + ":" + std::to_string(k.src_port) + " -> " + format_ipv4(k.dst_addr) + ":" +
         std::to_string(k.dst_port) + " proto " + std::to_string(k.proto);
}

ParsedFrame parse_frame(std::span<const std::byte> f) noexcept {
  ParsedFrame p;
  if (f.size() < kEthHeader + kIpv4Header || load_be16(f.data() + 12) != 0x0800) return p;
  const std::byte* ip = f.data() + kEthHeader;
  if ((std::to_integer<unsigned>(ip[0]) >> 4) != 4) return p;
  const std::size_t ihl = (std::to_integer<unsigned>(ip[0]) & 0x0f) * 4u;
  const std::size_t total = load_be16(ip + 2);
  if (ihl < kIpv4Header || kEthHeader + ihl > f.size() || total < ihl || kEthHeader + total > f.size()) return p;
  p.ipv4 = true;
  p.key.proto = std::to_integer<std::uint8_t>(ip[9]);
  p.key.src_addr = load_be32(ip + 12);
  p.key.dst_addr = load_be32(ip + 16);
  p.l4_offset = kEthHeader + ihl;
  const std::size_t end = kEthHeader + total;
  const std::byte* l4 = f.data() + p.l4_offset;
  std::size_t l4_hdr = 0;
  if (p.key.proto == kProtoUdp && end - p.l4_offset >= kUdpHeader) {
    p.key.src_port = load_be16(l4);
    p.key.dst_port = load_be16(l4 + 2);
    l4_hdr = kUdpHeader;
  } else if (p.key.proto == kProtoTcp && end - p.l4_offset >= 20) {
    p.key.src_port = load_be16(l4);
    p.key.dst_port = load_be16(l4 + 2);
    l4_hdr = (std::to_integer<unsigned>(l4[12]) >> 4) * 4u;
    if (l4_hdr < 20 || p.l4_offset + l4_hdr > end) l4_hdr = 20;
  } else if (p.key.proto == kProtoIcmp && end - p.l4_offset >= kIcmpHeader) {
    l4_hdr = kIcmpHeader;
  }
  p.payload_offset = p.l4_offset + l4_hdr;
  p.payload_len = end - p.payload_offset;
  return p;
}

std::uint16_t internet_checksum(std::span<const std::byte> b) noexcept {
  std::uint32_t sum = 0;
  std::size_t i = 0;
  for (; i + 1 < b.size(); i += 2) sum += load_be16(b.data() + i);
  if (i < b.size()) sum += std::to_integer<std::uint32_t>(b[i]) << 8;
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum);
}

namespace {

void write_eth(std::byte* f, const FlowKey& k) {
  // Locally administered MACs derived from the addresses.
  const std::byte dst[6]{std::byte{0x02}, std::byte{0}, std::byte(k.dst_addr >> 24), std::byte(k.dst_addr >> 16),
                         std::byte(k.dst_addr >> 8), std::byte(k.dst_addr)};
  const std::byte src[6]{std::byte{0x02}, std::byte{0}, std::byte(k.src_addr >> 24), std::byte(k.src_addr >> 16),
                         std::byte(k.src_addr >> 8), std::byte(k.src_addr)};
  std::memcpy(f, dst, 6);
  std::memcpy(f + 6, src, 6);
  store_be16(f + 12, 0x0800);
}

void write_ipv4(std::byte* ip, const FlowKey& k, std::size_t total) {
  std::memset(ip, 0, kIpv4Header);
  ip[0] = std::byte{0x45};
  store_be16(ip + 2, static_cast<std::uint16_t>(total));
  ip[6] = std::byte{0x40};  // don't fragment
  ip[8] = std::byte{64};
  ip[9] = std::byte{k.proto};
  store_be32(ip + 12, k.src_addr);
  store_be32(ip + 16, k.dst_addr);
  store_be16(ip + 10, internet_checksum({ip, kIpv4Header}));
}

}  // namespace

std::size_t write_udp_headers(std::span<std::byte> f, const FlowKey& key, std::size_t payload_len) noexcept {
  FlowKey k = key;
  k.proto = kProtoUdp;
  write_eth(f.data(), k);
  write_ipv4(f.data() + kEthHeader, k, kIpv4Header + kUdpHeader + payload_len);
  std::byte* udp = f.data() + kEthHeader + kIpv4Header;
  store_be16(udp, k.src_port);
  store_be16(udp + 2, k.dst_port);
  store_be16(udp + 4, static_cast<std::uint16_t>(kUdpHeader + payload_len));
  store_be16(udp + 6, 0);  // checksum optional over IPv4
  return kUdpOverhead + payload_len;
}

std::vector<std::byte> build_udp_frame(const FlowKey& key, std::span<const std::byte> payload) {
  if (kUdpOverhead + payload.size() > kMaxFrame) throw Error(Errc::kMessageTooLarge, "udp frame over 1500 bytes");
  std::vector<std::byte> f(kUdpOverhead + payload.size());
  write_udp_headers(f, key, payload.size());
  if (!payload.empty()) std::memcpy(f.data() + kUdpOverhead, payload.data(), payload.size());
  return f;
}

std::vector<std::byte> build_icmp_echo(const FlowKey& key, std::uint16_t id, std::uint16_t seq,
                                       std::span<const std::byte> data, bool reply) {
  FlowKey k = key;
  k.proto = kProtoIcmp;
  k.src_port = k.dst_port = 0;
  const std::size_t l4 = kIcmpHeader + data.size();
  if (kEthHeader + kIpv4Header + l4 > kMaxFrame) throw Error(Errc::kMessageTooLarge, "icmp frame over 1500 bytes");
  std::vector<std::byte> f(kEthHeader + kIpv4Header + l4);
  write_eth(f.data(), k);
  write_ipv4(f.data() + kEthHeader, k, kIpv4Header + l4);
  std::byte* icmp = f.data() + kEthHeader + kIpv4Header;
  icmp[0] = std::byte{reply ? std::uint8_t{0} : std::uint8_t{8}};
  icmp[1] = std::byte{0};
  store_be16(icmp + 4, id);
  store_be16(icmp + 6, seq);
  if (!data.empty()) std::memcpy(icmp + kIcmpHeader, data.data(), data.size());
  store_be16(icmp + 2, internet_checksum({icmp, l4}));
  return f;
}

void swap_endpoints(std::span<std::byte> f, const ParsedFrame& p) noexcept {
  std::byte mac[6];
  std::memcpy(mac, f.data(), 6);
  std::memcpy(f.data(), f.data() + 6, 6);
  std::memcpy(f.data() + 6, mac, 6);
  if (!p.ipv4) return;
  std::byte* ip = f.data() + kEthHeader;
  store_be32(ip + 12, p.key.dst_addr);
  store_be32(ip + 16, p.key.src_addr);
  if (p.key.proto == kProtoUdp || p.key.proto == kProtoTcp) {
    std::byte* l4 = f.data() + p.l4_offset;
    store_be16(l4, p.key.dst_port);
    store_be16(l4 + 2, p.key.src_port);
  }
}

std::size_t set_udp_payload_len(std::span<std::byte> f, const ParsedFrame& p, std::size_t payload_len) noexcept {
  std::byte* ip = f.data() + kEthHeader;
  const std::size_t ihl = p.l4_offset - kEthHeader;
  store_be16(ip + 2, static_cast<std::uint16_t>(ihl + kUdpHeader + payload_len));
  store_be16(ip + 10, 0);
  store_be16(ip + 10, internet_checksum({ip, ihl}));
  std::byte* udp = f.data() + p.l4_offset;
  store_be16(udp + 4, static_cast<std::uint16_t>(kUdpHeader + payload_len));
  store_be16(udp + 6, 0);
  return p.l4_offset + kUdpHeader + payload_len;
}

}  // namespace eos
