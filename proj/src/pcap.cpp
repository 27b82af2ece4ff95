#include "eos/pcap.hpp"

#include <cstring>

#include "eos/common.hpp"

namespace eos {

namespace {

constexpr std::uint32_t kMagicMicro = 0xa1b2c3d4;
constexpr std::uint32_t kMagicNano = 0xa1b23c4d;
constexpr std::uint32_t kLinkEthernet = 1;

std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

void put_le32(unsigned char* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}

void put_le16(unsigned char* p, std::uint16_t v) {
  p[0] = static_cast<unsigned char>(v);
  p[1] = static_cast<unsigned char>(v >> 8);
}

}  // namespace

PcapReader::PcapReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw Error(Errc::kConfig, "cannot open pcap file '" + path + "'");
  unsigned char h[24];
  if (!in_.read(reinterpret_cast<char*>(h), sizeof h)) throw Error(Errc::kConfig, "'" + path + "': short pcap header");
  const std::uint32_t magic = le32(h);
  if (magic == kMagicNano) nanos_ = true;
  else if (magic != kMagicMicro) throw Error(Errc::kConfig, "'" + path + "': not a little-endian pcap file");
  snaplen_ = le32(h + 16);
  if (le32(h + 20) != kLinkEthernet) throw Error(Errc::kConfig, "'" + path + "': link type is not Ethernet");
}

bool PcapReader::next(std::vector<std::byte>& frame, std::uint64_t& ts_ns) {
  unsigned char r[16];
  if (!in_.read(reinterpret_cast<char*>(r), sizeof r)) return false;
  const std::uint64_t sec = le32(r);
  const std::uint64_t frac = le32(r + 4);
  const std::uint32_t incl = le32(r + 8);
  if (incl > 262144) throw Error(Errc::kConfig, "'" + path_ + "': corrupt record length");
  ts_ns = sec * 1'000'000'000ull + (nanos_ ? frac : frac * 1000);
  frame.resize(incl);
  if (incl != 0 && !in_.read(reinterpret_cast<char*>(frame.data()), incl)) return false;
  return true;
}

PcapWriter::PcapWriter(const std::string& path, std::uint32_t snaplen) : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw Error(Errc::kConfig, "cannot create pcap file '" + path + "'");
  unsigned char h[24]{};
  put_le32(h, kMagicNano);
  put_le16(h + 4, 2);
  put_le16(h + 6, 4);
  put_le32(h + 16, snaplen);
  put_le32(h + 20, kLinkEthernet);
  out_.write(reinterpret_cast<const char*>(h), sizeof h);
}

bool PcapWriter::write(std::span<const std::byte> frame, std::uint64_t ts_ns) {
  unsigned char r[16];
  put_le32(r, static_cast<std::uint32_t>(ts_ns / 1'000'000'000ull));
  put_le32(r + 4, static_cast<std::uint32_t>(ts_ns % 1'000'000'000ull));
  put_le32(r + 8, static_cast<std::uint32_t>(frame.size()));
  put_le32(r + 12, static_cast<std::uint32_t>(frame.size()));
  out_.write(reinterpret_cast<const char*>(r), sizeof r);
  out_.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size()));
  if (!out_) return false;
  ++records_;
  return true;
}

}  // namespace eos
