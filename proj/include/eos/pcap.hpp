#ifndef EOS_PCAP_HPP
#define EOS_PCAP_HPP

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace eos {

// Classic pcap, little-endian, Ethernet link type.
class PcapReader {
 public:
  explicit PcapReader(const std::string& path);

  // Next record; false at end of file. Truncated trailing records end the file.
  bool next(std::vector<std::byte>& frame, std::uint64_t& ts_ns);
  bool nanosecond() const noexcept { return nanos_; }

 private:
  std::ifstream in_;
  std::string path_;
  bool nanos_ = false;
  std::uint32_t snaplen_ = 0;
};

class PcapWriter {
 public:
  explicit PcapWriter(const std::string& path, std::uint32_t snaplen = 65535);

  bool write(std::span<const std::byte> frame, std::uint64_t ts_ns);
  void flush() { out_.flush(); }
  std::uint64_t records() const noexcept { return records_; }

 private:
  std::ofstream out_;
  std::uint64_t records_ = 0;
};

}  // namespace eos

#endif  // EOS_PCAP_HPP
