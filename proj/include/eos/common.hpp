#ifndef EOS_COMMON_HPP
#define EOS_COMMON_HPP

#include <chrono>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

namespace eos {

enum class Errc : std::uint8_t {
  kOk = 0,
  kInvalidArgument,
  kInvalidHandle,
  kUnknownEndpoint,
  kPoolExhausted,
  kMessageTooLarge,
  kHeapExhausted,
  kInboxFull,
  kAlreadyRegistered,
  kMissingHandler,
  kUnknownPool,
  kSelfChannel,
  kUnknownFwpType,
  kUnknownTemplate,
  kBadWiring,
  kOutOfRange,
  kFaultedInstance,
  kNoMatchingRule,
  kSinkFailure,
  kConfig,
  kRuntimeFault,
};

const char* to_string(Errc e) noexcept;

/// Control-plane failures are reported as exceptions carrying an Errc.
/// Data-path operations return Errc / Result instead and never throw.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  explicit Error(Errc code) : std::runtime_error(to_string(code)), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

template <class T>
class [[nodiscard]] Result {
 public:
  Result(T value) : value_(std::move(value)) {}  // NOLINT(google-explicit-constructor)
  Result(Errc code) : code_(code) {}             // NOLINT(google-explicit-constructor)

  bool ok() const noexcept { return code_ == Errc::kOk; }
  explicit operator bool() const noexcept { return ok(); }
  Errc error() const noexcept { return code_; }

  T& value() & {
    if (!ok()) throw Error(code_);
    return *value_;
  }
  const T& value() const& {
    if (!ok()) throw Error(code_);
    return *value_;
  }
  T* operator->() { return &value(); }
  const T* operator->() const { return &value(); }
  T& operator*() { return value(); }

 private:
  std::optional<T> value_;
  Errc code_ = Errc::kOk;
};

/// Typed integer identity. Tags keep pools, FWPs, channels and endpoints apart.
template <class Tag>
struct Id {
  std::uint32_t value = kInvalid;

  static constexpr std::uint32_t kInvalid = 0xffffffffu;

  constexpr Id() = default;
  constexpr explicit Id(std::uint32_t v) : value(v) {}

  constexpr bool valid() const noexcept { return value != kInvalid; }
  friend constexpr auto operator<=>(Id, Id) = default;
};

using PoolId = Id<struct PoolTag>;
using FwpId = Id<struct FwpTag>;
using ChannelId = Id<struct ChannelTag>;
using EndpointId = Id<struct EndpointTag>;
using TemplateId = Id<struct TemplateTag>;
using ChainId = Id<struct ChainTag>;
using CoreId = std::uint32_t;

using Clock = std::chrono::steady_clock;
using Nanos = std::chrono::nanoseconds;

inline std::uint64_t now_ns() noexcept {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<Nanos>(Clock::now().time_since_epoch()).count());
}

constexpr bool is_power_of_two(std::uint64_t v) noexcept { return v != 0 && (v & (v - 1)) == 0; }

constexpr std::size_t kCacheLine = 64;

}  // namespace eos

template <class Tag>
struct std::hash<eos::Id<Tag>> {
  std::size_t operator()(eos::Id<Tag> id) const noexcept { return std::hash<std::uint32_t>{}(id.value); }
};

#endif  // EOS_COMMON_HPP
