#include "eos/common.hpp"

namespace eos {

const char* to_string(Errc e) noexcept {
  switch (e) {
    case Errc::kOk: return "Ok";
    case Errc::kInvalidArgument: return "InvalidArgument";
    case Errc::kInvalidHandle: return "InvalidHandle";
    case Errc::kUnknownEndpoint: return "UnknownEndpoint";
    case Errc::kPoolExhausted: return "PoolExhausted";
    case Errc::kMessageTooLarge: return "MessageTooLarge";
    case Errc::kHeapExhausted: return "HeapExhausted";
    case Errc::kInboxFull: return "InboxFull";
    case Errc::kAlreadyRegistered: return "AlreadyRegistered";
    case Errc::kMissingHandler: return "MissingHandler";
    case Errc::kUnknownPool: return "UnknownPool";
    case Errc::kSelfChannel: return "SelfChannel";
    case Errc::kUnknownFwpType: return "UnknownFwpType";
    case Errc::kUnknownTemplate: return "UnknownTemplate";
    case Errc::kBadWiring: return "BadWiring";
    case Errc::kOutOfRange: return "OutOfRange";
    case Errc::kFaultedInstance: return "FaultedInstance";
    case Errc::kNoMatchingRule: return "NoMatchingRule";
    case Errc::kSinkFailure: return "SinkFailure";
    case Errc::kConfig: return "ConfigError";
    case Errc::kRuntimeFault: return "RuntimeFault";
  }
  return "Unknown";
}

}  // namespace eos
