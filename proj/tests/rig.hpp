#ifndef EOS_TESTS_RIG_HPP
#define EOS_TESTS_RIG_HPP

#include <memory>
#include <string>
#include <vector>

#include "doctest.h"
#include "eos/apps.hpp"
#include "eos/dataplane.hpp"

namespace eos::test {

// Remembers the first flow it sees and counts packets of any other flow.
struct FlowCheck {
  AppCounters c;
  FlowKey first;
  std::uint64_t foreign = 0;
  bool seen = false;
};

inline void flowcheck_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<FlowCheck*>(data);
  ++st->c.received;
  const FlowKey k = parse_frame(self.payload(h).first(self.length(h))).key;
  if (!st->seen) {
    st->first = k;
    st->seen = true;
  } else if (!(k == st->first)) {
    ++st->foreign;
  }
  if (self.send(self.egress(), h) == Errc::kOk) ++st->c.forwarded;
}

inline FwpRegistry make_registry() {
  FwpRegistry r;
  register_builtin_apps(r);
  r.add("flowcheck", [](Fwp& self, std::string_view) {
    auto off = self.sbrk(sizeof(FlowCheck));
    REQUIRE(off);
    (void)self.receive_fn(flowcheck_receive, new (self.heap_at<FlowCheck>(*off)) FlowCheck{});
  });
  return r;
}

inline const FwpRegistry& registry() {
  static const FwpRegistry r = make_registry();
  return r;
}

inline ChainTemplate chain_of(std::vector<std::string> types, std::uint32_t ingress_slots = 64) {
  ChainTemplate t;
  for (const auto& ty : types) t.name += ty + "-";
  t.name += std::to_string(ingress_slots);
  for (const auto& ty : types) {
    StageSpec s;
    s.type = ty;
    s.pool = PoolConfig{64, 1536};
    s.heap_bytes = 64 * 1024;
    t.stages.push_back(s);
  }
  t.ingress_pool = PoolConfig{ingress_slots, 1536};
  return t;
}

inline DataplaneConfig manual(ManagerConfig mc = {.low_watermark = 0, .high_watermark = 0, .auto_refill = false}) {
  DataplaneConfig c;
  c.threading = Threading::kManual;
  c.manager = mc;
  return c;
}

inline FlowKey flow(std::uint32_t i, std::uint16_t dport = 9000) {
  return FlowKey{0x0a000001 + i, 0x0a000101, static_cast<std::uint16_t>(10000 + i), dport, kProtoUdp};
}

inline std::vector<std::byte> frame(const FlowKey& k, std::size_t payload, std::uint64_t seq = 0) {
  std::vector<std::byte> f(kUdpOverhead + payload);
  f.resize(default_frame(seq, 0, k, f, payload));
  return f;
}

inline FlowRule rule(TemplateId t, RuleAction a, int prio = 0) {
  FlowRule r;
  r.tmpl = t;
  r.action = a;
  r.priority = prio;
  return r;
}

// Records every emitted frame.
struct Capture {
  std::vector<std::vector<std::byte>> frames;
  std::unique_ptr<PacketSink> sink() {
    return std::make_unique<CallbackSink>([this](std::span<const std::byte> f) {
      frames.emplace_back(f.begin(), f.end());
      return true;
    });
  }
};

inline void drive(Dataplane& dp) { REQUIRE(dp.settle(2'000'000'000)); }

}  // namespace eos::test

#endif  // EOS_TESTS_RIG_HPP
