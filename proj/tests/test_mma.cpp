#include <set>
#include <thread>

#include "doctest.h"
#include "eos/mma.hpp"
#include "support.hpp"

using namespace eos;
using eos::test::HandCopier;

namespace {

struct Fixture {
  PoolDirectory dir;
  std::vector<std::unique_ptr<MessagePool>> pools;

  MessagePool& make(std::uint32_t slots = 16, std::uint32_t slot_size = 256) {
    pools.push_back(std::make_unique<MessagePool>(PoolConfig{slots, slot_size}));
    dir.add(*pools.back());
    return *pools.back();
  }
};

// Stages `text` as a Transmit entry of `pool` (owner side).
void owner_send(MessagePool& pool, const std::string& text, bool flush = true) {
  auto h = pool.alloc(text.size()).value();
  std::memcpy(pool.payload(h).data(), text.data(), text.size());
  REQUIRE(pool.send(h) == Errc::kOk);
  if (flush) pool.flush();
}

std::vector<std::string> owner_drain(MessagePool& pool) {
  std::vector<std::string> out;
  while (auto h = pool.recv()) {
    out.push_back(test::string_of(pool.payload(*h).first(pool.length(*h))));
    REQUIRE(pool.free(*h) == Errc::kOk);
  }
  return out;
}

}  // namespace

TEST_CASE("channel registration") {
  Fixture f;
  auto& a = f.make();
  auto& b = f.make();
  MmaEngine mma(f.dir);
  auto c0 = mma.register_channel(ChannelSpec{a.id(), b.id(), 0, {}, false});
  REQUIRE(c0.ok());
  CHECK(c0->value == 0);
  CHECK(mma.register_channel(ChannelSpec{a.id(), a.id(), 0, {}, false}).error() == Errc::kSelfChannel);
  CHECK(mma.register_channel(ChannelSpec{a.id(), PoolId(999999), 0, {}, false}).error() == Errc::kUnknownPool);
  CHECK(mma.register_channel(ChannelSpec{PoolId(999999), b.id(), 0, {}, false}).error() == Errc::kUnknownPool);
}

TEST_CASE("sweep visits channels in registration order") {
  Fixture f;
  MmaEngine mma(f.dir);
  std::vector<ChannelId> expected;
  for (int i = 0; i < 6; ++i) {
    auto& src = f.make();
    auto& dst = f.make();
    expected.push_back(mma.register_channel(ChannelSpec{src.id(), dst.id(), 0, {}, false}).value());
    owner_send(src, "m" + std::to_string(i));
  }
  std::vector<ChannelId> trace;
  mma.set_trace(&trace);
  CHECK(mma.sweep() == 6);
  CHECK(trace == expected);
}

TEST_CASE("single copy delivers identical bytes") {
  Fixture f;
  auto& a = f.make();
  auto& b = f.make();
  MmaEngine mma(f.dir);
  mma.register_channel(ChannelSpec{a.id(), b.id(), 0, {}, false}).value();
  owner_send(a, "hello, pool");
  CHECK(mma.sweep() == 1);
  CHECK(b.census().ready == 1);
  CHECK(a.census().free == 1);
  CHECK(owner_drain(b) == std::vector<std::string>{"hello, pool"});
  CHECK(mma.stats().bytes_copied == 11);
  CHECK(a.recycle_freed() == 1);
  CHECK(a.audit());
  CHECK(b.audit());
}

TEST_CASE("backpressure leaves Transmit entries in place") {
  Fixture f;
  auto& a = f.make(16);
  auto& b = f.make(4);
  MmaEngine mma(f.dir);
  mma.register_channel(ChannelSpec{a.id(), b.id(), 0, {}, false}).value();
  for (int i = 0; i < 4; ++i) owner_send(a, "x");
  CHECK(mma.sweep() == 4);  // b's four Receive entries are now Ready, never received
  owner_send(a, "blocked");
  CHECK(mma.sweep() == 0);
  CHECK(a.census().transmit == 1);
  CHECK(a.tx_ring().available() == 1);
  CHECK(mma.stats().stalls >= 1);
  // Once b drains, the message moves.
  CHECK(owner_drain(b).size() == 4);
  CHECK(mma.sweep() == 1);
  CHECK(owner_drain(b) == std::vector<std::string>{"blocked"});
}

TEST_CASE("batch bound: at most eight per channel per pass") {
  Fixture f;
  std::vector<MessagePool*> p;
  for (int i = 0; i < 4; ++i) p.push_back(&f.make(32));
  MmaEngine mma(f.dir);
  for (int i = 0; i < 3; ++i) mma.register_channel(ChannelSpec{p[i]->id(), p[i + 1]->id(), 0, {}, false}).value();
  for (int i = 0; i < 3; ++i)
    for (int m = 0; m < 8; ++m) owner_send(*p[i], "s" + std::to_string(i), false);
  for (int i = 0; i < 3; ++i) p[i]->flush();
  CHECK(mma.sweep() == 24);

  for (int m = 0; m < 16; ++m) owner_send(*p[0], "more", false);
  p[0]->flush();
  CHECK(mma.sweep() == 8);
  CHECK(mma.sweep() == 8);
  CHECK(mma.sweep() == 0);
}

TEST_CASE("activation events are coalesced per idle-to-runnable transition") {
  Fixture f;
  auto& a = f.make(128);
  auto& b = f.make(128);
  CoreScheduler sched(0, 1, 64);
  MmaEngine mma(f.dir);
  mma.attach_scheduler(0, sched.inbox_port(0));
  mma.register_channel(ChannelSpec{a.id(), b.id(), 0, FwpId(7), false}).value();

  owner_send(a, "first");
  mma.sweep();
  std::vector<Event> events;
  auto drain = [&] {
    while (auto ev = sched.inbox_port(0).try_pop()) events.push_back(*ev);
  };
  drain();
  REQUIRE(events.size() == 1);
  CHECK(events[0].fwp == FwpId(7));
  CHECK(events[0].reason == ActivationReason::kMessageArrived);

  // The owner has not consumed anything: 100 more messages, no new event.
  for (int i = 0; i < 100; ++i) {
    owner_send(a, "m");
    mma.sweep();
    a.recycle_freed();
  }
  drain();
  CHECK(events.size() == 1);

  // Owner drains (becomes idle); the next delivery wakes it exactly once.
  CHECK(owner_drain(b).size() == 101);
  owner_send(a, "again");
  owner_send(a, "again");
  mma.sweep();
  drain();
  CHECK(events.size() == 2);
}

TEST_CASE("full inbox: events retried, none lost") {
  Fixture f;
  CoreScheduler sched(0, 1, 2);
  MmaEngine mma(f.dir);
  mma.attach_scheduler(0, sched.inbox_port(0));
  std::vector<MessagePool*> src;
  for (int i = 0; i < 5; ++i) {
    auto& s = f.make();
    auto& d = f.make();
    mma.register_channel(ChannelSpec{s.id(), d.id(), 0, FwpId(100 + i), false}).value();
    src.push_back(&s);
  }
  for (auto* s : src) owner_send(*s, "wake");
  mma.sweep();
  CHECK(mma.pending_notifications() == 3);
  std::set<std::uint32_t> woken;
  for (int round = 0; round < 5 && woken.size() < 5; ++round) {
    while (auto ev = sched.inbox_port(0).try_pop()) woken.insert(ev->fwp.value);
    mma.sweep();
  }
  while (auto ev = sched.inbox_port(0).try_pop()) woken.insert(ev->fwp.value);
  CHECK(woken == std::set<std::uint32_t>{100, 101, 102, 103, 104});
  CHECK(mma.pending_notifications() == 0);
  CHECK(mma.stats().notify_retries >= 3);
}

TEST_CASE("zero-copy egress forwards references and defers Free") {
  Fixture f;
  auto& a = f.make();
  MmaEngine mma(f.dir);
  auto ch = mma.register_channel(ChannelSpec{a.id(), {}, 0, {}, true}).value();
  owner_send(a, "out-1");
  owner_send(a, "out-2");
  CHECK(mma.sweep() == 2);
  CHECK(a.census().transmit == 2);  // not reclaimable until transmitted
  CHECK(a.recycle_freed() == 0);
  std::vector<std::string> emitted;
  while (auto ref = mma.egress_queue().try_pop()) {
    RingEntry e = RingEntry::decode(ref->word);
    emitted.push_back(test::string_of(
        std::span<const std::byte>(ref->pool->arena().data(e.slot), ref->pool->arena().length(e.slot))));
    e.state = EntryState::kFree;
    ref->pool->tx_ring().publish(ref->pos, e);
  }
  CHECK(emitted == std::vector<std::string>{"out-1", "out-2"});
  CHECK(a.recycle_freed() == 2);
  CHECK(mma.channel_counters(ch)->bytes_copied.load() == 0);
  CHECK(mma.channel_counters(ch)->forwarded.load() == 2);
  CHECK(a.audit());
}

TEST_CASE("reference mode exchanges slots without copying") {
  PoolDirectory dir;
  auto arena = std::make_shared<SlotArena>(32, 256);
  MessagePool a(PoolConfig{16, 256}, arena, 0);
  MessagePool b(PoolConfig{16, 256}, arena, 16);
  dir.add(a);
  dir.add(b);
  MmaEngine mma(dir);
  ChannelSpec spec{a.id(), b.id(), 0, {}, false, ChannelMode::kReference};
  mma.register_channel(spec).value();
  owner_send(a, "by reference");
  CHECK(mma.sweep() == 1);
  CHECK(owner_drain(b) == std::vector<std::string>{"by reference"});
  CHECK(mma.stats().bytes_copied == 0);
  CHECK(a.recycle_freed() == 1);
  CHECK(a.audit());
  CHECK(b.audit());

  MessagePool lone(PoolConfig{16, 256});
  dir.add(lone);
  CHECK(mma.register_channel(ChannelSpec{a.id(), lone.id(), 0, {}, false, ChannelMode::kReference}).error() ==
        Errc::kInvalidArgument);
}

TEST_CASE("corrupted source entry faults the channel without copying") {
  Fixture f;
  auto& a = f.make(16);
  auto& b = f.make(16);
  MmaEngine mma(f.dir);
  auto ch = mma.register_channel(ChannelSpec{a.id(), b.id(), 0, {}, false}).value();
  REQUIRE(a.tx_ring().append(RingEntry{1u << 20, EntryState::kTransmit, 0}));
  CHECK(mma.sweep() == 0);
  CHECK(mma.channel_counters(ch)->isolation_faults.load() == 1);
  CHECK(b.census().ready == 0);
}

TEST_CASE("deregistration completes at the next sweep") {
  Fixture f;
  auto& a = f.make();
  auto& b = f.make();
  MmaEngine mma(f.dir);
  auto ch = mma.register_channel(ChannelSpec{a.id(), b.id(), 0, {}, false}).value();
  mma.sweep();
  CHECK(mma.channel_count() == 1);
  Ticket t = mma.deregister_channel(ch);
  CHECK_FALSE(ticket_done(t));
  owner_send(a, "late");
  mma.sweep();
  CHECK(ticket_done(t));
  CHECK(mma.channel_count() == 0);
  CHECK(a.census().transmit == 1);
}

TEST_CASE("engine thread moves a stream with per-channel conservation") {
  Fixture f;
  auto& a = f.make(64);
  auto& b = f.make(64);
  MmaEngine mma(f.dir);
  auto ch = mma.register_channel(ChannelSpec{a.id(), b.id(), 0, {}, false}).value();
  std::atomic<bool> stop{false};
  std::thread engine([&] { mma.run(stop); });
  constexpr int kMessages = 20000;
  int sent = 0, received = 0;
  std::uint64_t mismatches = 0;
  while (received < kMessages) {
    while (sent < kMessages) {
      auto r = a.alloc(64);
      if (!r) break;
      auto p = a.payload(*r);
      for (int i = 0; i < 64; ++i) p[i] = static_cast<std::byte>((sent + i) & 0xff);
      REQUIRE(a.send(*r) == Errc::kOk);
      ++sent;
    }
    a.flush();
    while (auto h = b.recv()) {
      auto p = b.payload(*h);
      for (int i = 0; i < 64; ++i)
        if (p[i] != static_cast<std::byte>((received + i) & 0xff)) {
          ++mismatches;
          break;
        }
      ++received;
      REQUIRE(b.free(*h) == Errc::kOk);
    }
    std::this_thread::yield();
  }
  stop.store(true);
  engine.join();
  a.recycle_freed();
  CHECK(mismatches == 0);
  CHECK(mma.channel_counters(ch)->moved.load() == kMessages);
  CHECK(a.audit());
  CHECK(b.audit());
}
