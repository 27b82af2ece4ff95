#include <atomic>
#include <cstring>
#include <stdexcept>

#include "doctest.h"
#include "eos/chain_manager.hpp"
#include "support.hpp"

using namespace eos;

namespace {

std::atomic<int> g_parses{0};

struct PassState {
  std::uint64_t seen = 0;
  std::uint32_t exit_after = 0;
  std::uint32_t fail_on = 0;
  char secret[32];
};

void pass_through(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<PassState*>(data);
  ++st->seen;
  if (st->fail_on != 0 && st->seen == st->fail_on) throw std::runtime_error("injected");
  // Leave a trace above the checkpoint break.
  auto off = self.sbrk(64);
  if (off) std::memset(self.heap_at<char>(*off), 0x5a, 64);
  std::memcpy(st->secret, "hunter2", 8);
  if (self.egress().valid()) (void)self.send(self.egress(), h);
  else (void)self.msg_free(h);
  if (st->exit_after != 0 && st->seen >= st->exit_after) self.exit();
}

void pass_init(Fwp& self, std::string_view config) {
  ++g_parses;
  auto off = self.sbrk(sizeof(PassState));
  REQUIRE(off);
  auto* st = new (self.heap_at<PassState>(*off)) PassState{};
  if (config == "exit1") st->exit_after = 1;
  if (config == "fail2") st->fail_on = 2;
  REQUIRE(self.receive_fn(pass_through, st) == Errc::kOk);
}

FwpRegistry make_registry() {
  FwpRegistry r;
  r.add("pass", pass_init);
  r.add("bare", [](Fwp&, std::string_view) {});
  return r;
}

StageSpec stage(const std::string& type = "pass", const std::string& config = "") {
  StageSpec s;
  s.type = type;
  s.config = config;
  s.pool = PoolConfig{16, 256};
  s.heap_bytes = 8192;
  return s;
}

ChainTemplate chain(std::size_t n, const std::string& config = "") {
  ChainTemplate t;
  t.name = "t" + std::to_string(n);
  for (std::size_t i = 0; i < n; ++i) t.stages.push_back(stage("pass", config));
  t.ingress_pool = PoolConfig{16, 256};
  return t;
}

// Manual topology on one core: copier port 0, activator 1, control 2.
struct Rig {
  FwpRegistry registry = make_registry();
  PoolDirectory pools;
  MmaGroup mma{pools, 1};
  CoreScheduler core{0, 3};
  ChainManager mgr;
  std::vector<std::vector<std::byte>> emitted;

  explicit Rig(ManagerConfig cfg = {.low_watermark = 0, .high_watermark = 0, .auto_refill = false})
      : mgr(registry, pools, mma, {{&core, &core.inbox_port(1), &core.inbox_port(2)}}, cfg) {
    mma.engine(0).attach_scheduler(0, core.inbox_port(0));
  }

  void net_out() {
    auto& q = mma.engine(0).egress_queue();
    while (auto r = q.try_pop()) {
      RingEntry e = RingEntry::decode(r->word);
      const std::byte* p = r->pool->arena().data(e.slot);
      emitted.emplace_back(p, p + r->pool->arena().length(e.slot));
      e.state = EntryState::kFree;
      r->pool->tx_ring().publish(r->pos, e);
    }
  }

  void pump(int rounds = 50) {
    for (int i = 0; i < rounds; ++i) {
      mma.sweep_all();
      while (core.poll_once()) {
        mma.sweep_all();
      }
      net_out();
      mgr.poll();
    }
  }

  bool inject(ChainInstance& c, const std::string& s) {
    MessagePool& in = c.ingress();
    auto h = in.alloc(s.size());
    if (!h) return false;
    std::memcpy(in.payload(*h).data(), s.data(), s.size());
    REQUIRE(in.send(*h) == Errc::kOk);
    in.flush();
    return true;
  }
};

std::string str(const std::vector<std::byte>& b) { return test::string_of(b); }

}  // namespace

TEST_CASE("template validation") {
  Rig r;
  CHECK(r.mgr.load_template(chain(1)).value == 0);
  CHECK(r.mgr.load_template(chain(2)).value == 1);
  CHECK(r.mgr.find_template("t2")->value == 1);

  ChainTemplate unknown = chain(1);
  unknown.stages[0].type = "nope";
  CHECK_THROWS_WITH_AS(r.mgr.load_template(unknown), doctest::Contains("UnknownFwpType"), Error);

  ChainTemplate empty;
  CHECK_THROWS_AS(r.mgr.load_template(empty), Error);

  ChainTemplate cyc = chain(3);
  cyc.links = {{0, 1}, {1, 2}, {2, 0}};
  try {
    r.mgr.load_template(cyc);
    FAIL("cycle accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kBadWiring);
  }
  ChainTemplate fan = chain(3);
  fan.links = {{0, 1}, {0, 2}};
  CHECK_THROWS_AS(r.mgr.load_template(fan), Error);

  ChainTemplate far = chain(1);
  far.stages[0].core = 4;
  CHECK_THROWS_AS(r.mgr.load_template(far), Error);

  ChainTemplate reordered = chain(3);
  reordered.links = {{2, 0}, {0, 1}};
  CHECK_NOTHROW(r.mgr.load_template(reordered));
}

TEST_CASE("build, cache depth and one config parse per build") {
  Rig r;
  const TemplateId t = r.mgr.load_template(chain(2));
  g_parses = 0;
  CHECK(r.mgr.build_cached(t, 3) == 3);
  CHECK(r.mgr.cache_depth(t) == 3);
  CHECK(g_parses == 6);
  CHECK(r.mgr.stats().build_ns.size() == 3);
  for (ChainInstance* c : r.mgr.instances()) {
    CHECK(c->state() == ChainState::kCached);
    CHECK(c->stages() == 2);
    for (std::size_t i = 0; i < c->stages(); ++i) CHECK(c->stage(i).state() == FwpState::kCached);
  }
  ChainInstance& a = r.mgr.activate(t);
  CHECK(a.state() == ChainState::kActive);
  CHECK(g_parses == 6);
  CHECK(r.mgr.stats().hits == 1);
  CHECK(r.mgr.cache_depth(t) == 2);
  CHECK(a.channels().size() == 3);
}

TEST_CASE("cold activation builds and counts a miss") {
  Rig r;
  const TemplateId t = r.mgr.load_template(chain(1));
  ChainInstance& c = r.mgr.activate(t);
  CHECK(c.state() == ChainState::kActive);
  auto s = r.mgr.stats();
  CHECK(s.misses == 1);
  CHECK(s.hits == 0);
  CHECK(s.builds == 1);
}

TEST_CASE("missing handler refuses activation") {
  Rig r;
  ChainTemplate t = chain(1);
  t.stages[0].type = "bare";
  const TemplateId id = r.mgr.load_template(t);
  r.mgr.build_cached(id, 1);
  try {
    r.mgr.activate(id);
    FAIL("activated without handler");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kMissingHandler);
  }
  CHECK(r.mgr.cache_depth(id) == 1);
}

TEST_CASE("messages cross a three-stage chain and reach Net-Out") {
  Rig r;
  const TemplateId t = r.mgr.load_template(chain(3));
  ChainInstance& c = r.mgr.activate(t);
  for (int i = 0; i < 40; ++i) {
    while (!r.inject(c, "msg-" + std::to_string(i))) r.pump(1);
  }
  r.pump();
  REQUIRE(r.emitted.size() == 40);
  for (int i = 0; i < 40; ++i) CHECK(str(r.emitted[i]) == "msg-" + std::to_string(i));
  CHECK(r.core.lost_wakeups().empty());
  CHECK(r.mma.stats().bytes_copied > 0);
  const ChannelCounters* eg = r.mma.engine(0).channel_counters(c.channels().back());
  REQUIRE(eg != nullptr);
  CHECK(eg->bytes_copied.load() == 0);
  CHECK(eg->forwarded.load() == 40);
}

TEST_CASE("terminate_restore returns an instance equal to a fresh one") {
  Rig r;
  const TemplateId t = r.mgr.load_template(chain(2));
  r.mgr.build_cached(t, 1);
  ChainInstance& c = r.mgr.activate(t);
  const std::vector<std::byte> image(c.image().begin(), c.image().end());
  std::vector<PoolSnapshot> fresh;
  for (std::size_t i = 0; i < c.stages(); ++i) fresh.push_back(c.stage(i).pool().snapshot());

  for (int i = 0; i < 5; ++i) REQUIRE(r.inject(c, "secret-payload-" + std::to_string(i)));
  r.pump();
  CHECK(r.emitted.size() == 5);
  CHECK(c.stage(0).heap().residual_bytes() > 0);

  r.mgr.request_terminate(c);
  CHECK(c.state() == ChainState::kTerminating);
  r.pump();
  CHECK(c.state() == ChainState::kCached);
  CHECK(r.mgr.cache_depth(t) == 1);
  CHECK(r.mgr.stats().restores == 1);
  CHECK(r.core.registered() == 0);

  for (std::size_t i = 0; i < c.stages(); ++i) {
    const Fwp& f = c.stage(i);
    CHECK(f.heap().residual_bytes() == 0);
    CHECK(f.heap().guards_intact());
    CHECK(f.pool().snapshot().same_layout(fresh[i]));
    for (std::byte b : f.pool().arena().bytes()) REQUIRE(b == std::byte{0});
    std::string why;
    CHECK_MESSAGE(f.pool().audit(&why), why);
  }
  for (std::byte b : c.ingress().arena().bytes()) REQUIRE(b == std::byte{0});
  // The checkpointed heap bytes are unchanged by the run.
  std::size_t off = 0;
  for (std::size_t i = 0; i < c.stages(); ++i) {
    auto used = c.stage(i).heap().used();
    CHECK(std::equal(used.begin(), used.end(), image.begin() + static_cast<std::ptrdiff_t>(off)));
    off += used.size();
  }

  // Reuse: the same instance comes back and works.
  ChainInstance& again = r.mgr.activate(t);
  CHECK(&again == &c);
  CHECK(again.activations() == 2);
  REQUIRE(r.inject(again, "second"));
  r.pump();
  CHECK(str(r.emitted.back()) == "second");
}

TEST_CASE("an app exit tears its chain down") {
  Rig r;
  const TemplateId t = r.mgr.load_template(chain(1, "exit1"));
  r.mgr.build_cached(t, 1);
  ChainInstance& c = r.mgr.activate(t);
  REQUIRE(r.inject(c, "only"));
  r.pump();
  CHECK(r.emitted.size() == 1);
  CHECK(c.state() == ChainState::kCached);
  CHECK(r.mgr.stats().terminations == 1);
}

TEST_CASE("a faulted chain is discarded and peers stay sound") {
  Rig r;
  const TemplateId bad = r.mgr.load_template(chain(2, "fail2"));
  const TemplateId good = r.mgr.load_template(chain(1));
  ChainInstance& g = r.mgr.activate(good);
  ChainInstance& c = r.mgr.activate(bad);
  const ChainId cid = c.id();
  for (int i = 0; i < 4; ++i) REQUIRE(r.inject(c, "x" + std::to_string(i)));
  REQUIRE(r.inject(g, "peer"));
  r.pump(200);
  auto s = r.mgr.stats();
  CHECK(s.discards == 1);
  CHECK(s.discarded_messages > 0);
  for (ChainInstance* i : r.mgr.instances()) CHECK(i->id() != cid);
  CHECK(r.mgr.cache_depth(bad) == 0);
  CHECK(g.state() == ChainState::kActive);
  std::string why;
  CHECK_MESSAGE(g.stage(0).pool().audit(&why), why);
  bool peer_seen = false;
  for (auto& e : r.emitted) peer_seen |= str(e) == "peer";
  CHECK(peer_seen);
}

TEST_CASE("reclaim empties the cache and forces a miss") {
  Rig r;
  const TemplateId t = r.mgr.load_template(chain(1));
  r.mgr.build_cached(t, 3);
  CHECK(r.mgr.reclaim(t, 0) == 0);
  CHECK(r.mgr.reclaim(t, 5) == 3);
  CHECK(r.mgr.cache_depth(t) == 0);
  CHECK(r.mgr.instances().empty());
  r.mgr.activate(t);
  CHECK(r.mgr.stats().misses == 1);
  CHECK(r.mgr.stats().reclaimed == 3);
}

TEST_CASE("watermark refill") {
  Rig r(ManagerConfig{.low_watermark = 2, .high_watermark = 5, .auto_refill = true});
  const TemplateId t = r.mgr.load_template(chain(1));
  r.mgr.build_cached(t, 2);
  std::vector<std::size_t> depth;
  r.mgr.activate(t);  // depth 1 < low
  depth.push_back(r.mgr.cache_depth(t));
  for (int i = 0; i < 8; ++i) {
    r.mgr.poll();
    depth.push_back(r.mgr.cache_depth(t));
  }
  CHECK(depth.front() == 1);
  CHECK(depth.back() == 5);
  CHECK(std::is_sorted(depth.begin(), depth.end()));
}

TEST_CASE("reference mode exchanges slots and is discarded on teardown") {
  Rig r;
  ChainTemplate t = chain(2);
  t.mode = ChannelMode::kReference;
  const TemplateId id = r.mgr.load_template(t);
  ChainInstance& c = r.mgr.activate(id);
  for (int i = 0; i < 10; ++i) REQUIRE(r.inject(c, "ref" + std::to_string(i)));
  r.pump();
  REQUIRE(r.emitted.size() == 10);
  CHECK(str(r.emitted[9]) == "ref9");
  CHECK(r.mma.engine(0).channel_counters(c.channels()[0])->bytes_copied.load() == 0);
  r.mgr.request_terminate(c);
  r.pump();
  CHECK(r.mgr.stats().discards == 1);
}
