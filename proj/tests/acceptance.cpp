// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <deque>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "eos/apps.hpp"
#include "eos/dataplane.hpp"
#include "eos/scenario.hpp"
#include "ring_model.hpp"
#include "support.hpp"

using namespace eos;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

const FwpRegistry& registry() {
  static const FwpRegistry r = [] {
    FwpRegistry reg;
    register_builtin_apps(reg);
    return reg;
  }();
  return r;
}

std::string config(const char* name) { return std::string(EOS_CONFIG_DIR) + "/" + name; }

double seconds_since(std::uint64_t t0) { return static_cast<double>(now_ns() - t0) / 1e9; }

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

FlowKey flow(std::uint32_t i, std::uint16_t dport = 9000) {
  return FlowKey{0x0a000001 + i, 0x0a000101, static_cast<std::uint16_t>(10000 + i), dport, kProtoUdp};
}

std::vector<std::byte> udp_frame(const FlowKey& k, std::size_t payload, std::uint64_t seq) {
  std::vector<std::byte> f(kUdpOverhead + payload);
  f.resize(default_frame(seq, 0, k, f, payload));
  return f;
}

ChainTemplate chain_of(const std::vector<std::string>& types, std::uint32_t slots = 64) {
  ChainTemplate t;
  for (const auto& ty : types) t.name += ty + "-";
  for (const auto& ty : types) {
    StageSpec s;
    s.type = ty;
    s.pool = PoolConfig{slots, 1536};
    s.heap_bytes = 64 * 1024;
    t.stages.push_back(s);
  }
  t.ingress_pool = PoolConfig{slots, 1536};
  return t;
}

FlowRule rule(TemplateId t, RuleAction a) {
  FlowRule r;
  r.tmpl = t;
  r.action = a;
  return r;
}

DataplaneConfig manual() {
  DataplaneConfig c;
  c.threading = Threading::kManual;
  c.manager.auto_refill = false;
  c.manager.low_watermark = 0;
  c.manager.high_watermark = 0;
  return c;
}

// ---- 1 ----

Verdict ring_soundness() {
  const std::uint64_t t0 = now_ns();
  std::size_t states = 0;
  for (std::uint32_t cap : {1u, 2u, 4u, 8u}) {
    auto res = test::explore(cap, test::kCoreOps, 512);
    if (!res.failure.empty()) return {false, "cap " + std::to_string(cap) + ": " + res.failure};
    if (!res.exhausted) return {false, "cap " + std::to_string(cap) + ": depth bound reached"};
    if (res.transitions != test::legal_transitions())
      return {false, "cap " + std::to_string(cap) + ": transition set differs from the legal five"};
    states += res.states;
  }

  MessagePool pool(PoolConfig{16, 64});
  test::HandCopier copier(pool);
  std::mt19937_64 rng(11);
  std::deque<MsgHandle> held;
  std::set<std::uint64_t> unread;
  std::uint64_t next = 0, sent = 0, completed = 0, lost = 0, dup = 0;
  auto seq_of = [&](MsgHandle h) {
    std::uint64_t v;
    std::memcpy(&v, pool.payload(h).data(), 8);
    return v;
  };
  auto take = [&](MsgHandle h) {
    if (pool.length(h) == 8 && unread.erase(seq_of(h)) != 1) ++dup;
  };
  for (int step = 0; step < 1'000'000; ++step) {
    switch (rng() % 7) {
      case 0:
      case 1: {
        std::vector<std::byte> b(8);
        std::memcpy(b.data(), &next, 8);
        if (copier.deliver(b)) unread.insert(next++);
        break;
      }
      case 2:
        if (auto h = pool.recv()) {
          take(*h);
          held.push_back(*h);
        }
        break;
      case 3:
        if (!held.empty()) {
          if (pool.send(held.front()) != Errc::kOk) return {false, "send of a held handle failed"};
          held.pop_front();
          ++sent;
        }
        break;
      case 4:
        if (copier.complete()) ++completed;
        break;
      case 5:
        if (rng() % 2) {
          pool.flush();
        } else if (!held.empty()) {
          if (pool.free(held.front()) != Errc::kOk) return {false, "free of a held handle failed"};
          held.pop_front();
        }
        break;
      case 6:
        if (auto r = pool.alloc(4)) held.push_back(*r);
        break;
    }
    std::string why;
    if (!pool.audit(&why)) return {false, "audit at op " + std::to_string(step) + ": " + why};
  }
  while (auto h = pool.recv()) {
    take(*h);
    (void)pool.free(*h);
  }
  lost = unread.size();
  pool.flush();
  while (copier.complete()) ++completed;
  const double secs = seconds_since(t0);
  const bool ok = lost == 0 && dup == 0 && completed == sent && secs <= 120;
  return {ok, std::to_string(states) + " states over capacities 1..8, 10^6 ops: delivered " + std::to_string(next) +
                  " lost " + std::to_string(lost) + " duplicated " + std::to_string(dup) + ", " + fmt(secs, 1) + " s"};
}

// ---- 2 ----

Verdict copy_fidelity() {
  const std::uint64_t t0 = now_ns();
  constexpr std::uint64_t kMessages = 1'000'000;
  std::deque<std::uint64_t> expected;
  std::uint64_t mismatched = 0, emitted = 0;

  Dataplane dp(registry(), manual());
  dp.net_out().set_sink(std::make_unique<CallbackSink>([&](std::span<const std::byte> f) {
    ++emitted;
    if (expected.empty() || test::fnv1a(f) != expected.front()) ++mismatched;
    if (!expected.empty()) expected.pop_front();
    return true;
  }));
  const TemplateId t = dp.manager().load_template(chain_of({"fwd", "fwd", "fwd"}));
  dp.net_in().table().add_rule(rule(t, RuleAction::kSharedChain));
  const FlowKey k = flow(1);
  std::uint64_t seq = 0;
  std::vector<std::byte> f = udp_frame(k, 32, 0);
  while (seq < kMessages) {
    for (int burst = 0; burst < 32 && seq < kMessages; ++burst) {
      if (f.empty()) f = udp_frame(k, 16 + (seq * 37) % 1400, seq);
      if (dp.net_in().admit(f, now_ns()) != Admit::kAdmitted) break;
      expected.push_back(test::fnv1a(f));
      f.clear();
      ++seq;
    }
    dp.net_in().flush();
    dp.step();
  }
  if (!dp.settle(10'000'000'000ull)) return {false, "chain did not settle"};
  const bool audit_ok = dp.shutdown_chains() && dp.audit().ok();

  // Forger between two forwarders: every forged handle and endpoint must fail.
  Dataplane fdp(registry(), manual());
  std::uint64_t forwarded = 0;
  fdp.net_out().set_sink(std::make_unique<CallbackSink>([&](std::span<const std::byte>) {
    ++forwarded;
    return true;
  }));
  const TemplateId ft = fdp.manager().load_template(chain_of({"fwd", "forger", "fwd"}));
  fdp.net_in().table().add_rule(rule(ft, RuleAction::kSharedChain));
  for (std::uint64_t i = 0; i < 2000; ++i) {
    const auto fr = udp_frame(k, 64, i);
    while (fdp.net_in().admit(fr, now_ns()) != Admit::kAdmitted) {
      fdp.net_in().flush();
      fdp.step();
    }
    if (i % 32 == 31) fdp.net_in().flush();
  }
  fdp.net_in().flush();
  if (!fdp.settle(10'000'000'000ull)) return {false, "forger chain did not settle"};
  ChainInstance* c = fdp.net_in().chain_for(k);
  if (c == nullptr) return {false, "forger chain not bound"};
  const Fwp& forger = c->stage(1);
  const std::uint64_t successes = app_counters(forger)->errors;
  const std::uint64_t rejected = forger.pool().counters().rejected_handles + forger.counters().rejected;
  const double secs = seconds_since(t0);
  const bool ok = emitted == kMessages && mismatched == 0 && expected.empty() && audit_ok && successes == 0 &&
                  rejected > 0 && forwarded == 2000 && !forger.faulted() && secs <= 120;
  return {ok, std::to_string(emitted) + " messages, " + std::to_string(mismatched) + " checksum mismatches; forger: " +
                  std::to_string(successes) + " successes, " + std::to_string(rejected) + " rejected; " +
                  fmt(secs, 1) + " s"};
}

// ---- 3 ----

Verdict activation_vs_create() {
  const MetricsReport r = run_scenario(load_scenario(config("startup.json")), registry());
  const double ratio = r.derived.at("create_over_activate");
  const double spread = r.derived.at("activation_heap_spread");
  std::string rows;
  for (const auto& row : r.rows)
    rows += " heap " + fmt(row.values.at("heap_kib"), 0) + " KiB activate p50 " +
            fmt(row.values.at("activate_p50_us")) + " us;";
  return {ratio >= 10 && spread < 0.20 && r.audit_ok,
          "create/activate " + fmt(ratio, 1) + "x (>= 10), heap spread " + fmt(spread * 100, 1) + "% (< 20%);" + rows};
}

// ---- 4 ----

Verdict restore_cost() {
  constexpr int kRestores = 1000;
  Dataplane dp(registry(), manual());
  dp.net_out().set_sink(std::make_unique<CounterSink>());
  ChainTemplate t = load_scenario(config("startup.json")).templates.front().tmpl;
  const TemplateId id = dp.manager().load_template(t);
  dp.net_in().table().add_rule(rule(id, RuleAction::kPerFlowChain));
  dp.manager().build_cached(id, 1);
  for (int i = 0; i < kRestores; ++i) {
    const FlowKey k = flow(static_cast<std::uint32_t>(i));
    for (int m = 0; m < 8; ++m) (void)dp.net_in().admit(udp_frame(k, 128, m), now_ns());
    dp.net_in().flush();
    if (!dp.settle() || !dp.shutdown_chains()) return {false, "restore cycle " + std::to_string(i) + " stalled"};
  }
  const ChainStats cs = dp.manager().stats();
  if (cs.restore.size() < kRestores) return {false, "only " + std::to_string(cs.restore.size()) + " restores"};

  std::size_t max_image = 0, max_zero = 0;
  for (const auto& rc : cs.restore) {
    max_image = std::max(max_image, rc.image_bytes);
    max_zero = std::max(max_zero, rc.zeroed_bytes);
  }
  std::vector<std::byte> src(max_image + 1, std::byte{0x3c}), dst(max_image + 1), zero(max_zero + 1);
  std::uint64_t restore_ns = 0, plain_ns = 0, sink = 0;
  for (const auto& rc : cs.restore) {
    const std::uint64_t t0 = now_ns();
    std::memcpy(dst.data(), src.data(), rc.image_bytes);
    std::memset(zero.data(), 0, rc.zeroed_bytes);
    plain_ns += now_ns() - t0;
    sink += static_cast<std::uint8_t>(dst[rc.image_bytes / 2]) + static_cast<std::uint8_t>(zero[rc.zeroed_bytes / 2]);
    restore_ns += rc.ns;
  }
  const double ratio = static_cast<double>(restore_ns) / static_cast<double>(std::max<std::uint64_t>(1, plain_ns));
  const auto& first = cs.restore.front();
  return {ratio <= 3.0 && sink != 1,
          std::to_string(cs.restore.size()) + " restores, " + fmt(ratio, 2) + "x plain copy+zero (<= 3x); " +
              std::to_string(first.image_bytes) + " image + " + std::to_string(first.zeroed_bytes) +
              " zeroed bytes, mean " + fmt(static_cast<double>(restore_ns) / cs.restore.size() / 1000, 2) + " us"};
}

// ---- 5 ----

Verdict scale() {
  const MetricsReport r = run_scenario(load_scenario(config("scale.json")), registry());
  const double sd = r.derived.at("stddev_over_median");
  const double drift = r.derived.at("last_over_first_decile");
  return {sd <= 0.10 && drift <= 1.5 && r.audit_ok,
          fmt(r.derived.at("chains"), 0) + " chains, median " + fmt(r.activation.p50_us) + " us, stddev/median " +
              fmt(sd) + " (<= 0.10), last/first decile " + fmt(drift) + " (<= 1.5)"};
}

// ---- 6 ----

Verdict churn() {
  const MetricsReport r = run_scenario(load_scenario(config("churn.json")), registry());
  const std::uint64_t activations = r.cache_hits + r.cache_misses;
  const double p90 = r.latency.p90_us;
  return {p90 <= 200 && r.emitted == r.received && activations >= r.received && r.audit_ok,
          std::to_string(r.received) + " requests, " + std::to_string(activations) + " activations, p90 " + fmt(p90) +
              " us (<= 200), p99 " + fmt(r.latency.p99_us) + " us"};
}

// ---- 7 ----

Verdict chain_overhead() {
  const MetricsReport r = run_scenario(load_scenario(config("chain.json")), registry());
  bool ok = r.audit_ok;
  std::string rates64;
  double min_ratio = 1e9;
  for (const auto& row : r.rows) {
    const double size = std::stod(row.labels.at("size"));
    const double len = row.values.at("length");
    if (size == 64) rates64 += " " + fmt(row.values.at("copy_msgs_per_s") / 1e6, 2);
    if (size == 1024 && len >= 1 && len <= 3) {
      const double q = row.values.at("copy_over_reference");
      min_ratio = std::min(min_ratio, q);
      ok = ok && q >= 0.80;
    }
  }
  if (min_ratio == 1e9) return {false, "no 1024-byte rows for lengths 1-3"};
  const auto m = r.derived.find("monotone_64");
  const bool mono = m != r.derived.end() && m->second == 1.0;
  return {ok && mono, "1024 B copy/reference min over lengths 1-3 " + fmt(min_ratio) +
                         " (>= 0.80); 64 B Mmsg/s by length" + rates64 + (mono ? ", monotone" : ", not monotone")};
}

// ---- 8 ----

class Hog : public Task {
 public:
  explicit Hog(std::uint32_t id) : id_(id) {}
  FwpId task_id() const noexcept override { return id_; }
  RunOutcome run(const RunBudget& b) override {
    while (now_ns() < b.deadline_ns) {
    }
    return RunOutcome::kPreempted;
  }

 private:
  FwpId id_;
};

Verdict scheduler_properties() {
  int clean = 0;
  std::string first_failure;
  for (int run = 0; run < 100; ++run) {
    std::mt19937_64 rng(1000 + run);
    DataplaneConfig cfg;
    cfg.threading = run % 5 == 0 ? Threading::kShared : Threading::kManual;
    cfg.cores = 1 + rng() % 2;
    cfg.manager.auto_refill = false;
    Dataplane dp(registry(), cfg);
    dp.net_out().set_sink(std::make_unique<CounterSink>());
    static const std::uint32_t kSlots[] = {2, 4, 8, 16};
    ChainTemplate t;
    t.name = "r" + std::to_string(run);
    const std::size_t len = 1 + rng() % 4;
    for (std::size_t i = 0; i < len; ++i) {
      StageSpec s;
      s.type = "fwd";
      s.pool = PoolConfig{kSlots[rng() % 4], 512};
      s.heap_bytes = 16 * 1024;
      s.core = static_cast<CoreId>(rng() % cfg.cores);
      t.stages.push_back(s);
    }
    t.ingress_pool = PoolConfig{kSlots[rng() % 4], 512};
    const TemplateId id = dp.manager().load_template(t);
    dp.net_in().table().add_rule(rule(id, rng() % 2 ? RuleAction::kPerFlowChain : RuleAction::kSharedChain));
    SyntheticSpec src;
    src.flows = 1 + rng() % 8;
    src.uniform_mix = rng() % 2;
    src.count = 200 + rng() % 2000;
    src.payload = 16 + rng() % 400;
    src.seed = rng();
    dp.net_in().add_source(std::make_unique<SyntheticSource>(src));
    if (cfg.threading != Threading::kManual) dp.start();
    const bool settled = dp.settle(20'000'000'000ull);
    if (dp.running()) dp.stop();
    std::size_t lost = 0;
    for (std::size_t c = 0; c < dp.core_count(); ++c) lost += dp.core(c).lost_wakeups().size();
    const auto in = dp.net_in().stats();
    const bool delivered = dp.net_out().stats().emitted == in.admitted && in.received == src.count;
    const bool audit = dp.shutdown_chains() && dp.audit().ok();
    if (settled && lost == 0 && delivered && audit) {
      ++clean;
    } else if (first_failure.empty()) {
      first_failure = "; run " + std::to_string(run) + ": settled " + std::to_string(settled) + " lost " +
                      std::to_string(lost) + " delivered " + std::to_string(delivered);
    }
  }

  constexpr int kHogs = 4;
  CoreScheduler s(0, 1);
  std::vector<std::unique_ptr<Hog>> hogs;
  for (int i = 0; i < kHogs; ++i) {
    hogs.push_back(std::make_unique<Hog>(i + 1));
    (void)s.register_task(*hogs.back(), s.inbox_port(0));
    Event e;
    e.kind = EventKind::kActivate;
    e.fwp = FwpId(static_cast<std::uint32_t>(i + 1));
    (void)s.inbox_port(0).try_push(e);
    s.handle_inbox();
  }
  s.enable_log(true, 100'000);
  const std::uint64_t end = now_ns() + 5'000'000'000ull;
  while (now_ns() < end) s.poll_once();
  std::vector<double> busy(kHogs, 0.0);
  double total = 0;
  for (const auto& rec : s.log()) {
    const double d = static_cast<double>(rec.end_ns - rec.start_ns);
    busy[rec.fwp.value - 1] += d;
    total += d;
  }
  bool fair = total > 0;
  std::string shares;
  for (double b : busy) {
    const double share = b / std::max(1.0, total);
    fair = fair && std::abs(share - 1.0 / kHogs) <= 0.10 / kHogs;
    shares += " " + fmt(share);
  }
  return {clean == 100 && fair, std::to_string(clean) + "/100 randomized runs quiescent with no lost wakeup" +
                                    first_failure + "; " + std::to_string(kHogs) + " hogs over 5 s, shares" + shares +
                                    " (0.25 +/- 0.025)"};
}

// ---- 9 ----

std::size_t occurrences(std::span<const std::byte> hay, const std::string& needle) {
  std::size_t n = 0;
  const auto* b = reinterpret_cast<const char*>(hay.data());
  for (auto it = std::search(b, b + hay.size(), needle.begin(), needle.end()); it != b + hay.size();
       it = std::search(it + 1, b + hay.size(), needle.begin(), needle.end()))
    ++n;
  return n;
}

Verdict confidentiality() {
  Dataplane dp(registry(), manual());
  std::vector<std::vector<std::byte>> out;
  dp.net_out().set_sink(std::make_unique<CallbackSink>([&](std::span<const std::byte> f) {
    out.emplace_back(f.begin(), f.end());
    return true;
  }));
  ChainTemplate t = chain_of({"kv"});
  t.stages[0].config = R"({"capacity":64,"max_value":256})";
  const TemplateId id = dp.manager().load_template(t);
  dp.net_in().table().add_rule(rule(id, RuleAction::kSharedChain));
  const FlowKey k = flow(3, 11211);
  auto ask = [&](std::uint16_t rid, const std::string& req) -> std::string {
    out.clear();
    if (dp.net_in().admit(memcache_frame(k, rid, req), now_ns()) != Admit::kAdmitted) return "<not admitted>";
    dp.net_in().flush();
    if (!dp.settle() || out.size() != 1) return "<no reply>";
    return memcache_reply_text(out[0]);
  };
  std::mt19937_64 rng(99);
  int end_replies = 0;
  std::size_t residual = 0, nonzero_above_break = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    char secret[40];
    std::snprintf(secret, sizeof secret, "S%04d-%016llx", trial, static_cast<unsigned long long>(rng()));
    const std::string value = std::string(secret) + std::string(96, 'Z');
    const auto rid = static_cast<std::uint16_t>(trial * 3);
    if (ask(rid, "set key 0 0 " + std::to_string(value.size()) + "\r\n" + value + "\r\n") != "STORED\r\n") break;
    if (ask(rid + 1, "get key\r\n").find(secret) == std::string::npos) break;
    ChainInstance* c = dp.net_in().chain_for(k);
    if (c == nullptr || !dp.shutdown_chains()) break;
    for (std::size_t s = 0; s < c->stages(); ++s) {
      residual += occurrences(c->stage(s).heap().all(), secret);
      residual += occurrences(c->stage(s).pool().arena().bytes(), secret);
      nonzero_above_break += c->stage(s).heap().residual_bytes();
    }
    residual += occurrences(c->ingress().arena().bytes(), secret);
    if (ask(rid + 2, "get key\r\n") == "END\r\n") ++end_replies;
  }
  return {end_replies == 1000 && residual == 0 && nonzero_above_break == 0,
          std::to_string(end_replies) + "/1000 END after reuse, " + std::to_string(residual) +
              " residual secret copies, " + std::to_string(nonzero_above_break) + " non-zero bytes above the break"};
}

// ---- 10 ----

Verdict kv_endpoint() {
  const Scenario s = load_scenario(config("kv.json"));
  const MetricsReport r = run_scenario(s, registry());
  double drops_half = -1, p99_low = 0, p99_half = 0;
  for (const auto& row : r.rows) {
    const double f = std::stod(row.labels.at("load"));
    if (std::abs(f - 0.5) < 1e-9) {
      drops_half = row.values.at("drops");
      p99_half = row.values.at("p99_us");
    }
    if (std::abs(f - 0.1) < 1e-9) p99_low = row.values.at("p99_us");
  }
  const double ratio = p99_half / std::max(1e-9, p99_low);
  const bool mix = s.source.get_ratio == 0.95 && s.source.value_size == 135;
  return {mix && drops_half == 0 && ratio <= 5 && r.audit_ok,
          "C " + fmt(r.derived.at("capacity_rps"), 0) + " req/s, drops at 0.5 C " + fmt(drops_half, 0) +
              ", p99 0.1 C " + fmt(p99_low, 2) + " us, 0.5 C " + fmt(p99_half, 2) + " us, ratio " + fmt(ratio, 2) +
              " (<= 5)"};
}

}  // namespace

// Optional arguments select criteria by number.
int main(int argc, char** argv) {
  struct Criterion {
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {"ring state machine soundness", ring_soundness},
      {"copy fidelity and isolation", copy_fidelity},
      {"activation vs creation", activation_vs_create},
      {"restore cost", restore_cost},
      {"scale without drift", scale},
      {"churn", churn},
      {"chain copy overhead", chain_overhead},
      {"scheduler properties", scheduler_properties},
      {"confidentiality across reuse", confidentiality},
      {"kv endpoint", kv_endpoint},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && only.count(i + 1) == 0) continue;
    ++ran;
    Verdict v;
    try {
      v = criteria[i].run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].name << ": " << v.detail
              << std::endl;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
