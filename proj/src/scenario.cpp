#include "eos/scenario.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "eos/apps.hpp"
#include "eos/packet.hpp"

namespace eos {

using nlohmann::json;

// ---- metrics ----

std::uint64_t percentile(const std::vector<std::uint64_t>& sorted, double q) noexcept {
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

LatencySummary summarize(std::vector<std::uint64_t> ns) {
  LatencySummary s;
  if (ns.empty()) return s;
  std::sort(ns.begin(), ns.end());
  auto us = [](double v) { return v / 1000.0; };
  s.samples = ns.size();
  s.min_us = us(static_cast<double>(ns.front()));
  s.max_us = us(static_cast<double>(ns.back()));
  const double sum = std::accumulate(ns.begin(), ns.end(), 0.0, [](double a, std::uint64_t v) { return a + static_cast<double>(v); });
  const double mean = sum / static_cast<double>(ns.size());
  double var = 0;
  for (auto v : ns) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  s.mean_us = us(mean);
  s.stddev_us = us(std::sqrt(var / static_cast<double>(ns.size())));
  s.p50_us = us(static_cast<double>(percentile(ns, 0.50)));
  s.p90_us = us(static_cast<double>(percentile(ns, 0.90)));
  s.p99_us = us(static_cast<double>(percentile(ns, 0.99)));
  s.p999_us = us(static_cast<double>(percentile(ns, 0.999)));
  return s;
}

double median_ns(std::vector<std::uint64_t> ns) {
  if (ns.empty()) return 0;
  std::sort(ns.begin(), ns.end());
  return static_cast<double>(percentile(ns, 0.5));
}

const char* to_string(Experiment e) noexcept {
  switch (e) {
    case Experiment::kTraffic: return "traffic";
    case Experiment::kStartup: return "startup";
    case Experiment::kScale: return "scale";
    case Experiment::kChain: return "chain";
    case Experiment::kKv: return "kv";
  }
  return "?";
}

// ---- parsing ----

namespace {

constexpr std::uint64_t kMaxCpu = 1023;

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw Error(Errc::kConfig, path + ": " + msg); }

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }
std::string index(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

void only(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) fail(path.empty() ? "<root>" : path, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
      fail(join(path, it.key()), "unknown field");
  }
}

const json* field(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

std::string str(const json& j, const std::string& path, const char* key, std::string def) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  if (!v->is_string()) fail(join(path, key), "expected a string");
  return v->get<std::string>();
}

bool boolean(const json& j, const std::string& path, const char* key, bool def) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  if (!v->is_boolean()) fail(join(path, key), "expected true or false");
  return v->get<bool>();
}

double number(const json& j, const std::string& path, const char* key, double def, double lo, double hi) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  if (!v->is_number()) fail(join(path, key), "expected a number");
  const double d = v->get<double>();
  if (!(d >= lo && d <= hi)) {
    std::ostringstream os;
    os << "must be in [" << lo << ", " << hi << "], got " << d;
    fail(join(path, key), os.str());
  }
  return d;
}

std::uint64_t integer(const json& j, const std::string& path, const char* key, std::uint64_t def, std::uint64_t lo,
                      std::uint64_t hi) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0))
    fail(join(path, key), "expected a non-negative integer");
  const auto u = v->get<std::uint64_t>();
  if (u < lo || u > hi) fail(join(path, key), "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return u;
}

template <class T>
std::vector<T> integers(const json& j, const std::string& path, const char* key, std::vector<T> def, std::uint64_t lo,
                        std::uint64_t hi) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  if (!v->is_array() || v->empty()) fail(join(path, key), "expected a non-empty array");
  std::vector<T> out;
  for (std::size_t i = 0; i < v->size(); ++i) {
    const json& e = (*v)[i];
    if (!e.is_number_unsigned()) fail(index(join(path, key), i), "expected a non-negative integer");
    const auto u = e.get<std::uint64_t>();
    if (u < lo || u > hi) fail(index(join(path, key), i), "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    out.push_back(static_cast<T>(u));
  }
  return out;
}

std::uint32_t address(const json& j, const std::string& path, const char* key, std::uint32_t def) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  if (!v->is_string()) fail(join(path, key), "expected a dotted IPv4 address");
  try {
    return parse_ipv4(v->get<std::string>());
  } catch (const Error&) {
    fail(join(path, key), "invalid IPv4 address '" + v->get<std::string>() + "'");
  }
}

std::uint8_t protocol(const json& v, const std::string& path) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "udp") return kProtoUdp;
    if (s == "tcp") return kProtoTcp;
    if (s == "icmp") return kProtoIcmp;
    fail(path, "unknown protocol '" + s + "' (udp, tcp, icmp or a number)");
  }
  if (v.is_number_unsigned() && v.get<std::uint64_t>() <= 255) return static_cast<std::uint8_t>(v.get<std::uint64_t>());
  fail(path, "expected a protocol name or number");
}

PoolConfig pool(const json& j, const std::string& path, const char* key, PoolConfig def) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  const std::string p = join(path, key);
  only(*v, p, {"slots", "slot_size"});
  PoolConfig c;
  c.slot_count = static_cast<std::uint32_t>(integer(*v, p, "slots", def.slot_count, 1, 1u << 20));
  c.slot_size = static_cast<std::uint32_t>(integer(*v, p, "slot_size", def.slot_size, 64, 1u << 16));
  if ((c.slot_count & (c.slot_count - 1)) != 0) fail(join(p, "slots"), "must be a power of two");
  return c;
}

TemplateSpec parse_template(const json& j, const std::string& path) {
  only(j, path, {"name", "mode", "ingress_pool", "prebuild", "egress", "stages", "links"});
  TemplateSpec ts;
  ChainTemplate& t = ts.tmpl;
  t.name = str(j, path, "name", "");
  if (t.name.empty()) fail(join(path, "name"), "required");
  const auto mode = str(j, path, "mode", "copy");
  if (mode == "copy") t.mode = ChannelMode::kCopy;
  else if (mode == "reference") t.mode = ChannelMode::kReference;
  else fail(join(path, "mode"), "expected 'copy' or 'reference'");
  t.ingress_pool = pool(j, path, "ingress_pool", PoolConfig{64, 1536});
  t.egress = boolean(j, path, "egress", true);
  ts.prebuild = integer(j, path, "prebuild", 0, 0, 100000);
  const json* stages = field(j, "stages");
  const std::string sp = join(path, "stages");
  if (stages == nullptr || !stages->is_array() || stages->empty()) fail(sp, "expected a non-empty array of stages");
  for (std::size_t i = 0; i < stages->size(); ++i) {
    const json& s = (*stages)[i];
    const std::string p = index(sp, i);
    only(s, p, {"type", "config", "pool", "heap_kib", "core"});
    StageSpec st;
    st.type = str(s, p, "type", "");
    if (st.type.empty()) fail(join(p, "type"), "required");
    if (const json* c = field(s, "config")) {
      if (!c->is_object()) fail(join(p, "config"), "expected an object");
      st.config = c->dump();
    }
    st.pool = pool(s, p, "pool", PoolConfig{64, 1536});
    st.heap_bytes = integer(s, p, "heap_kib", 64, 4, 1u << 20) * 1024;
    st.core = static_cast<CoreId>(integer(s, p, "core", 0, 0, 255));
    t.stages.push_back(std::move(st));
  }
  if (const json* links = field(j, "links")) {
    const std::string lp = join(path, "links");
    if (!links->is_array()) fail(lp, "expected an array of [from, to] pairs");
    for (std::size_t i = 0; i < links->size(); ++i) {
      const json& l = (*links)[i];
      if (!l.is_array() || l.size() != 2 || !l[0].is_number_unsigned() || !l[1].is_number_unsigned())
        fail(index(lp, i), "expected [from, to]");
      const auto a = l[0].get<std::size_t>(), b = l[1].get<std::size_t>();
      if (a >= t.stages.size() || b >= t.stages.size()) fail(index(lp, i), "stage index out of range");
      t.links.emplace_back(a, b);
    }
  }
  return ts;
}

RuleSpec parse_rule(const json& j, const std::string& path) {
  only(j, path, {"match", "priority", "action", "template"});
  RuleSpec r;
  r.tmpl = str(j, path, "template", "");
  if (r.tmpl.empty()) fail(join(path, "template"), "required");
  const auto action = str(j, path, "action", "shared");
  if (action == "shared") r.action = RuleAction::kSharedChain;
  else if (action == "per_flow") r.action = RuleAction::kPerFlowChain;
  else fail(join(path, "action"), "expected 'shared' or 'per_flow'");
  const json* p = field(j, "priority");
  if (p != nullptr) {
    if (!p->is_number_integer()) fail(join(path, "priority"), "expected an integer");
    r.priority = p->get<int>();
  }
  if (const json* m = field(j, "match")) {
    const std::string mp = join(path, "match");
    only(*m, mp, {"src", "dst", "src_port", "dst_port", "proto"});
    if (field(*m, "src")) r.match.src_addr = address(*m, mp, "src", 0);
    if (field(*m, "dst")) r.match.dst_addr = address(*m, mp, "dst", 0);
    if (field(*m, "src_port")) r.match.src_port = static_cast<std::uint16_t>(integer(*m, mp, "src_port", 0, 0, 65535));
    if (field(*m, "dst_port")) r.match.dst_port = static_cast<std::uint16_t>(integer(*m, mp, "dst_port", 0, 0, 65535));
    if (const json* pr = field(*m, "proto")) r.match.proto = protocol(*pr, join(mp, "proto"));
  }
  return r;
}

SourceSpec parse_source(const json& j, const std::string& path) {
  only(j, path, {"kind", "workload", "rate_pps", "payload", "flows", "uniform_mix", "count", "src", "dst", "src_port",
                 "dst_port", "get_ratio", "value_size", "keys", "path", "loops", "bind", "port"});
  SourceSpec s;
  s.kind = str(j, path, "kind", "synthetic");
  if (s.kind != "synthetic" && s.kind != "pcap" && s.kind != "datagram")
    fail(join(path, "kind"), "expected 'synthetic', 'pcap' or 'datagram'");
  const auto w = str(j, path, "workload", "udp");
  if (w == "udp") s.workload = Workload::kUdp;
  else if (w == "icmp") s.workload = Workload::kIcmp;
  else if (w == "kv") s.workload = Workload::kKv;
  else fail(join(path, "workload"), "expected 'udp', 'icmp' or 'kv'");
  s.rate_pps = number(j, path, "rate_pps", 0, 0, 1e9);
  s.payload = integer(j, path, "payload", 64, 12, kMaxFrame - kUdpOverhead);
  s.flows = static_cast<std::uint32_t>(integer(j, path, "flows", 1, 0, 0xffffffffu));
  s.uniform_mix = boolean(j, path, "uniform_mix", false);
  s.count = integer(j, path, "count", 0, 0, ~std::uint64_t{0});
  s.src_base = address(j, path, "src", s.src_base);
  s.dst_addr = address(j, path, "dst", s.dst_addr);
  s.src_port_base = static_cast<std::uint16_t>(integer(j, path, "src_port", s.src_port_base, 0, 65535));
  s.dst_port = static_cast<std::uint16_t>(integer(j, path, "dst_port", s.dst_port, 0, 65535));
  s.get_ratio = number(j, path, "get_ratio", 0.95, 0, 1);
  s.value_size = integer(j, path, "value_size", 135, 1, 1024);
  s.keys = static_cast<std::uint32_t>(integer(j, path, "keys", 1000, 1, 1u << 24));
  s.path = str(j, path, "path", "");
  s.loops = integer(j, path, "loops", 1, 1, 1u << 20);
  s.bind = str(j, path, "bind", "127.0.0.1");
  s.port = static_cast<std::uint16_t>(integer(j, path, "port", 0, 0, 65535));
  if (s.kind == "pcap" && s.path.empty()) fail(join(path, "path"), "required for a pcap source");
  if (s.kind == "datagram" && s.port == 0) fail(join(path, "port"), "required for a datagram source");
  return s;
}

// Accepts a count or a list of CPU ids.
std::size_t role(const json& j, const std::string& path, const char* key, std::size_t def, std::vector<int>& cpus) {
  const json* v = field(j, key);
  if (v == nullptr) return def;
  if (v->is_number_unsigned()) {
    const auto n = v->get<std::uint64_t>();
    if (n == 0 || n > 64) fail(join(path, key), "must be in [1, 64]");
    return n;
  }
  cpus = integers<int>(j, path, key, {}, 0, kMaxCpu);
  return cpus.size();
}

}  // namespace

Scenario parse_scenario(const json& j) {
  only(j, "", {"name", "description", "experiment", "duration_s", "seed", "threading", "quantum_us", "cores",
               "manager", "net_in", "net_out", "templates", "rules", "source", "sink", "startup", "scale", "chain", "kv"});
  Scenario s;
  s.name = str(j, "", "name", "");
  if (s.name.empty()) fail("name", "required");
  s.description = str(j, "", "description", "");
  const auto exp = str(j, "", "experiment", "traffic");
  if (exp == "traffic") s.experiment = Experiment::kTraffic;
  else if (exp == "startup") s.experiment = Experiment::kStartup;
  else if (exp == "scale") s.experiment = Experiment::kScale;
  else if (exp == "chain") s.experiment = Experiment::kChain;
  else if (exp == "kv") s.experiment = Experiment::kKv;
  else fail("experiment", "expected traffic, startup, scale, chain or kv");
  s.duration_s = number(j, "", "duration_s", 1.0, 0.001, 86400);
  s.seed = integer(j, "", "seed", 1, 0, ~std::uint64_t{0});

  DataplaneConfig& d = s.dataplane;
  try {
    d.threading = threading_from_string(str(j, "", "threading", "shared"));
  } catch (const Error&) {
    fail("threading", "expected manual, shared or dedicated");
  }
  d.quantum_ns = static_cast<std::uint64_t>(number(j, "", "quantum_us", 100, 10, 10000) * 1000);
  if (const json* c = field(j, "cores")) {
    only(*c, "cores", {"workers", "mma", "net_in", "net_out", "control"});
    d.cores = role(*c, "cores", "workers", 1, d.cpus.workers);
    d.mma_engines = role(*c, "cores", "mma", 1, d.cpus.mma);
    auto cpu = [&](const char* k) {
      return field(*c, k) ? static_cast<int>(integer(*c, "cores", k, 0, 0, kMaxCpu)) : -1;
    };
    d.cpus.net_in = cpu("net_in");
    d.cpus.net_out = cpu("net_out");
    d.cpus.control = cpu("control");
    std::set<int> seen;
    std::vector<std::pair<std::string, int>> all;
    for (std::size_t i = 0; i < d.cpus.workers.size(); ++i) all.emplace_back(index("cores.workers", i), d.cpus.workers[i]);
    for (std::size_t i = 0; i < d.cpus.mma.size(); ++i) all.emplace_back(index("cores.mma", i), d.cpus.mma[i]);
    all.emplace_back("cores.net_in", d.cpus.net_in);
    all.emplace_back("cores.net_out", d.cpus.net_out);
    all.emplace_back("cores.control", d.cpus.control);
    for (const auto& [p, cpu_id] : all) {
      if (cpu_id < 0) continue;
      if (!seen.insert(cpu_id).second) fail(p, "CPU " + std::to_string(cpu_id) + " is assigned to two roles");
    }
  }
  if (const json* m = field(j, "manager")) {
    only(*m, "manager", {"low_watermark", "high_watermark", "auto_refill", "drain_timeout_ms"});
    d.manager.low_watermark = integer(*m, "manager", "low_watermark", d.manager.low_watermark, 0, 100000);
    d.manager.high_watermark = integer(*m, "manager", "high_watermark", d.manager.high_watermark, 0, 100000);
    d.manager.auto_refill = boolean(*m, "manager", "auto_refill", d.manager.auto_refill);
    d.manager.drain_timeout_ns =
        static_cast<std::uint64_t>(number(*m, "manager", "drain_timeout_ms", 20, 0.001, 60000) * 1e6);
    if (d.manager.high_watermark < d.manager.low_watermark)
      fail("manager.high_watermark", "must not be below low_watermark");
  }
  if (const json* n = field(j, "net_in")) {
    only(*n, "net_in", {"idle_timeout_ms", "batch", "hold_on_full", "log_assignments"});
    d.net_in.idle_timeout_ns = static_cast<std::uint64_t>(number(*n, "net_in", "idle_timeout_ms", 100, 0.001, 3.6e6) * 1e6);
    d.net_in.batch = integer(*n, "net_in", "batch", d.net_in.batch, 1, 4096);
    d.net_in.hold_on_full = boolean(*n, "net_in", "hold_on_full", false);
    d.net_in.log_assignments = boolean(*n, "net_in", "log_assignments", false);
  }
  if (const json* n = field(j, "net_out")) {
    only(*n, "net_out", {"batch", "max_retries", "record_latency"});
    d.net_out.batch = integer(*n, "net_out", "batch", d.net_out.batch, 1, 4096);
    d.net_out.max_retries = static_cast<std::uint32_t>(integer(*n, "net_out", "max_retries", 0, 0, 1u << 30));
    d.net_out.record_latency = boolean(*n, "net_out", "record_latency", true);
  }

  const json* tmpls = field(j, "templates");
  if (tmpls == nullptr || !tmpls->is_array() || tmpls->empty()) fail("templates", "expected a non-empty array");
  std::set<std::string> names;
  for (std::size_t i = 0; i < tmpls->size(); ++i) {
    s.templates.push_back(parse_template((*tmpls)[i], index("templates", i)));
    const auto& t = s.templates.back().tmpl;
    if (!names.insert(t.name).second) fail(index("templates", i) + ".name", "duplicate template '" + t.name + "'");
    for (std::size_t k = 0; k < t.stages.size(); ++k) {
      if (t.stages[k].core >= d.cores)
        fail(index(index("templates", i) + ".stages", k) + ".core",
             "core " + std::to_string(t.stages[k].core) + " but only " + std::to_string(d.cores) + " worker(s)");
    }
  }
  if (const json* rules = field(j, "rules")) {
    if (!rules->is_array()) fail("rules", "expected an array");
    for (std::size_t i = 0; i < rules->size(); ++i) {
      s.rules.push_back(parse_rule((*rules)[i], index("rules", i)));
      if (!names.count(s.rules.back().tmpl))
        fail(index("rules", i) + ".template", "unknown template '" + s.rules.back().tmpl + "'");
    }
  }
  if (const json* src = field(j, "source")) s.source = parse_source(*src, "source");
  if (const json* sink = field(j, "sink")) {
    only(*sink, "sink", {"kind", "path"});
    s.sink.kind = str(*sink, "sink", "kind", "counter");
    s.sink.path = str(*sink, "sink", "path", "");
    if (s.sink.kind != "counter" && s.sink.kind != "pcap" && s.sink.kind != "datagram")
      fail("sink.kind", "expected 'counter', 'pcap' or 'datagram'");
    if (s.sink.kind == "pcap" && s.sink.path.empty()) fail("sink.path", "required for a pcap sink");
  }
  if (const json* st = field(j, "startup")) {
    only(*st, "startup", {"iterations", "heap_kib"});
    s.iterations = integer(*st, "startup", "iterations", s.iterations, 1, 1000000);
    for (auto kib : integers<std::size_t>(*st, "startup", "heap_kib", {}, 4, 1u << 20)) s.heap_sizes.push_back(kib * 1024);
  }
  if (const json* sc = field(j, "scale")) {
    only(*sc, "scale", {"chains"});
    s.chains = integer(*sc, "scale", "chains", s.chains, 1, 1000000);
  }
  if (const json* ch = field(j, "chain")) {
    only(*ch, "chain", {"lengths", "sizes", "messages", "reference", "repeats"});
    s.lengths = integers<std::size_t>(*ch, "chain", "lengths", s.lengths, 1, 64);
    s.sizes = integers<std::size_t>(*ch, "chain", "sizes", s.sizes, 12, kMaxFrame - kUdpOverhead);
    s.messages = integer(*ch, "chain", "messages", s.messages, 1, ~std::uint64_t{0});
    s.reference = boolean(*ch, "chain", "reference", s.reference);
    s.repeats = integer(*ch, "chain", "repeats", s.repeats, 1, 1000);
  }
  if (const json* kv = field(j, "kv")) {
    only(*kv, "kv", {"load_fractions", "capacity_requests"});
    if (const json* lf = field(*kv, "load_fractions")) {
      if (!lf->is_array() || lf->empty()) fail("kv.load_fractions", "expected a non-empty array");
      s.load_fractions.clear();
      for (std::size_t i = 0; i < lf->size(); ++i) {
        const json& v = (*lf)[i];
        if (!v.is_number() || v.get<double>() <= 0 || v.get<double>() > 1)
          fail(index("kv.load_fractions", i), "must be in (0, 1]");
        s.load_fractions.push_back(v.get<double>());
      }
    }
    s.capacity_requests = integer(*kv, "kv", "capacity_requests", s.capacity_requests, 1, ~std::uint64_t{0});
  }
  if (s.experiment == Experiment::kTraffic && s.rules.empty()) fail("rules", "a traffic scenario needs at least one rule");
  return s;
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kConfig, path + ": cannot open");
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw Error(Errc::kConfig, path + ": " + e.what());
  }
  return parse_scenario(j);
}

// ---- workloads ----

FrameFn workload_frames(const SourceSpec& src) {
  switch (src.workload) {
    case Workload::kUdp: return {};
    case Workload::kIcmp:
      return [payload = src.payload](std::uint64_t seq, std::uint32_t, const FlowKey& key, std::span<std::byte> out,
                                     std::mt19937_64&) {
        std::vector<std::byte> data(payload);
        fill_pattern(data, seq);
        FlowKey k = key;
        k.proto = kProtoIcmp;
        k.src_port = k.dst_port = 0;
        const auto f = build_icmp_echo(k, static_cast<std::uint16_t>(seq >> 16), static_cast<std::uint16_t>(seq), data);
        const std::size_t n = std::min(f.size(), out.size());
        std::memcpy(out.data(), f.data(), n);
        return n;
      };
    case Workload::kKv:
      // The first `keys` requests store every key; after that a seeded mix.
      return [src](std::uint64_t seq, std::uint32_t, const FlowKey& key, std::span<std::byte> out, std::mt19937_64& rng) {
        std::string cmd;
        std::uint32_t k;
        bool set;
        if (seq < src.keys) {
          k = static_cast<std::uint32_t>(seq);
          set = true;
        } else {
          k = static_cast<std::uint32_t>(rng() % src.keys);
          set = std::uniform_real_distribution<double>(0, 1)(rng) >= src.get_ratio;
        }
        const std::string name = "key:" + std::to_string(k);
        if (set) {
          std::string value(src.value_size, static_cast<char>('a' + seq % 26));
          cmd = "set " + name + " 0 0 " + std::to_string(value.size()) + "\r\n" + value + "\r\n";
        } else {
          cmd = "get " + name + "\r\n";
        }
        const auto f = memcache_frame(key, static_cast<std::uint16_t>(seq), cmd);
        const std::size_t n = std::min(f.size(), out.size());
        std::memcpy(out.data(), f.data(), n);
        return n;
      };
  }
  return {};
}

namespace {

// Lets the runner end an unbounded source; exhausted() is safe from any thread.
class GatedSource : public PacketSource {
 public:
  explicit GatedSource(std::unique_ptr<PacketSource> inner) : inner_(std::move(inner)) {}
  bool next(Frame& out, std::uint64_t now_ns) override {
    if (closed_.load(std::memory_order_acquire)) return false;
    if (inner_->next(out, now_ns)) return true;
    if (inner_->exhausted()) done_.store(true, std::memory_order_release);
    return false;
  }
  bool exhausted() const override { return closed_.load(std::memory_order_acquire) || done_.load(std::memory_order_acquire); }
  bool drained() const noexcept { return done_.load(std::memory_order_acquire); }
  void close() noexcept { closed_.store(true, std::memory_order_release); }

 private:
  std::unique_ptr<PacketSource> inner_;
  std::atomic<bool> closed_{false};
  std::atomic<bool> done_{false};
};

std::unique_ptr<PacketSource> make_source(const SourceSpec& src, std::uint64_t seed) {
  if (src.kind == "pcap") return std::make_unique<PcapSource>(src.path, src.loops);
  if (src.kind == "datagram") return std::make_unique<DatagramSource>(src.bind, src.port);
  SyntheticSpec sp;
  sp.rate_pps = src.rate_pps;
  sp.payload = src.payload;
  sp.flows = src.flows == 0 ? 0xffffffffu : src.flows;  // 0: every message is its own flow
  sp.uniform_mix = src.uniform_mix;
  sp.count = src.count;
  sp.seed = seed;
  sp.src_base = src.src_base;
  sp.dst_addr = src.dst_addr;
  sp.src_port_base = src.src_port_base;
  sp.dst_port = src.dst_port;
  if (src.workload == Workload::kIcmp) sp.proto = kProtoIcmp;
  sp.frame = workload_frames(src);
  return std::make_unique<SyntheticSource>(std::move(sp));
}

std::unique_ptr<PacketSink> make_sink(const SinkSpec& s) {
  if (s.kind == "pcap") return std::make_unique<PcapSink>(s.path);
  if (s.kind == "datagram") return std::make_unique<DatagramSink>();
  return std::make_unique<CounterSink>();
}

// One dataplane with the scenario's templates and rules installed.
struct Host {
  Dataplane dp;
  std::vector<TemplateId> ids;

  Host(const FwpRegistry& registry, const DataplaneConfig& cfg, const std::vector<TemplateSpec>& templates,
       const std::vector<RuleSpec>& rules)
      : dp(registry, cfg) {
    for (const auto& t : templates) ids.push_back(dp.manager().load_template(t.tmpl));
    for (std::size_t i = 0; i < templates.size(); ++i)
      if (templates[i].prebuild) dp.manager().build_cached(ids[i], templates[i].prebuild);
    for (const auto& r : rules) {
      FlowRule fr;
      fr.match = r.match;
      fr.priority = r.priority;
      fr.action = r.action;
      fr.tmpl = *dp.manager().find_template(r.tmpl);
      dp.net_in().table().add_rule(fr);
    }
  }
};

void fill_counts(Host& h, MetricsReport& r) {
  const NetInStats in = h.dp.net_in().stats();
  const NetOutStats out = h.dp.net_out().stats();
  const ChainStats cs = h.dp.manager().stats();
  r.received += in.received;
  r.admitted += in.admitted;
  r.emitted += out.emitted;
  r.dropped_pool_full += in.dropped_pool_full;
  r.dropped_no_rule += in.dropped_no_rule;
  r.dropped_oversize += in.dropped_oversize;
  r.cache_hits += cs.hits;
  r.cache_misses += cs.misses;
  const MmaStats m = h.dp.mma().stats();
  r.mma.moved += m.moved;
  r.mma.bytes_copied += m.bytes_copied;
  r.mma.forwarded += m.forwarded;
  r.mma.sweeps += m.sweeps;
  r.mma.stalls += m.stalls;
  r.mma.notifications += m.notifications;
  r.mma.isolation_faults += m.isolation_faults;
}

// Restores every chain and folds the conservation audit into the report.
void finish(Host& h, MetricsReport& r, const std::string& where) {
  if (!h.dp.shutdown_chains()) throw Error(Errc::kRuntimeFault, "chain manager: teardown did not finish (" + where + ")");
  const ConservationAudit a = h.dp.audit();
  r.consumed += a.consumed;
  r.discarded += a.discarded;
  if (!a.ok()) {
    r.audit_ok = false;
    for (const auto& f : a.failures) r.audit_failures.push_back(where + ": " + f);
    if (!a.balanced()) {
      std::ostringstream os;
      os << where << ": admitted " << a.admitted << " != emitted " << a.emitted << " + consumed " << a.consumed
         << " + discarded " << a.discarded << " + in flight " << a.in_flight;
      r.audit_failures.push_back(os.str());
    }
  }
  fill_counts(h, r);
}

void append(std::vector<std::uint64_t>& to, const std::vector<std::uint64_t>& from) {
  to.insert(to.end(), from.begin(), from.end());
}

void append_restores(std::vector<std::uint64_t>& to, const ChainStats& cs) {
  for (const auto& rc : cs.restore) to.push_back(rc.ns);
}

void finalize(MetricsReport& r) {
  r.latency = summarize(r.samples["latency"]);
  r.activation = summarize(r.samples["activation"]);
  r.create = summarize(r.samples["create"]);
  r.restore = summarize(r.samples["restore"]);
  const auto lookups = r.cache_hits + r.cache_misses;
  r.cache_hit_ratio = lookups ? static_cast<double>(r.cache_hits) / static_cast<double>(lookups) : 0.0;
  for (auto it = r.samples.begin(); it != r.samples.end();) it = it->second.empty() ? r.samples.erase(it) : std::next(it);
}

// Runs an open-ended source for `duration_ns` (or until it runs dry), then
// lets everything in flight drain. Returns elapsed seconds of the load phase.
double drive_timed(Host& h, const SourceSpec& src, std::uint64_t seed, std::uint64_t duration_ns) {
  auto gate_owned = std::make_unique<GatedSource>(make_source(src, seed));
  GatedSource* gate = gate_owned.get();
  h.dp.net_in().add_source(std::move(gate_owned));
  const std::uint64_t t0 = now_ns();
  const std::uint64_t deadline = t0 + duration_ns;
  if (h.dp.config().threading == Threading::kManual) {
    while (now_ns() < deadline && !gate->drained()) h.dp.step();
  } else {
    h.dp.start();
    while (now_ns() < deadline && !gate->drained()) std::this_thread::sleep_for(std::chrono::microseconds(500));
  }
  const double elapsed = static_cast<double>(now_ns() - t0) / 1e9;
  gate->close();
  if (!h.dp.settle(10'000'000'000)) throw Error(Errc::kRuntimeFault, "dataplane: traffic did not drain within 10 s");
  h.dp.stop();
  return elapsed;
}

// Pushes `count` messages closed-loop (Net-In holds frames while the ingress
// pool is full) and returns the seconds until the last one was emitted.
double drive_closed(Host& h, const SourceSpec& src, std::uint64_t seed, std::uint64_t count) {
  SourceSpec s = src;
  s.rate_pps = 0;
  s.count = count;
  h.dp.net_in().add_source(make_source(s, seed));
  const std::uint64_t limit = 120'000'000'000;
  const std::uint64_t t0 = now_ns();
  auto done = [&] {
    const NetInStats in = h.dp.net_in().stats();
    return in.received >= count && h.dp.net_out().stats().emitted >= in.admitted;
  };
  std::uint64_t t1 = 0;
  if (h.dp.config().threading == Threading::kManual) {
    while (!done()) {
      h.dp.step();
      if (now_ns() - t0 > limit) throw Error(Errc::kRuntimeFault, "dataplane: closed-loop run stalled");
    }
    t1 = now_ns();
  } else {
    h.dp.start();
    while (!done()) {
      std::this_thread::sleep_for(std::chrono::microseconds(100));
      if (now_ns() - t0 > limit) throw Error(Errc::kRuntimeFault, "dataplane: closed-loop run stalled");
    }
    t1 = now_ns();
    h.dp.stop();
  }
  return static_cast<double>(t1 - t0) / 1e9;
}

void run_traffic(const Scenario& s, const FwpRegistry& reg, std::uint64_t seed, double duration, MetricsReport& r) {
  Host h(reg, s.dataplane, s.templates, s.rules);
  h.dp.net_out().set_sink(make_sink(s.sink));
  const double elapsed = drive_timed(h, s.source, seed, static_cast<std::uint64_t>(duration * 1e9));
  r.elapsed_s = elapsed;
  append(r.samples["latency"], h.dp.net_out().latencies());
  append(r.samples["activation"], h.dp.net_in().activation_ns());
  finish(h, r, "traffic");
  const ChainStats cs = h.dp.manager().stats();
  append(r.samples["create"], cs.build_ns);
  append_restores(r.samples["restore"], cs);
  const NetOutStats out = h.dp.net_out().stats();
  r.msgs_per_s = elapsed > 0 ? static_cast<double>(out.emitted) / elapsed : 0;
  r.bytes_per_s = elapsed > 0 ? static_cast<double>(out.bytes) / elapsed : 0;
}

DataplaneConfig quiet_manager(DataplaneConfig cfg) {
  cfg.manager.auto_refill = false;
  cfg.manager.low_watermark = 0;
  cfg.manager.high_watermark = 0;
  return cfg;
}

void step_until(Dataplane& dp, const std::function<bool()>& pred, const char* what) {
  const std::uint64_t deadline = now_ns() + 10'000'000'000;
  while (!pred()) {
    dp.step();
    if (now_ns() > deadline) throw Error(Errc::kRuntimeFault, std::string("chain manager: ") + what);
  }
}

void run_startup(const Scenario& s, const FwpRegistry& reg, MetricsReport& r) {
  DataplaneConfig cfg = quiet_manager(s.dataplane);
  cfg.threading = Threading::kManual;
  std::vector<std::size_t> heaps = s.heap_sizes;
  if (heaps.empty()) heaps.push_back(0);
  std::vector<double> act_medians;
  for (std::size_t heap : heaps) {
    TemplateSpec t = s.templates.front();
    t.prebuild = 0;
    if (heap != 0)
      for (auto& st : t.tmpl.stages) st.heap_bytes = heap;
    Host h(reg, cfg, {t}, {});
    ChainManager& m = h.dp.manager();
    const TemplateId id = h.ids[0];
    // Activations cycle through a few cached instances; builds run in their
    // own phase so their arena fills do not precede each measured activation.
    constexpr std::size_t kCached = 4;
    m.build_cached(id, kCached);
    std::vector<std::uint64_t> act;
    for (std::size_t i = 0; i < 2 * s.iterations; ++i) {
      const std::uint64_t t0 = now_ns();
      ChainInstance& inst = m.activate(id);
      act.push_back(now_ns() - t0);
      h.dp.step();
      m.request_terminate(inst);
      step_until(h.dp, [&] { return inst.state() == ChainState::kCached; }, "restore did not finish");
    }
    m.reclaim(id, kCached);
    for (std::size_t i = kCached; i < s.iterations; ++i) {
      m.build_cached(id, 1);
      m.reclaim(id, 1);
    }
    finish(h, r, "startup");
    const ChainStats cs = m.stats();
    std::vector<std::uint64_t> restore;
    append_restores(restore, cs);
    SweepRow row;
    row.labels["template"] = t.tmpl.name;
    row.values["heap_kib"] = static_cast<double>(t.tmpl.stages.front().heap_bytes / 1024);
    row.values["create_p50_us"] = median_ns(cs.build_ns) / 1000;
    row.values["activate_p50_us"] = median_ns(act) / 1000;
    row.values["restore_p50_us"] = median_ns(restore) / 1000;
    row.values["create_over_activate"] = median_ns(cs.build_ns) / std::max(1.0, median_ns(act));
    std::size_t image = 0, zeroed = 0;
    for (const auto& rc : cs.restore) {
      image += rc.image_bytes;
      zeroed += rc.zeroed_bytes;
    }
    if (!cs.restore.empty()) {
      row.values["restore_image_bytes"] = static_cast<double>(image) / static_cast<double>(cs.restore.size());
      row.values["restore_zeroed_bytes"] = static_cast<double>(zeroed) / static_cast<double>(cs.restore.size());
    }
    r.rows.push_back(row);
    act_medians.push_back(median_ns(act));
    append(r.samples["activation"], act);
    append(r.samples["create"], cs.build_ns);
    append(r.samples["restore"], restore);
  }
  r.derived["create_over_activate"] = median_ns(r.samples["create"]) / std::max(1.0, median_ns(r.samples["activation"]));
  if (act_medians.size() > 1) {
    const double lo = act_medians.front(), hi = act_medians.back();
    r.derived["activation_heap_spread"] = std::abs(hi - lo) / std::max(1.0, std::min(lo, hi));
  }
}

void run_scale(const Scenario& s, const FwpRegistry& reg, MetricsReport& r) {
  DataplaneConfig cfg = quiet_manager(s.dataplane);
  cfg.threading = Threading::kManual;
  TemplateSpec t = s.templates.front();
  t.prebuild = 0;
  Host h(reg, cfg, {t}, {});
  ChainManager& m = h.dp.manager();
  m.build_cached(h.ids[0], s.chains);
  // Pass 0 activates freshly built instances; pass 1, the measured one,
  // activates the same instances after they were restored into the cache.
  auto pass = [&] {
    std::vector<std::uint64_t> act;
    std::vector<ChainInstance*> live;
    act.reserve(s.chains);
    live.reserve(s.chains);
    for (std::size_t i = 0; i < s.chains; ++i) {
      const std::uint64_t t0 = now_ns();
      ChainInstance& inst = m.activate(h.ids[0]);
      act.push_back(now_ns() - t0);
      live.push_back(&inst);
      // Copier and schedulers own other cores when deployed; on a shared
      // core their sweeps run between batches of activations.
      if (i % 64 == 63) h.dp.step();
    }
    for (ChainInstance* inst : live) m.request_terminate(*inst);
    step_until(h.dp, [&] { return m.active_count() == 0 && m.terminating_count() == 0; }, "mass teardown did not finish");
    return act;
  };
  const std::vector<std::uint64_t> cold = pass();
  std::vector<std::uint64_t> act = pass();
  finish(h, r, "scale");
  const ChainStats cs = m.stats();
  append(r.samples["create"], cs.build_ns);
  append_restores(r.samples["restore"], cs);

  auto decile_medians = [](const std::vector<std::uint64_t>& v) {
    std::vector<double> out;
    const std::size_t d = std::max<std::size_t>(1, v.size() / 10);
    for (std::size_t k = 0; k < 10 && k * d < v.size(); ++k) {
      const auto b = v.begin() + static_cast<std::ptrdiff_t>(k * d);
      const auto e = k == 9 ? v.end() : std::min(v.end(), b + static_cast<std::ptrdiff_t>(d));
      out.push_back(median_ns({b, e}));
    }
    return out;
  };
  const auto dm = decile_medians(act);
  const auto dc = decile_medians(cold);
  const LatencySummary sum = summarize(act);
  const LatencySummary csum = summarize(cold);
  r.derived["chains"] = static_cast<double>(s.chains);
  r.derived["stddev_over_median"] = sum.stddev_us / std::max(1e-9, sum.p50_us);
  r.derived["first_decile_median_us"] = dm.front() / 1000;
  r.derived["last_decile_median_us"] = dm.back() / 1000;
  r.derived["last_over_first_decile"] = dm.back() / std::max(1.0, dm.front());
  r.derived["cold_p50_us"] = csum.p50_us;
  r.derived["cold_stddev_over_median"] = csum.stddev_us / std::max(1e-9, csum.p50_us);
  r.derived["cold_last_over_first_decile"] = dc.back() / std::max(1.0, dc.front());
  for (std::size_t k = 0; k < dm.size(); ++k) {
    SweepRow row;
    row.labels["decile"] = std::to_string(k + 1);
    row.values["activate_p50_us"] = dm[k] / 1000;
    row.values["cold_activate_p50_us"] = dc[k] / 1000;
    r.rows.push_back(row);
  }
  r.samples["activation"] = std::move(act);
  r.samples["activation_cold"] = cold;
}

// `length` copies of the first stage of `base`.
ChainTemplate chain_template(const ChainTemplate& base, std::size_t length, ChannelMode mode) {
  ChainTemplate t = base;
  t.name = base.name + "-" + std::to_string(length) + (mode == ChannelMode::kReference ? "-ref" : "-copy");
  t.stages.assign(length, base.stages.front());
  t.links.clear();
  t.mode = mode;
  t.egress = true;
  return t;
}

void run_chain(const Scenario& s, const FwpRegistry& reg, std::uint64_t seed, MetricsReport& r) {
  DataplaneConfig cfg = s.dataplane;
  cfg.net_in.hold_on_full = true;
  cfg.net_out.record_latency = false;
  std::vector<ChannelMode> modes{ChannelMode::kCopy};
  if (s.reference) modes.push_back(ChannelMode::kReference);
  double total_elapsed = 0;
  for (std::size_t size : s.sizes) {
    std::map<std::size_t, double> copy_rate;
    for (std::size_t len : s.lengths) {
      std::map<ChannelMode, std::vector<double>> rates;
      // Modes alternate within each repeat so slow drift affects both alike.
      for (std::size_t rep = 0; rep < s.repeats; ++rep) {
        for (ChannelMode mode : modes) {
          TemplateSpec t{chain_template(s.templates.front().tmpl, len, mode), 1};
          RuleSpec rule;
          rule.tmpl = t.tmpl.name;
          Host h(reg, cfg, {t}, {rule});
          SourceSpec src = s.source;
          src.kind = "synthetic";
          src.payload = size;
          const double el = drive_closed(h, src, seed, s.messages);
          total_elapsed += el;
          rates[mode].push_back(static_cast<double>(s.messages) / el);
          finish(h, r, "chain " + t.tmpl.name);
        }
      }
      std::map<ChannelMode, double> best;
      for (auto& [mode, v] : rates) {
        std::sort(v.begin(), v.end());
        best[mode] = v[v.size() / 2];
      }
      SweepRow row;
      row.labels["size"] = std::to_string(size);
      row.values["length"] = static_cast<double>(len);
      row.values["copy_msgs_per_s"] = best[ChannelMode::kCopy];
      row.values["copy_gbps"] = best[ChannelMode::kCopy] * static_cast<double>(size + kUdpOverhead) * 8 / 1e9;
      if (s.reference) {
        row.values["reference_msgs_per_s"] = best[ChannelMode::kReference];
        row.values["copy_over_reference"] = best[ChannelMode::kCopy] / best[ChannelMode::kReference];
      }
      copy_rate[len] = best[ChannelMode::kCopy];
      r.rows.push_back(row);
    }
    bool monotone = true;
    for (auto it = copy_rate.begin(); it != copy_rate.end() && std::next(it) != copy_rate.end(); ++it)
      monotone = monotone && std::next(it)->second <= it->second;
    r.derived["monotone_" + std::to_string(size)] = monotone ? 1 : 0;
  }
  r.elapsed_s = total_elapsed;
  r.msgs_per_s = total_elapsed > 0 ? static_cast<double>(r.emitted) / total_elapsed : 0;
}

void run_kv(const Scenario& s, const FwpRegistry& reg, std::uint64_t seed, double duration, MetricsReport& r) {
  std::vector<RuleSpec> rules = s.rules;
  if (rules.empty()) {
    RuleSpec rule;
    rule.tmpl = s.templates.front().tmpl.name;
    rules.push_back(rule);
  }
  SourceSpec src = s.source;
  src.kind = "synthetic";
  src.workload = Workload::kKv;

  DataplaneConfig closed = s.dataplane;
  closed.net_in.hold_on_full = true;
  double capacity = 0;
  {
    Host h(reg, closed, s.templates, rules);
    const double el = drive_closed(h, src, seed, s.capacity_requests);
    capacity = static_cast<double>(s.capacity_requests) / el;
    finish(h, r, "kv capacity");
  }
  r.derived["capacity_rps"] = capacity;

  std::map<double, double> p99;
  for (double f : s.load_fractions) {
    DataplaneConfig open = s.dataplane;
    open.net_in.hold_on_full = false;
    Host h(reg, open, s.templates, rules);
    SourceSpec paced = src;
    paced.rate_pps = capacity * f;
    paced.count = 0;
    MetricsReport part;
    const double el = drive_timed(h, paced, seed, static_cast<std::uint64_t>(duration * 1e9));
    const LatencySummary lat = summarize(h.dp.net_out().latencies());
    append(r.samples["latency"], h.dp.net_out().latencies());
    finish(h, part, "kv load");
    SweepRow row;
    row.labels["load"] = std::to_string(f);
    row.values["offered_rps"] = paced.rate_pps;
    row.values["served_rps"] = static_cast<double>(part.emitted) / el;
    row.values["requests"] = static_cast<double>(part.received);
    row.values["drops"] = static_cast<double>(part.drops() + part.consumed + part.discarded);
    row.values["p50_us"] = lat.p50_us;
    row.values["p99_us"] = lat.p99_us;
    row.values["p999_us"] = lat.p999_us;
    r.rows.push_back(row);
    p99[f] = lat.p99_us;
    r.audit_ok = r.audit_ok && part.audit_ok;
    for (auto& a : part.audit_failures) r.audit_failures.push_back(a);
    r.received += part.received;
    r.admitted += part.admitted;
    r.emitted += part.emitted;
    r.dropped_pool_full += part.dropped_pool_full;
    r.dropped_no_rule += part.dropped_no_rule;
    r.dropped_oversize += part.dropped_oversize;
    r.consumed += part.consumed;
    r.discarded += part.discarded;
    r.cache_hits += part.cache_hits;
    r.cache_misses += part.cache_misses;
    r.elapsed_s += el;
  }
  if (p99.size() >= 2) r.derived["p99_high_over_low"] = p99.rbegin()->second / std::max(1e-9, p99.begin()->second);
}


}  // namespace

void validate_scenario(const Scenario& s, const FwpRegistry& registry) {
  for (std::size_t i = 0; i < s.templates.size(); ++i) {
    const auto& t = s.templates[i].tmpl;
    for (std::size_t k = 0; k < t.stages.size(); ++k) {
      if (!registry.contains(t.stages[k].type))
        throw Error(Errc::kConfig, "templates[" + std::to_string(i) + "].stages[" + std::to_string(k) +
                                       "].type: unknown FWP type '" + t.stages[k].type + "'");
    }
  }
  DataplaneConfig cfg = quiet_manager(s.dataplane);
  cfg.threading = Threading::kManual;
  Dataplane dp(registry, cfg);
  for (std::size_t i = 0; i < s.templates.size(); ++i) {
    const std::string p = "templates[" + std::to_string(i) + "]";
    try {
      const TemplateId id = dp.manager().load_template(s.templates[i].tmpl);
      dp.manager().build_cached(id, 1);
    } catch (const Error& e) {
      throw Error(Errc::kConfig, p + ": " + e.what());
    }
  }
  if (s.source.kind == "pcap" && !std::filesystem::exists(s.source.path))
    throw Error(Errc::kConfig, "source.path: no such file '" + s.source.path + "'");
}

MetricsReport run_scenario(const Scenario& s, const FwpRegistry& registry, const RunOptions& opts) {
  validate_scenario(s, registry);
  MetricsReport r;
  r.scenario = s.name;
  r.experiment = to_string(s.experiment);
  r.threading = to_string(s.dataplane.threading);
  r.seed = opts.seed.value_or(s.seed);
  r.duration_s = opts.duration_s.value_or(s.duration_s);
  auto say = [&](const std::string& m) {
    if (opts.progress) opts.progress(m);
  };
  say(std::string("running ") + r.experiment + " scenario '" + s.name + "'");
  switch (s.experiment) {
    case Experiment::kTraffic: run_traffic(s, registry, r.seed, r.duration_s, r); break;
    case Experiment::kStartup: run_startup(s, registry, r); break;
    case Experiment::kScale: run_scale(s, registry, r); break;
    case Experiment::kChain: run_chain(s, registry, r.seed, r); break;
    case Experiment::kKv: run_kv(s, registry, r.seed, r.duration_s, r); break;
  }
  finalize(r);
  return r;
}

// ---- output ----

namespace {

json summary_json(const LatencySummary& l) {
  return json{{"samples", l.samples}, {"min", l.min_us},   {"mean", l.mean_us}, {"stddev", l.stddev_us},
              {"p50", l.p50_us},      {"p90", l.p90_us},   {"p99", l.p99_us},   {"p999", l.p999_us},
              {"max", l.max_us}};
}

}  // namespace

json to_json(const MetricsReport& r) {
  json j;
  j["scenario"] = r.scenario;
  j["experiment"] = r.experiment;
  j["threading"] = r.threading;
  j["seed"] = r.seed;
  j["duration_s"] = r.duration_s;
  j["elapsed_s"] = r.elapsed_s;
  j["latency_basis"] = "in-host, admission to emission";
  j["latency_us"] = summary_json(r.latency);
  j["throughput"] = {{"msgs_per_s", r.msgs_per_s}, {"bytes_per_s", r.bytes_per_s}};
  j["activation_us"] = summary_json(r.activation);
  j["create_us"] = summary_json(r.create);
  j["restore_us"] = summary_json(r.restore);
  j["counts"] = {{"received", r.received},
                 {"admitted", r.admitted},
                 {"emitted", r.emitted},
                 {"consumed", r.consumed},
                 {"discarded", r.discarded}};
  j["drops"] = {{"pool_full", r.dropped_pool_full},
                {"no_rule", r.dropped_no_rule},
                {"oversize", r.dropped_oversize},
                {"total", r.drops()}};
  j["cache"] = {{"hits", r.cache_hits}, {"misses", r.cache_misses}, {"hit_ratio", r.cache_hit_ratio}};
  j["mma"] = {{"moved", r.mma.moved},         {"bytes_copied", r.mma.bytes_copied},
              {"forwarded", r.mma.forwarded}, {"sweeps", r.mma.sweeps},
              {"stalls", r.mma.stalls},       {"notifications", r.mma.notifications},
              {"isolation_faults", r.mma.isolation_faults}};
  j["audit"] = {{"ok", r.audit_ok}, {"failures", r.audit_failures}};
  json rows = json::array();
  for (const auto& row : r.rows) {
    json o;
    for (const auto& [k, v] : row.labels) o[k] = v;
    for (const auto& [k, v] : row.values) o[k] = v;
    rows.push_back(o);
  }
  j["rows"] = rows;
  j["derived"] = r.derived;
  return j;
}

void print_report(std::ostream& os, const MetricsReport& r) {
  auto f = [](double v, int prec = 2) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << v;
    return s.str();
  };
  auto line = [&](const std::string& name, const LatencySummary& l) {
    if (l.samples == 0) return;
    os << "  " << std::left << std::setw(12) << name << std::right << std::setw(9) << l.samples << std::setw(10)
       << f(l.p50_us) << std::setw(10) << f(l.p90_us) << std::setw(10) << f(l.p99_us) << std::setw(10)
       << f(l.p999_us) << std::setw(11) << f(l.max_us) << "\n";
  };
  os << "scenario " << r.scenario << " (" << r.experiment << ", " << r.threading << ", seed " << r.seed << ")\n";
  os << "  elapsed " << f(r.elapsed_s, 3) << " s";
  if (r.msgs_per_s > 0) os << ", " << f(r.msgs_per_s, 0) << " msgs/s, " << f(r.bytes_per_s * 8 / 1e9, 3) << " Gb/s";
  os << "\n";
  os << "  " << std::left << std::setw(12) << "us" << std::right << std::setw(9) << "n" << std::setw(10) << "p50"
     << std::setw(10) << "p90" << std::setw(10) << "p99" << std::setw(10) << "p999" << std::setw(11) << "max" << "\n";
  line("latency", r.latency);
  line("activation", r.activation);
  line("create", r.create);
  line("restore", r.restore);
  os << "  received " << r.received << "  admitted " << r.admitted << "  emitted " << r.emitted << "  consumed "
     << r.consumed << "  discarded " << r.discarded << "\n";
  os << "  drops: pool full " << r.dropped_pool_full << ", no rule " << r.dropped_no_rule << ", oversize "
     << r.dropped_oversize << "\n";
  os << "  cache: " << r.cache_hits << " hits, " << r.cache_misses << " misses (" << f(r.cache_hit_ratio * 100, 1)
     << "%)\n";
  for (const auto& row : r.rows) {
    os << "  ";
    for (const auto& [k, v] : row.labels) os << k << "=" << v << " ";
    for (const auto& [k, v] : row.values) os << k << "=" << f(v, std::abs(v) >= 1000 ? 0 : 3) << " ";
    os << "\n";
  }
  for (const auto& [k, v] : r.derived) os << "  " << k << " = " << f(v, 3) << "\n";
  os << "  audit: " << (r.audit_ok ? "balanced" : "FAILED") << "\n";
  for (const auto& a : r.audit_failures) os << "    " << a << "\n";
}

void write_csv(const std::string& dir, const MetricsReport& r) {
  std::filesystem::create_directories(dir);
  for (const auto& [series, ns] : r.samples) {
    const auto path = std::filesystem::path(dir) / (r.scenario + "_" + series + ".csv");
    std::ofstream out(path);
    if (!out) throw Error(Errc::kRuntimeFault, "report: cannot write " + path.string());
    out << "index,ns\n";
    for (std::size_t i = 0; i < ns.size(); ++i) out << i << "," << ns[i] << "\n";
  }
}

}  // namespace eos
