#include "eos/apps.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <set>

#include "eos/backoff.hpp"
#include "json.hpp"

namespace eos {

namespace {

using json = nlohmann::json;

const std::set<std::string, std::less<>> kBuiltin{"fwd", "firewall", "monitor", "ping", "kv", "forger", "hog"};

json parse_config(std::string_view text, const char* app) {
  if (text.empty()) return json::object();
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw Error(Errc::kConfig, std::string(app) + ": config must be an object");
    return j;
  } catch (const json::exception& e) {
    throw Error(Errc::kConfig, std::string(app) + ": " + e.what());
  }
}

template <class T>
T* alloc_state(Fwp& self, std::size_t extra = 0) {
  auto off = self.sbrk(sizeof(T) + extra);
  if (!off) throw Error(Errc::kHeapExhausted, self.config().type + ": heap too small for app state");
  return new (self.heap_at<T>(*off)) T{};
}

// Sends on the egress endpoint, or consumes the message at the chain's end.
void forward(Fwp& self, MsgHandle h, AppCounters& c) {
  if (self.egress().valid() && self.send(self.egress(), h) == Errc::kOk) {
    ++c.forwarded;
  } else {
    (void)self.msg_free(h);
    ++c.dropped;
  }
}

void drop(Fwp& self, MsgHandle h, AppCounters& c) {
  (void)self.msg_free(h);
  ++c.dropped;
}

std::span<const std::byte> frame_of(Fwp& self, MsgHandle h) {
  return self.payload(h).first(self.length(h));
}

// ---- fwd ----

struct FwdState {
  AppCounters c;
  std::uint64_t exit_after = 0;
};

void fwd_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<FwdState*>(data);
  ++st->c.received;
  forward(self, h, st->c);
  if (st->exit_after != 0 && st->c.received >= st->exit_after) self.exit();
}

void fwd_init(Fwp& self, std::string_view config) {
  const json j = parse_config(config, "fwd");
  auto* st = alloc_state<FwdState>(self);
  st->exit_after = j.value("exit_after", std::uint64_t{0});
  (void)self.receive_fn(fwd_receive, st);
}

// ---- firewall ----

struct AllowRule {
  std::uint32_t src = 0, dst = 0;
  std::uint16_t src_port = 0, dst_port = 0;
  std::uint8_t proto = 0;
  std::uint8_t fields = 0;  // bit per present field, in declaration order
};

struct FirewallState {
  AppCounters c;
  std::uint32_t rules = 0;
  std::uint32_t pad = 0;
  AllowRule* table() noexcept { return reinterpret_cast<AllowRule*>(this + 1); }
};

bool allowed(const AllowRule& r, const FlowKey& k) noexcept {
  return (!(r.fields & 1) || r.src == k.src_addr) && (!(r.fields & 2) || r.dst == k.dst_addr) &&
         (!(r.fields & 4) || r.src_port == k.src_port) && (!(r.fields & 8) || r.dst_port == k.dst_port) &&
         (!(r.fields & 16) || r.proto == k.proto);
}

void firewall_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<FirewallState*>(data);
  ++st->c.received;
  const ParsedFrame p = parse_frame(frame_of(self, h));
  const AllowRule* t = st->table();
  const bool ok = p.ipv4 && std::any_of(t, t + st->rules, [&](const AllowRule& r) { return allowed(r, p.key); });
  if (ok) forward(self, h, st->c);
  else drop(self, h, st->c);
}

AllowRule parse_allow(const json& r) {
  if (!r.is_object()) throw Error(Errc::kConfig, "firewall: allow entries must be objects");
  AllowRule a;
  if (r.contains("src")) a.src = parse_ipv4(r.at("src").get<std::string>()), a.fields |= 1;
  if (r.contains("dst")) a.dst = parse_ipv4(r.at("dst").get<std::string>()), a.fields |= 2;
  if (r.contains("src_port")) a.src_port = r.at("src_port").get<std::uint16_t>(), a.fields |= 4;
  if (r.contains("dst_port")) a.dst_port = r.at("dst_port").get<std::uint16_t>(), a.fields |= 8;
  if (r.contains("proto")) a.proto = r.at("proto").get<std::uint8_t>(), a.fields |= 16;
  return a;
}

void firewall_init(Fwp& self, std::string_view config) {
  const json j = parse_config(config, "firewall");
  std::vector<AllowRule> rules;
  try {
    for (const json& r : j.value("allow", json::array())) rules.push_back(parse_allow(r));
  } catch (const json::exception& e) {
    throw Error(Errc::kConfig, std::string("firewall: ") + e.what());
  }
  auto* st = alloc_state<FirewallState>(self, rules.size() * sizeof(AllowRule));
  st->rules = static_cast<std::uint32_t>(rules.size());
  std::copy(rules.begin(), rules.end(), st->table());
  (void)self.receive_fn(firewall_receive, st);
}

// ---- monitor ----

struct FlowSlot {
  FlowKey key;
  std::uint32_t used = 0;
  std::uint64_t packets = 0;
  std::uint64_t bytes = 0;
};

struct MonitorState {
  AppCounters c;
  std::uint64_t overflow = 0;
  std::uint32_t capacity = 0;
  std::uint32_t used = 0;
  FlowSlot* table() noexcept { return reinterpret_cast<FlowSlot*>(this + 1); }
  const FlowSlot* table() const noexcept { return reinterpret_cast<const FlowSlot*>(this + 1); }
};

void monitor_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<MonitorState*>(data);
  ++st->c.received;
  const auto frame = frame_of(self, h);
  const FlowKey key = parse_frame(frame).key;
  FlowSlot* t = st->table();
  std::size_t i = std::hash<FlowKey>{}(key) % st->capacity;
  for (std::uint32_t probe = 0; probe < st->capacity; ++probe, i = (i + 1) % st->capacity) {
    if (t[i].used && t[i].key == key) break;
    if (!t[i].used) {
      if (st->used * 4 >= st->capacity * 3) {
        i = st->capacity;
        break;
      }
      t[i].used = 1;
      t[i].key = key;
      ++st->used;
      break;
    }
  }
  if (i < st->capacity) {
    ++t[i].packets;
    t[i].bytes += frame.size();
  } else {
    ++st->overflow;
  }
  forward(self, h, st->c);
}

void monitor_init(Fwp& self, std::string_view config) {
  const json j = parse_config(config, "monitor");
  const auto cap = j.value("capacity", std::uint32_t{1024});
  if (cap == 0) throw Error(Errc::kConfig, "monitor: capacity must be positive");
  auto* st = alloc_state<MonitorState>(self, std::size_t{cap} * sizeof(FlowSlot));
  st->capacity = cap;
  (void)self.receive_fn(monitor_receive, st);
}

// ---- ping ----

struct PingState {
  AppCounters c;
};

void ping_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<PingState*>(data);
  ++st->c.received;
  const std::span<std::byte> f = self.payload(h).first(self.length(h));
  const ParsedFrame p = parse_frame(f);
  if (!p.ipv4 || p.key.proto != kProtoIcmp || p.payload_offset == p.l4_offset ||
      std::to_integer<int>(f[p.l4_offset]) != 8) {
    drop(self, h, st->c);
    return;
  }
  swap_endpoints(f, p);
  std::byte* icmp = f.data() + p.l4_offset;
  icmp[0] = std::byte{0};
  store_be16(icmp + 2, 0);
  store_be16(icmp + 2, internet_checksum({icmp, p.payload_offset + p.payload_len - p.l4_offset}));
  forward(self, h, st->c);
}

void ping_init(Fwp& self, std::string_view config) {
  (void)parse_config(config, "ping");
  (void)self.receive_fn(ping_receive, alloc_state<PingState>(self));
}

// ---- kv ----

constexpr std::size_t kMaxKey = 250;

struct KvEntry {
  std::uint8_t used = 0;
  std::uint8_t key_len = 0;
  std::uint16_t value_len = 0;
  std::uint32_t flags = 0;
  char key[kMaxKey];
  // value bytes follow
};

struct KvState {
  AppCounters c;
  std::uint32_t capacity = 0;
  std::uint32_t max_value = 0;
  std::uint32_t entry_bytes = 0;
  std::uint32_t size = 0;
  std::byte* table() noexcept { return reinterpret_cast<std::byte*>(this + 1); }
  KvEntry& entry(std::size_t i) noexcept { return *reinterpret_cast<KvEntry*>(table() + i * entry_bytes); }
  std::byte* value(KvEntry& e) noexcept { return reinterpret_cast<std::byte*>(&e) + sizeof(KvEntry); }
};

// Finds the entry for `key`, or the free slot where it would go; null if full.
KvEntry* kv_find(KvState& st, std::string_view key, bool& found) {
  found = false;
  std::size_t i = std::hash<std::string_view>{}(key) % st.capacity;
  for (std::uint32_t probe = 0; probe < st.capacity; ++probe, i = (i + 1) % st.capacity) {
    KvEntry& e = st.entry(i);
    if (!e.used) return &e;
    if (std::string_view(e.key, e.key_len) == key) {
      found = true;
      return &e;
    }
  }
  return nullptr;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    const std::size_t j = std::min(line.find(' ', i), line.size());
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class T>
bool to_number(std::string_view s, T& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

// Builds the reply text for one request. `noreply` suppresses the answer.
std::string kv_handle(KvState& st, std::string_view body, bool& noreply, bool& error) {
  noreply = false;
  error = true;
  const std::string bad = "CLIENT_ERROR bad command line format\r\n";
  std::size_t eol = body.find('\n');
  if (eol == std::string_view::npos) return bad;
  std::string_view line = body.substr(0, eol);
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  const auto tok = split(line);
  if (tok.empty()) return bad;

  if (tok[0] == "get") {
    if (tok.size() != 2 || tok[1].size() > kMaxKey) return bad;
    error = false;
    bool found = false;
    KvEntry* e = kv_find(st, tok[1], found);
    if (!found) return "END\r\n";
    std::string r = "VALUE " + std::string(tok[1]) + " " + std::to_string(e->flags) + " " +
                    std::to_string(e->value_len) + "\r\n";
    r.append(reinterpret_cast<const char*>(st.value(*e)), e->value_len);
    r += "\r\nEND\r\n";
    return r;
  }
  if (tok[0] == "set") {
    if (tok.size() != 5 && tok.size() != 6) return bad;
    std::uint32_t flags = 0;
    std::int64_t exptime = 0;
    std::uint32_t bytes = 0;
    if (tok[1].size() > kMaxKey || !to_number(tok[2], flags) || !to_number(tok[3], exptime) ||
        !to_number(tok[4], bytes))
      return bad;
    if (tok.size() == 6) {
      if (tok[5] != "noreply") return bad;
      noreply = true;
    }
    const std::string_view data = body.substr(eol + 1);
    if (data.size() < std::size_t{bytes} + 2 || data.substr(bytes, 2) != "\r\n")
      return "CLIENT_ERROR bad data chunk\r\n";
    if (bytes > st.max_value) return "SERVER_ERROR object too large for cache\r\n";
    bool found = false;
    KvEntry* e = kv_find(st, tok[1], found);
    if (e == nullptr) return "SERVER_ERROR out of memory storing object\r\n";
    if (!found) {
      e->used = 1;
      e->key_len = static_cast<std::uint8_t>(tok[1].size());
      std::memcpy(e->key, tok[1].data(), tok[1].size());
      ++st.size;
    }
    e->flags = flags;
    e->value_len = static_cast<std::uint16_t>(bytes);
    std::memcpy(st.value(*e), data.data(), bytes);
    error = false;
    return "STORED\r\n";
  }
  return bad;
}

void kv_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<KvState*>(data);
  ++st->c.received;
  const std::span<std::byte> buf = self.payload(h);
  const std::span<std::byte> f = buf.first(self.length(h));
  const ParsedFrame p = parse_frame(f);
  if (!p.ipv4 || p.key.proto != kProtoUdp) {
    drop(self, h, st->c);
    return;
  }
  std::string reply;
  bool noreply = false;
  bool error = false;
  std::uint16_t request_id = 0;
  if (p.payload_len < kMemcacheHeader || load_be16(f.data() + p.payload_offset + 4) != 1) {
    reply = "CLIENT_ERROR bad udp frame header\r\n";
    error = true;
    if (p.payload_len >= 2) request_id = load_be16(f.data() + p.payload_offset);
  } else {
    request_id = load_be16(f.data() + p.payload_offset);
    const auto* body = reinterpret_cast<const char*>(f.data() + p.payload_offset + kMemcacheHeader);
    reply = kv_handle(*st, {body, p.payload_len - kMemcacheHeader}, noreply, error);
  }
  if (error) ++st->c.errors;
  if (noreply) {
    drop(self, h, st->c);
    return;
  }
  if (p.payload_offset + kMemcacheHeader + reply.size() > buf.size()) {
    reply = "SERVER_ERROR reply too large\r\n";
    ++st->c.errors;
  }
  swap_endpoints(f, p);
  std::byte* out = buf.data() + p.payload_offset;
  store_be16(out, request_id);
  store_be16(out + 2, 0);
  store_be16(out + 4, 1);
  store_be16(out + 6, 0);
  std::memcpy(out + kMemcacheHeader, reply.data(), reply.size());
  (void)self.set_length(h, set_udp_payload_len(buf, p, kMemcacheHeader + reply.size()));
  forward(self, h, st->c);
}

void kv_init(Fwp& self, std::string_view config) {
  const json j = parse_config(config, "kv");
  const auto cap = j.value("capacity", std::uint32_t{256});
  const auto max_value = j.value("max_value", std::uint32_t{1024});
  if (cap == 0) throw Error(Errc::kConfig, "kv: capacity must be positive");
  if (max_value == 0 || max_value > 1024) throw Error(Errc::kConfig, "kv: max_value must be in [1, 1024]");
  const std::size_t entry = (sizeof(KvEntry) + max_value + 15) & ~std::size_t{15};
  auto* st = alloc_state<KvState>(self, cap * entry);
  st->capacity = cap;
  st->max_value = max_value;
  st->entry_bytes = static_cast<std::uint32_t>(entry);
  (void)self.receive_fn(kv_receive, st);
}

// ---- forger: tries to reach memory it was never given ----

struct ForgerState {
  AppCounters c;
  std::uint64_t rng = 0;
  std::uint64_t attempts = 0;
};

std::uint64_t next_rand(std::uint64_t& s) noexcept {
  s ^= s << 13;
  s ^= s >> 7;
  s ^= s << 17;
  return s;
}

void forger_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<ForgerState*>(data);
  ++st->c.received;
  for (int k = 0; k < 4; ++k) {
    const std::uint64_t r = next_rand(st->rng);
    MsgHandle forged{PoolId{static_cast<std::uint32_t>(r >> 40)}, static_cast<std::uint32_t>(r & 0xffff),
                     static_cast<std::uint32_t>((r >> 16) & 0xff)};
    if (k == 0) forged.pool = self.pool().id();  // own pool, guessed slot and generation
    if (forged == h) continue;
    st->attempts += 4;
    if (!self.payload(forged).empty()) ++st->c.errors;
    if (self.egress().valid() && self.send(self.egress(), forged) == Errc::kOk) ++st->c.errors;
    if (self.msg_free(forged) == Errc::kOk) ++st->c.errors;
    const EndpointId ep{static_cast<std::uint32_t>(r >> 20)};
    if (ep != self.ingress() && ep != self.egress() && self.recv(ep)) ++st->c.errors;
  }
  forward(self, h, st->c);
}

void forger_init(Fwp& self, std::string_view config) {
  const json j = parse_config(config, "forger");
  auto* st = alloc_state<ForgerState>(self);
  st->rng = j.value("seed", std::uint64_t{0x2545f4914f6cdd1dull}) | 1;
  (void)self.receive_fn(forger_receive, st);
}

// ---- hog: burns CPU per message ----

struct HogState {
  AppCounters c;
  std::uint64_t spin_ns = 0;
};

void hog_receive(Fwp& self, MsgHandle h, EndpointId, void* data) {
  auto* st = static_cast<HogState*>(data);
  ++st->c.received;
  const std::uint64_t end = now_ns() + st->spin_ns;
  while (now_ns() < end) cpu_relax();
  forward(self, h, st->c);
}

void hog_init(Fwp& self, std::string_view config) {
  const json j = parse_config(config, "hog");
  auto* st = alloc_state<HogState>(self);
  st->spin_ns = j.value("spin_us", std::uint64_t{50}) * 1000;
  (void)self.receive_fn(hog_receive, st);
}

}  // namespace

void register_builtin_apps(FwpRegistry& r) {
  r.add("fwd", fwd_init);
  r.add("firewall", firewall_init);
  r.add("monitor", monitor_init);
  r.add("ping", ping_init);
  r.add("kv", kv_init);
  r.add("forger", forger_init);
  r.add("hog", hog_init);
}

const AppCounters* app_counters(const Fwp& fwp) noexcept {
  if (fwp.receive_data() == nullptr || kBuiltin.find(fwp.config().type) == kBuiltin.end()) return nullptr;
  return static_cast<const AppCounters*>(fwp.receive_data());
}

std::vector<FlowStat> monitor_flows(const Fwp& fwp) {
  std::vector<FlowStat> out;
  if (fwp.config().type != "monitor" || fwp.receive_data() == nullptr) return out;
  const auto* st = static_cast<const MonitorState*>(fwp.receive_data());
  const FlowSlot* t = st->table();
  for (std::uint32_t i = 0; i < st->capacity; ++i)
    if (t[i].used) out.push_back(FlowStat{t[i].key, t[i].packets, t[i].bytes});
  std::sort(out.begin(), out.end(), [](const FlowStat& a, const FlowStat& b) { return a.key < b.key; });
  return out;
}

std::uint64_t monitor_overflow(const Fwp& fwp) noexcept {
  if (fwp.config().type != "monitor" || fwp.receive_data() == nullptr) return 0;
  return static_cast<const MonitorState*>(fwp.receive_data())->overflow;
}

std::size_t kv_size(const Fwp& fwp) noexcept {
  if (fwp.config().type != "kv" || fwp.receive_data() == nullptr) return 0;
  return static_cast<const KvState*>(fwp.receive_data())->size;
}

std::vector<std::byte> memcache_request(std::uint16_t request_id, std::string_view ascii) {
  std::vector<std::byte> b(kMemcacheHeader + ascii.size());
  store_be16(b.data(), request_id);
  store_be16(b.data() + 2, 0);
  store_be16(b.data() + 4, 1);
  store_be16(b.data() + 6, 0);
  std::memcpy(b.data() + kMemcacheHeader, ascii.data(), ascii.size());
  return b;
}

std::vector<std::byte> memcache_frame(const FlowKey& key, std::uint16_t request_id, std::string_view ascii) {
  return build_udp_frame(key, memcache_request(request_id, ascii));
}

std::string memcache_reply_text(std::span<const std::byte> frame) {
  const ParsedFrame p = parse_frame(frame);
  if (!p.ipv4 || p.key.proto != kProtoUdp || p.payload_len < kMemcacheHeader) return {};
  const auto* s = reinterpret_cast<const char*>(frame.data() + p.payload_offset + kMemcacheHeader);
  return std::string(s, p.payload_len - kMemcacheHeader);
}

std::uint16_t memcache_request_id(std::span<const std::byte> frame) {
  const ParsedFrame p = parse_frame(frame);
  if (!p.ipv4 || p.payload_len < 2) return 0;
  return load_be16(frame.data() + p.payload_offset);
}

}  // namespace eos
