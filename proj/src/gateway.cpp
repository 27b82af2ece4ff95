#include "eos/gateway.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "eos/backoff.hpp"

namespace eos {

// ---- flow rules ----

bool FlowPattern::matches(const FlowKey& k) const noexcept {
  return (!src_addr || *src_addr == k.src_addr) && (!dst_addr || *dst_addr == k.dst_addr) &&
         (!src_port || *src_port == k.src_port) && (!dst_port || *dst_port == k.dst_port) &&
         (!proto || *proto == k.proto);
}

std::uint32_t FlowTable::add_rule(const FlowRule& rule) {
  const auto id = static_cast<std::uint32_t>(rules_.size());
  rules_.push_back(rule);
  auto at = std::upper_bound(order_.begin(), order_.end(), rule.priority,
                             [this](int prio, std::uint32_t other) { return prio > rules_[other].priority; });
  order_.insert(at, id);
  return id;
}

const FlowRule* FlowTable::match(const FlowKey& key, std::uint32_t* rule_id) const noexcept {
  for (std::uint32_t id : order_) {
    if (rules_[id].match.matches(key)) {
      if (rule_id != nullptr) *rule_id = id;
      return &rules_[id];
    }
  }
  return nullptr;
}

// ---- sources ----

void fill_pattern(std::span<std::byte> out, std::uint64_t seq) noexcept {
  std::uint64_t x = seq * 0x9e3779b97f4a7c15ull + 1;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if ((i & 7) == 0) x = x * 6364136223846793005ull + 1442695040888963407ull;
    out[i] = std::byte(x >> (8 * (i & 7)));
  }
}

std::size_t default_frame(std::uint64_t seq, std::uint32_t flow, const FlowKey& key, std::span<std::byte> out,
                          std::size_t payload) {
  payload = std::min(payload, kMaxFrame - kUdpOverhead);
  std::byte* p = out.data() + kUdpOverhead;
  std::byte head[12];
  store_be32(head, static_cast<std::uint32_t>(seq >> 32));
  store_be32(head + 4, static_cast<std::uint32_t>(seq));
  store_be32(head + 8, flow);
  const std::size_t n = std::min(payload, sizeof head);
  std::memcpy(p, head, n);
  if (payload > n) fill_pattern({p + n, payload - n}, seq);
  return write_udp_headers(out, key, payload);
}

SyntheticSource::SyntheticSource(SyntheticSpec spec) : spec_(std::move(spec)), rng_(spec_.seed) {
  if (spec_.flows == 0) throw Error(Errc::kConfig, "synthetic source needs at least one flow");
  if (spec_.rate_pps < 0) throw Error(Errc::kConfig, "negative rate");
  if (spec_.rate_pps > 0) period_ns_ = 1e9 / spec_.rate_pps;
}

FlowKey SyntheticSource::flow_key(std::uint32_t flow) const noexcept {
  return FlowKey{spec_.src_base + flow, spec_.dst_addr, static_cast<std::uint16_t>(spec_.src_port_base + flow),
                 spec_.dst_port, spec_.proto};
}

bool SyntheticSource::next(Frame& out, std::uint64_t now_ns) {
  if (exhausted()) return false;
  if (period_ns_ > 0) {
    if (seq_ == 0 && start_ns_ == 0) start_ns_ = now_ns;
    const auto due = start_ns_ + static_cast<std::uint64_t>(static_cast<double>(seq_) * period_ns_);
    if (now_ns < due) return false;
  }
  const std::uint32_t flow = spec_.uniform_mix
                                 ? static_cast<std::uint32_t>(rng_() % spec_.flows)
                                 : static_cast<std::uint32_t>(seq_ % spec_.flows);
  const FlowKey key = flow_key(flow);
  out.len = spec_.frame ? spec_.frame(seq_, flow, key, out.data, rng_)
                        : default_frame(seq_, flow, key, out.data, spec_.payload);
  ++seq_;
  return true;
}

PcapSource::PcapSource(const std::string& path, std::uint64_t loops)
    : path_(path), reader_(std::make_unique<PcapReader>(path)), loops_left_(loops == 0 ? 1 : loops) {}

bool PcapSource::next(Frame& out, std::uint64_t) {
  while (!done_) {
    std::uint64_t ts = 0;
    if (!reader_->next(buf_, ts)) {
      if (--loops_left_ == 0) {
        done_ = true;
        return false;
      }
      reader_ = std::make_unique<PcapReader>(path_);
      continue;
    }
    if (buf_.size() > kMaxFrame) {
      ++oversize_;
      continue;
    }
    std::memcpy(out.data.data(), buf_.data(), buf_.size());
    out.len = buf_.size();
    return true;
  }
  return false;
}

DatagramSource::DatagramSource(const std::string& addr, std::uint16_t port) {
  addr_ = parse_ipv4(addr);
  fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK, 0);
  if (fd_ < 0) throw Error(Errc::kConfig, std::string("socket: ") + std::strerror(errno));
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(port);
  sa.sin_addr.s_addr = htonl(addr_);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd_);
    throw Error(Errc::kConfig, "bind " + addr + ":" + std::to_string(port) + ": " + err);
  }
  socklen_t len = sizeof sa;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
  port_ = ntohs(sa.sin_port);
}

DatagramSource::~DatagramSource() {
  if (fd_ >= 0) ::close(fd_);
}

bool DatagramSource::next(Frame& out, std::uint64_t) {
  sockaddr_in peer{};
  socklen_t len = sizeof peer;
  const ssize_t n = ::recvfrom(fd_, out.data.data() + kUdpOverhead, kMaxFrame - kUdpOverhead, MSG_TRUNC,
                               reinterpret_cast<sockaddr*>(&peer), &len);
  if (n < 0 || static_cast<std::size_t>(n) > kMaxFrame - kUdpOverhead) return false;
  const FlowKey key{ntohl(peer.sin_addr.s_addr), addr_, ntohs(peer.sin_port), port_, kProtoUdp};
  out.len = write_udp_headers(out.data, key, static_cast<std::size_t>(n));
  return true;
}

bool VectorSource::next(Frame& out, std::uint64_t) {
  while (pos_ < frames_.size()) {
    const auto& f = frames_[pos_++];
    if (f.size() > kMaxFrame) continue;
    std::memcpy(out.data.data(), f.data(), f.size());
    out.len = f.size();
    return true;
  }
  return false;
}

// ---- Net-In ----

NetIn::NetIn(ChainManager& manager, FlowTable table, NetInConfig config)
    : manager_(manager), table_(std::move(table)), config_(config) {
  manager_.set_ingress_epoch([this] { return epoch(); });
}

bool NetIn::live(const Binding& b) const noexcept {
  return b.inst != nullptr && b.inst->state() == ChainState::kActive && b.inst->activations() == b.generation;
}

ChainInstance* NetIn::resolve(const FlowKey& key, std::uint64_t now_ns) {
  if (auto it = flows_.find(key); it != flows_.end()) {
    if (live(it->second)) {
      it->second.last_seen_ns = now_ns;
      return it->second.inst;
    }
    flows_.erase(it);  // chain went away; the next message starts a new flow
  }
  std::uint32_t rule_id = 0;
  const FlowRule* rule = table_.match(key, &rule_id);
  if (rule == nullptr) return nullptr;

  if (rule->action == RuleAction::kSharedChain) {
    Binding& b = shared_[rule_id];
    if (!live(b)) {
      const std::uint64_t t0 = eos::now_ns();
      ChainInstance& inst = manager_.activate(rule->tmpl);
      if (config_.record_activations) activation_ns_.push_back(eos::now_ns() - t0);
      b = Binding{&inst, inst.activations(), now_ns};
      count(shared_activations_);
    }
    b.last_seen_ns = now_ns;
    return b.inst;
  }

  const std::uint64_t t0 = eos::now_ns();
  ChainInstance& inst = manager_.activate(rule->tmpl);
  if (config_.record_activations) activation_ns_.push_back(eos::now_ns() - t0);
  flows_[key] = Binding{&inst, inst.activations(), now_ns};
  count(activations_);
  return &inst;
}

Admit NetIn::admit(std::span<const std::byte> frame, std::uint64_t now_ns, bool hold) {
  // A held frame is counted as received once, when it is finally taken.
  if (!hold) count(received_);
  auto taken = [&] {
    if (hold) count(received_);
  };
  if (frame.size() > kMaxFrame) {
    taken();
    count(drop_size_);
    return Admit::kOversize;
  }
  const ParsedFrame p = parse_frame(frame);
  ChainInstance* inst = resolve(p.key, now_ns);
  if (inst == nullptr) {
    taken();
    count(drop_rule_);
    return Admit::kNoRule;
  }
  auto settled = [&] {
    taken();
    if (config_.log_assignments) assignments_.emplace_back(p.key, inst->template_id());
  };
  MessagePool& pool = inst->ingress();
  auto h = pool.alloc(frame.size());
  if (!h) {
    if (hold && h.error() != Errc::kMessageTooLarge) return Admit::kPoolFull;
    settled();
    count(h.error() == Errc::kMessageTooLarge ? drop_size_ : drop_full_);
    return h.error() == Errc::kMessageTooLarge ? Admit::kOversize : Admit::kPoolFull;
  }
  std::memcpy(pool.payload(*h).data(), frame.data(), frame.size());
  pool.set_tag(*h, now_ns);
  if (pool.send(*h) != Errc::kOk) {
    (void)pool.free(*h);
    if (hold) return Admit::kPoolFull;
    settled();
    count(drop_full_);
    return Admit::kPoolFull;
  }
  if (std::find(touched_.begin(), touched_.end(), &pool) == touched_.end()) touched_.push_back(&pool);
  settled();
  count(admitted_);
  count(bytes_, frame.size());
  return Admit::kAdmitted;
}

void NetIn::flush() {
  for (MessagePool* p : touched_) p->flush();
  touched_.clear();
}

std::size_t NetIn::poll() {
  epoch_.fetch_add(1, std::memory_order_acq_rel);
  std::size_t n = 0;
  const std::uint64_t t = eos::now_ns();
  if (config_.hold_on_full) {
    held_.resize(sources_.size());
    holding_.resize(sources_.size(), 0);
  }
  for (std::size_t s = 0; s < sources_.size(); ++s) {
    if (!config_.hold_on_full) {
      for (std::size_t i = 0; i < config_.batch && sources_[s]->next(frame_, t); ++i) {
        (void)admit(frame_.bytes(), t);
        ++n;
      }
      continue;
    }
    for (std::size_t i = 0; i < config_.batch; ++i) {
      if (!holding_[s]) {
        if (!sources_[s]->next(held_[s], t)) break;
        holding_[s] = 1;
      }
      if (admit(held_[s].bytes(), t, true) == Admit::kPoolFull) {
        flush();
        break;
      }
      holding_[s] = 0;
      ++n;
    }
  }
  flush();
  if (t >= next_expire_ns_) {
    flow_expire(t);
    next_expire_ns_ = t + config_.expire_interval_ns;
  }
  return n;
}

void NetIn::run(const std::atomic<bool>& stop) {
  tighten_timer_slack();
  IdleBackoff backoff;
  while (!stop.load(std::memory_order_acquire)) {
    if (poll() != 0) {
      backoff.reset();
    } else {
      backoff.idle();
    }
  }
  flush();
}

std::size_t NetIn::flow_expire(std::uint64_t now_ns) {
  std::size_t n = 0;
  for (auto it = flows_.begin(); it != flows_.end();) {
    const Binding& b = it->second;
    if (!live(b)) {
      it = flows_.erase(it);
      continue;
    }
    if (now_ns - b.last_seen_ns >= config_.idle_timeout_ns) {
      manager_.request_terminate(*b.inst);
      it = flows_.erase(it);
      ++n;
      continue;
    }
    ++it;
  }
  count(expired_, n);
  return n;
}

std::size_t NetIn::terminate_all() {
  flush();
  std::size_t n = 0;
  for (auto& [key, b] : flows_) {
    if (live(b)) {
      manager_.request_terminate(*b.inst);
      ++n;
    }
  }
  for (auto& [id, b] : shared_) {
    if (live(b)) {
      manager_.request_terminate(*b.inst);
      ++n;
    }
  }
  flows_.clear();
  shared_.clear();
  return n;
}

bool NetIn::sources_exhausted() const {
  if (std::any_of(holding_.begin(), holding_.end(), [](char h) { return h != 0; })) return false;
  return std::all_of(sources_.begin(), sources_.end(), [](const auto& s) { return s->exhausted(); });
}

NetInStats NetIn::stats() const {
  NetInStats s;
  s.received = received_.load(std::memory_order_relaxed);
  s.admitted = admitted_.load(std::memory_order_relaxed);
  s.bytes_admitted = bytes_.load(std::memory_order_relaxed);
  s.dropped_pool_full = drop_full_.load(std::memory_order_relaxed);
  s.dropped_no_rule = drop_rule_.load(std::memory_order_relaxed);
  s.dropped_oversize = drop_size_.load(std::memory_order_relaxed);
  s.activations = activations_.load(std::memory_order_relaxed);
  s.shared_activations = shared_activations_.load(std::memory_order_relaxed);
  s.expired = expired_.load(std::memory_order_relaxed);
  return s;
}

ChainInstance* NetIn::chain_for(const FlowKey& key) const {
  if (auto it = flows_.find(key); it != flows_.end() && live(it->second)) return it->second.inst;
  std::uint32_t rule_id = 0;
  const FlowRule* rule = table_.match(key, &rule_id);
  if (rule == nullptr || rule->action != RuleAction::kSharedChain) return nullptr;
  auto it = shared_.find(rule_id);
  return it != shared_.end() && live(it->second) ? it->second.inst : nullptr;
}

// ---- sinks ----

bool CounterSink::emit(std::span<const std::byte> frame) {
  bytes_.store(bytes_.load(std::memory_order_relaxed) + frame.size(), std::memory_order_relaxed);
  frames_.store(frames_.load(std::memory_order_relaxed) + 1, std::memory_order_release);
  return true;
}

DatagramSink::DatagramSink() {
  fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK, 0);
  if (fd_ < 0) throw Error(Errc::kConfig, std::string("socket: ") + std::strerror(errno));
}

DatagramSink::~DatagramSink() {
  if (fd_ >= 0) ::close(fd_);
}

bool DatagramSink::emit(std::span<const std::byte> frame) {
  const ParsedFrame p = parse_frame(frame);
  if (!p.ipv4 || p.key.proto != kProtoUdp) return true;  // nothing a UDP socket can carry
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(p.key.dst_port);
  sa.sin_addr.s_addr = htonl(p.key.dst_addr);
  const ssize_t n = ::sendto(fd_, frame.data() + p.payload_offset, p.payload_len, 0,
                             reinterpret_cast<sockaddr*>(&sa), sizeof sa);
  if (n >= 0) return true;
  return !(errno == EAGAIN || errno == EWOULDBLOCK || errno == ENOBUFS);
}

// ---- Net-Out ----

NetOut::NetOut(MmaGroup& mma, std::unique_ptr<PacketSink> sink, NetOutConfig config)
    : mma_(mma), sink_(std::move(sink)), config_(config) {}

bool NetOut::deliver(const EgressRef& ref) {
  RingEntry e = RingEntry::decode(ref.word);
  const SlotArena& arena = ref.pool->arena();
  const std::span<const std::byte> frame{arena.data(e.slot), arena.length(e.slot)};
  if (!sink_->emit(frame)) {
    failures_.store(failures_.load(std::memory_order_relaxed) + 1, std::memory_order_relaxed);
    return false;
  }
  if (config_.record_latency) {
    const std::uint64_t tag = ref.pool->arena().tag(e.slot);
    const std::uint64_t t = eos::now_ns();
    if (tag != 0 && t >= tag) latency_ns_.push_back(t - tag);
  }
  bytes_.store(bytes_.load(std::memory_order_relaxed) + frame.size(), std::memory_order_relaxed);
  e.state = EntryState::kFree;
  ref.pool->tx_ring().publish(ref.pos, e);
  emitted_.store(emitted_.load(std::memory_order_relaxed) + 1, std::memory_order_release);
  return true;
}

std::size_t NetOut::poll() {
  std::size_t n = 0;
  while (!retry_.empty()) {
    if (deliver(retry_.front())) {
      retry_.pop_front();
      retries_ = 0;
      ++n;
    } else if (config_.max_retries != 0 && ++retries_ >= config_.max_retries) {
      const EgressRef& ref = retry_.front();
      RingEntry e = RingEntry::decode(ref.word);
      e.state = EntryState::kFree;
      ref.pool->tx_ring().publish(ref.pos, e);
      dropped_.store(dropped_.load(std::memory_order_relaxed) + 1, std::memory_order_relaxed);
      retry_.pop_front();
      retries_ = 0;
    } else {
      return n;
    }
  }
  for (std::size_t i = 0; i < mma_.size(); ++i) {
    auto& q = mma_.engine(i).egress_queue();
    for (std::size_t k = 0; k < config_.batch; ++k) {
      auto ref = q.try_pop();
      if (!ref) break;
      if (!retry_.empty() || !deliver(*ref)) {
        retry_.push_back(*ref);
        continue;
      }
      ++n;
    }
  }
  if (n != 0) sink_->flush();
  return n;
}

void NetOut::run(const std::atomic<bool>& stop) {
  tighten_timer_slack();
  IdleBackoff backoff;
  while (!stop.load(std::memory_order_acquire)) {
    if (poll() != 0) {
      backoff.reset();
    } else {
      backoff.idle();
    }
  }
  while (poll() != 0) {
  }
  sink_->flush();
}

NetOutStats NetOut::stats() const {
  return NetOutStats{emitted_.load(std::memory_order_acquire), bytes_.load(std::memory_order_relaxed),
                     failures_.load(std::memory_order_relaxed), dropped_.load(std::memory_order_relaxed)};
}

}  // namespace eos
