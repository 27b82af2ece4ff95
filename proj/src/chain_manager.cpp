#include "eos/chain_manager.hpp"

#include <algorithm>
#include <exception>

#include "eos/backoff.hpp"

namespace eos {

const char* to_string(ChainState s) noexcept {
  switch (s) {
    case ChainState::kCached: return "Cached";
    case ChainState::kActive: return "Active";
    case ChainState::kTerminating: return "Terminating";
    case ChainState::kDiscarded: return "Discarded";
  }
  return "?";
}

bool ChainInstance::faulted() const noexcept {
  for (const auto& f : fwps_)
    if (f->faulted()) return true;
  return false;
}

namespace {

// Orders stages along the link path; throws BadWiring unless the links form
// one simple path covering every stage.
std::vector<std::size_t> path_order(const ChainTemplate& t) {
  const std::size_t n = t.stages.size();
  if (n == 0) throw Error(Errc::kBadWiring, "template '" + t.name + "' has no stages");
  std::vector<std::size_t> order;
  if (t.links.empty()) {
    for (std::size_t i = 0; i < n; ++i) order.push_back(i);
    return order;
  }
  if (t.links.size() != n - 1) throw Error(Errc::kBadWiring, "links must connect the stages in one path");
  std::vector<int> next(n, -1), indeg(n, 0);
  for (auto [a, b] : t.links) {
    if (a >= n || b >= n || a == b) throw Error(Errc::kBadWiring, "link refers to an unknown stage");
    if (next[a] != -1) throw Error(Errc::kBadWiring, "stage fans out");
    next[a] = static_cast<int>(b);
    ++indeg[b];
  }
  std::size_t start = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (indeg[i] > 1) throw Error(Errc::kBadWiring, "stage fans in");
    if (indeg[i] == 0) {
      if (start != n) throw Error(Errc::kBadWiring, "links do not form a single path");
      start = i;
    }
  }
  if (start == n) throw Error(Errc::kBadWiring, "links form a cycle");
  std::vector<bool> seen(n, false);
  for (int cur = static_cast<int>(start); cur != -1; cur = next[cur]) {
    if (seen[cur]) throw Error(Errc::kBadWiring, "links form a cycle");
    seen[cur] = true;
    order.push_back(static_cast<std::size_t>(cur));
  }
  if (order.size() != n) throw Error(Errc::kBadWiring, "links form a cycle");
  return order;
}

bool any_in(const Ring& r, std::uint64_t from, std::uint64_t to, EntryState s) {
  for (std::uint64_t p = from; p < to; ++p)
    if (r.peek(p).state == s) return true;
  return false;
}

}  // namespace

ChainManager::ChainManager(const FwpRegistry& registry, PoolDirectory& pools, MmaGroup& mma,
                           std::vector<CorePorts> cores, ManagerConfig config)
    : registry_(registry), pools_(pools), mma_(mma), cores_(std::move(cores)), config_(config) {
  if (cores_.empty()) throw Error(Errc::kInvalidArgument, "chain manager needs at least one core");
  if (config_.high_watermark < config_.low_watermark)
    throw Error(Errc::kInvalidArgument, "high watermark below low watermark");
}

ChainManager::~ChainManager() {
  for (auto& [id, inst] : all_) {
    pools_.remove(inst->ingress_->id());
    for (auto& f : inst->fwps_) pools_.remove(f->pool().id());
  }
}

TemplateId ChainManager::load_template(ChainTemplate tmpl) {
  std::vector<std::size_t> order = path_order(tmpl);
  for (const StageSpec& s : tmpl.stages) {
    if (!registry_.contains(s.type)) throw Error(Errc::kUnknownFwpType, s.type);
    if (s.core >= cores_.size())
      throw Error(Errc::kBadWiring, "stage '" + s.type + "' placed on core " + std::to_string(s.core));
  }
  if (tmpl.mode == ChannelMode::kEgress) throw Error(Errc::kInvalidArgument, "egress is not a chain mode");
  if (tmpl.mode == ChannelMode::kReference) {
    for (const StageSpec& s : tmpl.stages)
      if (s.pool.slot_size != tmpl.ingress_pool.slot_size)
        throw Error(Errc::kInvalidArgument, "reference chains need one slot size");
  }
  std::lock_guard lock(mu_);
  templates_.push_back(TemplateEntry{std::move(tmpl), std::move(order), {}, false});
  return TemplateId(static_cast<std::uint32_t>(templates_.size() - 1));
}

const ChainTemplate& ChainManager::get_template(TemplateId id) const {
  std::lock_guard lock(mu_);
  if (id.value >= templates_.size()) throw Error(Errc::kUnknownTemplate, std::to_string(id.value));
  return templates_[id.value].tmpl;
}

std::optional<TemplateId> ChainManager::find_template(const std::string& name) const {
  std::lock_guard lock(mu_);
  for (std::size_t i = 0; i < templates_.size(); ++i)
    if (templates_[i].tmpl.name == name) return TemplateId(static_cast<std::uint32_t>(i));
  return std::nullopt;
}

std::unique_ptr<ChainInstance> ChainManager::build(TemplateId id) {
  const std::uint64_t t0 = now_ns();
  ChainTemplate tmpl;
  std::vector<std::size_t> order;
  auto inst = std::make_unique<ChainInstance>();
  {
    std::lock_guard lock(mu_);
    if (id.value >= templates_.size()) throw Error(Errc::kUnknownTemplate, std::to_string(id.value));
    tmpl = templates_[id.value].tmpl;
    order = templates_[id.value].order;
    inst->id_ = ChainId(next_chain_++);
  }
  inst->tmpl_ = id;
  const bool reference = tmpl.mode == ChannelMode::kReference;

  if (reference) {
    std::uint32_t slots = tmpl.ingress_pool.slot_count;
    for (const StageSpec& s : tmpl.stages) slots += s.pool.slot_count;
    inst->shared_arena_ = std::make_shared<SlotArena>(slots, tmpl.ingress_pool.slot_size);
    inst->ingress_ = std::make_unique<MessagePool>(tmpl.ingress_pool, inst->shared_arena_, 0);
  } else {
    inst->ingress_ = std::make_unique<MessagePool>(tmpl.ingress_pool);
  }

  std::uint32_t next_slot = tmpl.ingress_pool.slot_count;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const StageSpec& s = tmpl.stages[order[k]];
    FwpConfig fc{s.type, s.config, s.pool, s.heap_bytes, nullptr, 0};
    if (reference) {
      fc.shared_arena = inst->shared_arena_;
      fc.first_slot = next_slot;
      next_slot += s.pool.slot_count;
    }
    auto fwp = std::make_unique<Fwp>(std::move(fc));
    const bool last = k + 1 == order.size();
    if (!last || tmpl.egress)
      fwp->set_egress(Endpoint{next_endpoint_id(), last ? EndpointKind::kToNetOut : EndpointKind::kToChainNext, {}});
    try {
      fwp->initialize(registry_.get(s.type));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(Errc::kRuntimeFault, "init of stage '" + s.type + "': " + e.what());
    }
    fwp->pool().flush();
    inst->fwps_.push_back(std::move(fwp));
  }

  // Post-init checkpoint: all stage heaps in one contiguous region.
  for (const auto& f : inst->fwps_) {
    inst->image_offsets_.push_back(inst->image_bytes_);
    inst->image_bytes_ += f->heap().brk();
  }
  inst->image_ = std::make_unique<std::byte[]>(std::max<std::size_t>(inst->image_bytes_, 1));
  for (std::size_t i = 0; i < inst->fwps_.size(); ++i) {
    Fwp& f = *inst->fwps_[i];
    f.heap().checkpoint({inst->image_.get() + inst->image_offsets_[i], f.heap().brk()});
    if (!reference) inst->pool_images_.push_back(f.pool().snapshot());
    f.mark_cached();
  }
  if (!reference) inst->pool_images_.push_back(inst->ingress_->snapshot());

  // Channel plan: ingress -> stage 0 -> ... -> last -> Net-Out.
  const std::size_t n = inst->fwps_.size();
  auto core_of = [&](std::size_t k) { return tmpl.stages[order[k]].core; };
  auto link = [&](MessagePool& src, MessagePool* dst, CoreId core, FwpId fwp, bool egress, ChannelMode mode) {
    ChannelSpec c{src.id(), dst ? dst->id() : PoolId{}, core, fwp, egress, mode};
    c.src_pool = &src;
    c.dst_pool = dst;
    inst->channel_specs_.push_back(c);
  };
  link(*inst->ingress_, &inst->fwps_[0]->pool(), core_of(0), inst->fwps_[0]->id(), false, tmpl.mode);
  for (std::size_t k = 0; k + 1 < n; ++k)
    link(inst->fwps_[k]->pool(), &inst->fwps_[k + 1]->pool(), core_of(k + 1), inst->fwps_[k + 1]->id(), false, tmpl.mode);
  if (tmpl.egress) link(inst->fwps_[n - 1]->pool(), nullptr, 0, FwpId{}, true, ChannelMode::kEgress);
  inst->channel_res_.resize(inst->channel_specs_.size());
  inst->channels_.reserve(inst->channel_specs_.size());
  inst->tickets_.reserve(inst->channel_specs_.size());
  inst->acks_ = std::make_unique<std::atomic<bool>[]>(n);

  pools_.add(*inst->ingress_);
  for (auto& f : inst->fwps_) pools_.add(f->pool());
  inst->state_.store(ChainState::kCached, std::memory_order_release);

  std::lock_guard lock(mu_);
  ++stats_.builds;
  stats_.build_ns.push_back(now_ns() - t0);
  return inst;
}

void ChainManager::adopt(std::unique_ptr<ChainInstance> inst) {
  for (auto& f : inst->fwps_) by_fwp_[f->id()] = inst.get();
  all_[inst->id_] = std::move(inst);
}

std::size_t ChainManager::build_cached(TemplateId id, std::size_t n) {
  std::size_t built = 0;
  for (; built < n; ++built) {
    auto inst = build(id);
    std::lock_guard lock(mu_);
    TemplateEntry& te = templates_[id.value];
    te.refilling = te.refilling || config_.auto_refill;
    te.cache.push_back(inst.get());
    adopt(std::move(inst));
  }
  return built;
}

std::size_t ChainManager::cache_depth(TemplateId id) const {
  std::lock_guard lock(mu_);
  return id.value < templates_.size() ? templates_[id.value].cache.size() : 0;
}

std::size_t ChainManager::reclaim(TemplateId id, std::size_t n) {
  std::vector<ChainInstance*> victims;
  {
    std::lock_guard lock(mu_);
    if (id.value >= templates_.size()) throw Error(Errc::kUnknownTemplate, std::to_string(id.value));
    auto& cache = templates_[id.value].cache;
    while (victims.size() < n && !cache.empty()) {
      victims.push_back(cache.back());
      cache.pop_back();
    }
    templates_[id.value].refilling = false;
  }
  for (ChainInstance* v : victims) discard(*v, true);
  return victims.size();
}

ChainInstance& ChainManager::activate(TemplateId id) {
  ChainInstance* inst = nullptr;
  {
    std::lock_guard lock(mu_);
    if (id.value >= templates_.size()) throw Error(Errc::kUnknownTemplate, std::to_string(id.value));
    TemplateEntry& te = templates_[id.value];
    if (!te.cache.empty()) {
      inst = te.cache.front();
      te.cache.pop_front();
      ++stats_.hits;
    } else {
      ++stats_.misses;
    }
    if (config_.auto_refill) te.refilling = te.refilling || te.cache.size() < config_.low_watermark;
  }
  if (inst == nullptr) {
    auto built = build(id);
    inst = built.get();
    std::lock_guard lock(mu_);
    adopt(std::move(built));
  }
  wire(*inst);
  return *inst;
}

void ChainManager::wire(ChainInstance& inst) {
  for (auto& f : inst.fwps_) {
    const Errc rc = f->activate();
    if (rc != Errc::kOk) {
      std::lock_guard lock(mu_);
      templates_[inst.tmpl_.value].cache.push_front(&inst);
      throw Error(rc, "stage '" + f->config().type + "'");
    }
  }
  const ChainTemplate* tmpl;
  const std::vector<std::size_t>* order;
  {
    std::lock_guard lock(mu_);
    tmpl = &templates_[inst.tmpl_.value].tmpl;
    order = &templates_[inst.tmpl_.value].order;  // immutable after load
  }
  for (std::size_t k = 0; k < inst.fwps_.size(); ++k) {
    CorePorts& cp = cores_[tmpl->stages[(*order)[k]].core];
    const Errc rc = cp.scheduler->register_task(*inst.fwps_[k], *cp.activator);
    if (rc != Errc::kOk) throw Error(rc, "registering stage with its core scheduler");
  }
  inst.channels_.clear();
  for (std::size_t i = 0; i < inst.channel_specs_.size(); ++i) {
    auto ch = mma_.register_channel(inst.channel_specs_[i], &inst.channel_res_[i]);
    if (!ch) throw Error(ch.error(), "registering chain channel");
    inst.channels_.push_back(*ch);
  }
  ++inst.activations_;
  inst.state_.store(ChainState::kActive, std::memory_order_release);
}

void ChainManager::request_terminate(ChainInstance& inst) {
  ChainState expected = ChainState::kActive;
  if (!inst.state_.compare_exchange_strong(expected, ChainState::kTerminating, std::memory_order_acq_rel)) return;
  std::lock_guard lock(mu_);
  requests_.push_back(&inst);
}

void ChainManager::process_exits() {
  for (CorePorts& cp : cores_) {
    while (auto ev = cp.scheduler->exits().try_pop()) {
      ChainInstance* inst = instance_of(ev->fwp);
      if (inst == nullptr) continue;
      if (ev->kind == EventKind::kFaulted) inst->force_discard_ = true;
      request_terminate(*inst);
    }
  }
}

bool ChainManager::drained(ChainInstance& inst) const {
  auto tx_idle = [](MessagePool& p) {
    const Ring& tx = p.tx_ring();
    return tx.published_cursor() == tx.published_tail();
  };
  if (!tx_idle(*inst.ingress_)) return false;
  for (auto& f : inst.fwps_) {
    if (f->state() == FwpState::kTerminated) continue;
    const Ring& rx = f->pool().rx_ring();
    if (any_in(rx, rx.published_head(), rx.published_cursor(), EntryState::kReady)) return false;
    if (!tx_idle(f->pool())) return false;
  }
  return true;
}

bool ChainManager::step_teardown(ChainInstance& inst) {
  using P = ChainInstance::Teardown;
  switch (inst.phase_) {
    case P::kStopIngress:
      if (ingress_epoch_ && ingress_epoch_() <= inst.phase_mark_) return false;
      inst.phase_ = P::kDrain;
      inst.drain_deadline_ns_ = now_ns() + config_.drain_timeout_ns;
      [[fallthrough]];
    case P::kDrain:
      if (!inst.force_discard_ && !drained(inst)) {
        if (now_ns() < inst.drain_deadline_ns_) return false;
        std::lock_guard lock(mu_);
        ++stats_.forced_drains;
      }
      inst.tickets_.clear();
      for (std::size_t i = 0; i < inst.channels_.size(); ++i)
        inst.tickets_.push_back(mma_.deregister_channel(inst.channels_[i], &inst.channel_res_[i]));
      inst.phase_ = P::kDeregister;
      [[fallthrough]];
    case P::kDeregister:
      for (const Ticket& t : inst.tickets_)
        if (!ticket_done(t)) return false;
      inst.phase_ = P::kEgressWait;
      [[fallthrough]];
    case P::kEgressWait: {
      // Net-Out still holds references until it marks them Free.
      const Ring& tx = inst.fwps_.back()->pool().tx_ring();
      if (any_in(tx, tx.published_head(), tx.published_cursor(), EntryState::kTransmit)) return false;
      inst.phase_ = P::kRetire;
      inst.phase_mark_ = 0;
      for (std::size_t i = 0; i < inst.fwps_.size(); ++i) inst.acks_[i].store(false, std::memory_order_relaxed);
      [[fallthrough]];
    }
    case P::kRetire: {
      while (inst.phase_mark_ < inst.fwps_.size()) {
        Fwp& f = *inst.fwps_[inst.phase_mark_];
        const std::uint32_t core = f.bound_core();
        if (core == Task::kUnbound) {
          inst.acks_[inst.phase_mark_].store(true, std::memory_order_release);
        } else {
          Event ev;
          ev.kind = EventKind::kRetire;
          ev.fwp = f.id();
          ev.core = core;
          ev.ack = &inst.acks_[inst.phase_mark_];
          if (!cores_[core].control->try_push(ev)) return false;
        }
        ++inst.phase_mark_;
      }
      for (std::size_t i = 0; i < inst.fwps_.size(); ++i)
        if (!inst.acks_[i].load(std::memory_order_acquire)) return false;
      inst.phase_ = P::kRestore;
      [[fallthrough]];
    }
    case P::kRestore:
      if (inst.force_discard_ || inst.faulted() || inst.shared_arena_) {
        discard(inst, false);
      } else {
        restore(inst);
      }
      return true;
  }
  return true;
}

void ChainManager::restore(ChainInstance& inst) {
  const std::uint64_t t0 = now_ns();
  RestoreCost cost;
  std::uint64_t discarded = 0;
  std::uint64_t consumed = 0;
  for (std::size_t i = 0; i < inst.fwps_.size(); ++i) {
    Fwp& f = *inst.fwps_[i];
    consumed += f.counters().freed;
    const std::size_t ckpt = f.heap().checkpoint_brk();
    const std::size_t touched = f.heap().restore({inst.image_.get() + inst.image_offsets_[i], ckpt});
    cost.image_bytes += ckpt;
    cost.zeroed_bytes += touched - ckpt;
    const PoolSnapshot& snap = inst.pool_images_[i];
    const PoolRestoreStats ps = f.pool().restore(snap);
    cost.zeroed_bytes += ps.bytes_zeroed;
    discarded += ps.live_discarded > snap.held.size() ? ps.live_discarded - snap.held.size() : 0;
    f.reset_after_restore();
  }
  {
    const PoolRestoreStats ps = inst.ingress_->restore(inst.pool_images_.back());
    cost.zeroed_bytes += ps.bytes_zeroed;
    discarded += ps.live_discarded;
  }
  cost.ns = now_ns() - t0;
  inst.channels_.clear();
  inst.tickets_.clear();
  inst.phase_ = ChainInstance::Teardown::kStopIngress;
  inst.force_discard_ = false;
  inst.state_.store(ChainState::kCached, std::memory_order_release);

  std::lock_guard lock(mu_);
  ++stats_.restores;
  stats_.restore.push_back(cost);
  stats_.discarded_messages += discarded;
  stats_.consumed += consumed;
  templates_[inst.tmpl_.value].cache.push_back(&inst);
}

void ChainManager::discard(ChainInstance& inst, bool reclaimed) {
  std::uint64_t discarded = 0;
  std::uint64_t consumed = 0;
  for (auto& f : inst.fwps_) consumed += f->counters().freed;
  if (inst.state() != ChainState::kCached) {
    discarded += inst.ingress_->census().live();
    for (auto& f : inst.fwps_) {
      // Census is meaningless for shared-arena pools once slots migrated.
      if (inst.shared_arena_) break;
      const std::uint32_t live = f->pool().census().live();
      discarded += live;
    }
  }
  inst.state_.store(ChainState::kDiscarded, std::memory_order_release);
  pools_.remove(inst.ingress_->id());
  for (auto& f : inst.fwps_) pools_.remove(f->pool().id());
  std::lock_guard lock(mu_);
  ++(reclaimed ? stats_.reclaimed : stats_.discards);
  stats_.discarded_messages += discarded;
  stats_.consumed += consumed;
  for (auto& f : inst.fwps_) by_fwp_.erase(f->id());
  all_.erase(inst.id_);
}

bool ChainManager::refill() {
  for (std::size_t i = 0; i < templates_.size(); ++i) {
    {
      std::lock_guard lock(mu_);
      TemplateEntry& te = templates_[i];
      if (!te.refilling) continue;
      if (te.cache.size() >= config_.high_watermark) {
        te.refilling = false;
        continue;
      }
    }
    auto inst = build(TemplateId(static_cast<std::uint32_t>(i)));
    std::lock_guard lock(mu_);
    templates_[i].cache.push_back(inst.get());
    adopt(std::move(inst));
    return true;
  }
  return false;
}

bool ChainManager::poll() {
  bool progress = false;
  process_exits();
  {
    // Requests are queued after the instance left Active, so the epoch read
    // here already postdates the state change.
    const std::uint64_t epoch = ingress_epoch_ ? ingress_epoch_() : 0;
    std::lock_guard lock(mu_);
    for (ChainInstance* inst : requests_) {
      inst->phase_ = ChainInstance::Teardown::kStopIngress;
      inst->phase_mark_ = epoch;
      terminating_.push_back(inst);
    }
    progress = !requests_.empty();
    requests_.clear();
  }
  for (std::size_t i = 0; i < terminating_.size();) {
    ChainInstance* inst = terminating_[i];
    if (step_teardown(*inst)) {
      {
        std::lock_guard lock(mu_);
        ++stats_.terminations;
      }
      terminating_[i] = terminating_.back();
      terminating_.pop_back();
      progress = true;
    } else {
      ++i;
    }
  }
  if (config_.auto_refill && refill()) progress = true;
  return progress;
}

bool ChainManager::quiescent() const {
  std::lock_guard lock(mu_);
  return requests_.empty() && terminating_.empty();
}

void ChainManager::run(const std::atomic<bool>& stop) {
  tighten_timer_slack();
  IdleBackoff backoff;
  while (!stop.load(std::memory_order_acquire)) {
    if (poll()) backoff.reset();
    else backoff.idle();
  }
}

ChainStats ChainManager::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

std::size_t ChainManager::active_count() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [id, inst] : all_) n += inst->state() == ChainState::kActive;
  return n;
}

std::size_t ChainManager::terminating_count() const {
  std::lock_guard lock(mu_);
  return requests_.size() + terminating_.size();
}

std::vector<ChainInstance*> ChainManager::instances() const {
  std::lock_guard lock(mu_);
  std::vector<ChainInstance*> out;
  for (const auto& [id, inst] : all_) out.push_back(inst.get());
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->id() < b->id(); });
  return out;
}

ChainInstance* ChainManager::instance_of(FwpId fwp) const {
  std::lock_guard lock(mu_);
  auto it = by_fwp_.find(fwp);
  return it == by_fwp_.end() ? nullptr : it->second;
}

}  // namespace eos
