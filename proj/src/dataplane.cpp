#include "eos/dataplane.hpp"

#include <array>
#include <chrono>

#include <pthread.h>
#include <sched.h>

#include "eos/backoff.hpp"

namespace eos {

const char* to_string(Threading t) noexcept {
  switch (t) {
    case Threading::kManual: return "manual";
    case Threading::kShared: return "shared";
    case Threading::kDedicated: return "dedicated";
  }
  return "?";
}

Threading threading_from_string(const std::string& s) {
  if (s == "manual") return Threading::kManual;
  if (s == "shared") return Threading::kShared;
  if (s == "dedicated") return Threading::kDedicated;
  throw Error(Errc::kConfig, "unknown threading mode '" + s + "' (manual, shared, dedicated)");
}

bool pin_current_thread(int cpu) noexcept {
  if (cpu < 0 || cpu >= CPU_SETSIZE) return false;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu, &set);
  return pthread_setaffinity_np(pthread_self(), sizeof(set), &set) == 0;
}

Dataplane::Dataplane(const FwpRegistry& registry, DataplaneConfig config)
    : registry_(registry), config_(std::move(config)) {
  if (config_.cores == 0) throw Error(Errc::kConfig, "at least one worker core is required");
  if (config_.mma_engines == 0) throw Error(Errc::kConfig, "at least one copier engine is required");
  mma_ = std::make_unique<MmaGroup>(pools_, config_.mma_engines, config_.egress_capacity);
  const std::size_t engines = config_.mma_engines;
  std::vector<ChainManager::CorePorts> ports;
  for (std::size_t c = 0; c < config_.cores; ++c) {
    auto core = std::make_unique<CoreScheduler>(static_cast<CoreId>(c), engines + 2);
    if (core->set_quantum(config_.quantum_ns) != Errc::kOk)
      throw Error(Errc::kConfig, "quantum out of range [10 us, 10 ms]");
    core->enable_log(config_.dispatch_log);
    for (std::size_t e = 0; e < engines; ++e) mma_->engine(e).attach_scheduler(static_cast<CoreId>(c), core->inbox_port(e));
    ports.push_back({core.get(), &core->inbox_port(engines), &core->inbox_port(engines + 1)});
    cores_.push_back(std::move(core));
  }
  manager_ = std::make_unique<ChainManager>(registry_, pools_, *mma_, std::move(ports), config_.manager);
  net_in_ = std::make_unique<NetIn>(*manager_, FlowTable{}, config_.net_in);
  net_out_ = std::make_unique<NetOut>(*mma_, std::make_unique<CounterSink>(), config_.net_out);
}

Dataplane::~Dataplane() { stop(); }

bool Dataplane::step() {
  bool moved = net_in_->poll() != 0;
  moved |= mma_->sweep_all() != 0;
  for (auto& core : cores_) {
    for (int i = 0; i < 64 && core->poll_once(); ++i) {
      moved = true;
      mma_->sweep_all();
    }
  }
  moved |= mma_->sweep_all() != 0;
  moved |= net_out_->poll() != 0;
  moved |= manager_->poll();
  return moved;
}

void Dataplane::pin(int cpu) noexcept {
  if (cpu >= 0 && !pin_current_thread(cpu)) pin_failures_.fetch_add(1);
}

void Dataplane::shared_loop() {
  pin(config_.cpus.workers.empty() ? -1 : config_.cpus.workers[0]);
  tighten_timer_slack();
  IdleBackoff backoff;
  while (!stop_.load(std::memory_order_acquire)) {
    if (step()) backoff.reset();
    else backoff.idle();
  }
}

void Dataplane::start() {
  if (running_ || config_.threading == Threading::kManual) return;
  stop_.store(false, std::memory_order_release);
  running_ = true;
  if (config_.threading == Threading::kShared) {
    threads_.emplace_back([this] { shared_loop(); });
    return;
  }
  const CpuMap& m = config_.cpus;
  auto at = [](const std::vector<int>& v, std::size_t i) { return i < v.size() ? v[i] : -1; };
  threads_.emplace_back([this, cpu = m.net_in] {
    pin(cpu);
    net_in_->run(stop_);
  });
  for (std::size_t e = 0; e < mma_->size(); ++e)
    threads_.emplace_back([this, e, cpu = at(m.mma, e)] {
      pin(cpu);
      mma_->engine(e).run(stop_);
    });
  for (std::size_t c = 0; c < cores_.size(); ++c)
    threads_.emplace_back([this, core = cores_[c].get(), cpu = at(m.workers, c)] {
      pin(cpu);
      core->run(stop_);
    });
  threads_.emplace_back([this, cpu = m.net_out] {
    pin(cpu);
    net_out_->run(stop_);
  });
  threads_.emplace_back([this, cpu = m.control] {
    pin(cpu);
    manager_->run(stop_);
  });
}

void Dataplane::stop() {
  if (!running_) return;
  stop_.store(true, std::memory_order_release);
  for (auto& t : threads_) t.join();
  threads_.clear();
  running_ = false;
}

bool Dataplane::quiet() const {
  return net_in_->sources_exhausted() && manager_->quiescent() && in_flight() == 0;
}

bool Dataplane::settle(std::uint64_t timeout_ns) {
  const std::uint64_t deadline = now_ns() + timeout_ns;
  if (!running_) {
    int calm = 0;
    while (now_ns() < deadline) {
      const bool moved = step();
      calm = moved ? 0 : calm + 1;
      if (calm >= 3 && quiet()) return true;
    }
    return false;
  }
  // Threads own the structures; watch progress counters only.
  auto snapshot = [this] {
    return std::array<std::uint64_t, 3>{net_in_->stats().received, net_out_->stats().emitted, mma_->stats().moved};
  };
  auto last = snapshot();
  std::uint64_t calm_since = now_ns();
  while (now_ns() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
    const auto cur = snapshot();
    if (cur != last) {
      last = cur;
      calm_since = now_ns();
    } else if (net_in_->sources_exhausted() && now_ns() - calm_since >= 20'000'000) {
      return true;
    }
  }
  return false;
}

bool Dataplane::shutdown_chains(std::uint64_t timeout_ns) {
  stop();
  net_in_->terminate_all();
  const std::uint64_t deadline = now_ns() + timeout_ns;
  while (now_ns() < deadline) {
    step();
    if (manager_->quiescent() && manager_->active_count() == 0 && manager_->terminating_count() == 0) return true;
  }
  return false;
}

std::uint64_t Dataplane::in_flight() const {
  std::uint64_t n = 0;
  for (ChainInstance* inst : manager_->instances()) {
    const ChainState s = inst->state();
    if (s != ChainState::kActive && s != ChainState::kTerminating) continue;
    auto live = [](const MessagePool& p) {
      const PoolCensus c = p.census();
      return std::uint64_t{c.live()} - c.held;
    };
    n += live(inst->ingress());
    for (std::size_t i = 0; i < inst->stages(); ++i) n += live(inst->stage(i).pool());
  }
  return n;
}

ConservationAudit Dataplane::audit() const {
  ConservationAudit a;
  for (ChainInstance* inst : manager_->instances()) {
    if (inst->state() == ChainState::kDiscarded) continue;
    std::string why;
    if (!inst->ingress().audit(&why)) a.failures.push_back("chain " + std::to_string(inst->id().value) + " ingress: " + why);
    for (std::size_t i = 0; i < inst->stages(); ++i) {
      const Fwp& f = inst->stage(i);
      if (!f.pool().audit(&why))
        a.failures.push_back("chain " + std::to_string(inst->id().value) + " stage " + std::to_string(i) + ": " + why);
      if (inst->state() == ChainState::kActive || inst->state() == ChainState::kTerminating)
        a.consumed += f.counters().freed;
    }
  }
  a.pools_ok = a.failures.empty();
  const ChainStats cs = manager_->stats();
  a.admitted = net_in_->stats().admitted;
  a.emitted = net_out_->stats().emitted;
  a.consumed += cs.consumed;
  a.discarded = cs.discarded_messages;
  a.in_flight = in_flight();
  return a;
}

}  // namespace eos
