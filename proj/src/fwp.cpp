#include "eos/fwp.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>

#include <time.h>

namespace eos {

namespace {

std::atomic<std::uint32_t> g_next_fwp{1};
std::atomic<std::uint32_t> g_next_endpoint{1};

std::uint64_t thread_cpu_ns() noexcept {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1'000'000'000ull + static_cast<std::uint64_t>(ts.tv_nsec);
}

}  // namespace

EndpointId next_endpoint_id() noexcept { return EndpointId(g_next_endpoint.fetch_add(1, std::memory_order_relaxed)); }

// ---- HeapArena ----

void HeapArena::AlignedFree::operator()(std::byte* p) const noexcept { std::free(p); }

HeapArena::HeapArena(std::size_t size) : size_(size) {
  if (size == 0 || size % kAlign != 0) throw Error(Errc::kInvalidArgument, "heap size must be a positive multiple of 16");
  const std::size_t total = size + 2 * kGuardBytes;
  auto* p = static_cast<std::byte*>(std::aligned_alloc(kCacheLine, (total + kCacheLine - 1) / kCacheLine * kCacheLine));
  if (p == nullptr) throw std::bad_alloc();
  storage_.reset(p);
  std::memset(p, static_cast<int>(kGuardPattern), kGuardBytes);
  std::memset(p + kGuardBytes, 0, size);
  std::memset(p + kGuardBytes + size, static_cast<int>(kGuardPattern), kGuardBytes);
}

Result<std::size_t> HeapArena::sbrk(std::size_t n) noexcept {
  if (n == 0) return Errc::kInvalidArgument;
  const std::size_t rounded = (n + kAlign - 1) & ~(kAlign - 1);
  if (rounded < n || rounded > size_ - brk_) return Errc::kHeapExhausted;
  const std::size_t old = brk_;
  brk_ += rounded;
  std::memset(base() + old, 0, rounded);
  if (brk_ > high_water_) high_water_ = brk_;
  return old;
}

void HeapArena::checkpoint(std::span<std::byte> image) noexcept {
  std::memcpy(image.data(), base(), brk_);
  ckpt_brk_ = brk_;
  high_water_ = brk_;
}

std::size_t HeapArena::restore(std::span<const std::byte> image) noexcept {
  std::memcpy(base(), image.data(), ckpt_brk_);
  const std::size_t dirty = high_water_ - ckpt_brk_;
  std::memset(base() + ckpt_brk_, 0, dirty);
  brk_ = ckpt_brk_;
  high_water_ = ckpt_brk_;
  return ckpt_brk_ + dirty;
}

bool HeapArena::guards_intact() const noexcept {
  const std::byte* lo = storage_.get();
  const std::byte* hi = storage_.get() + kGuardBytes + size_;
  for (std::size_t i = 0; i < kGuardBytes; ++i)
    if (lo[i] != kGuardPattern || hi[i] != kGuardPattern) return false;
  return true;
}

std::size_t HeapArena::residual_bytes() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = ckpt_brk_; i < size_; ++i) n += base()[i] != std::byte{0};
  return n;
}

// ---- Fwp ----

const char* to_string(FwpState s) noexcept {
  switch (s) {
    case FwpState::kLoaded: return "Loaded";
    case FwpState::kInitialized: return "Initialized";
    case FwpState::kCached: return "Cached";
    case FwpState::kActivated: return "Activated";
    case FwpState::kRunnable: return "Runnable";
    case FwpState::kBlocked: return "Blocked";
    case FwpState::kTerminated: return "Terminated";
  }
  return "?";
}

Fwp::Fwp(FwpConfig config)
    : id_(g_next_fwp.fetch_add(1, std::memory_order_relaxed)),
      config_(std::move(config)),
      pool_(config_.shared_arena ? std::make_unique<MessagePool>(config_.pool, config_.shared_arena, config_.first_slot)
                                 : std::make_unique<MessagePool>(config_.pool)),
      heap_(config_.heap_bytes) {
  ingress_ = Endpoint{next_endpoint_id(), EndpointKind::kIngress, ChannelId{}};
}

void Fwp::set_ingress(Endpoint ep) { ingress_ = ep; }

void Fwp::set_egress(Endpoint ep) {
  egress_ = ep;
  endpoints_.clear();
  endpoints_.push_back(ep);
}

bool Fwp::holds(EndpointId ep) const noexcept {
  for (const Endpoint& e : endpoints_)
    if (e.id == ep) return true;
  return false;
}

Errc Fwp::postinit(PostinitFn fn, void* data) noexcept {
  if (postinit_ != nullptr) return Errc::kAlreadyRegistered;
  if (state_ != FwpState::kLoaded || fn == nullptr) return Errc::kInvalidArgument;
  postinit_ = fn;
  postinit_data_ = data;
  return Errc::kOk;
}

Errc Fwp::receive_fn(ReceiveFn fn, void* data) noexcept {
  if (receive_ != nullptr) return Errc::kAlreadyRegistered;
  if ((state_ != FwpState::kLoaded && state_ != FwpState::kInitialized) || fn == nullptr)
    return Errc::kInvalidArgument;
  receive_ = fn;
  receive_data_ = data;
  return Errc::kOk;
}

std::optional<MsgHandle> Fwp::recv(EndpointId ep) noexcept {
  if (ep != ingress_.id) {
    ++counters_.rejected;
    return std::nullopt;
  }
  return pool_->recv();
}

Errc Fwp::send(EndpointId ep, MsgHandle h) noexcept {
  if (!ep.valid() || !holds(ep)) {
    ++counters_.rejected;
    return Errc::kUnknownEndpoint;
  }
  const Errc rc = pool_->send(h);
  if (rc == Errc::kOk) ++counters_.sent;
  else ++counters_.rejected;
  return rc;
}

Result<MsgHandle> Fwp::msg_alloc(std::size_t size) noexcept {
  auto h = pool_->alloc(size);
  if (h) ++counters_.allocated;
  return h;
}

Errc Fwp::msg_free(MsgHandle h) noexcept {
  const Errc rc = pool_->free(h);
  if (rc == Errc::kOk) ++counters_.freed;
  else ++counters_.rejected;
  return rc;
}

Result<std::size_t> Fwp::sbrk(std::size_t size) noexcept {
  if (state_ == FwpState::kTerminated) return Errc::kInvalidArgument;
  return heap_.sbrk(size);
}

void Fwp::initialize(const std::function<void(Fwp&, std::string_view)>& init) {
  if (state_ != FwpState::kLoaded) throw Error(Errc::kInvalidArgument, "fwp already initialized");
  if (init) init(*this, config_.config);
  if (postinit_ != nullptr) postinit_(*this, postinit_data_);
  state_ = FwpState::kInitialized;
}

Errc Fwp::activate() noexcept {
  if (receive_ == nullptr) return Errc::kMissingHandler;
  if (state_ != FwpState::kCached && state_ != FwpState::kInitialized) return Errc::kInvalidArgument;
  state_ = FwpState::kActivated;
  return Errc::kOk;
}

void Fwp::reset_after_restore() noexcept {
  state_ = FwpState::kCached;
  faulted_ = false;
  exit_requested_ = false;
  fault_reason_.clear();
  counters_ = FwpCounters{};
}

void Fwp::fault(std::string reason) noexcept {
  faulted_ = true;
  state_ = FwpState::kTerminated;
  try {
    fault_reason_ = std::move(reason);
  } catch (...) {
  }
}

RunOutcome Fwp::run(const RunBudget& budget) {
  if (state_ == FwpState::kTerminated) return faulted_ ? RunOutcome::kFaulted : RunOutcome::kExited;
  state_ = FwpState::kRunnable;
  const std::uint64_t watchdog_ns = 10 * budget.quantum_ns;
  const std::uint64_t cpu0 = budget.quantum_ns != 0 ? thread_cpu_ns() : 0;
  for (;;) {
    std::optional<MsgHandle> h = pool_->recv();
    if (!h) {
      pool_->flush();
      // Fenced re-check closes the window against a copier that published
      // just before the block request.
      if (pool_->rx_pending()) continue;
      state_ = FwpState::kBlocked;
      ++counters_.block_requests;
      return RunOutcome::kBlocked;
    }
    const std::uint64_t t0 = now_ns();
    try {
      receive_(*this, *h, ingress_.id, receive_data_);
    } catch (const std::exception& e) {
      pool_->flush();
      fault(std::string("callback failure: ") + e.what());
      return RunOutcome::kFaulted;
    } catch (...) {
      pool_->flush();
      fault("callback failure");
      return RunOutcome::kFaulted;
    }
    ++counters_.callbacks;
    const std::uint64_t t1 = now_ns();
    // Wall time flags a suspect; CPU time of this dispatch confirms it, so
    // host preemption of the worker thread is not mistaken for an overrun.
    if (budget.quantum_ns != 0 && t1 - t0 > watchdog_ns && thread_cpu_ns() - cpu0 > watchdog_ns) {
      pool_->flush();
      fault("callback exceeded watchdog");
      return RunOutcome::kFaulted;
    }
    if (exit_requested_) {
      pool_->flush();
      state_ = FwpState::kTerminated;
      return RunOutcome::kExited;
    }
    if (t1 >= budget.deadline_ns) {
      pool_->flush();
      ++counters_.preemptions;
      return RunOutcome::kPreempted;
    }
  }
}

// ---- FwpRegistry ----

void FwpRegistry::add(std::string name, InitFn init) {
  if (types_.count(name) != 0) throw Error(Errc::kAlreadyRegistered, "fwp type " + name);
  types_.emplace(std::move(name), std::move(init));
}

const FwpRegistry::InitFn& FwpRegistry::get(const std::string& name) const {
  auto it = types_.find(name);
  if (it == types_.end()) throw Error(Errc::kUnknownFwpType, name);
  return it->second;
}

std::vector<std::string> FwpRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : types_) out.push_back(k);
  return out;
}

}  // namespace eos
