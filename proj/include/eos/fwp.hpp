#ifndef EOS_FWP_HPP
#define EOS_FWP_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eos/common.hpp"
#include "eos/msgpool.hpp"
#include "eos/scheduler.hpp"

namespace eos {

// Fixed-size local heap with a monotone break and guard bands on both sides.
class HeapArena {
 public:
  static constexpr std::size_t kGuardBytes = 64;
  static constexpr std::byte kGuardPattern{0xA5};
  static constexpr std::size_t kAlign = 16;

  explicit HeapArena(std::size_t size);

  HeapArena(const HeapArena&) = delete;
  HeapArena& operator=(const HeapArena&) = delete;

  std::size_t size() const noexcept { return size_; }
  std::size_t brk() const noexcept { return brk_; }
  std::size_t high_water() const noexcept { return high_water_; }

  Result<std::size_t> sbrk(std::size_t n) noexcept;
  std::byte* at(std::size_t offset) noexcept { return base() + offset; }
  const std::byte* at(std::size_t offset) const noexcept { return base() + offset; }
  std::span<const std::byte> used() const noexcept { return {base(), brk_}; }
  std::span<const std::byte> all() const noexcept { return {base(), size_}; }

  // Copies [0, brk) into `image`; subsequent restores return to this break.
  void checkpoint(std::span<std::byte> image) noexcept;
  // memcpy of the image, memset of everything dirtied above it.
  std::size_t restore(std::span<const std::byte> image) noexcept;
  std::size_t checkpoint_brk() const noexcept { return ckpt_brk_; }

  bool guards_intact() const noexcept;
  // Non-zero bytes above the checkpoint break.
  std::size_t residual_bytes() const noexcept;

 private:
  std::byte* base() noexcept { return storage_.get() + kGuardBytes; }
  const std::byte* base() const noexcept { return storage_.get() + kGuardBytes; }

  struct AlignedFree {
    void operator()(std::byte* p) const noexcept;
  };

  std::size_t size_;
  std::unique_ptr<std::byte[], AlignedFree> storage_;
  std::size_t brk_ = 0;
  std::size_t high_water_ = 0;
  std::size_t ckpt_brk_ = 0;
};

enum class FwpState : std::uint8_t {
  kLoaded,
  kInitialized,
  kCached,
  kActivated,
  kRunnable,
  kBlocked,
  kTerminated,
};

const char* to_string(FwpState s) noexcept;

enum class EndpointKind : std::uint8_t { kIngress, kToChainNext, kToNetOut, kToScheduler };

struct Endpoint {
  EndpointId id;
  EndpointKind kind = EndpointKind::kIngress;
  ChannelId channel;
};

class Fwp;

using ReceiveFn = void (*)(Fwp& self, MsgHandle msg, EndpointId source, void* data);
using PostinitFn = void (*)(Fwp& self, void* data);

struct FwpConfig {
  std::string type;
  std::string config;  // JSON text handed to the type's init code
  PoolConfig pool;
  std::size_t heap_bytes = std::size_t{1} << 20;
  // Optional shared slot arena (reference-mode benchmark chains).
  std::shared_ptr<SlotArena> shared_arena;
  std::uint32_t first_slot = 0;
};

struct FwpCounters {
  std::uint64_t callbacks = 0;
  std::uint64_t block_requests = 0;
  std::uint64_t sent = 0;
  std::uint64_t freed = 0;
  std::uint64_t allocated = 0;
  std::uint64_t rejected = 0;  // capability or handle violations
  std::uint64_t preemptions = 0;
};

// A featherweight process: local heap + message pool + endpoints + the
// callbacks its init code registered. Runs as a logical context dispatched by
// one core scheduler.
class Fwp : public Task {
 public:
  explicit Fwp(FwpConfig config);

  Fwp(const Fwp&) = delete;
  Fwp& operator=(const Fwp&) = delete;

  FwpId id() const noexcept { return id_; }
  FwpId task_id() const noexcept override { return id_; }
  const FwpConfig& config() const noexcept { return config_; }
  FwpState state() const noexcept { return state_; }
  bool faulted() const noexcept { return faulted_; }
  const std::string& fault_reason() const noexcept { return fault_reason_; }
  MessagePool& pool() noexcept { return *pool_; }
  const MessagePool& pool() const noexcept { return *pool_; }
  HeapArena& heap() noexcept { return heap_; }
  const HeapArena& heap() const noexcept { return heap_; }
  const FwpCounters& counters() const noexcept { return counters_; }

  // ---- application API ----
  Errc postinit(PostinitFn fn, void* data) noexcept;
  Errc receive_fn(ReceiveFn fn, void* data) noexcept;
  std::optional<MsgHandle> recv(EndpointId ep) noexcept;
  Errc send(EndpointId ep, MsgHandle h) noexcept;
  Result<MsgHandle> msg_alloc(std::size_t size) noexcept;
  Errc msg_free(MsgHandle h) noexcept;
  Result<std::size_t> sbrk(std::size_t size) noexcept;
  template <class T>
  T* heap_at(std::size_t offset) noexcept {
    return reinterpret_cast<T*>(heap_.at(offset));
  }
  std::span<std::byte> payload(MsgHandle h) noexcept { return pool_->payload(h); }
  std::uint32_t length(MsgHandle h) const noexcept { return pool_->length(h); }
  Errc set_length(MsgHandle h, std::size_t n) noexcept { return pool_->set_length(h, n); }
  // Ends this activation after the current message (per-request services).
  void exit() noexcept { exit_requested_ = true; }

  // Endpoint ids the application may use.
  EndpointId ingress() const noexcept { return ingress_.id; }
  EndpointId egress() const noexcept { return egress_ ? egress_->id : EndpointId{}; }
  const std::vector<Endpoint>& endpoints() const noexcept { return endpoints_; }
  // State pointer registered with receive_fn.
  void* receive_data() const noexcept { return receive_data_; }

  // ---- runtime / manager side ----
  void set_ingress(Endpoint ep);
  void set_egress(Endpoint ep);
  // Runs the type's init code, then the postinit callback.
  void initialize(const std::function<void(Fwp&, std::string_view)>& init);
  void mark_cached() noexcept { state_ = FwpState::kCached; }
  Errc activate() noexcept;
  // Resets run state after a heap/pool restore.
  void reset_after_restore() noexcept;
  void fault(std::string reason) noexcept;

  RunOutcome run(const RunBudget& budget) override;
  bool has_pending_input() const noexcept override { return pool_->rx_pending(); }

 private:
  bool holds(EndpointId ep) const noexcept;

  FwpId id_;
  FwpConfig config_;
  std::unique_ptr<MessagePool> pool_;
  HeapArena heap_;
  FwpState state_ = FwpState::kLoaded;
  bool faulted_ = false;
  bool exit_requested_ = false;
  std::string fault_reason_;
  ReceiveFn receive_ = nullptr;
  void* receive_data_ = nullptr;
  PostinitFn postinit_ = nullptr;
  void* postinit_data_ = nullptr;
  Endpoint ingress_;
  std::optional<Endpoint> egress_;
  std::vector<Endpoint> endpoints_;
  FwpCounters counters_;
};

// FWP types keyed by name: the in-process analog of loading an object file.
class FwpRegistry {
 public:
  using InitFn = std::function<void(Fwp&, std::string_view config)>;

  void add(std::string name, InitFn init);
  bool contains(const std::string& name) const { return types_.count(name) != 0; }
  const InitFn& get(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, InitFn> types_;
};

EndpointId next_endpoint_id() noexcept;

}  // namespace eos

#endif  // EOS_FWP_HPP
