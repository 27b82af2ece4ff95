#ifndef EOS_CHAIN_MANAGER_HPP
#define EOS_CHAIN_MANAGER_HPP

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "eos/common.hpp"
#include "eos/fwp.hpp"
#include "eos/mma.hpp"
#include "eos/msgpool.hpp"
#include "eos/scheduler.hpp"

namespace eos {

struct StageSpec {
  std::string type;
  std::string config;  // JSON text for the stage's init code
  PoolConfig pool;
  std::size_t heap_bytes = std::size_t{1} << 20;
  CoreId core = 0;
};

struct ChainTemplate {
  std::string name;
  std::vector<StageSpec> stages;
  // Directed stage links; empty means stages[i] -> stages[i + 1].
  std::vector<std::pair<std::size_t, std::size_t>> links;
  PoolConfig ingress_pool;
  bool egress = true;  // last stage -> Net-Out, zero-copy
  // kReference builds every pool of an instance over one shared arena and
  // exchanges slot indices instead of copying (benchmark reference only).
  ChannelMode mode = ChannelMode::kCopy;
};

enum class ChainState : std::uint8_t { kCached, kActive, kTerminating, kDiscarded };

const char* to_string(ChainState s) noexcept;

class ChainInstance {
 public:
  ChainId id() const noexcept { return id_; }
  TemplateId template_id() const noexcept { return tmpl_; }
  ChainState state() const noexcept { return state_.load(std::memory_order_acquire); }
  std::size_t stages() const noexcept { return fwps_.size(); }
  Fwp& stage(std::size_t i) noexcept { return *fwps_[i]; }
  const Fwp& stage(std::size_t i) const noexcept { return *fwps_[i]; }
  // Owned by Net-In while the instance is Active.
  MessagePool& ingress() noexcept { return *ingress_; }
  const MessagePool& ingress() const noexcept { return *ingress_; }
  const std::vector<ChannelId>& channels() const noexcept { return channels_; }
  std::span<const std::byte> image() const noexcept { return {image_.get(), image_bytes_}; }
  std::uint64_t activations() const noexcept { return activations_; }
  bool faulted() const noexcept;

 private:
  friend class ChainManager;

  enum class Teardown : std::uint8_t { kStopIngress, kDrain, kDeregister, kEgressWait, kRetire, kRestore };

  ChainId id_;
  TemplateId tmpl_;
  std::atomic<ChainState> state_{ChainState::kCached};
  std::unique_ptr<MessagePool> ingress_;
  std::vector<std::unique_ptr<Fwp>> fwps_;
  std::shared_ptr<SlotArena> shared_arena_;
  std::vector<ChannelSpec> channel_specs_;
  std::vector<ChannelResources> channel_res_;
  std::vector<ChannelId> channels_;
  std::unique_ptr<std::byte[]> image_;
  std::size_t image_bytes_ = 0;
  std::vector<std::size_t> image_offsets_;
  std::vector<PoolSnapshot> pool_images_;  // stages, then ingress
  std::uint64_t activations_ = 0;

  Teardown phase_ = Teardown::kStopIngress;
  std::uint64_t phase_mark_ = 0;
  std::uint64_t drain_deadline_ns_ = 0;
  bool force_discard_ = false;
  std::vector<Ticket> tickets_;
  std::unique_ptr<std::atomic<bool>[]> acks_;
};

struct RestoreCost {
  std::uint64_t ns = 0;
  std::size_t image_bytes = 0;   // copied back from the checkpoint image
  std::size_t zeroed_bytes = 0;  // heap above the break plus scrubbed slots
};

struct ChainStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t builds = 0;
  std::uint64_t restores = 0;
  std::uint64_t discards = 0;
  std::uint64_t reclaimed = 0;
  std::uint64_t terminations = 0;
  std::uint64_t forced_drains = 0;
  std::uint64_t discarded_messages = 0;  // in flight when a chain was torn down
  std::uint64_t consumed = 0;            // freed by FWPs of retired activations
  std::vector<std::uint64_t> build_ns;
  std::vector<RestoreCost> restore;
};

struct ManagerConfig {
  std::size_t low_watermark = 4;
  std::size_t high_watermark = 16;
  bool auto_refill = true;
  std::uint64_t drain_timeout_ns = 20'000'000;
};

// Loads chain templates, keeps a cache of checkpointed instances, activates
// them and restores them for reuse after termination.
class ChainManager {
 public:
  // Scheduler inbox ports per core: `activator` is used by whichever single
  // context calls activate(); `control` by the context that runs poll().
  struct CorePorts {
    CoreScheduler* scheduler = nullptr;
    SpscQueue<Event>* activator = nullptr;
    SpscQueue<Event>* control = nullptr;
  };

  ChainManager(const FwpRegistry& registry, PoolDirectory& pools, MmaGroup& mma, std::vector<CorePorts> cores,
               ManagerConfig config = {});
  ~ChainManager();

  ChainManager(const ChainManager&) = delete;
  ChainManager& operator=(const ChainManager&) = delete;

  TemplateId load_template(ChainTemplate tmpl);
  const ChainTemplate& get_template(TemplateId id) const;
  std::optional<TemplateId> find_template(const std::string& name) const;

  std::size_t build_cached(TemplateId id, std::size_t n);
  std::size_t cache_depth(TemplateId id) const;
  std::size_t reclaim(TemplateId id, std::size_t n);

  // Cache hit: dequeue, resume, wire. Cache miss: build synchronously first.
  ChainInstance& activate(TemplateId id);
  // Starts teardown; any thread. The instance is restored into the cache (or
  // discarded when faulted) by later poll() calls.
  void request_terminate(ChainInstance& inst);

  // Control-context work: exit reports, teardown steps, cache refill.
  // Returns true if anything progressed.
  bool poll();
  bool quiescent() const;
  void run(const std::atomic<bool>& stop);

  // Net-In epoch source; teardown waits for one full Net-In iteration after
  // the instance left the Active state.
  void set_ingress_epoch(std::function<std::uint64_t()> fn) { ingress_epoch_ = std::move(fn); }

  ChainStats stats() const;
  std::size_t active_count() const;
  std::size_t terminating_count() const;
  std::vector<ChainInstance*> instances() const;
  ChainInstance* instance_of(FwpId fwp) const;
  const ManagerConfig& config() const noexcept { return config_; }

 private:
  struct TemplateEntry {
    ChainTemplate tmpl;
    std::vector<std::size_t> order;  // stage indices along the path
    std::deque<ChainInstance*> cache;
    bool refilling = false;
  };

  std::unique_ptr<ChainInstance> build(TemplateId id);
  void adopt(std::unique_ptr<ChainInstance> inst);
  void wire(ChainInstance& inst);
  bool step_teardown(ChainInstance& inst);
  bool drained(ChainInstance& inst) const;
  void restore(ChainInstance& inst);
  void discard(ChainInstance& inst, bool reclaimed);
  void process_exits();
  bool refill();

  const FwpRegistry& registry_;
  PoolDirectory& pools_;
  MmaGroup& mma_;
  std::vector<CorePorts> cores_;
  ManagerConfig config_;
  std::function<std::uint64_t()> ingress_epoch_;

  mutable std::mutex mu_;  // templates, caches, instance maps, stats
  std::deque<TemplateEntry> templates_;  // stable references
  std::unordered_map<ChainId, std::unique_ptr<ChainInstance>> all_;
  std::unordered_map<FwpId, ChainInstance*> by_fwp_;
  std::vector<ChainInstance*> requests_;
  std::vector<ChainInstance*> terminating_;  // control context only
  ChainStats stats_;
  std::uint32_t next_chain_ = 1;
};

}  // namespace eos

#endif  // EOS_CHAIN_MANAGER_HPP
