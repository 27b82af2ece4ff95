#ifndef EOS_DATAPLANE_HPP
#define EOS_DATAPLANE_HPP

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "eos/chain_manager.hpp"
#include "eos/fwp.hpp"
#include "eos/gateway.hpp"
#include "eos/mma.hpp"
#include "eos/msgpool.hpp"
#include "eos/scheduler.hpp"

namespace eos {

// kManual: the caller drives step(). kShared: one thread round-robins every
// role. kDedicated: one thread per role (Net-In, Net-Out, each copier engine,
// each core, chain control).
enum class Threading : std::uint8_t { kManual, kShared, kDedicated };

const char* to_string(Threading t) noexcept;
Threading threading_from_string(const std::string& s);  // throws Error(kConfig)

// Optional CPU per role thread; -1 leaves the thread unpinned. In kShared
// mode the single thread takes workers[0].
struct CpuMap {
  int net_in = -1;
  int net_out = -1;
  int control = -1;
  std::vector<int> mma;
  std::vector<int> workers;
};

// Pins the calling thread; false if the CPU is unavailable.
bool pin_current_thread(int cpu) noexcept;

struct DataplaneConfig {
  std::size_t cores = 1;
  std::size_t mma_engines = 1;
  Threading threading = Threading::kShared;
  std::uint64_t quantum_ns = CoreScheduler::kDefaultQuantumNs;
  std::size_t egress_capacity = 4096;
  bool dispatch_log = false;
  CpuMap cpus;
  ManagerConfig manager;
  NetInConfig net_in;
  NetOutConfig net_out;
};

struct ConservationAudit {
  bool pools_ok = true;
  std::vector<std::string> failures;
  std::uint64_t admitted = 0;
  std::uint64_t emitted = 0;
  std::uint64_t consumed = 0;   // freed inside chains
  std::uint64_t discarded = 0;  // in flight at teardown
  std::uint64_t in_flight = 0;  // still inside active chains
  bool balanced() const noexcept { return admitted == emitted + consumed + discarded + in_flight; }
  bool ok() const noexcept { return pools_ok && balanced(); }
};

// Owns one complete host: pools, copier engines, per-core schedulers, chain
// manager, Net-In and Net-Out. Scheduler inbox ports: copier engines first,
// then the activator (Net-In), then control (chain manager).
class Dataplane {
 public:
  Dataplane(const FwpRegistry& registry, DataplaneConfig config);
  ~Dataplane();

  Dataplane(const Dataplane&) = delete;
  Dataplane& operator=(const Dataplane&) = delete;

  PoolDirectory& pools() noexcept { return pools_; }
  MmaGroup& mma() noexcept { return *mma_; }
  CoreScheduler& core(std::size_t i) { return *cores_.at(i); }
  std::size_t core_count() const noexcept { return cores_.size(); }
  ChainManager& manager() noexcept { return *manager_; }
  NetIn& net_in() noexcept { return *net_in_; }
  NetOut& net_out() noexcept { return *net_out_; }
  const DataplaneConfig& config() const noexcept { return config_; }

  // One round of every role in the calling thread; true if anything moved.
  bool step();
  void start();
  void stop();
  bool running() const noexcept { return running_; }
  std::size_t pin_failures() const noexcept { return pin_failures_.load(); }

  // Drives (or waits for) the system until nothing is in flight: sources
  // exhausted or ignored, chains idle, egress drained. False on timeout.
  bool settle(std::uint64_t timeout_ns = 2'000'000'000);
  // Terminates every bound chain and waits for teardown to finish.
  bool shutdown_chains(std::uint64_t timeout_ns = 5'000'000'000);

  // Messages still inside active chains (pools of Active/Terminating instances).
  std::uint64_t in_flight() const;
  // Call while stopped (or in kManual mode between steps).
  ConservationAudit audit() const;

 private:
  bool quiet() const;
  void shared_loop();

  const FwpRegistry& registry_;
  DataplaneConfig config_;
  PoolDirectory pools_;
  std::unique_ptr<MmaGroup> mma_;
  std::vector<std::unique_ptr<CoreScheduler>> cores_;
  std::unique_ptr<ChainManager> manager_;
  std::unique_ptr<NetIn> net_in_;
  std::unique_ptr<NetOut> net_out_;

  void pin(int cpu) noexcept;

  std::atomic<bool> stop_{false};
  std::atomic<std::size_t> pin_failures_{0};
  bool running_ = false;
  std::vector<std::thread> threads_;
};

}  // namespace eos

#endif  // EOS_DATAPLANE_HPP
