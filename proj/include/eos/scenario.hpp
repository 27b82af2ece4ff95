#ifndef EOS_SCENARIO_HPP
#define EOS_SCENARIO_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "eos/chain_manager.hpp"
#include "eos/dataplane.hpp"
#include "eos/gateway.hpp"
#include "json.hpp"

namespace eos {

// ---- metrics ----

// Exact order statistics over the full sample (nearest rank).
struct LatencySummary {
  std::size_t samples = 0;
  double min_us = 0, mean_us = 0, stddev_us = 0;
  double p50_us = 0, p90_us = 0, p99_us = 0, p999_us = 0, max_us = 0;
};

LatencySummary summarize(std::vector<std::uint64_t> ns);
// q in [0, 1]; `sorted` must be ascending and non-empty.
std::uint64_t percentile(const std::vector<std::uint64_t>& sorted, double q) noexcept;
double median_ns(std::vector<std::uint64_t> ns);

// ---- scenario description ----

enum class Experiment : std::uint8_t {
  kTraffic,  // drive a source through the configured rules for the duration
  kStartup,  // full build vs cached activation vs restore, per heap size
  kScale,    // incremental activation of many chains, all kept active
  kChain,    // closed-loop throughput per chain length, size and channel mode
  kKv,       // kv capacity search, then paced runs at fractions of it
};

const char* to_string(Experiment e) noexcept;

enum class Workload : std::uint8_t { kUdp, kIcmp, kKv };

struct SourceSpec {
  std::string kind = "synthetic";  // synthetic | pcap | datagram
  Workload workload = Workload::kUdp;
  double rate_pps = 0.0;
  std::size_t payload = 64;
  std::uint32_t flows = 1;
  bool uniform_mix = false;
  std::uint64_t count = 0;
  std::uint32_t src_base = 0x0a000001;
  std::uint32_t dst_addr = 0x0a000101;
  std::uint16_t src_port_base = 10000;
  std::uint16_t dst_port = 9000;
  // kv workload
  double get_ratio = 0.95;
  std::size_t value_size = 135;
  std::uint32_t keys = 1000;
  // pcap / datagram
  std::string path;
  std::uint64_t loops = 1;
  std::string bind = "127.0.0.1";
  std::uint16_t port = 0;
};

struct SinkSpec {
  std::string kind = "counter";  // counter | pcap | datagram
  std::string path;
};

struct RuleSpec {
  FlowPattern match;
  int priority = 0;
  RuleAction action = RuleAction::kSharedChain;
  std::string tmpl;
};

struct TemplateSpec {
  ChainTemplate tmpl;
  std::size_t prebuild = 0;
};

struct Scenario {
  std::string name;
  std::string description;
  Experiment experiment = Experiment::kTraffic;
  double duration_s = 1.0;
  std::uint64_t seed = 1;
  DataplaneConfig dataplane;
  std::vector<TemplateSpec> templates;
  std::vector<RuleSpec> rules;
  SourceSpec source;
  SinkSpec sink;

  // startup
  std::size_t iterations = 200;
  std::vector<std::size_t> heap_sizes;  // bytes; empty = template as written
  // scale
  std::size_t chains = 2000;
  // chain
  std::vector<std::size_t> lengths{1, 2, 3, 4, 5, 6};
  std::vector<std::size_t> sizes{64, 1024};
  std::uint64_t messages = 100000;
  bool reference = true;
  std::size_t repeats = 3;
  // kv
  std::vector<double> load_fractions{0.1, 0.5};
  std::uint64_t capacity_requests = 100000;
};

// Errors are Error(kConfig) whose message starts with the JSON field path.
Scenario parse_scenario(const nlohmann::json& j);
Scenario load_scenario(const std::string& path);
// Resolves names and performs a trial build of every template.
void validate_scenario(const Scenario& s, const FwpRegistry& registry);

// ---- report ----

struct SweepRow {
  std::map<std::string, std::string> labels;
  std::map<std::string, double> values;
};

struct MetricsReport {
  std::string scenario;
  std::string experiment;
  std::string threading;
  std::uint64_t seed = 0;
  double duration_s = 0;
  double elapsed_s = 0;

  LatencySummary latency;  // in-host: admission to emission
  double msgs_per_s = 0;
  double bytes_per_s = 0;
  LatencySummary activation;
  LatencySummary create;
  LatencySummary restore;

  std::uint64_t received = 0;
  std::uint64_t admitted = 0;
  std::uint64_t emitted = 0;
  std::uint64_t dropped_pool_full = 0;
  std::uint64_t dropped_no_rule = 0;
  std::uint64_t dropped_oversize = 0;
  std::uint64_t consumed = 0;   // freed inside chains (app drops, replies consumed)
  std::uint64_t discarded = 0;  // lost at teardown
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  double cache_hit_ratio = 0;
  MmaStats mma;

  bool audit_ok = true;
  std::vector<std::string> audit_failures;

  std::vector<SweepRow> rows;
  std::map<std::string, double> derived;
  std::map<std::string, std::vector<std::uint64_t>> samples;  // raw ns, for CSV

  std::uint64_t drops() const noexcept { return dropped_pool_full + dropped_no_rule + dropped_oversize; }
};

nlohmann::json to_json(const MetricsReport& r);
void print_report(std::ostream& os, const MetricsReport& r);
// One file per sample series: <dir>/<scenario>_<series>.csv
void write_csv(const std::string& dir, const MetricsReport& r);

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<double> duration_s;
  std::function<void(const std::string&)> progress;
};

// Error(kConfig) for bad scenarios, Error(kRuntimeFault) naming the failing
// module when execution goes wrong.
MetricsReport run_scenario(const Scenario& s, const FwpRegistry& registry, const RunOptions& opts = {});

// Frame generator for a workload, for use with SyntheticSpec::frame.
FrameFn workload_frames(const SourceSpec& src);

}  // namespace eos

#endif  // EOS_SCENARIO_HPP
