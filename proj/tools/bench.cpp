#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eos/apps.hpp"
#include "eos/scenario.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeFault = 3;

int fault(const eos::Error& e) {
  std::cerr << "bench: " << e.what() << "\n";
  return e.code() == eos::Errc::kConfig ? kConfigError : kRuntimeFault;
}

int list(const std::string& dir) {
  std::cout << "experiments:\n"
            << "  traffic  drive a source through the configured rules\n"
            << "  startup  full build vs cached activation vs restore\n"
            << "  scale    incremental activation of many chains\n"
            << "  chain    throughput per chain length, size and channel mode\n"
            << "  kv       kv capacity, then paced load at fractions of it\n";
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::cout << "scenarios in " << dir << ":\n";
  for (const auto& f : files) {
    try {
      const eos::Scenario s = eos::load_scenario(f.string());
      std::cout << "  " << f.filename().string() << "  [" << eos::to_string(s.experiment) << "] " << s.description
                << "\n";
    } catch (const eos::Error& e) {
      std::cout << "  " << f.filename().string() << "  (invalid: " << e.what() << ")\n";
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"featherweight-process dataplane benchmark harness"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration;
  std::string out, csv;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "run a scenario and report metrics");
  run->add_option("config", config, "scenario file (JSON)")->required();
  run->add_option("--seed", seed, "override the scenario seed");
  run->add_option("--duration", duration, "override the duration in seconds")->check(CLI::PositiveNumber);
  run->add_option("--out", out, "write the JSON report here");
  run->add_option("--csv", csv, "write per-sample latency CSVs into this directory");
  run->add_flag("-q,--quiet", quiet, "no human-readable table");

  auto* validate = app.add_subcommand("validate", "check a scenario file and trial-build its templates");
  validate->add_option("config", config, "scenario file (JSON)")->required();

  std::string dir = EOS_CONFIG_DIR;
  auto* ls = app.add_subcommand("list", "list experiments and bundled scenarios");
  ls->add_option("--dir", dir, "scenario directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  eos::FwpRegistry registry;
  eos::register_builtin_apps(registry);

  if (ls->parsed()) return list(dir);

  try {
    const eos::Scenario s = eos::load_scenario(config);
    if (validate->parsed()) {
      eos::validate_scenario(s, registry);
      std::cout << config << ": OK (" << eos::to_string(s.experiment) << ", " << s.templates.size() << " template(s), "
                << s.rules.size() << " rule(s))\n";
      return kOk;
    }
    eos::RunOptions opts;
    opts.seed = seed;
    opts.duration_s = duration;
    if (!quiet) opts.progress = [](const std::string& m) { std::cerr << m << "\n"; };
    const eos::MetricsReport r = eos::run_scenario(s, registry, opts);
    if (!quiet) eos::print_report(std::cout, r);
    if (!out.empty()) {
      std::ofstream f(out);
      if (!f) throw eos::Error(eos::Errc::kRuntimeFault, "report: cannot write " + out);
      f << eos::to_json(r).dump(2) << "\n";
    }
    if (!csv.empty()) eos::write_csv(csv, r);
    if (!r.audit_ok) {
      std::cerr << "bench: conservation audit failed\n";
      return kRuntimeFault;
    }
    return kOk;
  } catch (const eos::Error& e) {
    return fault(e);
  } catch (const std::exception& e) {
    std::cerr << "bench: " << e.what() << "\n";
    return kRuntimeFault;
  }
}
