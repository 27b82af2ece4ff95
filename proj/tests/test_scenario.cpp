#include <filesystem>
#include <string>

#include "doctest.h"
#include "eos/scenario.hpp"
#include "rig.hpp"

using namespace eos;
using namespace eos::test;
using nlohmann::json;

namespace {

json minimal() {
  return json::parse(R"({
    "name": "t",
    "threading": "manual",
    "templates": [{"name": "f", "stages": [{"type": "fwd"}]}],
    "rules": [{"template": "f"}],
    "source": {"count": 10}
  })");
}

// Message of the config error raised by parsing `j`, or "" if it parses.
std::string parse_error(const json& j) {
  try {
    parse_scenario(j);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kConfig);
    return e.what();
  }
  return "";
}

bool mentions(const std::string& msg, const std::string& part) { return msg.find(part) != std::string::npos; }

}  // namespace

TEST_CASE("percentiles use nearest rank") {
  std::vector<std::uint64_t> v;
  for (std::uint64_t i = 1; i <= 100; ++i) v.push_back(i * 1000);
  CHECK(percentile(v, 0.50) == 50'000);
  CHECK(percentile(v, 0.90) == 90'000);
  CHECK(percentile(v, 0.99) == 99'000);
  CHECK(percentile(v, 1.0) == 100'000);
  CHECK(percentile(v, 0.0) == 1'000);
  const LatencySummary s = summarize({3000, 1000, 2000});
  CHECK(s.samples == 3);
  CHECK(s.min_us == doctest::Approx(1.0));
  CHECK(s.p50_us == doctest::Approx(2.0));
  CHECK(s.max_us == doctest::Approx(3.0));
  CHECK(s.mean_us == doctest::Approx(2.0));
  CHECK(s.stddev_us == doctest::Approx(0.8164966).epsilon(1e-6));
  CHECK(summarize({}).samples == 0);
}

TEST_CASE("minimal scenario parses with defaults") {
  const Scenario s = parse_scenario(minimal());
  CHECK(s.name == "t");
  CHECK(s.experiment == Experiment::kTraffic);
  CHECK(s.dataplane.threading == Threading::kManual);
  REQUIRE(s.templates.size() == 1);
  CHECK(s.templates[0].tmpl.stages[0].type == "fwd");
  CHECK(s.templates[0].tmpl.stages[0].heap_bytes == 64 * 1024);
  CHECK(s.source.count == 10);
}

TEST_CASE("config errors name the offending field") {
  json j = minimal();
  j["bogus"] = 1;
  CHECK(mentions(parse_error(j), "bogus: unknown field"));

  j = minimal();
  j["templates"][0]["stages"][0]["pool"] = {{"slots", 3}};
  CHECK(mentions(parse_error(j), "templates[0].stages[0].pool.slots: must be a power of two"));

  j = minimal();
  j["templates"][0]["stages"][0]["heap_kib"] = -4;
  CHECK(mentions(parse_error(j), "templates[0].stages[0].heap_kib"));

  j = minimal();
  j["rules"][0]["template"] = "nope";
  CHECK(mentions(parse_error(j), "rules[0].template: unknown template 'nope'"));

  j = minimal();
  j["rules"][0]["match"] = {{"dst", "10.0.0"}};
  CHECK(mentions(parse_error(j), "rules[0].match.dst"));

  j = minimal();
  j["experiment"] = "speed";
  CHECK(mentions(parse_error(j), "experiment"));

  j = minimal();
  j["duration_s"] = 0;
  CHECK(mentions(parse_error(j), "duration_s: must be in"));

  j = minimal();
  j.erase("name");
  CHECK(mentions(parse_error(j), "name: required"));
}

TEST_CASE("validation catches unknown stage types and bad stage config") {
  json j = minimal();
  j["templates"][0]["stages"][0]["type"] = "nothing";
  const Scenario s = parse_scenario(j);
  try {
    validate_scenario(s, registry());
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kConfig);
    CHECK(mentions(e.what(), "templates[0].stages[0].type"));
  }

  j = minimal();
  j["templates"][0]["stages"][0] = {{"type", "firewall"}, {"config", {{"allow", "everything"}}}};
  try {
    validate_scenario(parse_scenario(j), registry());
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kConfig);
    CHECK(mentions(e.what(), "templates[0]"));
  }
}

TEST_CASE("every shipped config validates") {
  std::size_t n = 0;
  for (const auto& entry : std::filesystem::directory_iterator(EOS_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path().string());
    const Scenario s = load_scenario(entry.path().string());
    CHECK_NOTHROW(validate_scenario(s, registry()));
    ++n;
  }
  CHECK(n >= 5);
}

TEST_CASE("a traffic scenario conserves every message") {
  json j = minimal();
  j["source"] = {{"count", 500}, {"flows", 4}, {"payload", 100}};
  j["rules"][0]["action"] = "per_flow";
  const MetricsReport r = run_scenario(parse_scenario(j), registry());
  CHECK(r.received == 500);
  CHECK(r.admitted + r.drops() == 500);
  CHECK(r.emitted == r.admitted);
  CHECK(r.cache_hits + r.cache_misses == 4);
  CHECK(r.audit_ok);
  CHECK(r.latency.samples == r.emitted);
  const json out = to_json(r);
  CHECK(out.at("counts").at("emitted").get<std::uint64_t>() == r.emitted);
  CHECK(out.at("drops").at("total").get<std::uint64_t>() == r.drops());
}

TEST_CASE("hold on full: a saturated ingress pool defers instead of dropping") {
  for (bool hold : {false, true}) {
    CAPTURE(hold);
    DataplaneConfig cfg = manual();
    cfg.net_in.hold_on_full = hold;
    Dataplane dp(registry(), cfg);
    dp.net_out().set_sink(std::make_unique<CounterSink>());
    const TemplateId t = dp.manager().load_template(chain_of({"hog"}, 4));
    dp.net_in().table().add_rule(rule(t, RuleAction::kSharedChain));
    SyntheticSpec s;
    s.count = 64;
    dp.net_in().add_source(std::make_unique<SyntheticSource>(s));
    REQUIRE(dp.settle(10'000'000'000ull));
    const auto in = dp.net_in().stats();
    CHECK(in.received == 64);
    if (hold) {
      CHECK(in.dropped_pool_full == 0);
      CHECK(in.admitted == 64);
    } else {
      CHECK(in.dropped_pool_full > 0);
    }
    CHECK(dp.net_out().stats().emitted == in.admitted);
    REQUIRE(dp.shutdown_chains());
    CHECK(dp.audit().ok());
  }
}
