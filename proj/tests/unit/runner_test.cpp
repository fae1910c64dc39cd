#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "ftsim/report.hpp"
#include "ftsim/runner.hpp"
#include "ftsim/scenario.hpp"

namespace ftsim {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Scenario small_fault() { return parse_scenario(fs::path(FTSIM_TEST_DATA_DIR) / "small_fault.json"); }

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ftsim_test_" + name);
  fs::remove_all(dir);
  return dir;
}

TEST(Runner, FaultFreeOverheadIsZero) {
  Scenario sc = small_fault();
  sc.faults.clear();
  const Report r = run(sc);
  EXPECT_EQ(r.overhead, 0.0);
  for (const auto& c : r.collectives) {
    EXPECT_EQ(c.overhead, 0.0);
    EXPECT_EQ(c.integrity, "pass");
  }
}

TEST(Runner, SmallFaultScenario) {
  const Report r = run(small_fault());
  ASSERT_EQ(r.collectives.size(), 3u);
  for (const auto& c : r.collectives) EXPECT_EQ(c.integrity, "pass") << c.index;
  const auto& ar = r.collectives[0];
  ASSERT_EQ(ar.detections.size(), 1u);
  EXPECT_GT(ar.overhead, 0.0);
  EXPECT_LE(ar.detections[0].peer_aware_at - ar.detections[0].fault_time, 0.5e-3 + 5e-3);
}

TEST(Runner, OneOfEightOverhead) {
  for (auto [mode, expect] : {std::pair{StrategyMode::kBalance, 1.0 / 7.0}, std::pair{StrategyMode::kHotRepairOnly, 1.0}}) {
    Scenario sc;
    sc.topology = TopologySpec::uniform(2, 8, 8, 25e9, 1);
    sc.cost_mode = CostMode::kBandwidthOnly;
    sc.strategy = mode;
    sc.knobs.verify = false;
    ScheduledFault f;
    f.preexisting = true;
    f.event.target = NicTarget{make_id<NicId>(5)};
    sc.faults = {f};
    WorkloadItem w;
    w.request.kind = CollectiveKind::kAllGather;
    w.request.bytes = 4096.0 * 1024 * 1024;
    sc.workload = {w};
    const Report r = run(sc);
    ASSERT_EQ(r.collectives.size(), 1u);
    EXPECT_NEAR(r.collectives[0].overhead, expect, 0.02 * (1 + expect));
  }
}

TEST(Runner, UnsurvivableFaultBecomesFailedEntry) {
  Scenario sc;
  sc.topology = TopologySpec::uniform(2, 1, 1, 25e9);
  sc.strategy = StrategyMode::kHotRepairOnly;
  sc.knobs.elements = 16;
  ScheduledFault f;
  f.event.time = 1e-3;
  f.event.target = NicTarget{make_id<NicId>(0)};
  sc.faults = {f};
  sc.workload = {WorkloadItem{}};
  const Report r = run(sc);
  ASSERT_EQ(r.collectives.size(), 1u);
  EXPECT_FALSE(r.collectives[0].ok);
  EXPECT_EQ(r.collectives[0].integrity, "not_completed");
}

TEST(Sweep, ZeroFailuresZeroOverhead) {
  Scenario sc;
  sc.topology = TopologySpec::uniform(4, 2, 2, 25e9);
  sc.knobs.verify = false;
  sc.monte_carlo = MonteCarlo{{0, 1}, 4, 5, 2};
  EXPECT_THROW(sweep(sc), ScenarioError);
  sc.workload = {WorkloadItem{}};
  const Report r = sweep(sc);
  ASSERT_EQ(r.sweep.size(), 2u);
  EXPECT_EQ(r.sweep[0].mean, 0.0);
  EXPECT_GT(r.sweep[1].mean, 0.0);
  EXPECT_EQ(r.sweep[1].completed, 4);
  EXPECT_EQ(to_json_text(r), to_json_text(sweep(sc)));
}

TEST(Sweep, FailureSetsAreNestedAcrossK) {
  const auto t = build_topology(TopologySpec::uniform(8, 2, 4, 25e9));
  for (int trial = 0; trial < 10; ++trial) {
    const auto k3 = sweep_failures(t, 4, trial, 3);
    const auto k6 = sweep_failures(t, 4, trial, 6);
    ASSERT_EQ(k6.size(), 6u);
    EXPECT_TRUE(std::equal(k3.begin(), k3.end(), k6.begin()));
  }
}

TEST(Report, CsvRows) {
  const Report r = run(small_fault());
  const std::string csv = to_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.rfind("index,kind,", 0), 0u);
}

TEST(Report, JsonRoundTrip) {
  const Report r = run(small_fault());
  const auto j = to_json(r);
  const auto again = nlohmann::ordered_json::parse(j.dump());
  EXPECT_EQ(again, j);
  EXPECT_EQ(again["collectives"].size(), 3u);
  EXPECT_EQ(again["scenario"], "small_fault");
}

TEST(Report, EmitHonoursPlotFlag) {
  const Report r = run(small_fault());
  const fs::path with = scratch("plots");
  const auto files = emit(r, ReportFormat::kJson, with, true);
  EXPECT_TRUE(fs::exists(with / "report.json"));
  EXPECT_EQ(files.size(), 2u);
  const fs::path without = scratch("noplots");
  const auto only = emit(r, ReportFormat::kCsv, without, false);
  ASSERT_EQ(only.size(), 1u);
  EXPECT_EQ(only[0].filename(), "report.csv");
  fs::remove_all(with);
  fs::remove_all(without);
}

TEST(Report, UnwritablePathThrows) {
  const Report r = run(small_fault());
  EXPECT_THROW(emit(r, ReportFormat::kJson, "/proc/ftsim/nope", false), std::runtime_error);
}

// Set FTSIM_UPDATE_GOLDEN=1 to rewrite the golden file after an intended
// schema change.
TEST(Report, GoldenFile) {
  const fs::path golden = fs::path(FTSIM_GOLDEN_DIR) / "small_fault.json";
  const std::string text = to_json_text(run(small_fault()));
  if (std::getenv("FTSIM_UPDATE_GOLDEN")) {
    std::ofstream(golden) << text;
  }
  ASSERT_TRUE(fs::exists(golden));
  EXPECT_EQ(text, slurp(golden));
}

}  // namespace
}  // namespace ftsim
