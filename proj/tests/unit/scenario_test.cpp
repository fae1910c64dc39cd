#include <gtest/gtest.h>

#include "ftsim/scenario.hpp"

namespace ftsim {
namespace {

std::string error_field(const std::string& text) {
  try {
    parse_scenario_text(text);
  } catch (const ScenarioError& e) {
    return e.field();
  }
  return "<none>";
}

TEST(Scenario, MinimalFileGetsDefaults) {
  const Scenario sc = parse_scenario_text(R"({"topology": {"servers": 2}})");
  ASSERT_EQ(sc.workload.size(), 1u);
  EXPECT_EQ(sc.workload[0].request.kind, CollectiveKind::kAllReduce);
  EXPECT_DOUBLE_EQ(sc.workload[0].request.bytes, 1024.0 * 1024 * 1024);
  EXPECT_EQ(sc.workload[0].request.participants.size(), 0u);  // empty means every GPU
  EXPECT_DOUBLE_EQ(sc.cost.alpha, 2e-6);
  EXPECT_DOUBLE_EQ(sc.knobs.chunk_size, 1024.0 * 1024);
  EXPECT_EQ(sc.strategy, StrategyMode::kAuto);
  EXPECT_FALSE(sc.monte_carlo.has_value());
}

TEST(Scenario, FaultOnServerLocalNic) {
  const Scenario sc = parse_scenario_text(R"({
    "topology": {"servers": 2, "gpus_per_server": 8, "nics_per_server": 8},
    "faults": [{"time": 50, "target": {"nic": [1, 3]}}]})");
  ASSERT_EQ(sc.faults.size(), 1u);
  EXPECT_DOUBLE_EQ(sc.faults[0].event.time, 50.0);
  EXPECT_EQ(std::get<NicTarget>(sc.faults[0].event.target).nic, make_id<NicId>(11));
  EXPECT_TRUE(sc.faults[0].event.permanent);
}

TEST(Scenario, OtherTargets) {
  const Scenario sc = parse_scenario_text(R"({
    "topology": {"servers": 3, "gpus_per_server": 2, "nics_per_server": 2},
    "faults": [
      {"time": 1, "target": {"link": [0, 2]}, "permanent": false, "recovery_time": 2},
      {"time": 1, "target": {"transport": {"src": 0, "dst": 1, "channel": 1}}, "permanent": false}
    ],
    "monte_carlo": {"k": [1, 2], "trials": 4, "seed": 3},
    "strategy": "hot_repair_only",
    "cost": {"alpha": 1e-5, "beta": 1e10, "mode": "bandwidth_only"}})");
  EXPECT_TRUE(std::holds_alternative<LinkTarget>(sc.faults[0].event.target));
  EXPECT_EQ(sc.faults[0].event.recovery_time, 2.0);
  EXPECT_EQ(std::get<TransportTarget>(sc.faults[1].event.target).connection.channel, 1);
  EXPECT_EQ(sc.monte_carlo->k, (std::vector<int>{1, 2}));
  EXPECT_EQ(sc.strategy, StrategyMode::kHotRepairOnly);
  EXPECT_EQ(sc.cost_mode, CostMode::kBandwidthOnly);
}

TEST(Scenario, ErrorsNameTheField) {
  EXPECT_EQ(error_field(R"({"topology": {"servers": 2}, "strategy": "fastest"})"), "strategy");
  EXPECT_EQ(error_field(R"({"topology": {"servers": 1}})"), "topology");
  EXPECT_EQ(error_field(R"({"topology": {"srvers": 2}})"), "topology.srvers");
  EXPECT_EQ(error_field(R"({"topology": {"servers": 2}, "workload": [{"kind": "Gossip"}]})"), "workload[0].kind");
  EXPECT_EQ(error_field(R"({"topology": {"servers": 2}, "faults": [{"time": 1}]})"), "faults[0].target");
  EXPECT_EQ(error_field(R"({"topology": {"servers": 2}, "faults": [{"time": 2, "target": {"nic": 0}, "recovery_time": 1, "permanent": false}]})"),
            "faults[0]");
  EXPECT_EQ(error_field(R"({"topology": {"servers": 2}, "monte_carlo": {"trials": 3}})"), "monte_carlo.k");
  EXPECT_EQ(error_field(R"({"topology": {"servers": 2}, "knobs": {"chunk_size": -1}})"), "knobs.chunk_size");
  EXPECT_EQ(error_field("{not json"), "<document>");
}

}  // namespace
}  // namespace ftsim
