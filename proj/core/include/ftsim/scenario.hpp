// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ftsim/allreduce_opt.hpp"
#include "ftsim/collectives.hpp"
#include "ftsim/cost_model.hpp"
#include "ftsim/faults.hpp"
#include "ftsim/topology.hpp"

namespace ftsim {

/// Schema violation. The message starts with the offending field path.
class ScenarioError : public std::runtime_error {
 public:
  ScenarioError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class StrategyMode { kAuto, kHotRepairOnly, kBalance, kR2ccAllReduce, kRecursive };
std::string_view to_string(StrategyMode mode);
std::optional<StrategyMode> parse_strategy_mode(std::string_view name);

struct WorkloadItem {
  CollectiveRequest request;  // empty participants: every GPU
  double issue_time = 0.0;
};

struct ScheduledFault {
  FaultEvent event;
  bool preexisting = false;  // present before the workload, no detection cost
};

struct MonteCarlo {
  std::vector<int> k;  // failure counts to sweep
  int trials = 50;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct Knobs {
  double chunk_size = 1024.0 * 1024.0;
  double oob_latency = 0.5e-3;
  double probe_timeout = 5e-3;
  double probe_rtt = 10e-6;
  double poll_timeout = 30.0;
  bool oob_enabled = true;
  bool multi_registration = true;
  double registration_cost = 2e-3;
  double spine_penalty = 0.5;
  bool verify = true;
  std::size_t elements = 0;  // 0: sized from ranks and channels
  ThresholdRule threshold_rule = ThresholdRule::kExact;
  bool rerank = true;        // re-rank the server ring around rail mismatches
};

struct Scenario {
  std::string name = "scenario";
  TopologySpec topology;
  std::vector<WorkloadItem> workload;
  std::vector<ScheduledFault> faults;
  std::optional<MonteCarlo> monte_carlo;
  StrategyMode strategy = StrategyMode::kAuto;
  CostParams cost;
  CostMode cost_mode = CostMode::kAlphaBeta;
  Knobs knobs;
  std::uint64_t seed = 0;
};

Scenario parse_scenario(const std::filesystem::path& path);
Scenario parse_scenario_text(std::string_view text);
Scenario parse_scenario_json(const nlohmann::json& doc);

/// Resolves a [server, local] NIC reference.
NicId nic_ref(const ClusterTopology& topology, int server, int local);

}  // namespace ftsim
