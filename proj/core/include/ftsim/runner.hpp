// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftsim/allreduce_opt.hpp"
#include "ftsim/executor.hpp"
#include "ftsim/faults.hpp"
#include "ftsim/scenario.hpp"

namespace ftsim {

struct CollectiveReport {
  int index = 0;
  CollectiveKind kind = CollectiveKind::kAllReduce;
  double bytes = 0.0;
  int participants = 0;
  double issue_time = 0.0;
  std::string strategy;
  std::string strategy_reason;
  std::optional<PartitionPlan> partition;
  int ring_levels = 1;
  std::vector<int> server_order;
  double start = 0.0;
  double end = 0.0;
  double makespan = 0.0;
  double baseline_makespan = 0.0;
  double overhead = 0.0;
  bool ok = true;
  std::string error;
  std::string integrity;  // pass, fail, skipped or not_completed
  int rounds = 0;
  int interrupted_rounds = 0;
  int migrations = 0;
  TrafficMatrix traffic;
  std::vector<DetectionRecord> detections;
};

struct SweepPoint {
  int k = 0;
  int trials = 0;
  int completed = 0;
  int failed = 0;
  double mean = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
  double max = 0.0;
};

struct Report {
  std::string scenario;
  std::uint64_t seed = 0;
  std::string strategy;
  std::vector<CollectiveReport> collectives;
  TrafficMatrix traffic;
  double makespan = 0.0;
  double baseline_makespan = 0.0;
  double overhead = 0.0;
  std::vector<std::string> notes;
  std::vector<SweepPoint> sweep;
};

/// Executes the workload with the fault schedule and again without faults;
/// overhead compares the two makespans.
Report run(const Scenario& scenario);

/// Monte Carlo over the monte_carlo block: for every k, trials place k
/// permanent NIC failures before the workload starts.
Report sweep(const Scenario& scenario);

/// Per-trial NIC failure sets shared across k (trial t uses the first k of one
/// permutation). Placements that would leave a server without NICs are skipped.
std::vector<NicId> sweep_failures(const ClusterTopology& topology, std::uint64_t seed, int trial, int k);

}  // namespace ftsim
