// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ftsim/collectives.hpp"
#include "ftsim/cost_model.hpp"
#include "ftsim/executor.hpp"
#include "ftsim/topology.hpp"

namespace ftsim {

class PlannerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One degraded server among n: it lost a fraction X of its bandwidth B.
struct PartitionInputs {
  int n = 2;
  int g = 8;
  double X = 0.5;
  double D = 1.0;  // bytes
  double B = 1.0;  // healthy per-server bandwidth, bytes/s

  void validate() const;
};

struct StageTimes {
  double t1 = 0.0;  // global ring over all servers, (1-Y)D
  double t2 = 0.0;  // partial ring over the healthy servers, YD
  double t3 = 0.0;  // completion broadcast

  double total() const;
};

StageTimes stage_times(double y, const PartitionInputs& in);
double total_time(double y, const PartitionInputs& in);

/// ng / (3ng - 2): below it the plain ring is optimal.
double threshold(int n, int g);

/// Closed-form minimizer of total_time for X above the threshold.
double optimal_y(int n, int g, double x);

enum class ThresholdRule { kExact, kPractical };  // kPractical: the flat 1/3 cut
std::string_view to_string(ThresholdRule rule);

enum class AllReduceStrategy { kStandardRing, kR2ccAllReduce };
std::string_view to_string(AllReduceStrategy s);

struct PartitionPlan {
  PartitionInputs inputs;
  double y = 0.0;
  StageTimes times;
  double t_total = 0.0;
  AllReduceStrategy strategy = AllReduceStrategy::kStandardRing;
  ThresholdRule rule = ThresholdRule::kExact;
  double threshold = 0.0;
};

PartitionPlan optimal_partition(const PartitionInputs& in, ThresholdRule rule = ThresholdRule::kExact);

/// One ring of a nested plan. Level 0 spans every server; each deeper level
/// drops the server isolated by the level above it.
struct RingLevel {
  std::vector<int> members;          // server indices
  double share = 0.0;                // fraction of D reduced by this ring
  double rate = 0.0;                 // per-server bandwidth the ring runs at
  std::optional<int> isolated;       // server excluded from deeper levels
  std::optional<PartitionPlan> partition;
  std::vector<RailId> rails;         // filled by the executable builders
};

struct RecursiveConfig {
  double var_eps = 0.05;  // stop when (max - min) / max of the residual group is below this
  int max_depth = 4;
  ThresholdRule rule = ThresholdRule::kExact;
};

struct RecursivePlan {
  std::vector<RingLevel> levels;
  double predicted_time = 0.0;
  double single_ring_time = 0.0;  // one ring over everyone at the slowest rate
  bool fell_back = false;         // nesting predicted slower than the single ring

  int depth() const { return static_cast<int>(levels.size()) - 1; }
};

RecursivePlan recursive_plan(std::span<const double> bandwidths, double data_bytes, int g,
                             const RecursiveConfig& cfg = {});

/// Element range and modeled bytes of one ring's region.
struct Region {
  std::size_t begin = 0;
  std::size_t end = 0;
  double bytes = 0.0;
};

struct NestedProgram {
  Program program;
  std::vector<RingLevel> levels;
  std::vector<Region> regions;  // one per level
};

/// Stage 1 runs the global and partial rings concurrently; stage 2 folds the
/// degraded server's share into the partial result and hands it back. Throws
/// PlannerError for n < 3 or a plan that is not R2ccAllReduce.
NestedProgram plan_two_stage(const ClusterTopology& topology, const HealthMap& health,
                             ServerId degraded, const PartitionPlan& plan, double data_bytes,
                             std::size_t elements, double chunk_size);

/// Executable nested rings from per-server healthy bandwidth. Level k uses
/// the rails healthy on all its members that an outer level does not use.
NestedProgram recursive_program(const ClusterTopology& topology, const HealthMap& health,
                                double data_bytes, std::size_t elements, double chunk_size,
                                const RecursiveConfig& cfg = {});

enum class Strategy { kBalance, kHotRepair, kR2ccAllReduce, kRecursive };
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct StrategyChoice {
  Strategy strategy = Strategy::kBalance;
  double balance_time = 0.0;
  std::optional<double> r2cc_time;
  std::optional<PartitionPlan> partition;
  std::optional<ServerId> degraded;
  std::string reason;
};

/// Alpha-beta comparison between the rebalanced ring and the partitioned
/// AllReduce. Non-AllReduce kinds always get Balance.
StrategyChoice select_strategy(const CollectiveRequest& req, const ClusterTopology& topology,
                               const HealthMap& health, const CostParams& cost,
                               CostMode mode = CostMode::kAlphaBeta, double chunk_size = kDefaultChunkSize,
                               ThresholdRule rule = ThresholdRule::kExact);

}  // namespace ftsim
