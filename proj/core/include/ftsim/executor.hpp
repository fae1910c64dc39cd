// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ftsim/collectives.hpp"
#include "ftsim/cost_model.hpp"
#include "ftsim/engine.hpp"
#include "ftsim/faults.hpp"
#include "ftsim/topology.hpp"
#include "ftsim/transport.hpp"

namespace ftsim {

/// How cross-server traffic reacts to unusable rails. kBalance spreads each
/// server pair's bytes over the common healthy rails in proportion to
/// bandwidth; kHotRepair moves a dead channel onto the next NIC of its
/// failover chain and leaves everything else in place.
enum class RoutingPolicy { kBalance, kHotRepair };
std::string_view to_string(RoutingPolicy policy);

struct ExecConfig {
  CostParams cost;
  CostMode mode = CostMode::kAlphaBeta;
  DetectionConfig detection;
  RegistrationConfig registration;
  double chunk_size = kDefaultChunkSize;
  double spine_penalty = 0.5;  // rate factor when two servers share no healthy rail
  double reprobe_base = 0.1;
  double reprobe_max = 10.0;
  bool verify = true;          // carry payload values and check them

  double alpha() const { return mode == CostMode::kAlphaBeta ? cost.alpha : 0.0; }
};

struct PhaseSpec {
  Pass pass;
  std::vector<RailId> rails;  // channels of the phase; empty means every rail
  std::vector<int> deps;      // phases that must finish first
};

struct Program {
  std::string label;
  RoutingPolicy routing = RoutingPolicy::kBalance;
  std::vector<PhaseSpec> phases;
};

/// Runs a schedule's passes back to back on the given rails.
Program make_program(const Schedule& schedule, RoutingPolicy routing, std::vector<RailId> rails,
                     std::string label = {});

struct TrafficMatrix {
  std::vector<double> nic_sent;      // by NicId
  std::vector<double> nic_received;  // by NicId
  std::vector<double> server_sent;   // cross-server bytes by ServerId
  std::vector<double> server_received;
  std::vector<double> nvlink;        // intra-server bytes by ServerId

  void resize(std::size_t nics, std::size_t servers);
  void merge(const TrafficMatrix& other);
};

struct ExecutionResult {
  bool ok = true;
  std::string error;
  double start = 0.0;
  double end = 0.0;
  int rounds = 0;
  int interrupted_rounds = 0;
  int migrations = 0;
  TrafficMatrix traffic;
  std::vector<DetectionRecord> detections;

  double makespan() const { return end - start; }
};

/// Rank buffers indexed by GpuId; non-participants may stay empty.
using GpuBuffers = std::vector<std::vector<double>>;

/// One simulated cluster: engine, physical and believed health, fault
/// handling and the round-based collective executor.
class Runtime {
 public:
  Runtime(const ClusterTopology& topology, ExecConfig config, std::uint64_t seed = 0);
  ~Runtime();
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  Engine& engine();
  const ClusterTopology& topology() const;
  const ExecConfig& config() const;
  const HealthMap& physical() const;
  const HealthMap& known() const;

  /// Applies a fault that predates the workload: both maps updated, no
  /// detection cost.
  void apply_preexisting(const FaultTarget& target);

  /// Schedules injection (and recovery, when set) on the engine.
  void schedule_fault(const FaultEvent& fault);

  /// Executes the program starting no earlier than `start`. Buffers are
  /// updated in place when config().verify is set.
  ExecutionResult execute(const Program& program, double start, GpuBuffers* buffers);

  /// Every detection handled so far.
  const std::vector<DetectionRecord>& detections() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ftsim
