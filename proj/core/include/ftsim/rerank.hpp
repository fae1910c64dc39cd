// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "ftsim/topology.hpp"

namespace ftsim {

class RerankError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Server order of a ring plus each server's healthy rails.
struct LogicalRing {
  std::vector<int> order;
  std::map<int, std::set<RailId>> rail_sets;

  void validate() const;
  const std::set<RailId>& rails_of(int node) const;
};

LogicalRing make_logical_ring(const ClusterTopology& topology, const HealthMap& health,
                              std::vector<int> order = {});

/// Capacity of a rail set: its size, or the summed weights when per-rail
/// weights are given (heterogeneous rail bandwidth).
struct RerankOptions {
  std::optional<std::map<RailId, double>> rail_weights;
};

double capacity(const std::set<RailId>& rails, const RerankOptions& opt = {});
double overlap(const LogicalRing& ring, int a, int b, const RerankOptions& opt = {});

/// Smallest capacity over all ring members.
double global_floor(const LogicalRing& ring, const RerankOptions& opt = {});

struct Candidate {
  int u = 0;
  int v = 0;
  int position = 0;  // index of u in the ring
  double gap = 0.0;  // floor minus the pair's overlap
};

/// Adjacent pairs (wrapping) whose overlap is below the floor, largest gap
/// first, ties by ring position.
std::vector<Candidate> find_candidates(const LogicalRing& ring, const RerankOptions& opt = {});

struct Relocation {
  int bridge = 0;
  int u = 0;
  int v = 0;
};

struct RerankResult {
  LogicalRing ring;
  double floor = 0.0;
  std::vector<Relocation> relocations;
  std::vector<Candidate> unrepaired;  // candidates with no valid bridge
  std::vector<Candidate> residual;    // sub-floor edges left in the output
};

RerankResult rerank_detailed(const LogicalRing& ring, const RerankOptions& opt = {});
LogicalRing rerank(const LogicalRing& ring, const RerankOptions& opt = {});

/// Smallest overlap over the ring's adjacent pairs.
double min_adjacent_overlap(const LogicalRing& ring, const RerankOptions& opt = {});

}  // namespace ftsim
