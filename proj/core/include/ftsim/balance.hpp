// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "ftsim/cost_model.hpp"
#include "ftsim/topology.hpp"

namespace ftsim {

class BalanceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Byte shares per healthy NIC, proportional to bandwidth. Integer bytes; the
/// rounding remainder goes to the highest-bandwidth NIC (lowest id on ties).
std::map<NicId, std::uint64_t> redistribute(std::uint64_t bytes,
                                            const std::map<NicId, double>& nic_bw,
                                            const std::set<NicId>& failed);

/// Fractional variant used by the fluid executor. Weights must be positive.
std::vector<double> proportional_split(double total, const std::vector<double>& weights);

enum class PathKind { kDirectPcie, kPcieThenCpu, kPxn };
std::string_view to_string(PathKind kind);

struct Path {
  PathKind kind = PathKind::kDirectPcie;
  std::optional<GpuId> proxy;
  double predicted_time = 0.0;
};

/// Free fraction of each server-local resource on the forwarding path.
struct Headroom {
  double pcie_free = 1.0;
  double cpu_free = 1.0;
  double nvlink_free = 1.0;
};

inline constexpr double kCrossNumaDerate = 0.5;
inline constexpr double kPxnStagingBytes = 64.0 * 1024.0 * 1024.0;

/// How traffic from src_gpu reaches backup_nic. demand_rate is the flow's
/// target rate in bytes/s; bytes sets the predicted time.
Path route_flow(const ClusterTopology& topology, const Headroom& headroom, GpuId src_gpu,
                NicId backup_nic, double demand_rate, double bytes, const CostParams& cost);

struct TrafficAssignment {
  ServerId server{};
  std::uint64_t d_i = 0;
  std::map<NicId, std::uint64_t> shares;
  std::map<NicId, Path> routes;  // only for NICs that take over moved traffic
};

/// Balance plan for one server: redistribute D_i over its healthy NICs and
/// route the moved part from each failed NIC's affine GPU.
TrafficAssignment assign_traffic(const ClusterTopology& topology, const HealthMap& health,
                                 ServerId server, std::uint64_t d_i, const Headroom& headroom,
                                 const CostParams& cost);

}  // namespace ftsim
