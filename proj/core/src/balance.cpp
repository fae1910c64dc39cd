// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/balance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace ftsim {

std::map<NicId, std::uint64_t> redistribute(std::uint64_t bytes,
                                            const std::map<NicId, double>& nic_bw,
                                            const std::set<NicId>& failed) {
  double total_bw = 0.0;
  std::optional<NicId> top;
  for (const auto& [nic, bw] : nic_bw) {
    if (!(bw > 0.0)) throw BalanceError(fmt::format("{} bandwidth must be > 0", to_string(nic)));
    if (failed.contains(nic)) continue;
    total_bw += bw;
    if (!top || bw > nic_bw.at(*top)) top = nic;
  }
  if (!top) throw BalanceError("all NICs failed; nothing to redistribute onto");

  std::map<NicId, std::uint64_t> shares;
  std::uint64_t assigned = 0;
  for (const auto& [nic, bw] : nic_bw) {
    if (failed.contains(nic)) continue;
    // long double keeps byte counts up to 2^64 exact enough for the floor.
    const auto share = static_cast<std::uint64_t>(
        std::floor(static_cast<long double>(bytes) * bw / total_bw));
    shares[nic] = share;
    assigned += share;
  }
  shares[*top] += bytes - assigned;
  return shares;
}

std::vector<double> proportional_split(double total, const std::vector<double>& weights) {
  if (weights.empty()) throw BalanceError("no weights to split over");
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0.0)) throw BalanceError("weights must sum to > 0");
  std::vector<double> out(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) out[i] = total * weights[i] / sum;
  return out;
}

std::string_view to_string(PathKind kind) {
  switch (kind) {
    case PathKind::kDirectPcie: return "DirectPcie";
    case PathKind::kPcieThenCpu: return "PcieThenCpuInterconnect";
    case PathKind::kPxn: return "PxnViaProxyGpu";
  }
  return "Unknown";
}

namespace {

double transfer_time(double bytes, double rate, double hops_alpha) {
  if (!(rate > 0.0)) return std::numeric_limits<double>::infinity();
  return hops_alpha + bytes / rate;
}

}  // namespace

Path route_flow(const ClusterTopology& topology, const Headroom& headroom, GpuId src_gpu,
                NicId backup_nic, double demand_rate, double bytes, const CostParams& cost) {
  const NicDescriptor& nic = topology.nic(backup_nic);
  if (nic.server != topology.server_of(src_gpu)) {
    throw BalanceError("backup NIC must sit on the source GPU's server");
  }
  const bool same_numa = topology.gpu_numa(src_gpu) == nic.numa;
  const double pcie_rate = std::min(headroom.pcie_free * topology.pcie_bw(), nic.bandwidth);
  if (same_numa && headroom.pcie_free * topology.pcie_bw() >= demand_rate) {
    return {PathKind::kDirectPcie, std::nullopt, transfer_time(bytes, pcie_rate, cost.alpha)};
  }
  const double cpu_rate = std::min(headroom.cpu_free * topology.cpu_interconnect_bw(),
                                   kCrossNumaDerate * nic.bandwidth);
  const double pxn_rate = std::min(headroom.nvlink_free * topology.nvlink_bw(), nic.bandwidth);
  const double t_cpu = transfer_time(bytes, cpu_rate, 2.0 * cost.alpha);
  const double t_pxn = transfer_time(bytes, pxn_rate, 2.0 * cost.alpha);
  if (t_pxn < t_cpu) return {PathKind::kPxn, nic.affinity_gpu, t_pxn};
  return {PathKind::kPcieThenCpu, std::nullopt, t_cpu};
}

TrafficAssignment assign_traffic(const ClusterTopology& topology, const HealthMap& health,
                                 ServerId server, std::uint64_t d_i, const Headroom& headroom,
                                 const CostParams& cost) {
  TrafficAssignment a;
  a.server = server;
  a.d_i = d_i;
  std::map<NicId, double> bw;
  std::set<NicId> failed;
  for (const auto& nic : topology.server_nics(server)) {
    bw[nic.id] = nic.bandwidth;
    if (!health.nic_healthy(nic.id)) failed.insert(nic.id);
  }
  a.shares = redistribute(d_i, bw, failed);
  if (failed.empty()) return a;

  // Traffic that would have used the failed NICs starts at their affine GPUs.
  const double own = static_cast<double>(d_i) / static_cast<double>(bw.size());
  for (NicId f : failed) {
    const GpuId src = topology.nic(f).affinity_gpu;
    for (const auto& [nic, share] : a.shares) {
      const double moved = static_cast<double>(share) - own;
      if (moved <= 0.0 || a.routes.contains(nic)) continue;
      a.routes[nic] = route_flow(topology, headroom, src, nic, topology.nic(nic).bandwidth,
                                 moved, cost);
    }
  }
  return a;
}

}  // namespace ftsim
