// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/topology.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

namespace ftsim {

TopologySpec TopologySpec::uniform(int servers, int gpus_per_server, int nics_per_server,
                                   double nic_bandwidth, int numa_domains) {
  TopologySpec spec;
  spec.servers = servers;
  spec.gpus_per_server = gpus_per_server;
  numa_domains = std::max(1, numa_domains);
  const int g = std::max(1, gpus_per_server);
  const int m = std::max(1, nics_per_server);
  spec.gpu_numa.resize(static_cast<std::size_t>(g));
  for (int k = 0; k < g; ++k) {
    spec.gpu_numa[static_cast<std::size_t>(k)] = std::min(numa_domains - 1, k * numa_domains / g);
  }
  for (int j = 0; j < m; ++j) {
    NicSpec nic;
    nic.local_id = j;
    nic.rail = j;
    nic.numa = std::min(numa_domains - 1, j * numa_domains / m);
    nic.bandwidth = nic_bandwidth;
    nic.affinity_gpu = std::min(g - 1, j * g / m);
    nic.pcie_hops.resize(static_cast<std::size_t>(g));
    for (int k = 0; k < g; ++k) {
      int hops = 5;
      if (k == nic.affinity_gpu) {
        hops = 1;
      } else if (spec.gpu_numa[static_cast<std::size_t>(k)] == nic.numa) {
        hops = 3;
      }
      nic.pcie_hops[static_cast<std::size_t>(k)] = hops;
    }
    spec.nics.push_back(std::move(nic));
  }
  return spec;
}

void HealthMap::set_nic(NicId nic, bool healthy) {
  char& slot = nic_ok_.at(to_index(nic));
  const char value = healthy ? 1 : 0;
  if (slot != value) {
    slot = value;
    ++epoch_;
  }
}

namespace {
std::pair<std::int32_t, std::int32_t> link_key(NicId a, NicId b) {
  auto x = static_cast<std::int32_t>(to_index(a));
  auto y = static_cast<std::int32_t>(to_index(b));
  return x < y ? std::pair{x, y} : std::pair{y, x};
}
}  // namespace

bool HealthMap::link_healthy(NicId a, NicId b) const {
  return failed_links_.empty() || !failed_links_.contains(link_key(a, b));
}

void HealthMap::set_link(NicId a, NicId b, bool healthy) {
  const auto key = link_key(a, b);
  const bool changed = healthy ? failed_links_.erase(key) > 0 : failed_links_.insert(key).second;
  if (changed) ++epoch_;
}

std::size_t HealthMap::failed_nic_count() const {
  return static_cast<std::size_t>(std::count(nic_ok_.begin(), nic_ok_.end(), 0));
}

ClusterTopology ClusterTopology::build(const TopologySpec& spec) {
  if (spec.servers < 2) {
    throw TopologyError(fmt::format("servers must be >= 2, got {}", spec.servers));
  }
  if (spec.gpus_per_server < 1) {
    throw TopologyError(fmt::format("gpus_per_server must be >= 1, got {}", spec.gpus_per_server));
  }
  if (!(spec.nvlink_bw > 0.0) || !(spec.cpu_interconnect_bw > 0.0) || !(spec.pcie_bw > 0.0)) {
    throw TopologyError("nvlink_bw, cpu_interconnect_bw and pcie_bw must be > 0");
  }
  if (spec.nics.empty()) {
    throw TopologyError("every server needs at least one NIC");
  }
  const auto g = static_cast<std::size_t>(spec.gpus_per_server);
  if (!spec.gpu_numa.empty() && spec.gpu_numa.size() != g) {
    throw TopologyError(fmt::format("gpu_numa has {} entries, expected {}", spec.gpu_numa.size(), g));
  }

  ClusterTopology topo;
  topo.spec_ = spec;
  topo.servers_ = spec.servers;
  topo.gpus_per_server_ = spec.gpus_per_server;
  topo.nics_per_server_ = static_cast<int>(spec.nics.size());
  topo.nvlink_bw_ = spec.nvlink_bw;
  topo.cpu_interconnect_bw_ = spec.cpu_interconnect_bw;
  topo.pcie_bw_ = spec.pcie_bw;
  topo.gpu_numa_ = spec.gpu_numa.empty() ? std::vector<NumaId>(g, 0) : spec.gpu_numa;
  for (NumaId numa : topo.gpu_numa_) {
    if (numa < 0) throw TopologyError("GPU NUMA domain must be >= 0");
  }

  // Resolve local ids and order the template by them.
  std::vector<std::pair<int, const NicSpec*>> ordered;
  std::set<int> seen_ids;
  std::set<RailId> seen_rails;
  for (std::size_t j = 0; j < spec.nics.size(); ++j) {
    const NicSpec& nic = spec.nics[j];
    const int local = nic.local_id.value_or(static_cast<int>(j));
    if (!seen_ids.insert(local).second) {
      throw TopologyError(fmt::format("duplicate NIC identifier {}", local));
    }
    if (!(nic.bandwidth > 0.0)) {
      throw TopologyError(fmt::format("NIC {} bandwidth must be > 0", local));
    }
    if (nic.rail < 0) throw TopologyError(fmt::format("NIC {} rail must be >= 0", local));
    if (!seen_rails.insert(nic.rail).second) {
      throw TopologyError(fmt::format("rail {} is used by more than one NIC per server", nic.rail));
    }
    if (nic.numa < 0) throw TopologyError(fmt::format("NIC {} NUMA domain must be >= 0", local));
    if (nic.affinity_gpu < 0 || nic.affinity_gpu >= spec.gpus_per_server) {
      throw TopologyError(fmt::format("NIC {} affinity GPU {} does not exist", local, nic.affinity_gpu));
    }
    if (nic.pcie_hops.size() != g) {
      throw TopologyError(fmt::format("NIC {} has {} pcie_hops entries; every local GPU needs one ({})",
                                      local, nic.pcie_hops.size(), g));
    }
    const int affinity_hops = nic.pcie_hops[static_cast<std::size_t>(nic.affinity_gpu)];
    for (int hops : nic.pcie_hops) {
      if (hops < 0) throw TopologyError(fmt::format("NIC {} has a negative pcie hop count", local));
      if (hops < affinity_hops) {
        throw TopologyError(fmt::format("NIC {} affinity GPU is not at minimal PCIe distance", local));
      }
    }
    ordered.emplace_back(local, &nic);
  }
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  topo.nics_.reserve(static_cast<std::size_t>(spec.servers) * ordered.size());
  for (int s = 0; s < spec.servers; ++s) {
    for (std::size_t j = 0; j < ordered.size(); ++j) {
      const NicSpec& src = *ordered[j].second;
      NicDescriptor d;
      d.id = make_id<NicId>(topo.nics_.size());
      d.server = make_id<ServerId>(static_cast<std::size_t>(s));
      d.local_index = static_cast<int>(j);
      d.rail = src.rail;
      d.numa = src.numa;
      d.bandwidth = src.bandwidth;
      d.affinity_gpu = make_id<GpuId>(static_cast<std::size_t>(s) * g +
                                      static_cast<std::size_t>(src.affinity_gpu));
      d.pcie_hops = src.pcie_hops;
      topo.nics_.push_back(std::move(d));
    }
  }
  topo.rails_.assign(seen_rails.begin(), seen_rails.end());
  return topo;
}

std::span<const NicDescriptor> ClusterTopology::server_nics(ServerId server) const {
  const auto s = to_index(server);
  if (s >= static_cast<std::size_t>(servers_)) {
    throw TopologyError(fmt::format("unknown server {}", s));
  }
  const auto m = static_cast<std::size_t>(nics_per_server_);
  return std::span<const NicDescriptor>(nics_).subspan(s * m, m);
}

ServerId ClusterTopology::server_of(GpuId gpu) const {
  const auto k = to_index(gpu);
  if (k >= static_cast<std::size_t>(total_gpus())) {
    throw TopologyError(fmt::format("unknown GPU {}", k));
  }
  return make_id<ServerId>(k / static_cast<std::size_t>(gpus_per_server_));
}

int ClusterTopology::local_index(GpuId gpu) const {
  (void)server_of(gpu);
  return static_cast<int>(to_index(gpu) % static_cast<std::size_t>(gpus_per_server_));
}

GpuId ClusterTopology::gpu(ServerId server, int local) const {
  if (to_index(server) >= static_cast<std::size_t>(servers_) || local < 0 ||
      local >= gpus_per_server_) {
    throw TopologyError("GPU index out of range");
  }
  return make_id<GpuId>(to_index(server) * static_cast<std::size_t>(gpus_per_server_) +
                        static_cast<std::size_t>(local));
}

NumaId ClusterTopology::gpu_numa(GpuId gpu) const {
  return gpu_numa_[static_cast<std::size_t>(local_index(gpu))];
}

std::optional<NicId> ClusterTopology::nic_on_rail(ServerId server, RailId rail) const {
  for (const auto& nic : server_nics(server)) {
    if (nic.rail == rail) return nic.id;
  }
  return std::nullopt;
}

double ClusterTopology::server_bandwidth(ServerId server) const {
  double total = 0.0;
  for (const auto& nic : server_nics(server)) total += nic.bandwidth;
  return total;
}

double ClusterTopology::healthy_bandwidth(ServerId server, const HealthMap& health) const {
  double total = 0.0;
  for (const auto& nic : server_nics(server)) {
    if (health.nic_healthy(nic.id)) total += nic.bandwidth;
  }
  return total;
}

std::vector<NicId> failover_chain(const ClusterTopology& topology, GpuId gpu) {
  const ServerId server = topology.server_of(gpu);
  const auto local = static_cast<std::size_t>(topology.local_index(gpu));
  std::vector<const NicDescriptor*> nics;
  for (const auto& nic : topology.server_nics(server)) nics.push_back(&nic);
  std::stable_sort(nics.begin(), nics.end(), [local](const NicDescriptor* a, const NicDescriptor* b) {
    if (a->pcie_hops[local] != b->pcie_hops[local]) return a->pcie_hops[local] < b->pcie_hops[local];
    return to_index(a->id) < to_index(b->id);
  });
  std::vector<NicId> chain;
  chain.reserve(nics.size());
  for (const auto* nic : nics) chain.push_back(nic->id);
  return chain;
}

std::set<RailId> rail_set(const ClusterTopology& topology, const HealthMap& health,
                          ServerId server) {
  std::set<RailId> rails;
  for (const auto& nic : topology.server_nics(server)) {
    if (health.nic_healthy(nic.id)) rails.insert(nic.rail);
  }
  return rails;
}

std::string to_string(NicId nic) { return fmt::format("nic{}", to_index(nic)); }

}  // namespace ftsim
