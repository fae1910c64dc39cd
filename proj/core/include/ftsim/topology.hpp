// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace ftsim {

// Dense integer identifiers. GpuId doubles as the collective rank.
enum class ServerId : std::int32_t {};
enum class GpuId : std::int32_t {};
enum class NicId : std::int32_t {};
using RailId = std::int32_t;
using NumaId = std::int32_t;

template <typename Id>
  requires std::is_enum_v<Id>
constexpr std::size_t to_index(Id id) {
  return static_cast<std::size_t>(static_cast<std::underlying_type_t<Id>>(id));
}

template <typename Id>
  requires std::is_enum_v<Id>
constexpr Id make_id(std::size_t index) {
  return static_cast<Id>(static_cast<std::underlying_type_t<Id>>(index));
}

class TopologyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-server NIC template entry. Every server carries the same NIC layout.
struct NicSpec {
  std::optional<int> local_id;  // defaults to position in the list
  RailId rail = 0;
  NumaId numa = 0;
  double bandwidth = 0.0;       // bytes/s
  int affinity_gpu = 0;         // local GPU index
  std::vector<int> pcie_hops;   // hop count from each local GPU
};

struct TopologySpec {
  int servers = 2;
  int gpus_per_server = 8;
  double nvlink_bw = 3.6e12;
  double cpu_interconnect_bw = 1.2e11;
  double pcie_bw = 6.4e10;
  std::vector<NicSpec> nics;
  std::vector<NumaId> gpu_numa;  // per local GPU; empty means "all in NUMA 0"

  /// Rail-optimized layout: NIC j sits on rail j, is affine to GPU j*g/m and
  /// lives in NUMA domain j*numa_domains/m. PCIe hops are 1 to the affine GPU,
  /// 3 within the NUMA domain and 5 across domains.
  static TopologySpec uniform(int servers, int gpus_per_server, int nics_per_server,
                              double nic_bandwidth, int numa_domains = 2);
};

struct NicDescriptor {
  NicId id{};
  ServerId server{};
  int local_index = 0;
  RailId rail = 0;
  NumaId numa = 0;
  double bandwidth = 0.0;
  GpuId affinity_gpu{};
  std::vector<int> pcie_hops;  // indexed by local GPU
};

/// Physical or believed health of NICs and NIC-to-NIC links.
class HealthMap {
 public:
  HealthMap() = default;
  explicit HealthMap(std::size_t nic_count) : nic_ok_(nic_count, 1) {}

  bool nic_healthy(NicId nic) const { return nic_ok_.at(to_index(nic)) != 0; }
  void set_nic(NicId nic, bool healthy);

  bool link_healthy(NicId a, NicId b) const;
  void set_link(NicId a, NicId b, bool healthy);

  bool path_usable(NicId a, NicId b) const {
    return nic_healthy(a) && nic_healthy(b) && link_healthy(a, b);
  }

  std::size_t nic_count() const { return nic_ok_.size(); }
  std::size_t failed_nic_count() const;
  std::uint64_t epoch() const { return epoch_; }

  bool operator==(const HealthMap& other) const {
    return nic_ok_ == other.nic_ok_ && failed_links_ == other.failed_links_;
  }

 private:
  std::vector<char> nic_ok_;
  std::set<std::pair<std::int32_t, std::int32_t>> failed_links_;
  std::uint64_t epoch_ = 0;
};

/// Validated, immutable cluster description.
class ClusterTopology {
 public:
  static ClusterTopology build(const TopologySpec& spec);

  int servers() const { return servers_; }
  int gpus_per_server() const { return gpus_per_server_; }
  int nics_per_server() const { return nics_per_server_; }
  int total_gpus() const { return servers_ * gpus_per_server_; }
  int total_nics() const { return static_cast<int>(nics_.size()); }

  double nvlink_bw() const { return nvlink_bw_; }
  double cpu_interconnect_bw() const { return cpu_interconnect_bw_; }
  double pcie_bw() const { return pcie_bw_; }

  const NicDescriptor& nic(NicId id) const { return nics_.at(to_index(id)); }
  std::span<const NicDescriptor> nics() const { return nics_; }
  std::span<const NicDescriptor> server_nics(ServerId server) const;

  ServerId server_of(GpuId gpu) const;
  int local_index(GpuId gpu) const;
  GpuId gpu(ServerId server, int local) const;
  NumaId gpu_numa(GpuId gpu) const;

  std::optional<NicId> nic_on_rail(ServerId server, RailId rail) const;
  const std::vector<RailId>& rails() const { return rails_; }

  double server_bandwidth(ServerId server) const;
  double healthy_bandwidth(ServerId server, const HealthMap& health) const;

  const TopologySpec& spec() const { return spec_; }
  HealthMap healthy_map() const { return HealthMap(nics_.size()); }

 private:
  ClusterTopology() = default;

  TopologySpec spec_;
  int servers_ = 0;
  int gpus_per_server_ = 0;
  int nics_per_server_ = 0;
  double nvlink_bw_ = 0.0;
  double cpu_interconnect_bw_ = 0.0;
  double pcie_bw_ = 0.0;
  std::vector<NicDescriptor> nics_;
  std::vector<NumaId> gpu_numa_;
  std::vector<RailId> rails_;
};

inline ClusterTopology build_topology(const TopologySpec& spec) {
  return ClusterTopology::build(spec);
}

/// All NICs on the GPU's server, nearest PCIe distance first, ties by NIC id.
std::vector<NicId> failover_chain(const ClusterTopology& topology, GpuId gpu);

/// Rails of the server's NICs that the health map marks healthy.
std::set<RailId> rail_set(const ClusterTopology& topology, const HealthMap& health,
                          ServerId server);

std::string to_string(NicId nic);

}  // namespace ftsim
