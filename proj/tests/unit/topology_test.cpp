#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "ftsim/topology.hpp"

namespace ftsim {
namespace {

NicSpec nic(RailId rail, std::vector<int> hops, int affinity = 0) {
  NicSpec s;
  s.rail = rail;
  s.bandwidth = 50e9;
  s.affinity_gpu = affinity;
  s.pcie_hops = std::move(hops);
  return s;
}

TEST(Topology, EightRailServer) {
  const auto t = build_topology(TopologySpec::uniform(2, 8, 8, 50e9));
  EXPECT_EQ(t.total_nics(), 16);
  EXPECT_EQ(t.rails().size(), 8u);
  EXPECT_EQ(t.total_gpus(), 16);
  EXPECT_DOUBLE_EQ(t.server_bandwidth(make_id<ServerId>(1)), 400e9);
}

TEST(Topology, MinimalCluster) {
  const auto t = build_topology(TopologySpec::uniform(2, 1, 1, 1e9));
  EXPECT_EQ(t.total_nics(), 2);
  EXPECT_EQ(failover_chain(t, t.gpu(make_id<ServerId>(0), 0)).size(), 1u);
}

TEST(Topology, RejectsZeroBandwidth) {
  EXPECT_THROW(build_topology(TopologySpec::uniform(2, 8, 8, 0.0)), TopologyError);
  auto spec = TopologySpec::uniform(2, 2, 2, 1e9);
  spec.nvlink_bw = 0.0;
  EXPECT_THROW(build_topology(spec), TopologyError);
}

TEST(Topology, RejectsBadShapes) {
  EXPECT_THROW(build_topology(TopologySpec::uniform(1, 2, 2, 1e9)), TopologyError);
  auto spec = TopologySpec::uniform(2, 2, 2, 1e9);
  spec.nics[1].rail = spec.nics[0].rail;
  EXPECT_THROW(build_topology(spec), TopologyError);
  spec = TopologySpec::uniform(2, 2, 2, 1e9);
  spec.nics[0].pcie_hops = {1};
  EXPECT_THROW(build_topology(spec), TopologyError);
  spec = TopologySpec::uniform(2, 2, 2, 1e9);
  spec.nics[0].pcie_hops = {3, 1};  // affinity GPU 0 is not the nearest
  EXPECT_THROW(build_topology(spec), TopologyError);
}

TEST(Topology, ChainSortsByDistance) {
  TopologySpec spec;
  spec.servers = 2;
  spec.gpus_per_server = 1;
  spec.nics = {nic(0, {1}), nic(1, {3}), nic(2, {5})};
  const auto t = build_topology(spec);
  const auto chain = failover_chain(t, make_id<GpuId>(0));
  EXPECT_EQ(chain, (std::vector<NicId>{make_id<NicId>(0), make_id<NicId>(1), make_id<NicId>(2)}));
}

TEST(Topology, ChainTiesBreakById) {
  TopologySpec spec;
  spec.servers = 2;
  spec.gpus_per_server = 1;
  spec.nics = {nic(0, {2}), nic(1, {2})};
  const auto t = build_topology(spec);
  EXPECT_EQ(failover_chain(t, make_id<GpuId>(1)), (std::vector<NicId>{make_id<NicId>(2), make_id<NicId>(3)}));
}

TEST(Topology, RailSet) {
  const auto t = build_topology(TopologySpec::uniform(2, 8, 8, 50e9));
  const auto s0 = make_id<ServerId>(0);
  HealthMap h = t.healthy_map();
  EXPECT_EQ(rail_set(t, h, s0), (std::set<RailId>{0, 1, 2, 3, 4, 5, 6, 7}));
  h.set_nic(*t.nic_on_rail(s0, 1), false);
  EXPECT_EQ(rail_set(t, h, s0), (std::set<RailId>{0, 2, 3, 4, 5, 6, 7}));
  for (const auto& n : t.server_nics(s0)) h.set_nic(n.id, false);
  EXPECT_TRUE(rail_set(t, h, s0).empty());
  EXPECT_EQ(rail_set(t, h, make_id<ServerId>(1)).size(), 8u);
}

TEST(Topology, ChainIsPermutationWithNearestFirst) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int g = 1 + static_cast<int>(rng() % 8), m = 1 + static_cast<int>(rng() % 8);
    const auto t = build_topology(TopologySpec::uniform(2, g, m, 1e9, 1 + static_cast<int>(rng() % 2)));
    for (int local = 0; local < g; ++local) {
      const GpuId gpu = t.gpu(make_id<ServerId>(1), local);
      auto chain = failover_chain(t, gpu);
      ASSERT_EQ(static_cast<int>(chain.size()), m);
      int best = 1 << 20;
      for (const auto& n : t.server_nics(make_id<ServerId>(1))) best = std::min(best, n.pcie_hops[local]);
      EXPECT_EQ(t.nic(chain.front()).pcie_hops[local], best);
      std::sort(chain.begin(), chain.end());
      for (int j = 0; j < m; ++j) EXPECT_EQ(t.nic(chain[j]).server, make_id<ServerId>(1));
      EXPECT_EQ(std::adjacent_find(chain.begin(), chain.end()), chain.end());
    }
  }
}

TEST(Topology, HealingNeverShrinksRailSet) {
  const auto t = build_topology(TopologySpec::uniform(3, 4, 4, 1e9));
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    HealthMap h = t.healthy_map();
    for (const auto& n : t.nics()) {
      if (rng() % 3 == 0) h.set_nic(n.id, false);
    }
    const auto s = make_id<ServerId>(rng() % 3);
    const auto before = rail_set(t, h, s);
    for (const auto& n : t.server_nics(s)) EXPECT_TRUE(std::set<RailId>(t.rails().begin(), t.rails().end()).count(n.rail));
    HealthMap healed = h;
    healed.set_nic(t.server_nics(s)[rng() % 4].id, true);
    const auto after = rail_set(t, healed, s);
    EXPECT_TRUE(std::includes(after.begin(), after.end(), before.begin(), before.end()));
  }
}

TEST(HealthMap, LinksAreUndirected) {
  HealthMap h(4);
  h.set_link(make_id<NicId>(2), make_id<NicId>(0), false);
  EXPECT_FALSE(h.link_healthy(make_id<NicId>(0), make_id<NicId>(2)));
  EXPECT_FALSE(h.path_usable(make_id<NicId>(0), make_id<NicId>(2)));
  EXPECT_TRUE(h.path_usable(make_id<NicId>(0), make_id<NicId>(1)));
  const auto e = h.epoch();
  h.set_link(make_id<NicId>(0), make_id<NicId>(2), true);
  EXPECT_GT(h.epoch(), e);
  EXPECT_EQ(h, HealthMap(4));
}

}  // namespace
}  // namespace ftsim
