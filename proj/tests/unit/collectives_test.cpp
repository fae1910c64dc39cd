#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "ftsim/collectives.hpp"
#include "ftsim/cost_model.hpp"
#include "ftsim/executor.hpp"

namespace ftsim {
namespace {

constexpr double kMiB = 1024.0 * 1024.0;

struct Outcome {
  ExecutionResult result;
  RankBuffers inputs;
  RankBuffers outputs;
  bool match = false;
};

struct RunOptions {
  RoutingPolicy policy = RoutingPolicy::kBalance;
  CostMode mode = CostMode::kBandwidthOnly;
  std::vector<FaultEvent> faults;
  std::size_t elements = 96;
  double chunk = kMiB;
  std::uint64_t seed = 1;
  std::optional<RankBuffers> inputs;
};

Outcome execute(const ClusterTopology& t, const CollectiveRequest& req, const std::vector<GpuId>& order,
            const RunOptions& opt = {}) {
  ExecConfig cfg;
  cfg.mode = opt.mode;
  cfg.chunk_size = opt.chunk;
  Runtime rt(t, cfg, opt.seed);
  for (const auto& f : opt.faults) rt.schedule_fault(f);
  const Schedule s = ring_schedule(req, order, t.nics_per_server(), opt.chunk, opt.elements);
  const Program prog = make_program(s, opt.policy, t.rails(), "test");
  Outcome r;
  r.inputs = opt.inputs ? *opt.inputs : make_inputs(req, opt.elements, opt.seed);
  GpuBuffers bufs(static_cast<std::size_t>(t.total_gpus()));
  for (std::size_t p = 0; p < req.participants.size(); ++p) bufs[to_index(req.participants[p])] = r.inputs[p];
  r.result = rt.execute(prog, 0.0, &bufs);
  RankBuffers got;
  for (GpuId g : req.participants) got.push_back(bufs[to_index(g)]);
  r.outputs = extract_outputs(req, got);
  r.match = r.result.ok && outputs_match(oracle(req, r.inputs), r.outputs);
  return r;
}

CollectiveRequest request(CollectiveKind kind, const ClusterTopology& t, double bytes = 64 * kMiB) {
  CollectiveRequest req;
  req.kind = kind;
  req.bytes = bytes;
  req.participants = all_ranks(t);
  return req;
}

TEST(Oracle, Examples) {
  CollectiveRequest ar;
  ar.kind = CollectiveKind::kAllReduce;
  ar.participants = {make_id<GpuId>(0), make_id<GpuId>(1), make_id<GpuId>(2)};
  const RankBuffers zeros(3, std::vector<double>(6, 0.0));
  EXPECT_EQ(oracle(ar, zeros).buffers, zeros);
  RankBuffers ranks;
  for (int r = 0; r < 3; ++r) ranks.emplace_back(6, r);
  for (const auto& b : oracle(ar, ranks).buffers) EXPECT_EQ(b, std::vector<double>(6, 3.0));

  CollectiveRequest ag = ar;
  ag.kind = CollectiveKind::kAllGather;
  RankBuffers shards(3, std::vector<double>(6, 0.0));
  for (int r = 0; r < 3; ++r) {
    shards[r][2 * r] = 10 * r + 1;
    shards[r][2 * r + 1] = 10 * r + 2;
  }
  const std::vector<double> cat = {1, 2, 11, 12, 21, 22};
  for (const auto& b : oracle(ag, shards).buffers) EXPECT_EQ(b, cat);
}

TEST(Oracle, ReduceLeavesNonRootsUndefined) {
  CollectiveRequest req;
  req.kind = CollectiveKind::kReduce;
  req.participants = {make_id<GpuId>(0), make_id<GpuId>(1)};
  req.root = 1;
  const auto o = oracle(req, RankBuffers(2, std::vector<double>(4, 1.0)));
  EXPECT_FALSE(o.defined[0]);
  EXPECT_TRUE(o.defined[1]);
  EXPECT_EQ(o.buffers[1], std::vector<double>(4, 2.0));
}

TEST(Schedule, RingShapes) {
  const auto t = build_topology(TopologySpec::uniform(4, 1, 1, 1e9));
  auto ar = request(CollectiveKind::kAllReduce, t, 0.5 * kMiB);
  const Schedule s = ring_schedule(ar, ar.participants, 1, kMiB, 8);
  EXPECT_EQ(s.rounds(), 6);
  EXPECT_EQ(s.steps().size(), 24u);

  const auto t3 = build_topology(TopologySpec::uniform(3, 1, 1, 1e9));
  auto bc = request(CollectiveKind::kBroadcast, t3, 0.5 * kMiB);
  EXPECT_EQ(ring_schedule(bc, bc.participants, 1, kMiB, 8).rounds(), 2);

  auto bad = ar;
  bad.participants.resize(1);
  EXPECT_THROW(ring_schedule(bad, bad.participants, 1, kMiB, 8), CollectiveError);
}

TEST(Execute, AllReduceSumsRankValues) {
  const auto t = build_topology(TopologySpec::uniform(4, 1, 1, 1e9));
  const auto req = request(CollectiveKind::kAllReduce, t);
  RunOptions opt;
  opt.elements = 16;
  opt.inputs = RankBuffers{};
  for (int r = 1; r <= 4; ++r) opt.inputs->emplace_back(16, r);
  const Outcome r = execute(t, req, req.participants, opt);
  ASSERT_TRUE(r.match);
  for (const auto& b : r.outputs) EXPECT_EQ(b, std::vector<double>(16, 10.0));
}

TEST(Execute, ReduceScatterSendsHalf) {
  const auto t = build_topology(TopologySpec::uniform(2, 1, 1, 1e9));
  const auto req = request(CollectiveKind::kReduceScatter, t);
  const Outcome r = execute(t, req, req.participants);
  ASSERT_TRUE(r.match);
  EXPECT_DOUBLE_EQ(r.result.traffic.server_sent[0], req.bytes / 2);
  EXPECT_EQ(r.outputs[0].size(), 48u);
}

TEST(Execute, BroadcastTwoSteps) {
  const auto t = build_topology(TopologySpec::uniform(3, 1, 1, 1e9));
  auto req = request(CollectiveKind::kBroadcast, t, 0.5 * kMiB);
  const Outcome r = execute(t, req, req.participants);
  ASSERT_TRUE(r.match);
  EXPECT_EQ(r.result.rounds, 2);
}

TEST(Execute, HealthyMakespanMatchesCostModel) {
  const auto t = build_topology(TopologySpec::uniform(2, 8, 8, 25e9, 1));
  const auto req = request(CollectiveKind::kAllReduce, t, 1024 * kMiB);
  RunOptions opt;
  opt.elements = 256;
  const Outcome r = execute(t, req, req.participants, opt);
  ASSERT_TRUE(r.match);
  const double model = ring_allreduce_time(2, 8, req.bytes, 8 * 25e9);
  EXPECT_NEAR(r.result.makespan(), model, 0.01 * model);
}

TEST(Execute, ZeroSizeCostsOnlyLatency) {
  const auto t = build_topology(TopologySpec::uniform(2, 2, 2, 25e9));
  const auto req = request(CollectiveKind::kAllReduce, t, 0.0);
  RunOptions opt;
  opt.mode = CostMode::kAlphaBeta;
  const Outcome r = execute(t, req, req.participants, opt);
  ASSERT_TRUE(r.result.ok);
  EXPECT_NEAR(r.result.makespan(), r.result.rounds * CostParams{}.alpha, 1e-15);
  EXPECT_EQ(r.result.rounds, 6);
}

TEST(Execute, HotRepairMidReduceScatter) {
  const auto t = build_topology(TopologySpec::uniform(2, 4, 2, 25e9));
  const auto req = request(CollectiveKind::kReduceScatter, t, 256 * kMiB);
  RunOptions opt;
  opt.policy = RoutingPolicy::kHotRepair;
  opt.faults = {FaultEvent{1e-3, NicTarget{make_id<NicId>(1)}}};
  const Outcome r = execute(t, req, req.participants, opt);
  EXPECT_TRUE(r.match);
  ASSERT_EQ(r.result.detections.size(), 1u);
  EXPECT_GE(r.result.migrations, 1);
}

TEST(Execute, TransportFaultIsOneShot) {
  const auto t = build_topology(TopologySpec::uniform(2, 2, 2, 25e9));
  const auto req = request(CollectiveKind::kAllGather, t, 128 * kMiB);
  RunOptions opt;
  opt.faults = {FaultEvent{2e-4, TransportTarget{{make_id<ServerId>(0), make_id<ServerId>(1), 0}}}};
  const Outcome r = execute(t, req, req.participants, opt);
  EXPECT_TRUE(r.match);
}

TEST(Execute, LinkFaultWithRecovery) {
  const auto t = build_topology(TopologySpec::uniform(3, 2, 2, 25e9));
  const auto req = request(CollectiveKind::kAllReduce, t, 128 * kMiB);
  RunOptions opt;
  opt.faults = {FaultEvent{3e-4, LinkTarget{make_id<NicId>(0), make_id<NicId>(2)}, false, 5e-3}};
  const Outcome r = execute(t, req, req.participants, opt);
  EXPECT_TRUE(r.match);
  ASSERT_FALSE(r.result.detections.empty());
  EXPECT_EQ(r.result.detections[0].verdict.kind, VerdictKind::kLinkFault);
}

TEST(Execute, NoSurvivorAborts) {
  const auto t = build_topology(TopologySpec::uniform(2, 1, 1, 25e9));
  const auto req = request(CollectiveKind::kAllReduce, t, 64 * kMiB);
  RunOptions opt;
  opt.policy = RoutingPolicy::kHotRepair;
  opt.faults = {FaultEvent{1e-4, NicTarget{make_id<NicId>(0)}}};
  const Outcome r = execute(t, req, req.participants, opt);
  EXPECT_FALSE(r.result.ok);
  EXPECT_FALSE(r.result.error.empty());
}

// Permuting the ring changes timing, never the buffers.
TEST(Property, RingOrderInvariance) {
  std::mt19937_64 rng(77);
  const CollectiveKind kinds[] = {CollectiveKind::kReduceScatter, CollectiveKind::kAllGather,
                                  CollectiveKind::kBroadcast,     CollectiveKind::kReduce,
                                  CollectiveKind::kAllReduce,     CollectiveKind::kAllToAll};
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 3), g = 1 + static_cast<int>(rng() % 3);
    const auto t = build_topology(TopologySpec::uniform(n, g, 2, 25e9, 1));
    auto req = request(kinds[trial % 6], t, 32 * kMiB);
    req.root = static_cast<int>(rng() % req.participants.size());
    RunOptions opt;
    opt.seed = static_cast<std::uint64_t>(trial);
    const Outcome base = execute(t, req, req.participants, opt);
    ASSERT_TRUE(base.match) << to_string(req.kind);
    auto order = req.participants;
    std::shuffle(order.begin(), order.end(), rng);
    if (trial % 3 == 0) opt.faults = {FaultEvent{1e-4, NicTarget{make_id<NicId>(rng() % (2 * n))}}};
    const Outcome perm = execute(t, req, order, opt);
    EXPECT_TRUE(perm.match) << to_string(req.kind) << " trial " << trial;
    // Non-root Reduce buffers are left undefined.
    if (req.kind != CollectiveKind::kReduce) EXPECT_EQ(perm.outputs, base.outputs);
  }
}

// Flat rings move (P-1)/P of the buffer across each server boundary, which is
// at least the (n-1)/n lower bound.
TEST(Property, TrafficAccounting) {
  for (int n : {2, 3, 4}) {
    for (int g : {1, 2, 4}) {
      const auto t = build_topology(TopologySpec::uniform(n, g, 2, 25e9, 1));
      for (auto kind : {CollectiveKind::kReduceScatter, CollectiveKind::kAllGather}) {
        const auto req = request(kind, t, 96 * kMiB);
        const Outcome r = execute(t, req, req.participants);
        ASSERT_TRUE(r.match);
        const double p = n * g;
        const double ring = (p - 1) / p * req.bytes;
        const TrafficKind tk = kind == CollectiveKind::kAllGather ? TrafficKind::kAllGather : TrafficKind::kReduceScatter;
        for (int s = 0; s < n; ++s) {
          EXPECT_NEAR(r.result.traffic.server_sent[s], ring, kMiB);
          EXPECT_GE(r.result.traffic.server_sent[s] + kMiB, min_cross_server_traffic(tk, req.bytes, n));
        }
      }
    }
  }
}

TEST(Execute, SendRecvAndAllToAll) {
  const auto t = build_topology(TopologySpec::uniform(3, 2, 2, 25e9));
  CollectiveRequest sr;
  sr.kind = CollectiveKind::kSendRecv;
  sr.bytes = 8 * kMiB;
  sr.participants = {t.gpu(make_id<ServerId>(0), 1), t.gpu(make_id<ServerId>(2), 0)};
  RunOptions opt;
  opt.faults = {FaultEvent{5e-5, NicTarget{make_id<NicId>(1)}}};
  EXPECT_TRUE(execute(t, sr, sr.participants, opt).match);
  const auto a2a = request(CollectiveKind::kAllToAll, t, 24 * kMiB);
  EXPECT_TRUE(execute(t, a2a, a2a.participants).match);
}

TEST(Collectives, ParseAndValidate) {
  EXPECT_EQ(parse_collective_kind("ReduceScatter"), CollectiveKind::kReduceScatter);
  EXPECT_THROW(parse_collective_kind("Gossip"), CollectiveError);
  CollectiveRequest r;
  r.participants = {make_id<GpuId>(0)};
  r.bytes = -1;
  EXPECT_THROW(r.validate(), CollectiveError);
  EXPECT_EQ(shard_range(10, 3, 2), (std::pair<std::size_t, std::size_t>{6, 10}));
}

}  // namespace
}  // namespace ftsim
