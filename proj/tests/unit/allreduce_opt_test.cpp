#include <random>

#include <gtest/gtest.h>

#include "ftsim/allreduce_opt.hpp"

namespace ftsim {
namespace {

constexpr double kMiB = 1024.0 * 1024.0;

PartitionInputs in(int n, int g, double x, double d = 1, double b = 1) { return {n, g, x, d, b}; }

TEST(Partition, StageTimes) {
  const StageTimes s0 = stage_times(0, in(2, 8, 0.5));
  EXPECT_DOUBLE_EQ(s0.t1, 3.75);
  EXPECT_DOUBLE_EQ(s0.t2, 0.0);
  EXPECT_DOUBLE_EQ(s0.t3, 0.0);
  const StageTimes s1 = stage_times(1, in(2, 8, 0.5));
  EXPECT_DOUBLE_EQ(s1.t1, 0.0);
  EXPECT_DOUBLE_EQ(s1.t2, 3.5);
  EXPECT_DOUBLE_EQ(s1.t3, 2.0);
  EXPECT_THROW(stage_times(1.2, in(2, 8, 0.5)), PlannerError);
}

TEST(Partition, TotalTimeAtOptimum) {
  EXPECT_DOUBLE_EQ(total_time(0, in(2, 8, 0.5)), 3.75);
  const double y = optimal_y(2, 8, 0.5);
  EXPECT_NEAR(y, 0.5 + 0.25 / 14.5, 1e-15);
  const StageTimes s = stage_times(y, in(2, 8, 0.5));
  EXPECT_NEAR(s.t1, 1.8103, 1e-4);
  EXPECT_NEAR(s.t2, 1.8103, 1e-4);
  EXPECT_NEAR(s.t3, 1.0345, 1e-4);
  EXPECT_NEAR(s.total(), 2.8448, 1e-4);
  EXPECT_LT(s.total(), total_time(0, in(2, 8, 0.5)));
  EXPECT_LT(s.total(), total_time(1, in(2, 8, 0.5)));
}

TEST(Partition, Threshold) {
  EXPECT_DOUBLE_EQ(threshold(2, 8), 16.0 / 46.0);
  EXPECT_DOUBLE_EQ(threshold(2, 2), 0.4);
  EXPECT_NEAR(threshold(100000, 8), 1.0 / 3.0, 1e-6);
}

TEST(Partition, OptimalPartition) {
  const PartitionPlan low = optimal_partition(in(2, 8, 0.2));
  EXPECT_EQ(low.y, 0.0);
  EXPECT_EQ(low.strategy, AllReduceStrategy::kStandardRing);
  const PartitionPlan high = optimal_partition(in(2, 8, 0.5));
  EXPECT_NEAR(high.y, 0.517241, 1e-6);
  EXPECT_EQ(high.strategy, AllReduceStrategy::kR2ccAllReduce);
  EXPECT_THROW(optimal_partition(in(2, 8, 1.0)), PlannerError);
  EXPECT_THROW(optimal_partition(in(1, 8, 0.5)), PlannerError);
}

TEST(Partition, PracticalRule) {
  // 0.34 sits between the flat cut and the exact threshold for n=2, g=8.
  EXPECT_EQ(optimal_partition(in(2, 8, 0.34)).strategy, AllReduceStrategy::kStandardRing);
  const auto p = optimal_partition(in(2, 8, 0.34), ThresholdRule::kPractical);
  EXPECT_EQ(p.strategy, AllReduceStrategy::kR2ccAllReduce);
  EXPECT_DOUBLE_EQ(p.threshold, 1.0 / 3.0);
  EXPECT_EQ(to_string(p.rule), "practical");
}

TEST(Property, StageMonotonicity) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 63), g = 2 + static_cast<int>(rng() % 7);
    const double x = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
    StageTimes prev = stage_times(0, in(n, g, x));
    for (int i = 1; i <= 500; ++i) {
      const StageTimes s = stage_times(i / 500.0, in(n, g, x));
      ASSERT_LT(s.t1, prev.t1);
      ASSERT_GT(s.t2, prev.t2);
      ASSERT_GT(s.t3, prev.t3);
      prev = s;
    }
  }
}

TEST(Property, IncreasingBeyondOptimum) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 63), g = 2 + static_cast<int>(rng() % 7);
    const double thr = threshold(n, g);
    const double x = std::uniform_real_distribution<double>(thr + 1e-3, 0.99)(rng);
    const double ys = optimal_y(n, g, x);
    double prev = total_time(ys, in(n, g, x));
    for (double y = ys + 1e-3; y <= 1.0; y += 1e-3) {
      const double t = total_time(y, in(n, g, x));
      ASSERT_GT(t, prev);
      prev = t;
    }
    // Left of Y*, T falls when X is above the threshold and rises below it.
    EXPECT_LT(total_time(ys * 0.5, in(n, g, x)), total_time(0, in(n, g, x)));
    const double xl = thr * 0.9;
    EXPECT_GT(total_time(1e-3, in(n, g, xl)), total_time(0, in(n, g, xl)));
  }
}

TEST(Property, ScaleInvariance) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 20), g = 2 + static_cast<int>(rng() % 7);
    const double x = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    const double d = std::exp(std::uniform_real_distribution<double>(0, 20)(rng));
    const double b = std::exp(std::uniform_real_distribution<double>(0, 20)(rng));
    EXPECT_DOUBLE_EQ(optimal_partition(in(n, g, x)).y, optimal_partition(in(n, g, x, d, b)).y);
    int best_a = 0, best_b = 0;
    for (int i = 1; i <= 1000; ++i) {
      if (total_time(i / 1000.0, in(n, g, x)) < total_time(best_a / 1000.0, in(n, g, x))) best_a = i;
      if (total_time(i / 1000.0, in(n, g, x, d, b)) < total_time(best_b / 1000.0, in(n, g, x, d, b))) best_b = i;
    }
    EXPECT_EQ(best_a, best_b);
  }
}

TEST(Recursive, EqualServersUseOneRing) {
  const std::vector<double> bw(5, 1.0);
  const RecursivePlan p = recursive_plan(bw, 1.0, 8);
  EXPECT_EQ(p.depth(), 0);
  EXPECT_EQ(p.levels[0].members.size(), 5u);
}

TEST(Recursive, OneDegradedMatchesPartition) {
  const std::vector<double> bw = {1.0, 1.0, 0.5, 1.0};
  const RecursivePlan p = recursive_plan(bw, 1.0, 8);
  ASSERT_EQ(p.depth(), 1);
  ASSERT_TRUE(p.levels[0].partition.has_value());
  EXPECT_EQ(p.levels[0].isolated, 2);
  const PartitionPlan direct = optimal_partition(in(4, 8, 0.5));
  EXPECT_NEAR(p.levels[0].partition->y, direct.y, 1e-12);
  EXPECT_NEAR(p.predicted_time, direct.t_total, 1e-9);
}

TEST(Recursive, TwoLevels) {
  const std::vector<double> bw = {0.5, 0.75, 1.0, 1.0, 1.0};
  const RecursivePlan p = recursive_plan(bw, 1.0, 8);
  EXPECT_EQ(p.depth(), 2);
  EXPECT_FALSE(p.fell_back);
  EXPECT_LE(p.predicted_time, p.single_ring_time);
  double shares = 0;
  for (const auto& l : p.levels) shares += l.share;
  EXPECT_NEAR(shares, 1.0, 1e-12);
}

struct Exec {
  bool ok = false;
  ExecutionResult result;
};

Exec execute_nested(const ClusterTopology& t, const HealthMap& h, const NestedProgram& np, double bytes,
                    std::size_t elements) {
  ExecConfig cfg;
  cfg.mode = CostMode::kBandwidthOnly;
  Runtime rt(t, cfg, 2);
  for (const auto& nic : t.nics()) {
    if (!h.nic_healthy(nic.id)) rt.apply_preexisting(NicTarget{nic.id});
  }
  CollectiveRequest req;
  req.kind = CollectiveKind::kAllReduce;
  req.bytes = bytes;
  req.participants = all_ranks(t);
  const RankBuffers inputs = make_inputs(req, elements, 12);
  GpuBuffers bufs = inputs;
  Exec e;
  e.result = rt.execute(np.program, 0.0, &bufs);
  e.ok = e.result.ok && outputs_match(oracle(req, inputs), extract_outputs(req, bufs));
  return e;
}

TEST(TwoStage, ExecutesToOracle) {
  for (int g : {2, 3, 4}) {
    const auto t = build_topology(TopologySpec::uniform(4, g, 4, 25e9, 1));
    HealthMap h = t.healthy_map();
    const ServerId deg = make_id<ServerId>(1);
    h.set_nic(*t.nic_on_rail(deg, 0), false);
    h.set_nic(*t.nic_on_rail(deg, 3), false);
    const PartitionPlan plan = optimal_partition(in(4, g, 0.5, 128 * kMiB, 100e9));
    ASSERT_EQ(plan.strategy, AllReduceStrategy::kR2ccAllReduce);
    const std::size_t elements = 480;
    const NestedProgram np = plan_two_stage(t, h, deg, plan, 128 * kMiB, elements, kMiB);
    ASSERT_EQ(np.levels.size(), 2u);
    const Exec e = execute_nested(t, h, np, 128 * kMiB, elements);
    EXPECT_TRUE(e.ok) << "g=" << g << " " << e.result.error;
    const double a = ring_allreduce_coefficient(4, g);
    const double expect = bottleneck_load(np.regions[1].bytes / (128 * kMiB), 128 * kMiB, a);
    EXPECT_NEAR(e.result.traffic.server_sent[1], expect, kMiB);
  }
}

TEST(TwoStage, Rejections) {
  const auto t = build_topology(TopologySpec::uniform(2, 2, 2, 25e9));
  HealthMap h = t.healthy_map();
  h.set_nic(make_id<NicId>(0), false);
  const PartitionPlan plan = optimal_partition(in(2, 2, 0.5));
  EXPECT_THROW(plan_two_stage(t, h, make_id<ServerId>(0), plan, kMiB, 64, kMiB), PlannerError);
  const auto t4 = build_topology(TopologySpec::uniform(4, 2, 2, 25e9));
  EXPECT_THROW(plan_two_stage(t4, t4.healthy_map(), make_id<ServerId>(0), optimal_partition(in(4, 2, 0.5)), kMiB,
                              64, kMiB),
               PlannerError);
  EXPECT_THROW(plan_two_stage(t4, t4.healthy_map(), make_id<ServerId>(0), optimal_partition(in(4, 2, 0.1)), kMiB,
                              64, kMiB),
               PlannerError);
}

TEST(Recursive, NestedProgramExecutesToOracle) {
  const auto t = build_topology(TopologySpec::uniform(5, 4, 4, 25e9, 1));
  HealthMap h = t.healthy_map();
  // Server 0 keeps 2 of 4 rails, server 1 keeps 3.
  h.set_nic(*t.nic_on_rail(make_id<ServerId>(0), 2), false);
  h.set_nic(*t.nic_on_rail(make_id<ServerId>(0), 3), false);
  h.set_nic(*t.nic_on_rail(make_id<ServerId>(1), 3), false);
  const std::size_t elements = 600;
  const NestedProgram np = recursive_program(t, h, 256 * kMiB, elements, kMiB);
  EXPECT_EQ(np.levels.size(), 3u);
  const Exec e = execute_nested(t, h, np, 256 * kMiB, elements);
  EXPECT_TRUE(e.ok) << e.result.error;
}

TEST(Strategy, Selection) {
  const auto t = build_topology(TopologySpec::uniform(4, 8, 8, 50e9, 2));
  HealthMap h = t.healthy_map();
  for (RailId r = 0; r < 4; ++r) h.set_nic(*t.nic_on_rail(make_id<ServerId>(2), r), false);
  CollectiveRequest rs;
  rs.kind = CollectiveKind::kReduceScatter;
  rs.participants = all_ranks(t);
  EXPECT_EQ(select_strategy(rs, t, h, {}).strategy, Strategy::kBalance);

  CollectiveRequest small = rs;
  small.kind = CollectiveKind::kAllReduce;
  small.bytes = 256 * 1024;
  EXPECT_EQ(select_strategy(small, t, h, {}).strategy, Strategy::kBalance);

  CollectiveRequest large = small;
  large.bytes = 4096 * kMiB;
  const StrategyChoice c = select_strategy(large, t, h, {}, CostMode::kBandwidthOnly);
  EXPECT_EQ(c.strategy, Strategy::kR2ccAllReduce);
  ASSERT_TRUE(c.r2cc_time.has_value());
  EXPECT_LT(*c.r2cc_time, c.balance_time);
  EXPECT_EQ(c.degraded, make_id<ServerId>(2));

  EXPECT_EQ(parse_strategy("recursive"), Strategy::kRecursive);
  EXPECT_THROW(parse_strategy("magic"), PlannerError);
}

}  // namespace
}  // namespace ftsim
