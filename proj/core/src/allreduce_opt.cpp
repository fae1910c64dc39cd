// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/allreduce_opt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <fmt/format.h>

namespace ftsim {

void PartitionInputs::validate() const {
  if (n < 2) throw PlannerError("n must be >= 2");
  if (g < 2) throw PlannerError("g must be >= 2");
  if (!(X > 0.0 && X < 1.0)) {
    throw PlannerError(fmt::format("X must lie in (0, 1), got {}", X));
  }
  if (!(D >= 0.0)) throw PlannerError("D must be >= 0");
  if (!(B > 0.0)) throw PlannerError("B must be > 0");
}

double StageTimes::total() const { return std::max(t1, t2) + t3; }

StageTimes stage_times(double y, const PartitionInputs& in) {
  in.validate();
  if (!(y >= 0.0 && y <= 1.0)) throw PlannerError(fmt::format("Y must lie in [0, 1], got {}", y));
  const double a = ring_allreduce_coefficient(in.n, in.g);
  const double b = ring_allreduce_coefficient(in.n - 1, in.g);
  StageTimes t;
  t.t1 = a * (1.0 - y) * in.D / ((1.0 - in.X) * in.B);
  t.t2 = b * y * in.D / (in.X * in.B);
  t.t3 = y * in.D / (in.X * in.B);
  return t;
}

double total_time(double y, const PartitionInputs& in) { return stage_times(y, in).total(); }

double threshold(int n, int g) {
  if (n < 2 || g < 2) throw PlannerError("threshold needs n >= 2 and g >= 2");
  const double ng = static_cast<double>(n) * g;
  return ng / (3.0 * ng - 2.0);
}

double optimal_y(int n, int g, double x) {
  const double k = static_cast<double>(g) * (n - 1) - 1.0;
  return x + x * (1.0 - x) / (x + k * n);
}

std::string_view to_string(ThresholdRule rule) {
  return rule == ThresholdRule::kExact ? "exact" : "practical";
}

std::string_view to_string(AllReduceStrategy s) {
  return s == AllReduceStrategy::kStandardRing ? "standard_ring" : "r2cc_allreduce";
}

PartitionPlan optimal_partition(const PartitionInputs& in, ThresholdRule rule) {
  in.validate();
  PartitionPlan plan;
  plan.inputs = in;
  plan.rule = rule;
  plan.threshold = rule == ThresholdRule::kExact ? threshold(in.n, in.g) : 1.0 / 3.0;
  const bool ring = rule == ThresholdRule::kExact ? in.X <= plan.threshold : in.X < plan.threshold;
  if (ring) {
    plan.y = 0.0;
    plan.strategy = AllReduceStrategy::kStandardRing;
  } else {
    plan.y = optimal_y(in.n, in.g, in.X);
    plan.strategy = AllReduceStrategy::kR2ccAllReduce;
  }
  plan.times = stage_times(plan.y, in);
  plan.t_total = plan.times.total();
  return plan;
}

RecursivePlan recursive_plan(std::span<const double> bandwidths, double data_bytes, int g,
                             const RecursiveConfig& cfg) {
  const int n = static_cast<int>(bandwidths.size());
  if (n < 2) throw PlannerError("recursive_plan needs at least 2 servers");
  for (double b : bandwidths) {
    if (!(b > 0.0)) throw PlannerError("server bandwidths must be > 0");
  }
  RecursivePlan out;
  const double slowest = *std::min_element(bandwidths.begin(), bandwidths.end());
  out.single_ring_time = ring_allreduce_coefficient(n, g) * data_bytes / slowest;

  std::vector<double> residual(bandwidths.begin(), bandwidths.end());
  std::vector<int> group(static_cast<std::size_t>(n));
  std::iota(group.begin(), group.end(), 0);
  double remaining = 1.0;
  std::vector<double> ring_times;
  std::vector<double> completion;  // folding the isolated server back in

  auto ring_time = [&](const RingLevel& lv) {
    if (lv.share <= 0.0) return 0.0;
    return ring_allreduce_coefficient(static_cast<int>(lv.members.size()), g) * lv.share * data_bytes /
           lv.rate;
  };

  for (int depth = 0;; ++depth) {
    double lo = residual[static_cast<std::size_t>(group.front())];
    double hi = lo;
    int s = group.front();
    for (int i : group) {
      const double r = residual[static_cast<std::size_t>(i)];
      hi = std::max(hi, r);
      if (r < lo) {
        lo = r;
        s = i;
      }
    }
    std::optional<PartitionPlan> part;
    double rest_avg = 0.0;
    double rest_min = hi;
    for (int i : group) {
      if (i != s) rest_min = std::min(rest_min, residual[static_cast<std::size_t>(i)]);
    }
    // A tie for slowest would leave a zero-rate member in the next ring.
    if (group.size() >= 3 && depth < cfg.max_depth && (hi - lo) / hi >= cfg.var_eps && rest_min > lo) {
      for (int i : group) {
        if (i != s) rest_avg += residual[static_cast<std::size_t>(i)];
      }
      rest_avg /= static_cast<double>(group.size() - 1);
      PartitionInputs in{static_cast<int>(group.size()), g, 1.0 - lo / rest_avg, remaining * data_bytes,
                         rest_avg};
      PartitionPlan p = optimal_partition(in, cfg.rule);
      if (p.strategy == AllReduceStrategy::kR2ccAllReduce) part = p;
    }
    RingLevel lv;
    lv.members = group;
    lv.rate = lo;
    if (!part) {
      lv.share = remaining;
      ring_times.push_back(ring_time(lv));
      out.levels.push_back(std::move(lv));
      break;
    }
    lv.share = remaining * (1.0 - part->y);
    lv.isolated = s;
    lv.partition = part;
    ring_times.push_back(ring_time(lv));
    remaining *= part->y;
    completion.push_back(remaining * data_bytes / (part->inputs.X * part->inputs.B));
    out.levels.push_back(std::move(lv));
    std::erase(group, s);
    for (int i : group) residual[static_cast<std::size_t>(i)] -= lo;
  }
  // The residual group's whole nested AllReduce is level k's partial stage.
  double t = ring_times.back();
  for (std::size_t k = completion.size(); k-- > 0;) t = std::max(ring_times[k], t) + completion[k];
  out.predicted_time = t;

  if (out.levels.size() > 1 && out.predicted_time > out.single_ring_time) {
    RingLevel lv;
    lv.members.resize(static_cast<std::size_t>(n));
    std::iota(lv.members.begin(), lv.members.end(), 0);
    lv.share = 1.0;
    lv.rate = slowest;
    out.levels.assign(1, std::move(lv));
    out.predicted_time = out.single_ring_time;
    out.fell_back = true;
  }
  return out;
}

namespace {

std::vector<ServerId> to_servers(const std::vector<int>& idx) {
  std::vector<ServerId> out;
  for (int i : idx) out.push_back(make_id<ServerId>(static_cast<std::size_t>(i)));
  return out;
}

std::vector<GpuId> server_gpus(const ClusterTopology& t, const std::vector<ServerId>& servers) {
  std::vector<GpuId> out;
  for (ServerId s : servers) {
    for (int k = 0; k < t.gpus_per_server(); ++k) out.push_back(t.gpu(s, k));
  }
  return out;
}

Pass chain(std::vector<GpuId> ranks, std::vector<HopOp> ops, StageTag tag, const Region& r, int channels,
           double chunk_size) {
  Pass p;
  p.kind = PassKind::kChain;
  p.tag = tag;
  p.ranks = std::move(ranks);
  p.hop_ops = std::move(ops);
  p.elem_begin = r.begin;
  p.elem_end = r.end;
  p.bytes = r.bytes;
  p.pieces = pipeline_pieces(r.bytes, channels, chunk_size);
  return p;
}

NestedProgram build_nested(const ClusterTopology& t, std::vector<RingLevel> levels, double data_bytes,
                           std::size_t elements, double chunk_size, std::string label) {
  NestedProgram out;
  out.program.label = std::move(label);
  out.program.routing = RoutingPolicy::kBalance;
  const std::vector<RailId>& all = t.rails();
  const int m = static_cast<int>(all.size());
  const int g = t.gpus_per_server();

  double cum = 0.0;
  std::size_t begin = 0;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    cum += levels[k].share;
    const std::size_t end = k + 1 == levels.size()
                                ? elements
                                : std::min(elements, static_cast<std::size_t>(
                                                         std::llround(cum * static_cast<double>(elements))));
    out.regions.push_back(Region{begin, end, levels[k].share * data_bytes});
    begin = end;
  }

  std::vector<int> ag_phase(levels.size(), -1);
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const RingLevel& lv = levels[k];
    if (lv.rails.empty()) throw PlannerError(fmt::format("ring level {} has no rails", k));
    const auto servers = to_servers(lv.members);
    const auto gpus = server_gpus(t, servers);
    CollectiveRequest req;
    req.kind = CollectiveKind::kAllReduce;
    req.bytes = out.regions[k].bytes;
    req.participants = gpus;
    const auto ring = server_major_ring(t, servers, gpus);
    Schedule s = ring_schedule(req, ring, static_cast<int>(lv.rails.size()), chunk_size, elements);
    const int rs = static_cast<int>(out.program.phases.size());
    for (std::size_t i = 0; i < s.passes.size(); ++i) {
      PhaseSpec ph;
      ph.pass = s.passes[i];
      ph.pass.elem_begin = out.regions[k].begin;
      ph.pass.elem_end = out.regions[k].end;
      ph.rails = lv.rails;
      if (i > 0) ph.deps.push_back(rs + static_cast<int>(i) - 1);
      out.program.phases.push_back(std::move(ph));
    }
    ag_phase[k] = static_cast<int>(out.program.phases.size()) - 1;
  }

  // Regions of deeper levels still lack the isolated servers' inputs.
  for (std::size_t k = 1; k < levels.size(); ++k) {
    const Region& r = out.regions[k];
    std::vector<ServerId> excluded;
    for (std::size_t j = 0; j < k; ++j) {
      excluded.push_back(make_id<ServerId>(static_cast<std::size_t>(*levels[j].isolated)));
    }
    const auto ring = to_servers(levels[k].members);

    std::vector<int> chain_deps{ag_phase[k]};
    for (ServerId e : excluded) {
      std::vector<GpuId> ranks;
      for (int l = 1; l < g; ++l) ranks.push_back(t.gpu(e, l));
      ranks.push_back(t.gpu(e, 0));
      PhaseSpec ph;
      ph.pass = chain(ranks, std::vector<HopOp>(static_cast<std::size_t>(g - 1), HopOp::kAdd),
                      StageTag::kIntraReduce, r, m, chunk_size);
      ph.rails = all;
      chain_deps.push_back(static_cast<int>(out.program.phases.size()));
      out.program.phases.push_back(std::move(ph));
    }

    std::vector<GpuId> ranks;
    std::vector<HopOp> ops;
    for (ServerId e : excluded) ranks.push_back(t.gpu(e, 0));
    for (ServerId h : ring) ranks.push_back(t.gpu(h, 0));
    for (ServerId e : excluded) ranks.push_back(t.gpu(e, 0));
    for (std::size_t i = 0; i < excluded.size(); ++i) ops.push_back(HopOp::kAdd);
    while (ops.size() + 1 < ranks.size()) ops.push_back(HopOp::kCopy);
    PhaseSpec contrib;
    contrib.pass = chain(ranks, ops, StageTag::kContribution, r, m, chunk_size);
    contrib.rails = all;
    contrib.deps = chain_deps;
    const int contrib_phase = static_cast<int>(out.program.phases.size());
    out.program.phases.push_back(std::move(contrib));

    std::vector<ServerId> everyone = excluded;
    everyone.insert(everyone.end(), ring.begin(), ring.end());
    for (ServerId s : everyone) {
      std::vector<GpuId> b;
      for (int l = 0; l < g; ++l) b.push_back(t.gpu(s, l));
      PhaseSpec ph;
      ph.pass = chain(b, std::vector<HopOp>(static_cast<std::size_t>(g - 1), HopOp::kCopy),
                      StageTag::kIntraBroadcast, r, m, chunk_size);
      ph.rails = all;
      ph.deps = {contrib_phase};
      out.program.phases.push_back(std::move(ph));
    }
  }
  out.levels = std::move(levels);
  return out;
}

std::vector<RailId> common_rails(const ClusterTopology& t, const HealthMap& h, const std::vector<int>& members) {
  std::set<RailId> common(t.rails().begin(), t.rails().end());
  for (int s : members) {
    const auto own = rail_set(t, h, make_id<ServerId>(static_cast<std::size_t>(s)));
    std::set<RailId> keep;
    std::set_intersection(common.begin(), common.end(), own.begin(), own.end(),
                          std::inserter(keep, keep.end()));
    common = std::move(keep);
  }
  return {common.begin(), common.end()};
}

}  // namespace

NestedProgram plan_two_stage(const ClusterTopology& topology, const HealthMap& health, ServerId degraded,
                             const PartitionPlan& plan, double data_bytes, std::size_t elements,
                             double chunk_size) {
  if (plan.strategy != AllReduceStrategy::kR2ccAllReduce) {
    throw PlannerError("plan_two_stage needs an R2ccAllReduce partition");
  }
  const int n = topology.servers();
  if (n < 3) throw PlannerError("the partial ring needs at least 2 healthy servers (n >= 3)");
  const auto d = static_cast<int>(to_index(degraded));
  if (d < 0 || d >= n) throw PlannerError("degraded server out of range");

  const auto kept = rail_set(topology, health, degraded);
  if (kept.empty()) throw PlannerError("degraded server has no healthy rail; re-rank or exclude it");
  std::vector<RailId> lost;
  for (RailId r : topology.rails()) {
    if (!kept.contains(r)) lost.push_back(r);
  }
  if (lost.empty()) throw PlannerError("degraded server has not lost any rail");

  RingLevel global;
  global.members.resize(static_cast<std::size_t>(n));
  std::iota(global.members.begin(), global.members.end(), 0);
  global.share = 1.0 - plan.y;
  global.rate = (1.0 - plan.inputs.X) * plan.inputs.B;
  global.isolated = d;
  global.partition = plan;
  global.rails.assign(kept.begin(), kept.end());

  RingLevel partial;
  for (int s = 0; s < n; ++s) {
    if (s != d) partial.members.push_back(s);
  }
  partial.share = plan.y;
  partial.rate = plan.inputs.X * plan.inputs.B;
  partial.rails = lost;

  return build_nested(topology, {global, partial}, data_bytes, elements, chunk_size, "r2cc_allreduce");
}

NestedProgram recursive_program(const ClusterTopology& topology, const HealthMap& health, double data_bytes,
                                std::size_t elements, double chunk_size, const RecursiveConfig& cfg) {
  std::vector<double> bw;
  for (int s = 0; s < topology.servers(); ++s) {
    const double b = topology.healthy_bandwidth(make_id<ServerId>(static_cast<std::size_t>(s)), health);
    if (!(b > 0.0)) {
      throw PlannerError(fmt::format("server {} has no healthy NIC; re-rank or exclude it", s));
    }
    bw.push_back(b);
  }
  RecursivePlan plan = recursive_plan(bw, data_bytes, topology.gpus_per_server(), cfg);
  std::set<RailId> used;
  for (auto& lv : plan.levels) {
    const auto common = common_rails(topology, health, lv.members);
    for (RailId r : common) {
      if (!used.contains(r)) lv.rails.push_back(r);
    }
    if (lv.rails.empty()) lv.rails = common;
    if (lv.rails.empty()) lv.rails = topology.rails();
    used.insert(lv.rails.begin(), lv.rails.end());
  }
  return build_nested(topology, std::move(plan.levels), data_bytes, elements, chunk_size, "recursive");
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kBalance: return "balance";
    case Strategy::kHotRepair: return "hot_repair_only";
    case Strategy::kR2ccAllReduce: return "r2cc_allreduce";
    case Strategy::kRecursive: return "recursive";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "balance") return Strategy::kBalance;
  if (name == "hot_repair_only") return Strategy::kHotRepair;
  if (name == "r2cc_allreduce") return Strategy::kR2ccAllReduce;
  if (name == "recursive") return Strategy::kRecursive;
  throw PlannerError(fmt::format("unknown strategy '{}'", name));
}

StrategyChoice select_strategy(const CollectiveRequest& req, const ClusterTopology& topology,
                               const HealthMap& health, const CostParams& cost, CostMode mode,
                               double chunk_size, ThresholdRule rule) {
  req.validate();
  StrategyChoice out;
  const double alpha = mode == CostMode::kAlphaBeta ? cost.alpha : 0.0;
  const int n = topology.servers();
  const int g = topology.gpus_per_server();
  const double ng = static_cast<double>(n) * g;
  const double D = req.bytes;

  double full = 0.0;
  double slowest = 0.0;
  std::vector<ServerId> degraded;
  for (int s = 0; s < n; ++s) {
    const auto id = make_id<ServerId>(static_cast<std::size_t>(s));
    const double cap = topology.server_bandwidth(id);
    const double b = topology.healthy_bandwidth(id, health);
    full = std::max(full, cap);
    slowest = s == 0 ? b : std::min(slowest, b);
    if (b < cap * (1.0 - 1e-12)) degraded.push_back(id);
  }
  if (slowest > 0.0) out.balance_time = 2.0 * (ng - 1.0) * (alpha + D / (ng * slowest));

  if (req.kind != CollectiveKind::kAllReduce) {
    out.reason = "only AllReduce has a partitioned plan";
    return out;
  }
  if (degraded.empty()) {
    out.reason = "no degraded server";
    return out;
  }
  if (!(slowest > 0.0)) {
    out.reason = "a server has no healthy NIC; re-rank or exclude it";
    return out;
  }
  if (degraded.size() == 1) {
    if (n < 3) {
      out.reason = "partial ring needs n >= 3";
      return out;
    }
    const ServerId d = degraded.front();
    PartitionInputs in{n, g, 1.0 - topology.healthy_bandwidth(d, health) / full, D, full};
    const PartitionPlan plan = optimal_partition(in, rule);
    out.partition = plan;
    out.degraded = d;
    if (plan.strategy == AllReduceStrategy::kStandardRing) {
      out.reason = "X at or below the threshold";
      return out;
    }
    const int m = static_cast<int>(topology.rails().size());
    const int pieces = pipeline_pieces(plan.y * D, m, chunk_size);
    const double rounds = std::max(2.0 * (ng - 1.0), 2.0 * ((n - 1.0) * g - 1.0)) + (pieces + n - 1) +
                          (pieces + g - 2);
    out.r2cc_time = plan.t_total + alpha * rounds;
    if (*out.r2cc_time < out.balance_time) {
      out.strategy = Strategy::kR2ccAllReduce;
      out.reason = "partitioned AllReduce predicted faster";
    } else {
      out.reason = "rebalanced ring predicted faster";
    }
    return out;
  }

  std::vector<double> bw;
  for (int s = 0; s < n; ++s) {
    bw.push_back(topology.healthy_bandwidth(make_id<ServerId>(static_cast<std::size_t>(s)), health));
  }
  RecursiveConfig cfg;
  cfg.rule = rule;
  const RecursivePlan plan = recursive_plan(bw, D, g, cfg);
  if (plan.depth() == 0) {
    out.reason = "nesting does not beat the single ring";
    return out;
  }
  const int pieces = pipeline_pieces(D * (1.0 - plan.levels.front().share),
                                     static_cast<int>(topology.rails().size()), chunk_size);
  const double rounds = 2.0 * (ng - 1.0) + plan.depth() * (pieces + n + g);
  out.r2cc_time = plan.predicted_time + alpha * rounds;
  if (*out.r2cc_time < out.balance_time) {
    out.strategy = Strategy::kRecursive;
    out.reason = "nested rings predicted faster";
  } else {
    out.reason = "rebalanced ring predicted faster";
  }
  return out;
}

}  // namespace ftsim
