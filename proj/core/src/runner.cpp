// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "ftsim/rerank.hpp"

namespace ftsim {

namespace {

ExecConfig exec_config(const Scenario& sc) {
  ExecConfig cfg;
  cfg.cost = sc.cost;
  cfg.mode = sc.cost_mode;
  cfg.detection.oob_latency = sc.knobs.oob_latency;
  cfg.detection.probe_timeout = sc.knobs.probe_timeout;
  cfg.detection.probe_rtt = sc.knobs.probe_rtt;
  cfg.detection.poll_timeout = sc.knobs.poll_timeout;
  cfg.detection.oob_enabled = sc.knobs.oob_enabled;
  cfg.registration.multi_registration = sc.knobs.multi_registration;
  cfg.registration.cost_per_buffer = sc.knobs.registration_cost;
  cfg.chunk_size = sc.knobs.chunk_size;
  cfg.spine_penalty = sc.knobs.spine_penalty;
  cfg.verify = sc.knobs.verify;
  return cfg;
}

struct Built {
  Program program;
  std::string strategy;
  std::string reason;
  std::optional<PartitionPlan> partition;
  int levels = 1;
  std::vector<int> order;
};

std::vector<int> degraded_servers(const ClusterTopology& topo, const HealthMap& known) {
  std::vector<int> out;
  for (int s = 0; s < topo.servers(); ++s) {
    const auto id = make_id<ServerId>(static_cast<std::size_t>(s));
    if (topo.healthy_bandwidth(id, known) < topo.server_bandwidth(id) * (1.0 - 1e-12)) out.push_back(s);
  }
  return out;
}

class Builder {
 public:
  Builder(const Scenario& sc, const ClusterTopology& topo, const HealthMap& known, std::vector<std::string>& notes)
      : sc_(sc), topo_(topo), known_(known), notes_(notes) {}

  Built build(const CollectiveRequest& req, std::size_t elements) {
    const bool whole = req.kind == CollectiveKind::kAllReduce &&
                       static_cast<int>(req.participants.size()) == topo_.total_gpus();
    switch (sc_.strategy) {
      case StrategyMode::kHotRepairOnly:
        return ring(req, elements, RoutingPolicy::kHotRepair, "hot_repair_only", "fixed by scenario");
      case StrategyMode::kBalance:
        return ring(req, elements, RoutingPolicy::kBalance, "balance", "fixed by scenario");
      case StrategyMode::kRecursive:
        if (!whole) return ring(req, elements, RoutingPolicy::kBalance, "balance", "recursive plans cover whole-cluster AllReduce only");
        return recursive(req, elements, "fixed by scenario");
      case StrategyMode::kR2ccAllReduce:
        if (!whole) return ring(req, elements, RoutingPolicy::kBalance, "balance", "partitioned plans cover whole-cluster AllReduce only");
        return partitioned(req, elements);
      case StrategyMode::kAuto: break;
    }
    if (!whole) {
      return ring(req, elements, RoutingPolicy::kBalance, "balance",
                  req.kind == CollectiveKind::kAllReduce ? "partial participant set" : "only AllReduce has a partitioned plan");
    }
    const StrategyChoice choice = select_strategy(req, topo_, known_, sc_.cost, sc_.cost_mode, sc_.knobs.chunk_size,
                                                  sc_.knobs.threshold_rule);
    note_threshold(choice.partition);
    Built b;
    switch (choice.strategy) {
      case Strategy::kR2ccAllReduce: {
        NestedProgram np = plan_two_stage(topo_, known_, *choice.degraded, *choice.partition, req.bytes, elements,
                                          sc_.knobs.chunk_size);
        b = nested(std::move(np), "r2cc_allreduce", choice.reason);
        b.partition = choice.partition;
        return b;
      }
      case Strategy::kRecursive:
        return recursive(req, elements, choice.reason);
      default:
        b = ring(req, elements, RoutingPolicy::kBalance, "balance", choice.reason);
        b.partition = choice.partition;
        return b;
    }
  }

 private:
  std::vector<RailId> channel_rails(int channels) const {
    const auto& rails = topo_.rails();
    if (channels <= 0) return rails;
    std::vector<RailId> out;
    for (int c = 0; c < channels; ++c) out.push_back(rails[static_cast<std::size_t>(c) % rails.size()]);
    return out;
  }

  std::vector<int> server_order(const CollectiveRequest& req) {
    std::set<int> servers;
    for (GpuId gpu : req.participants) servers.insert(static_cast<int>(to_index(topo_.server_of(gpu))));
    std::vector<int> order(servers.begin(), servers.end());
    if (!sc_.knobs.rerank || order.size() < 3) return order;
    const RerankResult rr = rerank_detailed(make_logical_ring(topo_, known_, order));
    if (!rr.residual.empty()) {
      notes_.push_back(fmt::format("re-ranking left {} adjacent pair(s) below the rail floor", rr.residual.size()));
    }
    return rr.ring.order;
  }

  Built ring(const CollectiveRequest& req, std::size_t elements, RoutingPolicy policy, std::string name,
             std::string reason) {
    Built b;
    b.order = server_order(req);
    std::vector<ServerId> servers;
    for (int s : b.order) servers.push_back(make_id<ServerId>(static_cast<std::size_t>(s)));
    const auto order = server_major_ring(topo_, servers, req.participants);
    const auto rails = channel_rails(req.channels);
    const Schedule s = ring_schedule(req, order, static_cast<int>(rails.size()), sc_.knobs.chunk_size, elements);
    b.program = make_program(s, policy, rails, std::string(to_string(req.kind)));
    b.strategy = std::move(name);
    b.reason = std::move(reason);
    return b;
  }

  Built nested(NestedProgram np, std::string name, std::string reason) {
    Built b;
    b.program = std::move(np.program);
    b.levels = static_cast<int>(np.levels.size());
    for (int s = 0; s < topo_.servers(); ++s) b.order.push_back(s);
    b.strategy = std::move(name);
    b.reason = std::move(reason);
    return b;
  }

  Built recursive(const CollectiveRequest& req, std::size_t elements, std::string reason) {
    RecursiveConfig cfg;
    cfg.rule = sc_.knobs.threshold_rule;
    return nested(recursive_program(topo_, known_, req.bytes, elements, sc_.knobs.chunk_size, cfg), "recursive",
                  std::move(reason));
  }

  Built partitioned(const CollectiveRequest& req, std::size_t elements) {
    const auto degraded = degraded_servers(topo_, known_);
    if (degraded.empty()) {
      return ring(req, elements, RoutingPolicy::kBalance, "balance", "no degraded server");
    }
    if (degraded.size() > 1) return recursive(req, elements, "several degraded servers");
    const auto d = make_id<ServerId>(static_cast<std::size_t>(degraded.front()));
    double full = 0.0;
    for (int s = 0; s < topo_.servers(); ++s) {
      full = std::max(full, topo_.server_bandwidth(make_id<ServerId>(static_cast<std::size_t>(s))));
    }
    const PartitionInputs in{topo_.servers(), topo_.gpus_per_server(), 1.0 - topo_.healthy_bandwidth(d, known_) / full,
                             req.bytes, full};
    const PartitionPlan plan = optimal_partition(in, sc_.knobs.threshold_rule);
    note_threshold(plan);
    if (plan.strategy == AllReduceStrategy::kStandardRing) {
      Built b = ring(req, elements, RoutingPolicy::kBalance, "balance", "X at or below the threshold");
      b.partition = plan;
      return b;
    }
    Built b = nested(plan_two_stage(topo_, known_, d, plan, req.bytes, elements, sc_.knobs.chunk_size),
                     "r2cc_allreduce", "fixed by scenario");
    b.partition = plan;
    return b;
  }

  void note_threshold(const std::optional<PartitionPlan>& plan) {
    if (!plan || plan->strategy != AllReduceStrategy::kStandardRing) return;
    notes_.push_back(fmt::format("degraded server at X={:.6g} is at or below the {} threshold {:.6g}; the model keeps "
                                 "the standard ring",
                                 plan->inputs.X, to_string(plan->rule), plan->threshold));
  }

  const Scenario& sc_;
  const ClusterTopology& topo_;
  const HealthMap& known_;
  std::vector<std::string>& notes_;
};

std::size_t element_count(const Scenario& sc, const CollectiveRequest& req, int rails) {
  if (sc.knobs.elements > 0) return sc.knobs.elements;
  const int c = req.channels > 0 ? req.channels : rails;
  return std::max<std::size_t>(64, req.participants.size() * static_cast<std::size_t>(c) * 2);
}

struct WorkloadRun {
  std::vector<CollectiveReport> collectives;
  std::vector<std::string> notes;
};

WorkloadRun run_workload(const Scenario& sc, bool with_faults) {
  if (sc.workload.empty()) throw ScenarioError("workload", "must hold at least one collective");
  const ClusterTopology topo = build_topology(sc.topology);
  Runtime rt(topo, exec_config(sc), sc.seed);
  if (with_faults) {
    for (const auto& f : sc.faults) {
      if (f.preexisting) {
        rt.apply_preexisting(f.event.target);
      } else {
        rt.schedule_fault(f.event);
      }
    }
  }
  WorkloadRun out;
  std::vector<std::size_t> idx(sc.workload.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return sc.workload[a].issue_time < sc.workload[b].issue_time;
  });
  for (std::size_t i : idx) {
    const WorkloadItem& item = sc.workload[i];
    CollectiveReport cr;
    cr.index = static_cast<int>(i);
    cr.kind = item.request.kind;
    cr.bytes = item.request.bytes;
    cr.issue_time = item.issue_time;
    CollectiveRequest req = item.request;
    if (req.participants.empty()) req.participants = all_ranks(topo);
    cr.participants = static_cast<int>(req.participants.size());
    try {
      if (item.issue_time > rt.engine().now()) rt.engine().run_until(item.issue_time);
      req.validate();
      const std::size_t elements = element_count(sc, req, static_cast<int>(topo.rails().size()));
      Builder builder(sc, topo, rt.known(), out.notes);
      Built b = builder.build(req, elements);
      cr.strategy = b.strategy;
      cr.strategy_reason = b.reason;
      cr.partition = b.partition;
      cr.ring_levels = b.levels;
      cr.server_order = b.order;

      GpuBuffers buffers;
      RankBuffers inputs;
      if (sc.knobs.verify) {
        inputs = make_inputs(req, elements, sc.seed * 1000003ULL + i);
        buffers.resize(static_cast<std::size_t>(topo.total_gpus()));
        for (std::size_t p = 0; p < req.participants.size(); ++p) {
          buffers[to_index(req.participants[p])] = inputs[p];
        }
      }
      const ExecutionResult res = rt.execute(b.program, item.issue_time, sc.knobs.verify ? &buffers : nullptr);
      cr.start = res.start;
      cr.end = res.end;
      cr.makespan = res.makespan();
      cr.ok = res.ok;
      cr.error = res.error;
      cr.rounds = res.rounds;
      cr.interrupted_rounds = res.interrupted_rounds;
      cr.migrations = res.migrations;
      cr.traffic = res.traffic;
      cr.detections = res.detections;
      if (!res.ok) {
        cr.integrity = "not_completed";
      } else if (!sc.knobs.verify) {
        cr.integrity = "skipped";
      } else {
        RankBuffers got;
        for (GpuId gpu : req.participants) got.push_back(buffers[to_index(gpu)]);
        cr.integrity = outputs_match(oracle(req, inputs), extract_outputs(req, got)) ? "pass" : "fail";
      }
    } catch (const std::exception& e) {
      cr.ok = false;
      cr.error = e.what();
      cr.integrity = "not_completed";
      if (cr.strategy.empty()) cr.strategy = std::string(to_string(sc.strategy));
    }
    out.collectives.push_back(std::move(cr));
  }
  std::sort(out.collectives.begin(), out.collectives.end(),
            [](const CollectiveReport& a, const CollectiveReport& b) { return a.index < b.index; });
  return out;
}

void dedupe(std::vector<std::string>& notes) {
  std::vector<std::string> out;
  for (auto& n : notes) {
    if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(std::move(n));
  }
  notes = std::move(out);
}

double total_makespan(const std::vector<CollectiveReport>& cs, bool* all_ok) {
  double sum = 0.0;
  bool ok = true;
  for (const auto& c : cs) {
    ok = ok && c.ok;
    sum += c.makespan;
  }
  if (all_ok != nullptr) *all_ok = ok;
  return sum;
}

}  // namespace

Report run(const Scenario& scenario) {
  const ClusterTopology topo = build_topology(scenario.topology);
  Report report;
  report.scenario = scenario.name;
  report.seed = scenario.seed;
  report.strategy = std::string(to_string(scenario.strategy));
  report.traffic.resize(static_cast<std::size_t>(topo.total_nics()), static_cast<std::size_t>(topo.servers()));

  WorkloadRun faulted = run_workload(scenario, true);
  const WorkloadRun baseline = run_workload(scenario, false);
  for (std::size_t i = 0; i < faulted.collectives.size(); ++i) {
    auto& c = faulted.collectives[i];
    c.baseline_makespan = baseline.collectives[i].makespan;
    c.overhead = c.ok && c.baseline_makespan > 0.0 ? c.makespan / c.baseline_makespan - 1.0 : 0.0;
    report.traffic.merge(c.traffic);
    if (c.ok) {
      report.makespan += c.makespan;
      report.baseline_makespan += c.baseline_makespan;
    }
  }
  report.overhead = report.baseline_makespan > 0.0 ? report.makespan / report.baseline_makespan - 1.0 : 0.0;
  report.collectives = std::move(faulted.collectives);
  report.notes = std::move(faulted.notes);
  dedupe(report.notes);
  return report;
}

std::vector<NicId> sweep_failures(const ClusterTopology& topology, std::uint64_t seed, int trial, int k) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial)};
  std::mt19937_64 rng(seq);
  std::vector<int> perm(static_cast<std::size_t>(topology.total_nics()));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  std::vector<int> alive(static_cast<std::size_t>(topology.servers()), topology.nics_per_server());
  std::vector<NicId> out;
  for (int id : perm) {
    if (static_cast<int>(out.size()) >= k) break;
    const auto nic = make_id<NicId>(static_cast<std::size_t>(id));
    auto& left = alive[to_index(topology.nic(nic).server)];
    if (left <= 1) continue;
    --left;
    out.push_back(nic);
  }
  return out;
}

Report sweep(const Scenario& scenario) {
  if (!scenario.monte_carlo) throw ScenarioError("monte_carlo", "required for sweep");
  const MonteCarlo& mc = *scenario.monte_carlo;
  const ClusterTopology topo = build_topology(scenario.topology);
  Report report;
  report.scenario = scenario.name;
  report.seed = mc.seed;
  report.strategy = std::string(to_string(scenario.strategy));
  report.traffic.resize(static_cast<std::size_t>(topo.total_nics()), static_cast<std::size_t>(topo.servers()));
  if (!scenario.faults.empty()) report.notes.push_back("explicit faults are replaced by sampled NIC failures");

  Scenario clean = scenario;
  clean.faults.clear();
  const WorkloadRun base = run_workload(clean, false);
  bool base_ok = true;
  report.baseline_makespan = total_makespan(base.collectives, &base_ok);
  if (!base_ok) throw std::runtime_error("fault-free baseline did not complete");

  struct Job {
    int k = 0;
    int trial = 0;
    bool ok = false;
    double overhead = 0.0;
  };
  std::vector<Job> jobs;
  for (int k : mc.k) {
    for (int t = 0; t < mc.trials; ++t) jobs.push_back(Job{k, t});
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      Job& job = jobs[j];
      Scenario sc = clean;
      for (NicId nic : sweep_failures(topo, mc.seed, job.trial, job.k)) {
        ScheduledFault f;
        f.preexisting = true;
        f.event.target = NicTarget{nic};
        sc.faults.push_back(f);
      }
      const WorkloadRun r = run_workload(sc, true);
      const double ms = total_makespan(r.collectives, &job.ok);
      job.overhead = ms / report.baseline_makespan - 1.0;
    }
  };
  const int threads = std::max(1, std::min<int>(mc.threads, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int i = 1; i < threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (int k : mc.k) {
    SweepPoint pt;
    pt.k = k;
    std::vector<double> v;
    for (const Job& job : jobs) {
      if (job.k != k) continue;
      ++pt.trials;
      if (job.ok) {
        v.push_back(job.overhead);
      } else {
        ++pt.failed;
      }
    }
    pt.completed = static_cast<int>(v.size());
    if (!v.empty()) {
      std::sort(v.begin(), v.end());
      pt.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      auto rank = [&](double q) {
        const auto r = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
        return v[std::clamp<std::size_t>(r, 1, v.size()) - 1];
      };
      pt.p50 = rank(0.5);
      pt.p90 = rank(0.9);
      pt.max = v.back();
    }
    report.sweep.push_back(pt);
  }
  return report;
}

}  // namespace ftsim
