// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

// ftsim command line: run, sweep, plan, rerank.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ftsim/allreduce_opt.hpp"
#include "ftsim/report.hpp"
#include "ftsim/rerank.hpp"
#include "ftsim/runner.hpp"
#include "ftsim/scenario.hpp"

namespace {

using ftsim::Scenario;
using nlohmann::ordered_json;

constexpr int kExitRunFailed = 3;
constexpr int kExitSchema = 2;

struct Common {
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string format = "json";
  bool no_plots = false;
};

void add_common(CLI::App* cmd, Common& c, bool scenario_required) {
  auto* opt = cmd->add_option("--scenario", c.scenario, "Scenario file (JSON)");
  if (scenario_required) opt->required();
  cmd->add_option("--seed", c.seed, "Override the scenario seed");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--format", c.format, "Report format")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
  cmd->add_flag("--no-plots", c.no_plots, "Skip SVG plots");
}

Scenario load(const Common& c) {
  Scenario sc = ftsim::parse_scenario(c.scenario);
  if (c.seed) {
    sc.seed = *c.seed;
    if (sc.monte_carlo) sc.monte_carlo->seed = *c.seed;
  }
  return sc;
}

int finish(const ftsim::Report& report, const Common& c) {
  for (const auto& path : ftsim::emit(report, ftsim::parse_report_format(c.format), c.out, !c.no_plots)) {
    std::cout << path.string() << "\n";
  }
  for (const auto& note : report.notes) std::cerr << "note: " << note << "\n";
  for (const auto& col : report.collectives) {
    if (!col.ok || col.integrity == "fail") {
      std::cerr << fmt::format("collective {} ({}) failed: {}\n", col.index, ftsim::to_string(col.kind),
                               col.error.empty() ? col.integrity : col.error);
      return kExitRunFailed;
    }
  }
  return 0;
}

void write_or_print(const ordered_json& j, const Common& c, const std::string& name) {
  const std::string text = j.dump(2) + "\n";
  if (c.out.empty() || c.out == "-") {
    std::cout << text;
    return;
  }
  std::filesystem::create_directories(c.out);
  const auto path = std::filesystem::path(c.out) / name;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  std::cout << path.string() << "\n";
}

// Healthy rails per server after the scenario's pre-existing faults.
ftsim::HealthMap preexisting_health(const Scenario& sc, const ftsim::ClusterTopology& topo) {
  ftsim::HealthMap h = topo.healthy_map();
  for (const auto& f : sc.faults) {
    if (!f.preexisting && !(f.event.time <= 0.0 && f.event.permanent)) continue;
    if (const auto* n = std::get_if<ftsim::NicTarget>(&f.event.target)) h.set_nic(n->nic, false);
  }
  return h;
}

std::vector<std::set<ftsim::RailId>> parse_rail_sets(const std::string& text) {
  std::vector<std::set<ftsim::RailId>> out;
  std::stringstream ss(text);
  std::string node;
  while (std::getline(ss, node, ';')) {
    std::set<ftsim::RailId> rails;
    std::stringstream ns(node);
    std::string r;
    while (std::getline(ns, r, ',')) {
      if (!r.empty()) rails.insert(std::stoi(r));
    }
    out.push_back(std::move(rails));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ftsim: fault-tolerant collective communication simulator"};
  app.require_subcommand(1);

  Common run_opts;
  auto* run_cmd = app.add_subcommand("run", "Execute a scenario and report against its fault-free baseline");
  add_common(run_cmd, run_opts, true);

  Common sweep_opts;
  auto* sweep_cmd = app.add_subcommand("sweep", "Monte Carlo sweep over random NIC failures");
  add_common(sweep_cmd, sweep_opts, true);

  Common plan_opts;
  plan_opts.out = "-";
  int plan_n = 0;
  int plan_g = 8;
  double plan_x = 0.0;
  double plan_d = 1.0;
  double plan_b = 1.0;
  bool practical = false;
  std::vector<double> bandwidths;
  auto* plan_cmd = app.add_subcommand("plan", "Partition plan for a degraded server");
  add_common(plan_cmd, plan_opts, false);
  plan_cmd->add_option("--n", plan_n, "Servers");
  plan_cmd->add_option("--g", plan_g, "GPUs per server")->capture_default_str();
  plan_cmd->add_option("--x", plan_x, "Lost bandwidth fraction of the degraded server");
  plan_cmd->add_option("--bytes", plan_d, "Message size D")->capture_default_str();
  plan_cmd->add_option("--bandwidth", plan_b, "Healthy per-server bandwidth B")->capture_default_str();
  plan_cmd->add_option("--bandwidths", bandwidths, "Per-server bandwidths for a nested plan");
  plan_cmd->add_flag("--practical", practical, "Use the flat 1/3 cut instead of the exact threshold");

  Common rerank_opts;
  rerank_opts.out = "-";
  std::string rails_text;
  std::vector<int> order;
  auto* rerank_cmd = app.add_subcommand("rerank", "Repair a ring order around rail mismatches");
  add_common(rerank_cmd, rerank_opts, false);
  rerank_cmd->add_option("--rails", rails_text, "Rail sets per node, e.g. \"0,1;1;0;0,1\"");
  rerank_cmd->add_option("--order", order, "Initial ring order (defaults to 0..n-1)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) return finish(ftsim::run(load(run_opts)), run_opts);
    if (*sweep_cmd) {
      const Scenario sc = load(sweep_opts);
      if (!sc.monte_carlo) throw ftsim::ScenarioError("monte_carlo", "required for sweep");
      return finish(ftsim::sweep(sc), sweep_opts);
    }
    if (*plan_cmd) {
      const auto rule = practical ? ftsim::ThresholdRule::kPractical : ftsim::ThresholdRule::kExact;
      ordered_json j;
      if (!bandwidths.empty()) {
        ftsim::RecursiveConfig cfg;
        cfg.rule = rule;
        const auto plan = ftsim::recursive_plan(bandwidths, plan_d, plan_g, cfg);
        j["predicted_time"] = plan.predicted_time;
        j["single_ring_time"] = plan.single_ring_time;
        j["fell_back"] = plan.fell_back;
        j["levels"] = ordered_json::array();
        for (const auto& lv : plan.levels) {
          ordered_json l;
          l["members"] = lv.members;
          l["share"] = lv.share;
          l["rate"] = lv.rate;
          l["isolated"] = lv.isolated ? ordered_json(*lv.isolated) : ordered_json(nullptr);
          l["partition"] = lv.partition ? ftsim::to_json(*lv.partition) : ordered_json(nullptr);
          j["levels"].push_back(std::move(l));
        }
      } else if (plan_n > 0) {
        j = ftsim::to_json(ftsim::optimal_partition(ftsim::PartitionInputs{plan_n, plan_g, plan_x, plan_d, plan_b}, rule));
      } else {
        if (plan_opts.scenario.empty()) throw std::invalid_argument("plan needs --scenario, --n or --bandwidths");
        const Scenario sc = load(plan_opts);
        const auto topo = ftsim::build_topology(sc.topology);
        const auto health = preexisting_health(sc, topo);
        ftsim::CollectiveRequest req = sc.workload.front().request;
        if (req.participants.empty()) req.participants = ftsim::all_ranks(topo);
        const auto choice = ftsim::select_strategy(req, topo, health, sc.cost, sc.cost_mode, sc.knobs.chunk_size,
                                                   practical ? rule : sc.knobs.threshold_rule);
        j["strategy"] = ftsim::to_string(choice.strategy);
        j["reason"] = choice.reason;
        j["balance_time"] = choice.balance_time;
        j["r2cc_time"] = choice.r2cc_time ? ordered_json(*choice.r2cc_time) : ordered_json(nullptr);
        j["partition"] = choice.partition ? ftsim::to_json(*choice.partition) : ordered_json(nullptr);
      }
      write_or_print(j, plan_opts, "plan.json");
      return 0;
    }
    if (*rerank_cmd) {
      ftsim::LogicalRing ring;
      if (!rails_text.empty()) {
        const auto sets = parse_rail_sets(rails_text);
        for (std::size_t i = 0; i < sets.size(); ++i) ring.rail_sets[static_cast<int>(i)] = sets[i];
        if (order.empty()) {
          for (std::size_t i = 0; i < sets.size(); ++i) order.push_back(static_cast<int>(i));
        }
        ring.order = order;
      } else {
        if (rerank_opts.scenario.empty()) throw std::invalid_argument("rerank needs --scenario or --rails");
        const Scenario sc = load(rerank_opts);
        const auto topo = ftsim::build_topology(sc.topology);
        ring = ftsim::make_logical_ring(topo, preexisting_health(sc, topo), order);
      }
      const auto res = ftsim::rerank_detailed(ring);
      ordered_json j;
      j["input"] = ring.order;
      j["output"] = res.ring.order;
      j["floor"] = res.floor;
      j["relocations"] = ordered_json::array();
      for (const auto& r : res.relocations) {
        j["relocations"].push_back(ordered_json{{"bridge", r.bridge}, {"u", r.u}, {"v", r.v}});
      }
      j["unrepaired"] = ordered_json::array();
      for (const auto& c : res.unrepaired) j["unrepaired"].push_back(ordered_json{{"u", c.u}, {"v", c.v}, {"gap", c.gap}});
      j["residual"] = ordered_json::array();
      for (const auto& c : res.residual) j["residual"].push_back(ordered_json{{"u", c.u}, {"v", c.v}, {"gap", c.gap}});
      write_or_print(j, rerank_opts, "rerank.json");
      return 0;
    }
  } catch (const ftsim::ScenarioError& e) {
    std::cerr << "scenario error: " << e.what() << "\n";
    return kExitSchema;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
