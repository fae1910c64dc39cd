// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/scenario.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace ftsim {

using nlohmann::json;

std::string_view to_string(StrategyMode mode) {
  switch (mode) {
    case StrategyMode::kAuto: return "auto";
    case StrategyMode::kHotRepairOnly: return "hot_repair_only";
    case StrategyMode::kBalance: return "balance";
    case StrategyMode::kR2ccAllReduce: return "r2cc_allreduce";
    case StrategyMode::kRecursive: return "recursive";
  }
  return "unknown";
}

std::optional<StrategyMode> parse_strategy_mode(std::string_view name) {
  for (auto m : {StrategyMode::kAuto, StrategyMode::kHotRepairOnly, StrategyMode::kBalance,
                 StrategyMode::kR2ccAllReduce, StrategyMode::kRecursive}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

NicId nic_ref(const ClusterTopology& topology, int server, int local) {
  if (server < 0 || server >= topology.servers()) {
    throw std::out_of_range(fmt::format("server {} out of range", server));
  }
  const auto nics = topology.server_nics(make_id<ServerId>(static_cast<std::size_t>(server)));
  if (local < 0 || local >= static_cast<int>(nics.size())) {
    throw std::out_of_range(fmt::format("NIC {} out of range on server {}", local, server));
  }
  return nics[static_cast<std::size_t>(local)].id;
}

namespace {

// Typed access to one JSON object with field-level diagnostics.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ScenarioError(path_, msg); }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ScenarioError(sub(key), msg);
  }

  std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  const json& raw(const std::string& key) const { return j_.at(key); }

  void allow(std::initializer_list<std::string_view> keys) const {
    const std::set<std::string_view> ok(keys);
    for (const auto& [k, v] : j_.items()) {
      if (!ok.contains(k)) fail(k, "unknown field");
    }
  }

  double number(const std::string& key, double def) const {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }

  double positive(const std::string& key, double def) const {
    const double v = number(key, def);
    if (!(v > 0.0)) fail(key, "must be > 0");
    return v;
  }

  double non_negative(const std::string& key, double def) const {
    const double v = number(key, def);
    if (!(v >= 0.0)) fail(key, "must be >= 0");
    return v;
  }

  long long integer(const std::string& key, long long def) const {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    return v.get<long long>();
  }

  bool boolean(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, const std::string& def) const {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }

  const json& array(const std::string& key) const {
    const json& v = j_.at(key);
    if (!v.is_array()) fail(key, "expected an array");
    return v;
  }

 private:
  const json& j_;
  std::string path_;
};

int as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ScenarioError(path, "expected an integer");
  return v.get<int>();
}

TopologySpec parse_topology(const Node& t) {
  t.allow({"servers", "gpus_per_server", "nics_per_server", "nic_bandwidth", "numa_domains", "nvlink_bw",
           "cpu_interconnect_bw", "pcie_bw", "nics", "gpu_numa"});
  const int servers = static_cast<int>(t.integer("servers", 2));
  const int g = static_cast<int>(t.integer("gpus_per_server", 8));
  const int m = static_cast<int>(t.integer("nics_per_server", 8));
  const double bw = t.positive("nic_bandwidth", 5e10);
  const int numa = static_cast<int>(t.integer("numa_domains", 2));
  if (servers < 1) t.fail("servers", "must be >= 1");
  if (g < 1) t.fail("gpus_per_server", "must be >= 1");
  if (m < 1) t.fail("nics_per_server", "must be >= 1");
  if (numa < 1) t.fail("numa_domains", "must be >= 1");
  TopologySpec spec = TopologySpec::uniform(servers, g, m, bw, numa);
  spec.nvlink_bw = t.positive("nvlink_bw", spec.nvlink_bw);
  spec.cpu_interconnect_bw = t.positive("cpu_interconnect_bw", spec.cpu_interconnect_bw);
  spec.pcie_bw = t.positive("pcie_bw", spec.pcie_bw);
  if (t.has("gpu_numa")) {
    spec.gpu_numa.clear();
    const json& arr = t.array("gpu_numa");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      spec.gpu_numa.push_back(as_int(arr[i], t.sub(fmt::format("gpu_numa[{}]", i))));
    }
  }
  if (t.has("nics")) {
    spec.nics.clear();
    const json& arr = t.array("nics");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const Node n(arr[i], t.sub(fmt::format("nics[{}]", i)));
      n.allow({"local_id", "rail", "numa", "bandwidth", "affinity_gpu", "pcie_hops"});
      NicSpec nic;
      if (n.has("local_id")) nic.local_id = static_cast<int>(n.integer("local_id", 0));
      nic.rail = static_cast<RailId>(n.integer("rail", static_cast<long long>(i)));
      nic.numa = static_cast<NumaId>(n.integer("numa", 0));
      nic.bandwidth = n.positive("bandwidth", bw);
      nic.affinity_gpu = static_cast<int>(n.integer("affinity_gpu", 0));
      if (n.has("pcie_hops")) {
        const json& hops = n.array("pcie_hops");
        for (std::size_t k = 0; k < hops.size(); ++k) {
          nic.pcie_hops.push_back(as_int(hops[k], n.sub(fmt::format("pcie_hops[{}]", k))));
        }
      }
      spec.nics.push_back(std::move(nic));
    }
  }
  try {
    (void)build_topology(spec);
  } catch (const TopologyError& e) {
    throw ScenarioError("topology", e.what());
  }
  return spec;
}

NicId parse_nic(const json& v, const ClusterTopology& topo, const std::string& path) {
  try {
    if (v.is_number_integer()) {
      const int id = v.get<int>();
      if (id < 0 || id >= topo.total_nics()) throw std::out_of_range(fmt::format("NIC id {} out of range", id));
      return make_id<NicId>(static_cast<std::size_t>(id));
    }
    if (v.is_array() && v.size() == 2) {
      return nic_ref(topo, as_int(v[0], path + "[0]"), as_int(v[1], path + "[1]"));
    }
  } catch (const std::out_of_range& e) {
    throw ScenarioError(path, e.what());
  }
  throw ScenarioError(path, "expected a NIC id or [server, local]");
}

FaultTarget parse_target(const Node& t, const ClusterTopology& topo) {
  t.allow({"nic", "link", "transport"});
  const int kinds = static_cast<int>(t.has("nic")) + static_cast<int>(t.has("link")) +
                    static_cast<int>(t.has("transport"));
  if (kinds != 1) t.fail("expected exactly one of nic, link, transport");
  if (t.has("nic")) return NicTarget{parse_nic(t.raw("nic"), topo, t.sub("nic"))};
  if (t.has("link")) {
    const json& l = t.raw("link");
    if (!l.is_array() || l.size() != 2) t.fail("link", "expected [nic, nic]");
    return LinkTarget{parse_nic(l[0], topo, t.sub("link[0]")), parse_nic(l[1], topo, t.sub("link[1]"))};
  }
  const Node c(t.raw("transport"), t.sub("transport"));
  c.allow({"src", "dst", "channel"});
  for (const char* key : {"src", "dst"}) {
    const auto s = c.integer(key, -1);
    if (s < 0 || s >= topo.servers()) c.fail(key, "server out of range");
  }
  const auto rail = c.integer("channel", 0);
  const auto& rails = topo.rails();
  if (std::find(rails.begin(), rails.end(), static_cast<RailId>(rail)) == rails.end()) {
    c.fail("channel", "no such rail");
  }
  return TransportTarget{ConnectionKey{make_id<ServerId>(static_cast<std::size_t>(c.integer("src", 0))),
                                       make_id<ServerId>(static_cast<std::size_t>(c.integer("dst", 0))),
                                       static_cast<RailId>(rail)}};
}

}  // namespace

Scenario parse_scenario_json(const json& doc) {
  const Node root(doc, "");
  root.allow({"name", "topology", "workload", "faults", "monte_carlo", "strategy", "cost", "knobs", "seed"});
  Scenario sc;
  sc.name = root.text("name", sc.name);
  if (!root.has("topology")) root.fail("topology", "required");
  sc.topology = parse_topology(Node(root.raw("topology"), "topology"));
  const ClusterTopology topo = build_topology(sc.topology);
  const auto seed = root.integer("seed", 0);
  if (seed < 0) root.fail("seed", "must be >= 0");
  sc.seed = static_cast<std::uint64_t>(seed);

  const std::string strategy = root.text("strategy", "auto");
  const auto mode = parse_strategy_mode(strategy);
  if (!mode) {
    root.fail("strategy", fmt::format("unknown value '{}' (expected auto, hot_repair_only, balance, "
                                      "r2cc_allreduce, recursive)",
                                      strategy));
  }
  sc.strategy = *mode;

  if (root.has("cost")) {
    const Node c(root.raw("cost"), "cost");
    c.allow({"alpha", "beta", "mode"});
    sc.cost.alpha = c.non_negative("alpha", sc.cost.alpha);
    sc.cost.beta = c.positive("beta", sc.cost.beta);
    const std::string m = c.text("mode", "alpha_beta");
    if (m == "alpha_beta") {
      sc.cost_mode = CostMode::kAlphaBeta;
    } else if (m == "bandwidth_only") {
      sc.cost_mode = CostMode::kBandwidthOnly;
    } else {
      c.fail("mode", fmt::format("unknown value '{}' (expected alpha_beta, bandwidth_only)", m));
    }
  }

  if (root.has("knobs")) {
    const Node k(root.raw("knobs"), "knobs");
    k.allow({"chunk_size", "oob_latency", "probe_timeout", "probe_rtt", "poll_timeout", "oob_enabled",
             "multi_registration", "registration_cost", "spine_penalty", "verify", "elements", "threshold_rule",
             "rerank"});
    Knobs& kn = sc.knobs;
    kn.chunk_size = k.positive("chunk_size", kn.chunk_size);
    kn.oob_latency = k.non_negative("oob_latency", kn.oob_latency);
    kn.probe_timeout = k.positive("probe_timeout", kn.probe_timeout);
    kn.probe_rtt = k.non_negative("probe_rtt", kn.probe_rtt);
    kn.poll_timeout = k.positive("poll_timeout", kn.poll_timeout);
    kn.oob_enabled = k.boolean("oob_enabled", kn.oob_enabled);
    kn.multi_registration = k.boolean("multi_registration", kn.multi_registration);
    kn.registration_cost = k.non_negative("registration_cost", kn.registration_cost);
    kn.spine_penalty = k.positive("spine_penalty", kn.spine_penalty);
    if (kn.spine_penalty > 1.0) k.fail("spine_penalty", "must be <= 1");
    kn.verify = k.boolean("verify", kn.verify);
    const auto elements = k.integer("elements", 0);
    if (elements < 0) k.fail("elements", "must be >= 0");
    kn.elements = static_cast<std::size_t>(elements);
    const std::string rule = k.text("threshold_rule", "exact");
    if (rule == "exact") {
      kn.threshold_rule = ThresholdRule::kExact;
    } else if (rule == "practical") {
      kn.threshold_rule = ThresholdRule::kPractical;
    } else {
      k.fail("threshold_rule", fmt::format("unknown value '{}' (expected exact, practical)", rule));
    }
    kn.rerank = k.boolean("rerank", kn.rerank);
  }

  if (root.has("workload")) {
    const json& arr = root.array("workload");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const Node w(arr[i], fmt::format("workload[{}]", i));
      w.allow({"kind", "bytes", "at", "participants", "root", "channels"});
      WorkloadItem item;
      const std::string kind = w.text("kind", "AllReduce");
      try {
        item.request.kind = parse_collective_kind(kind);
      } catch (const CollectiveError&) {
        w.fail("kind", fmt::format("unknown collective '{}'", kind));
      }
      item.request.bytes = w.non_negative("bytes", item.request.bytes);
      item.issue_time = w.non_negative("at", 0.0);
      item.request.root = static_cast<int>(w.integer("root", 0));
      item.request.channels = static_cast<int>(w.integer("channels", 0));
      if (item.request.channels < 0) w.fail("channels", "must be >= 0");
      if (w.has("participants")) {
        const json& ps = w.array("participants");
        for (std::size_t p = 0; p < ps.size(); ++p) {
          const std::string path = w.sub(fmt::format("participants[{}]", p));
          int gpu = 0;
          if (ps[p].is_array() && ps[p].size() == 2) {
            const int s = as_int(ps[p][0], path + "[0]");
            const int l = as_int(ps[p][1], path + "[1]");
            if (s < 0 || s >= topo.servers() || l < 0 || l >= topo.gpus_per_server()) {
              throw ScenarioError(path, "GPU out of range");
            }
            gpu = s * topo.gpus_per_server() + l;
          } else {
            gpu = as_int(ps[p], path);
            if (gpu < 0 || gpu >= topo.total_gpus()) throw ScenarioError(path, "GPU out of range");
          }
          item.request.participants.push_back(make_id<GpuId>(static_cast<std::size_t>(gpu)));
        }
        try {
          item.request.validate();
        } catch (const CollectiveError& e) {
          w.fail(e.what());
        }
      }
      sc.workload.push_back(std::move(item));
    }
  }
  if (sc.workload.empty()) sc.workload.push_back(WorkloadItem{});

  if (root.has("faults")) {
    const json& arr = root.array("faults");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const Node f(arr[i], fmt::format("faults[{}]", i));
      f.allow({"time", "target", "permanent", "recovery_time", "preexisting"});
      ScheduledFault sf;
      sf.preexisting = f.boolean("preexisting", false);
      sf.event.time = f.number("time", 0.0);
      if (!f.has("target")) f.fail("target", "required");
      sf.event.target = parse_target(Node(f.raw("target"), f.sub("target")), topo);
      sf.event.permanent = f.boolean("permanent", true);
      if (f.has("recovery_time")) sf.event.recovery_time = f.number("recovery_time", 0.0);
      try {
        sf.event.validate();
      } catch (const FaultError& e) {
        f.fail(e.what());
      }
      if (sf.preexisting && std::holds_alternative<TransportTarget>(sf.event.target)) {
        f.fail("preexisting", "transport interruptions cannot predate the workload");
      }
      sc.faults.push_back(std::move(sf));
    }
  }

  if (root.has("monte_carlo")) {
    const Node m(root.raw("monte_carlo"), "monte_carlo");
    m.allow({"k", "trials", "seed", "threads"});
    MonteCarlo mc;
    if (!m.has("k")) m.fail("k", "required");
    const json& k = m.raw("k");
    if (k.is_array()) {
      for (std::size_t i = 0; i < k.size(); ++i) mc.k.push_back(as_int(k[i], m.sub(fmt::format("k[{}]", i))));
    } else {
      mc.k.push_back(as_int(k, m.sub("k")));
    }
    for (int v : mc.k) {
      if (v < 0 || v > topo.total_nics()) m.fail("k", fmt::format("failure count {} out of range", v));
    }
    mc.trials = static_cast<int>(m.integer("trials", mc.trials));
    if (mc.trials < 1) m.fail("trials", "must be >= 1");
    const auto mseed = m.integer("seed", static_cast<long long>(mc.seed));
    if (mseed < 0) m.fail("seed", "must be >= 0");
    mc.seed = static_cast<std::uint64_t>(mseed);
    mc.threads = static_cast<int>(m.integer("threads", mc.threads));
    if (mc.threads < 1) m.fail("threads", "must be >= 1");
    sc.monte_carlo = std::move(mc);
  }
  return sc;
}

Scenario parse_scenario_text(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ScenarioError("<document>", e.what());
  }
  return parse_scenario_json(doc);
}

Scenario parse_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("<file>", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_scenario_text(ss.str());
}

}  // namespace ftsim
