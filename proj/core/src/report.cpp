// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace ftsim {

using nlohmann::ordered_json;

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "json") return ReportFormat::kJson;
  throw std::invalid_argument(fmt::format("unknown report format '{}' (expected csv, json)", name));
}

ordered_json to_json(const PartitionPlan& plan) {
  ordered_json j;
  j["n"] = plan.inputs.n;
  j["g"] = plan.inputs.g;
  j["X"] = plan.inputs.X;
  j["D"] = plan.inputs.D;
  j["B"] = plan.inputs.B;
  j["Y"] = plan.y;
  j["T1"] = plan.times.t1;
  j["T2"] = plan.times.t2;
  j["T3"] = plan.times.t3;
  j["T_total"] = plan.t_total;
  j["strategy"] = to_string(plan.strategy);
  j["threshold_rule"] = to_string(plan.rule);
  j["threshold"] = plan.threshold;
  return j;
}

namespace {

ordered_json traffic_json(const TrafficMatrix& t) {
  ordered_json j;
  j["nic_sent"] = t.nic_sent;
  j["nic_received"] = t.nic_received;
  j["server_sent"] = t.server_sent;
  j["server_received"] = t.server_received;
  j["nvlink"] = t.nvlink;
  return j;
}

ordered_json detection_json(const DetectionRecord& d) {
  ordered_json j;
  j["target"] = d.target;
  j["verdict"] = d.verdict.describe();
  j["fault_time"] = d.fault_time;
  j["detected_at"] = d.detected_at;
  j["peer_aware_at"] = d.peer_aware_at;
  j["verdict_at"] = d.verdict_at;
  j["migrated_at"] = d.migrated_at;
  ordered_json b;
  b["detection"] = d.detected_at - d.fault_time;
  b["notification"] = d.peer_aware_at - d.detected_at;
  b["localization"] = d.verdict_at - d.peer_aware_at;
  b["migration"] = d.migrated_at - d.verdict_at;
  j["breakdown"] = std::move(b);
  return j;
}

ordered_json collective_json(const CollectiveReport& c) {
  ordered_json j;
  j["index"] = c.index;
  j["kind"] = to_string(c.kind);
  j["bytes"] = c.bytes;
  j["participants"] = c.participants;
  j["issue_time"] = c.issue_time;
  j["strategy"] = c.strategy;
  j["strategy_reason"] = c.strategy_reason;
  j["partition"] = c.partition ? to_json(*c.partition) : ordered_json(nullptr);
  j["ring_levels"] = c.ring_levels;
  j["server_order"] = c.server_order;
  j["start"] = c.start;
  j["end"] = c.end;
  j["makespan"] = c.makespan;
  j["baseline_makespan"] = c.baseline_makespan;
  j["overhead"] = c.overhead;
  j["ok"] = c.ok;
  j["error"] = c.error;
  j["integrity"] = c.integrity;
  j["rounds"] = c.rounds;
  j["interrupted_rounds"] = c.interrupted_rounds;
  j["migrations"] = c.migrations;
  j["traffic"] = traffic_json(c.traffic);
  ordered_json ds = ordered_json::array();
  for (const auto& d : c.detections) ds.push_back(detection_json(d));
  j["detections"] = std::move(ds);
  return j;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

struct Series {
  std::vector<double> x;
  std::vector<double> y;
  std::string color;
  std::string label;
};

// Minimal line/scatter chart. Log scale applies to x only.
std::string svg_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series, bool log_x) {
  constexpr double kW = 640, kH = 400, kL = 70, kR = 20, kT = 40, kB = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = 0.0, y1 = -INFINITY;
  auto tx = [&](double v) { return log_x ? std::log10(std::max(v, 1e-300)) : v; };
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!(x1 > x0)) {
    x0 -= 1.0;
    x1 += 1.0;
  }
  if (!(y1 > y0)) y1 = y0 + 1.0;
  auto px = [&](double v) { return kL + (tx(v) - x0) / (x1 - x0) * (kW - kL - kR); };
  auto py = [&](double v) { return kH - kB - (v - y0) / (y1 - y0) * (kH - kT - kB); };

  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">{3}</text>\n"
      "<line x1=\"{4}\" y1=\"{5}\" x2=\"{6}\" y2=\"{5}\" stroke=\"black\"/>\n"
      "<line x1=\"{4}\" y1=\"{7}\" x2=\"{4}\" y2=\"{5}\" stroke=\"black\"/>\n"
      "<text x=\"{8}\" y=\"{9}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{10}</text>\n"
      "<text x=\"16\" y=\"{11}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {11})\" "
      "text-anchor=\"middle\">{12}</text>\n",
      kW, kH, kL, title, kL, kH - kB, kW - kR, kT, (kL + kW - kR) / 2, kH - 12, xlabel, (kT + kH - kB) / 2, ylabel);
  for (int i = 0; i <= 4; ++i) {
    const double v = y0 + (y1 - y0) * i / 4.0;
    out += fmt::format("<text x=\"{}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"10\" "
                       "text-anchor=\"end\">{:.4g}</text>\n",
                       kL - 6, py(v) + 3, v);
  }
  int row = 0;
  for (const auto& s : series) {
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      pts += fmt::format("{:.2f},{:.2f} ", px(s.x[i]), py(s.y[i]));
      out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", px(s.x[i]), py(s.y[i]),
                         s.color);
    }
    if (s.x.size() > 1) {
      out += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\"/>\n", pts, s.color);
    }
    out += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>\n",
                       kW - kR - 150, kT + 14 * (row + 1), s.color, s.label);
    ++row;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace

ordered_json to_json(const Report& r) {
  ordered_json j;
  j["scenario"] = r.scenario;
  j["seed"] = r.seed;
  j["strategy"] = r.strategy;
  j["makespan"] = r.makespan;
  j["baseline_makespan"] = r.baseline_makespan;
  j["overhead"] = r.overhead;
  ordered_json cs = ordered_json::array();
  for (const auto& c : r.collectives) cs.push_back(collective_json(c));
  j["collectives"] = std::move(cs);
  j["traffic"] = traffic_json(r.traffic);
  ordered_json sw = ordered_json::array();
  for (const auto& p : r.sweep) {
    ordered_json e;
    e["k"] = p.k;
    e["trials"] = p.trials;
    e["completed"] = p.completed;
    e["failed"] = p.failed;
    e["mean_overhead"] = p.mean;
    e["p50_overhead"] = p.p50;
    e["p90_overhead"] = p.p90;
    e["max_overhead"] = p.max;
    sw.push_back(std::move(e));
  }
  j["sweep"] = std::move(sw);
  j["notes"] = r.notes;
  return j;
}

std::string to_json_text(const Report& report) { return to_json(report).dump(2) + "\n"; }

std::string to_csv(const Report& r) {
  std::string out;
  if (!r.sweep.empty()) {
    out = "k,trials,completed,failed,mean_overhead,p50_overhead,p90_overhead,max_overhead\n";
    for (const auto& p : r.sweep) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", p.k, p.trials, p.completed, p.failed, p.mean, p.p50, p.p90,
                         p.max);
    }
    return out;
  }
  out = "index,kind,bytes,participants,strategy,start,end,makespan,baseline_makespan,overhead,ok,integrity,"
        "rounds,interrupted_rounds,migrations,detections\n";
  for (const auto& c : r.collectives) {
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", c.index, to_string(c.kind), c.bytes,
                       c.participants, c.strategy, c.start, c.end, c.makespan, c.baseline_makespan, c.overhead,
                       c.ok ? "true" : "false", c.integrity, c.rounds, c.interrupted_rounds, c.migrations,
                       c.detections.size());
  }
  return out;
}

std::vector<std::filesystem::path> emit(const Report& report, ReportFormat format, const std::filesystem::path& dir,
                                        bool plots) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  std::vector<std::filesystem::path> written;
  if (format == ReportFormat::kJson) {
    written.push_back(dir / "report.json");
    write_file(written.back(), to_json_text(report));
  } else {
    written.push_back(dir / "report.csv");
    write_file(written.back(), to_csv(report));
  }
  if (!plots) return written;

  if (!report.sweep.empty()) {
    Series mean{{}, {}, "#1f77b4", "mean overhead"};
    Series p90{{}, {}, "#d62728", "p90 overhead"};
    for (const auto& p : report.sweep) {
      mean.x.push_back(p.k);
      mean.y.push_back(p.mean * 100.0);
      p90.x.push_back(p.k);
      p90.y.push_back(p.p90 * 100.0);
    }
    written.push_back(dir / "overhead_vs_k.svg");
    write_file(written.back(), svg_chart("Overhead vs concurrent NIC failures", "failed NICs (k)", "overhead (%)",
                                         {mean, p90}, false));
  } else if (!report.collectives.empty()) {
    Series faulted{{}, {}, "#d62728", "with faults"};
    Series base{{}, {}, "#1f77b4", "fault-free"};
    std::vector<const CollectiveReport*> cs;
    for (const auto& c : report.collectives) {
      if (c.ok && c.makespan > 0.0 && c.bytes > 0.0) cs.push_back(&c);
    }
    std::stable_sort(cs.begin(), cs.end(), [](auto* a, auto* b) { return a->bytes < b->bytes; });
    for (const auto* c : cs) {
      faulted.x.push_back(c->bytes);
      faulted.y.push_back(c->bytes / c->makespan / 1e9);
      base.x.push_back(c->bytes);
      base.y.push_back(c->baseline_makespan > 0.0 ? c->bytes / c->baseline_makespan / 1e9 : 0.0);
    }
    written.push_back(dir / "throughput_vs_size.svg");
    write_file(written.back(), svg_chart("Algorithm throughput vs message size", "message size (bytes, log)",
                                         "throughput (GB/s)", {base, faulted}, true));
  }
  return written;
}

}  // namespace ftsim
