// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/engine.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace ftsim {

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::kChunkComplete: return "ChunkComplete";
    case EventKind::kFaultInject: return "FaultInject";
    case EventKind::kOobNotify: return "OobNotify";
    case EventKind::kProbeResult: return "ProbeResult";
    case EventKind::kTimeout: return "Timeout";
    case EventKind::kRecovery: return "Recovery";
  }
  return "Unknown";
}

std::uint64_t Engine::schedule(double time, EventKind kind, std::string label, EventAction action) {
  if (time < now_) {
    throw SchedulingError(fmt::format("cannot schedule {} at t={} before now={}", to_string(kind),
                                      time, now_));
  }
  const std::uint64_t seq = next_seq_++;
  heap_.push_back(Event{time, seq, kind, std::move(label), std::move(action)});
  std::push_heap(heap_.begin(), heap_.end(), Later{});
  return seq;
}

void Engine::process_next(std::vector<TraceEntry>& out) {
  std::pop_heap(heap_.begin(), heap_.end(), Later{});
  Event ev = std::move(heap_.back());
  heap_.pop_back();
  now_ = ev.time;
  ++processed_;
  if (trace_enabled_) {
    TraceEntry entry{ev.time, ev.seq, ev.kind, ev.label};
    trace_.push_back(entry);
    out.push_back(std::move(entry));
  }
  if (ev.action) ev.action(*this);
}

std::vector<TraceEntry> Engine::run_until(double t_end) {
  if (t_end < now_) {
    throw SchedulingError(fmt::format("run_until({}) is before now={}", t_end, now_));
  }
  std::vector<TraceEntry> out;
  while (!heap_.empty() && heap_.front().time <= t_end) process_next(out);
  now_ = t_end;
  return out;
}

bool Engine::step() {
  if (heap_.empty()) return false;
  std::vector<TraceEntry> sink;
  process_next(sink);
  return true;
}

std::vector<TraceEntry> Engine::run() {
  std::vector<TraceEntry> out;
  while (!heap_.empty()) process_next(out);
  return out;
}

}  // namespace ftsim
