// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ftsim {

enum class EventKind { kChunkComplete, kFaultInject, kOobNotify, kProbeResult, kTimeout, kRecovery };

std::string_view to_string(EventKind kind);

struct TraceEntry {
  double time = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::kChunkComplete;
  std::string label;

  bool operator==(const TraceEntry&) const = default;
};

class SchedulingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Engine;
using EventAction = std::function<void(Engine&)>;

struct Event {
  double time = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::kChunkComplete;
  std::string label;
  EventAction action;
};

/// Single-threaded discrete-event core. Events fire in (time, seq) order; seq
/// is assigned at scheduling time so same-time events keep schedule order.
class Engine {
 public:
  explicit Engine(std::uint64_t seed = 0) : rng_(seed) {}

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  double now() const { return now_; }

  /// Returns the sequence number given to the event.
  std::uint64_t schedule(double time, EventKind kind, std::string label, EventAction action = {});

  /// Processes every event with time <= t_end, then sets the clock to t_end.
  std::vector<TraceEntry> run_until(double t_end);

  /// Drains the queue; the clock stops at the last processed event.
  std::vector<TraceEntry> run();

  /// Processes exactly one event; false when the queue is empty.
  bool step();

  bool empty() const { return heap_.empty(); }
  std::size_t pending() const { return heap_.size(); }
  std::uint64_t processed() const { return processed_; }

  void set_trace_enabled(bool enabled) { trace_enabled_ = enabled; }
  const std::vector<TraceEntry>& trace() const { return trace_; }

  /// The scenario's only random stream; used for Monte-Carlo fault placement.
  std::mt19937_64& rng() { return rng_; }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.time != b.time) return a.time > b.time;
      return a.seq > b.seq;
    }
  };

  void process_next(std::vector<TraceEntry>& out);

  std::vector<Event> heap_;  // min-heap under Later
  double now_ = 0.0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t processed_ = 0;
  bool trace_enabled_ = true;
  std::vector<TraceEntry> trace_;
  std::mt19937_64 rng_;
};

}  // namespace ftsim
