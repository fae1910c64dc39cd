// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/executor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>

#include <fmt/format.h>

#include "ftsim/balance.hpp"

namespace ftsim {

std::string_view to_string(RoutingPolicy policy) {
  switch (policy) {
    case RoutingPolicy::kBalance: return "balance";
    case RoutingPolicy::kHotRepair: return "hot_repair";
  }
  return "unknown";
}

Program make_program(const Schedule& schedule, RoutingPolicy routing, std::vector<RailId> rails,
                     std::string label) {
  Program p;
  p.label = std::move(label);
  p.routing = routing;
  for (std::size_t i = 0; i < schedule.passes.size(); ++i) {
    PhaseSpec ph;
    ph.pass = schedule.passes[i];
    ph.rails = rails;
    if (i > 0) ph.deps.push_back(static_cast<int>(i - 1));
    p.phases.push_back(std::move(ph));
  }
  return p;
}

void TrafficMatrix::resize(std::size_t nics, std::size_t servers) {
  nic_sent.assign(nics, 0.0);
  nic_received.assign(nics, 0.0);
  server_sent.assign(servers, 0.0);
  server_received.assign(servers, 0.0);
  nvlink.assign(servers, 0.0);
}

void TrafficMatrix::merge(const TrafficMatrix& other) {
  auto add = [](std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < b.size()) a.resize(b.size(), 0.0);
    for (std::size_t i = 0; i < b.size(); ++i) a[i] += b[i];
  };
  add(nic_sent, other.nic_sent);
  add(nic_received, other.nic_received);
  add(server_sent, other.server_sent);
  add(server_received, other.server_received);
  add(nvlink, other.nvlink);
}

namespace {

struct Piece {
  int transfer = 0;
  bool intra = false;
  ServerId src_server{};
  ServerId dst_server{};
  NicId src{};
  NicId dst{};
  RailId rail = 0;           // rail of the transfer's channel
  GpuId exit_gpu{};          // GPU whose traffic this is, for failover chains
  double offset = 0.0;       // byte offset inside the transfer
  double size = 0.0;         // bytes of the piece
  double tx_from = 0.0;      // bytes of the piece already settled
  double weight = 1.0;       // load multiplier: spine or derated paths
  PathKind path = PathKind::kDirectPcie;
  bool moved = false;
  bool frozen = false;
  int ledger = -1;
};

struct Routed {
  std::vector<Piece> pieces;
  bool ok = true;
  std::string error;
};

// Resource layout: NIC send, NIC receive, per-server NVLink, per-server CPU.
struct ResourceIndex {
  std::size_t nics = 0;
  std::size_t servers = 0;
  std::size_t send(NicId n) const { return to_index(n); }
  std::size_t recv(NicId n) const { return nics + to_index(n); }
  std::size_t nvlink(ServerId s) const { return 2 * nics + to_index(s); }
  std::size_t cpu(ServerId s) const { return 2 * nics + servers + to_index(s); }
  std::size_t size() const { return 2 * nics + 2 * servers; }
};

std::size_t elem_boundary(std::size_t n, double bytes, double offset) {
  if (!(bytes > 0.0)) return offset > 0.0 ? n : 0;
  const double x = std::round(offset / bytes * static_cast<double>(n));
  return std::min(n, static_cast<std::size_t>(std::max(0.0, x)));
}

enum class Mode { kIdle, kBatch, kExplicit };

struct PhaseRun {
  const PhaseSpec* spec = nullptr;
  std::vector<RailId> rails;
  int channels = 1;
  int rounds = 0;
  int next_round = 0;
  bool started = false;
  bool done = false;
  Mode mode = Mode::kIdle;
  std::uint64_t gen = 0;

  // Batch of identical rounds.
  int batch_first = 0;
  int batch_count = 0;
  double batch_start = 0.0;
  double dur = 0.0;
  HealthMap snapshot;
  std::vector<Piece> template_pieces;

  // One explicit round.
  int round = 0;
  double tx_start = 0.0;
  double tx_end = 0.0;
  std::vector<Transfer> transfers;
  std::vector<Piece> pieces;
  std::set<int> waiting;
  std::vector<ChunkLedger> ledgers;
  std::vector<std::unique_ptr<Connection>> conns;

  // Routing cache for uniform passes.
  bool cache_valid = false;
  std::uint64_t cache_known = 0;
  std::uint64_t cache_physical = 0;
  std::vector<Piece> cache_pieces;
  double cache_dur = 0.0;

  GpuBuffers a2a_snapshot;
};

struct Incident {
  int id = 0;
  NicId a{};
  NicId b{};
  std::vector<int> phases;
  DetectionRecord record;
};

}  // namespace

struct Runtime::Impl {
  Impl(const ClusterTopology& t, ExecConfig c, std::uint64_t seed)
      : topology(t), config(c), engine(seed), physical(t.healthy_map()), known(t.healthy_map()),
        backoff(c.reprobe_base, c.reprobe_max) {
    res.nics = static_cast<std::size_t>(t.total_nics());
    res.servers = static_cast<std::size_t>(t.servers());
    capacity.assign(res.size(), 0.0);
    for (const auto& nic : t.nics()) {
      capacity[res.send(nic.id)] = nic.bandwidth;
      capacity[res.recv(nic.id)] = nic.bandwidth;
    }
    for (int s = 0; s < t.servers(); ++s) {
      const auto sid = make_id<ServerId>(static_cast<std::size_t>(s));
      capacity[res.nvlink(sid)] = t.nvlink_bw();
      capacity[res.cpu(sid)] = t.cpu_interconnect_bw();
    }
    for (RailId r : t.rails()) all_rails.push_back(r);
    load.assign(res.size(), 0.0);
  }

  const ClusterTopology& topology;
  ExecConfig config;
  Engine engine;
  HealthMap physical;
  HealthMap known;
  ExponentialBackoff backoff;
  ResourceIndex res;
  std::vector<double> capacity;
  std::vector<double> load;
  std::vector<std::size_t> touched;
  std::vector<RailId> all_rails;

  std::vector<DetectionRecord> all_detections;
  std::vector<Incident> incidents;
  std::map<std::string, double> fault_times;
  std::set<std::string> reprobing;

  // Current program.
  const Program* program = nullptr;
  std::uint64_t program_epoch = 0;
  std::vector<PhaseRun> phases;
  GpuBuffers* buffers = nullptr;
  ExecutionResult* result = nullptr;
  bool complete = false;

  double alpha() const { return config.alpha(); }

  // ---- routing -----------------------------------------------------------

  bool rail_usable(ServerId su, ServerId sv, RailId r, const HealthMap& h) const {
    const auto a = topology.nic_on_rail(su, r);
    const auto b = topology.nic_on_rail(sv, r);
    return a && b && h.path_usable(*a, *b);
  }

  GpuId exit_gpu(ServerId su, RailId rail, GpuId fallback) const {
    if (auto nic = topology.nic_on_rail(su, rail)) return topology.nic(*nic).affinity_gpu;
    return fallback;
  }

  void set_path(Piece& p) {
    p.weight = 1.0;
    p.path = PathKind::kDirectPcie;
    if (!p.moved) return;
    const Path path = route_flow(topology, Headroom{}, p.exit_gpu, p.src, topology.nic(p.src).bandwidth,
                                 p.size, config.cost);
    p.path = path.kind;
    if (path.kind == PathKind::kPcieThenCpu) p.weight = 1.0 / kCrossNumaDerate;
  }

  // First healthy NIC of the server, scanning in the GPU's failover order.
  std::optional<NicId> first_healthy(GpuId gpu, const HealthMap& h) const {
    for (NicId nic : failover_chain(topology, gpu)) {
      if (h.nic_healthy(nic)) return nic;
    }
    return std::nullopt;
  }

  std::optional<NicId> first_healthy_on(ServerId s, const HealthMap& h) const {
    for (const auto& nic : topology.server_nics(s)) {
      if (h.nic_healthy(nic.id)) return nic.id;
    }
    return std::nullopt;
  }

  bool spine_piece(Piece& p, const HealthMap& h, std::string& error) const {
    const auto a = first_healthy(p.exit_gpu, h);
    const auto b = first_healthy_on(p.dst_server, h);
    if (!a || !b) {
      error = fmt::format("no healthy NIC left between servers {} and {}", to_index(p.src_server),
                          to_index(p.dst_server));
      return false;
    }
    p.src = *a;
    p.dst = *b;
    p.moved = true;
    p.weight = 1.0 / config.spine_penalty;
    return true;
  }

  Routed route(const std::vector<Transfer>& transfers, const std::vector<RailId>& rails,
               RoutingPolicy policy, const HealthMap& h) {
    Routed out;
    std::map<std::pair<int, int>, std::vector<int>> edges;
    for (std::size_t i = 0; i < transfers.size(); ++i) {
      const Transfer& t = transfers[i];
      Piece p;
      p.transfer = static_cast<int>(i);
      p.src_server = topology.server_of(t.src);
      p.dst_server = topology.server_of(t.dst);
      p.size = t.bytes;
      p.rail = rails[static_cast<std::size_t>(t.channel)];
      if (p.src_server == p.dst_server) {
        p.intra = true;
        out.pieces.push_back(p);
        continue;
      }
      edges[{static_cast<int>(to_index(p.src_server)), static_cast<int>(to_index(p.dst_server))}]
          .push_back(static_cast<int>(i));
    }

    for (const auto& [edge, idx] : edges) {
      const auto su = make_id<ServerId>(static_cast<std::size_t>(edge.first));
      const auto sv = make_id<ServerId>(static_cast<std::size_t>(edge.second));
      std::vector<RailId> usable;
      for (RailId r : rails) {
        if (rail_usable(su, sv, r, h)) usable.push_back(r);
      }
      auto base_piece = [&](int i) {
        const Transfer& t = transfers[static_cast<std::size_t>(i)];
        Piece p;
        p.transfer = i;
        p.src_server = su;
        p.dst_server = sv;
        p.rail = rails[static_cast<std::size_t>(t.channel)];
        p.exit_gpu = exit_gpu(su, p.rail, t.src);
        p.size = t.bytes;
        return p;
      };
      auto on_rail = [&](Piece& p, RailId r) {
        p.src = *topology.nic_on_rail(su, r);
        p.dst = *topology.nic_on_rail(sv, r);
        p.moved = r != p.rail;
        set_path(p);
      };

      if (usable.empty()) {
        for (int i : idx) {
          Piece p = base_piece(i);
          if (!spine_piece(p, h, out.error)) {
            out.ok = false;
            return out;
          }
          out.pieces.push_back(p);
        }
        continue;
      }

      if (policy == RoutingPolicy::kHotRepair) {
        for (int i : idx) {
          Piece p = base_piece(i);
          if (std::find(usable.begin(), usable.end(), p.rail) != usable.end()) {
            on_rail(p, p.rail);
          } else {
            bool placed = false;
            for (NicId nic : failover_chain(topology, p.exit_gpu)) {
              const RailId r = topology.nic(nic).rail;
              if (std::find(usable.begin(), usable.end(), r) != usable.end()) {
                on_rail(p, r);
                placed = true;
                break;
              }
            }
            if (!placed && !spine_piece(p, h, out.error)) {
              out.ok = false;
              return out;
            }
          }
          out.pieces.push_back(p);
        }
        continue;
      }

      // Balance: each rail's target is its bandwidth share of the pair's
      // bytes; channels keep their own rail up to that target and the rest
      // fills the remaining room in rail order.
      double total = 0.0;
      for (int i : idx) total += transfers[static_cast<std::size_t>(i)].bytes;
      std::vector<double> weights;
      for (RailId r : usable) {
        weights.push_back(std::min(topology.nic(*topology.nic_on_rail(su, r)).bandwidth,
                                   topology.nic(*topology.nic_on_rail(sv, r)).bandwidth));
      }
      std::vector<double> room = proportional_split(total, weights);
      auto rail_pos = [&](RailId r) -> int {
        const auto it = std::find(usable.begin(), usable.end(), r);
        return it == usable.end() ? -1 : static_cast<int>(it - usable.begin());
      };
      std::vector<std::pair<int, double>> leftover;  // transfer, bytes already placed
      for (int i : idx) {
        const Transfer& t = transfers[static_cast<std::size_t>(i)];
        Piece p = base_piece(i);
        const int pos = rail_pos(p.rail);
        double keep = 0.0;
        if (pos >= 0) {
          keep = t.bytes <= room[static_cast<std::size_t>(pos)] ? t.bytes
                                                               : room[static_cast<std::size_t>(pos)];
          if (keep > 0.0 || t.bytes == 0.0) {
            p.size = keep;
            on_rail(p, p.rail);
            out.pieces.push_back(p);
            room[static_cast<std::size_t>(pos)] -= keep;
          }
        }
        if (t.bytes == 0.0 && pos >= 0) continue;
        if (keep < t.bytes || (t.bytes == 0.0 && pos < 0)) leftover.emplace_back(i, keep);
      }
      std::size_t cursor = 0;
      for (const auto& [i, placed] : leftover) {
        const double bytes = transfers[static_cast<std::size_t>(i)].bytes;
        double offset = placed;
        if (bytes == 0.0) {
          Piece p = base_piece(i);
          on_rail(p, usable.front());
          out.pieces.push_back(p);
          continue;
        }
        while (offset < bytes) {
          while (cursor + 1 < usable.size() && room[cursor] <= bytes * 1e-12) ++cursor;
          const bool last = cursor + 1 == usable.size();
          const double take = last ? bytes - offset : std::min(bytes - offset, room[cursor]);
          Piece p = base_piece(i);
          p.offset = offset;
          p.size = (offset + take >= bytes) ? bytes - offset : take;
          on_rail(p, usable[cursor]);
          out.pieces.push_back(p);
          room[cursor] -= take;
          offset += take;
          if (take <= 0.0) break;
        }
      }
    }
    return out;
  }

  void add_load(const Piece& p, double bytes) {
    if (bytes <= 0.0) return;
    auto bump = [&](std::size_t i, double v) {
      if (load[i] == 0.0) touched.push_back(i);
      load[i] += v;
    };
    if (p.intra) {
      bump(res.nvlink(p.src_server), bytes);
      return;
    }
    bump(res.send(p.src), bytes * p.weight);
    bump(res.recv(p.dst), bytes * p.weight);
    if (p.moved && p.path == PathKind::kPxn) {
      bump(res.nvlink(p.src_server), bytes);
      bump(res.nvlink(p.dst_server), bytes);
    } else if (p.moved && p.path == PathKind::kPcieThenCpu) {
      bump(res.cpu(p.src_server), bytes);
      bump(res.cpu(p.dst_server), bytes);
    }
  }

  // alpha + the slowest resource's drain time for the remaining bytes.
  double duration(const std::vector<Piece>& pieces) {
    for (const auto& p : pieces) add_load(p, p.size - p.tx_from);
    double worst = 0.0;
    for (std::size_t i : touched) {
      worst = std::max(worst, load[i] / capacity[i]);
      load[i] = 0.0;
    }
    touched.clear();
    return alpha() + worst;
  }

  void account(const Piece& p, double bytes, double times = 1.0) {
    if (bytes <= 0.0) return;
    auto& tm = result->traffic;
    const double b = bytes * times;
    if (p.intra) {
      tm.nvlink[to_index(p.src_server)] += b;
      return;
    }
    tm.nic_sent[to_index(p.src)] += b;
    tm.nic_received[to_index(p.dst)] += b;
    tm.server_sent[to_index(p.src_server)] += b;
    tm.server_received[to_index(p.dst_server)] += b;
  }

  bool physically_broken(const Piece& p) const {
    return !p.intra && !physical.path_usable(p.src, p.dst);
  }

  // ---- data --------------------------------------------------------------

  const std::vector<double>& source(const PhaseRun& ph, const Transfer& t) const {
    if (t.from_snapshot) return ph.a2a_snapshot[to_index(t.src)];
    return (*buffers)[to_index(t.src)];
  }

  std::pair<std::size_t, std::size_t> piece_elems(const Transfer& t, const Piece& p) const {
    const std::size_t n = t.src_end - t.src_begin;
    return {elem_boundary(n, t.bytes, p.offset), elem_boundary(n, t.bytes, p.offset + p.size)};
  }

  static void apply(const Transfer& t, const double* values, std::vector<double>& dst) {
    const std::size_t n = t.dst_end - t.dst_begin;
    if (t.op == HopOp::kAdd) {
      for (std::size_t k = 0; k < n; ++k) dst[t.dst_begin + k] += values[k];
    } else {
      for (std::size_t k = 0; k < n; ++k) dst[t.dst_begin + k] = values[k];
    }
  }

  void apply_plain(const PhaseRun& ph, const std::vector<Transfer>& transfers) {
    if (!config.verify || buffers == nullptr) return;
    for (const auto& t : transfers) {
      const auto& src = source(ph, t);
      apply(t, src.data() + t.src_begin, (*buffers)[to_index(t.dst)]);
    }
  }

  void apply_explicit(PhaseRun& ph) {
    if (!config.verify || buffers == nullptr) return;
    std::vector<std::vector<const Piece*>> by_transfer(ph.transfers.size());
    for (const auto& p : ph.pieces) {
      if (p.ledger >= 0) by_transfer[static_cast<std::size_t>(p.transfer)].push_back(&p);
    }
    std::vector<double> values;
    for (std::size_t i = 0; i < ph.transfers.size(); ++i) {
      const Transfer& t = ph.transfers[i];
      const auto& src = source(ph, t);
      values.assign(src.begin() + static_cast<std::ptrdiff_t>(t.src_begin),
                    src.begin() + static_cast<std::ptrdiff_t>(t.src_end));
      for (const Piece* p : by_transfer[i]) {
        const auto [lo, hi] = piece_elems(t, *p);
        const auto& got = ph.ledgers[static_cast<std::size_t>(p->ledger)].assembled();
        std::copy(got.begin(), got.end(), values.begin() + static_cast<std::ptrdiff_t>(lo));
        (void)hi;
      }
      apply(t, values.data(), (*buffers)[to_index(t.dst)]);
    }
  }

  // ---- phase lifecycle ---------------------------------------------------

  void abort(const std::string& error) {
    result->ok = false;
    if (result->error.empty()) result->error = error;
    for (auto& ph : phases) {
      ++ph.gen;
      ph.done = true;
    }
    finish_program();
  }

  void finish_program() {
    if (complete) return;
    complete = true;
    result->end = engine.now();
  }

  std::uint64_t phase_key(std::size_t i) const { return (program_epoch << 16) | i; }

  bool live(std::uint64_t epoch, std::size_t i, std::uint64_t gen) const {
    return epoch == program_epoch && !complete && i < phases.size() && phases[i].gen == gen &&
           !phases[i].done;
  }

  void start_phase(std::size_t i) {
    PhaseRun& ph = phases[i];
    ph.started = true;
    if (ph.spec->pass.kind == PassKind::kAllToAll && config.verify && buffers != nullptr) {
      ph.a2a_snapshot = *buffers;
    }
    start_next(i);
  }

  void finish_phase(std::size_t i) {
    PhaseRun& ph = phases[i];
    ph.done = true;
    ph.mode = Mode::kIdle;
    ph.a2a_snapshot.clear();
    bool all_done = true;
    for (std::size_t j = 0; j < phases.size(); ++j) {
      if (!phases[j].done) all_done = false;
    }
    if (all_done) {
      finish_program();
      return;
    }
    for (std::size_t j = 0; j < phases.size(); ++j) {
      PhaseRun& other = phases[j];
      if (other.started) continue;
      const bool ready = std::all_of(other.spec->deps.begin(), other.spec->deps.end(),
                                     [&](int d) { return phases[static_cast<std::size_t>(d)].done; });
      if (ready) start_phase(j);
    }
  }

  void start_next(std::size_t i) {
    PhaseRun& ph = phases[i];
    if (ph.next_round >= ph.rounds) {
      finish_phase(i);
      return;
    }
    const Pass& pass = ph.spec->pass;
    if (pass.uniform_rounds()) {
      if (!ph.cache_valid || ph.cache_known != known.epoch() || ph.cache_physical != physical.epoch()) {
        std::vector<Transfer> transfers;
        pass.round_transfers(ph.next_round, ph.channels, transfers);
        Routed r = route(transfers, ph.rails, program->routing, known);
        if (!r.ok) {
          abort(r.error);
          return;
        }
        ph.cache_pieces = std::move(r.pieces);
        ph.cache_dur = duration(ph.cache_pieces);
        ph.cache_known = known.epoch();
        ph.cache_physical = physical.epoch();
        ph.cache_valid = true;
      }
      const bool broken = std::any_of(ph.cache_pieces.begin(), ph.cache_pieces.end(),
                                      [&](const Piece& p) { return physically_broken(p); });
      if (!broken) {
        ph.mode = Mode::kBatch;
        ph.batch_first = ph.next_round;
        ph.batch_count = ph.rounds - ph.next_round;
        ph.batch_start = engine.now();
        ph.dur = ph.cache_dur;
        ph.snapshot = known;
        ph.template_pieces = ph.cache_pieces;
        schedule_batch_end(i);
        return;
      }
    }
    start_explicit(i, ph.next_round, engine.now(), known);
  }

  void schedule_batch_end(std::size_t i) {
    PhaseRun& ph = phases[i];
    const std::uint64_t gen = ++ph.gen;
    const std::uint64_t epoch = program_epoch;
    const double end = ph.batch_start + ph.dur * ph.batch_count;
    engine.schedule(end, EventKind::kChunkComplete,
                    fmt::format("{} phase {} rounds {}..{}", program->label, i, ph.batch_first,
                                ph.batch_first + ph.batch_count - 1),
                    [this, i, gen, epoch](Engine&) {
                      if (!live(epoch, i, gen)) return;
                      complete_batch_rounds(i, phases[i].batch_count);
                      start_next(i);
                    });
  }

  void complete_batch_rounds(std::size_t i, int count) {
    PhaseRun& ph = phases[i];
    std::vector<Transfer> transfers;
    for (int k = 0; k < count; ++k) {
      if (config.verify && buffers != nullptr) {
        transfers.clear();
        ph.spec->pass.round_transfers(ph.batch_first + k, ph.channels, transfers);
        apply_plain(ph, transfers);
      }
    }
    for (const auto& p : ph.template_pieces) account(p, p.size, count);
    result->rounds += count;
    ph.next_round = ph.batch_first + count;
    ph.batch_first = ph.next_round;
    ph.batch_count -= count;
    ph.mode = Mode::kIdle;
  }

  // Round in progress inside a batch at time now.
  int batch_current(const PhaseRun& ph) const {
    if (!(ph.dur > 0.0)) return ph.batch_count - 1;
    const auto j = static_cast<int>(std::floor((engine.now() - ph.batch_start) / ph.dur));
    return std::clamp(j, 0, ph.batch_count - 1);
  }

  // Known health changed: rounds after the current one must be re-routed.
  void truncate_batches() {
    if (program == nullptr || complete) return;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      PhaseRun& ph = phases[i];
      if (ph.done || ph.mode != Mode::kBatch) continue;
      const int j = batch_current(ph);
      if (j + 1 >= ph.batch_count) continue;
      ph.batch_count = j + 1;
      schedule_batch_end(i);
    }
  }

  void start_explicit(std::size_t i, int round, double start, const HealthMap& routing_view) {
    PhaseRun& ph = phases[i];
    ph.mode = Mode::kExplicit;
    ph.round = round;
    ph.transfers.clear();
    ph.spec->pass.round_transfers(round, ph.channels, ph.transfers);
    Routed r = route(ph.transfers, ph.rails, program->routing, routing_view);
    if (!r.ok) {
      abort(r.error);
      return;
    }
    ph.pieces = std::move(r.pieces);
    ph.ledgers.clear();
    ph.conns.clear();
    ph.waiting.clear();
    ph.tx_start = start;
    ph.tx_end = start + duration(ph.pieces);
    const std::uint64_t gen = ++ph.gen;
    schedule_round_end(i, gen);
    check_latent(i);
  }

  void schedule_round_end(std::size_t i, std::uint64_t gen) {
    PhaseRun& ph = phases[i];
    const std::uint64_t epoch = program_epoch;
    engine.schedule(ph.tx_end, EventKind::kChunkComplete,
                    fmt::format("{} phase {} round {}", program->label, i, ph.round),
                    [this, i, gen, epoch](Engine&) {
                      if (!live(epoch, i, gen)) return;
                      complete_explicit(i);
                    });
  }

  void complete_explicit(std::size_t i) {
    PhaseRun& ph = phases[i];
    for (auto& p : ph.pieces) {
      account(p, p.size - p.tx_from);
      if (p.ledger >= 0) {
        auto& l = ph.ledgers[static_cast<std::size_t>(p.ledger)];
        l.record_progress(0.0, l.total_bytes(), l.total_bytes());
      }
      p.tx_from = p.size;
    }
    apply_explicit(ph);
    result->rounds += 1;
    ph.next_round = ph.round + 1;
    ph.mode = Mode::kIdle;
    start_next(i);
  }

  double progress(const PhaseRun& ph, double t) const {
    const double span = ph.tx_end - ph.tx_start - alpha();
    if (!(span > 0.0)) return t >= ph.tx_start + alpha() ? 1.0 : 0.0;
    return std::clamp((t - ph.tx_start - alpha()) / span, 0.0, 1.0);
  }

  void freeze(PhaseRun& ph, Piece& p) {
    const double now = engine.now();
    const double remaining = p.size - p.tx_from;
    const double sent = p.tx_from + progress(ph, now) * remaining;
    const double confirmed = p.tx_from + progress(ph, now - alpha()) * remaining;
    account(p, sent - p.tx_from);
    if (p.ledger < 0) {
      std::vector<double> payload;
      if (config.verify && buffers != nullptr) {
        const Transfer& t = ph.transfers[static_cast<std::size_t>(p.transfer)];
        const auto& src = source(ph, t);
        const auto [lo, hi] = piece_elems(t, p);
        payload.assign(src.begin() + static_cast<std::ptrdiff_t>(t.src_begin + lo),
                       src.begin() + static_cast<std::ptrdiff_t>(t.src_begin + hi));
      }
      p.ledger = static_cast<int>(ph.ledgers.size());
      ph.ledgers.emplace_back(std::move(payload), p.size, config.chunk_size);
      auto conn = std::make_unique<Connection>(topology, p.exit_gpu, p.dst_server, config.registration);
      conn->start_on(p.src);
      if (config.registration.multi_registration) conn->register_multi(conn->chain());
      ph.conns.push_back(std::move(conn));
    }
    auto& ledger = ph.ledgers[static_cast<std::size_t>(p.ledger)];
    ledger.record_progress(0.0, sent, confirmed);
    ph.conns[static_cast<std::size_t>(p.ledger)]->flag_failure();
    p.tx_from = sent;
    p.frozen = true;
  }

  // Pieces of an explicit round that were routed onto components that are
  // already dead are detected the moment the round starts.
  void check_latent(std::size_t i) {
    PhaseRun& ph = phases[i];
    std::vector<std::size_t> hit;
    for (std::size_t k = 0; k < ph.pieces.size(); ++k) {
      if (!ph.pieces[k].frozen && physically_broken(ph.pieces[k])) hit.push_back(k);
    }
    if (hit.empty()) return;
    const Piece first = ph.pieces[hit.front()];
    const NicId a = first.src;
    const NicId b = first.dst;
    const bool nic_fault = !physical.nic_healthy(a) || !physical.nic_healthy(b);
    const std::string key =
        nic_fault ? describe(FaultTarget{NicTarget{physical.nic_healthy(a) ? b : a}})
                  : describe(FaultTarget{LinkTarget{a, b}});
    const auto ft = fault_times.find(key);
    const int id = open_incident(a, b, ft == fault_times.end() ? engine.now() : ft->second, key);
    freeze_matching(i, id, [&](const Piece& p) { return physically_broken(p); });
  }

  template <typename Pred>
  bool freeze_matching(std::size_t i, int incident, Pred pred) {
    PhaseRun& ph = phases[i];
    bool any = false;
    for (auto& p : ph.pieces) {
      if (p.intra || p.frozen || !pred(p)) continue;
      freeze(ph, p);
      any = true;
    }
    if (any) {
      if (ph.waiting.empty()) ++ph.gen;  // the round end is off until repair
      ph.waiting.insert(incident);
      auto& inc = incidents[static_cast<std::size_t>(incident)];
      if (std::find(inc.phases.begin(), inc.phases.end(), static_cast<int>(i)) == inc.phases.end()) {
        inc.phases.push_back(static_cast<int>(i));
      }
      result->interrupted_rounds += 1;
    }
    return any;
  }

  // ---- faults ------------------------------------------------------------

  int open_incident(NicId a, NicId b, double fault_time, const std::string& target) {
    Incident inc;
    inc.id = static_cast<int>(incidents.size());
    inc.a = a;
    inc.b = b;
    inc.record.fault_time = fault_time;
    inc.record.detected_at = engine.now();
    inc.record.peer_aware_at = peer_awareness_time(engine.now(), config.detection);
    inc.record.target = target;
    incidents.push_back(inc);
    const int id = inc.id;
    engine.schedule(inc.record.peer_aware_at, EventKind::kOobNotify,
                    fmt::format("oob {} -> {}", to_string(a), to_string(b)), [this, id](Engine& e) {
                      const Incident& cur = incidents[static_cast<std::size_t>(id)];
                      const LocalizationResult loc =
                          localize(topology, cur.a, cur.b, physical, known, config.detection);
                      e.schedule(e.now() + loc.probe_round, EventKind::kProbeResult,
                                 "verdict " + loc.verdict.describe(),
                                 [this, id, loc](Engine&) { on_verdict(id, loc); });
                    });
    return id;
  }

  void on_verdict(int id, const LocalizationResult& loc) {
    Incident& inc = incidents[static_cast<std::size_t>(id)];
    const Verdict& v = loc.verdict;
    inc.record.verdict = v;
    inc.record.verdict_at = engine.now();
    for (NicId nic : v.faulty_nics()) {
      known.set_nic(nic, false);
      start_reprobe_nic(nic, v);
    }
    bool suspect_link = v.kind == VerdictKind::kLinkFault;
    if (v.kind == VerdictKind::kInconclusive) {
      for (const auto& o : loc.outcomes) {
        const bool on_pair = (o.prober == inc.a && o.target == inc.b) ||
                             (o.prober == inc.b && o.target == inc.a);
        if (on_pair && o.result == ProbeResult::kTimeout) suspect_link = true;
      }
    }
    if (suspect_link) {
      known.set_link(inc.a, inc.b, false);
      start_reprobe_link(inc.a, inc.b, v);
    }

    double delay = 0.0;
    const std::vector<int> waiting = inc.phases;
    for (int ph_index : waiting) {
      const auto i = static_cast<std::size_t>(ph_index);
      if (program == nullptr || complete || i >= phases.size()) break;
      PhaseRun& ph = phases[i];
      ph.waiting.erase(id);
      if (ph.done || !ph.waiting.empty()) continue;
      const auto d = repair(i);
      if (!d) break;
      delay = std::max(delay, *d);
    }
    inc.record.migrated_at = engine.now() + delay;
    all_detections.push_back(inc.record);
    if (result != nullptr && !complete) result->detections.push_back(inc.record);
    truncate_batches();
  }

  // Rolls back and migrates every frozen piece, then restarts the round after
  // the slowest registration. Returns that delay, or nullopt on abort.
  std::optional<double> repair(std::size_t i) {
    PhaseRun& ph = phases[i];
    const double now = engine.now();
    double delay = 0.0;
    for (auto& p : ph.pieces) {
      if (p.intra) {
        const double done = p.tx_from + progress(ph, now) * (p.size - p.tx_from);
        account(p, done - p.tx_from);
        p.tx_from = done;
        continue;
      }
      if (!p.frozen) {
        const double done = p.tx_from + progress(ph, now) * (p.size - p.tx_from);
        account(p, done - p.tx_from);
        p.tx_from = done;
        continue;
      }
      auto& ledger = ph.ledgers[static_cast<std::size_t>(p.ledger)];
      auto& conn = *ph.conns[static_cast<std::size_t>(p.ledger)];
      const RollbackPoint rb = conn.rollback();
      p.tx_from = ledger.chunk_begin(rb.retransmit_from);
      const ServerId sv = p.dst_server;
      auto same_rail_ok = [&](NicId nic) {
        if (!known.nic_healthy(nic)) return false;
        const auto peer = topology.nic_on_rail(sv, topology.nic(nic).rail);
        return peer && known.path_usable(nic, *peer);
      };
      std::optional<NicId> dst;
      try {
        const NicId nic = conn.migrate(same_rail_ok);
        dst = *topology.nic_on_rail(sv, topology.nic(nic).rail);
        p.weight = 1.0;
      } catch (const NoBackupError&) {
        // No rail in common with the peer: cross the spine from any live NIC.
        try {
          if (known.nic_healthy(conn.active_nic())) {
            conn.clear_failure();  // the local NIC is fine; only the peer's rail is gone
          } else {
            conn.flag_failure();
            conn.migrate([&](NicId nic) { return known.nic_healthy(nic); });
          }
          dst = first_healthy_on(sv, known);
        } catch (const NoBackupError& e) {
          abort(e.what());
          return std::nullopt;
        }
        if (!dst) {
          abort(fmt::format("server {} has no healthy NIC left", to_index(sv)));
          return std::nullopt;
        }
      }
      p.src = conn.active_nic();
      p.dst = *dst;
      p.moved = topology.nic(p.src).rail != p.rail;
      const bool spine = topology.nic(p.src).rail != topology.nic(p.dst).rail;
      set_path(p);
      if (spine) p.weight = 1.0 / config.spine_penalty;
      p.frozen = false;
      delay = std::max(delay, conn.registration_delay());
      result->migrations += 1;
    }
    const std::uint64_t gen = ++ph.gen;
    const std::uint64_t epoch = program_epoch;
    engine.schedule(now + delay, EventKind::kRecovery, fmt::format("resume phase {} round {}", i, ph.round),
                    [this, i, gen, epoch](Engine& e) {
                      if (!live(epoch, i, gen)) return;
                      PhaseRun& cur = phases[i];
                      cur.tx_start = e.now();
                      cur.tx_end = e.now() + duration(cur.pieces);
                      const std::uint64_t g2 = ++cur.gen;
                      schedule_round_end(i, g2);
                      check_latent(i);
                    });
    return delay;
  }

  template <typename Pred>
  void hit_running(Pred pred, NicId a, NicId b, const std::string& target) {
    if (program == nullptr || complete) return;
    int incident = -1;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      PhaseRun& ph = phases[i];
      if (!ph.started || ph.done) continue;
      if (ph.mode == Mode::kBatch) {
        const bool uses = std::any_of(ph.template_pieces.begin(), ph.template_pieces.end(),
                                      [&](const Piece& p) { return !p.intra && pred(p); });
        if (!uses) continue;
        // Settle the finished rounds, then expand the current one.
        const int j = batch_current(ph);
        if (j > 0) complete_batch_rounds(i, j);
        const double start = ph.batch_start + ph.dur * j;
        const HealthMap view = ph.snapshot;
        start_explicit_at(i, ph.next_round, start, view);
        if (complete) return;
      }
      if (ph.mode != Mode::kExplicit) continue;
      const bool touches = std::any_of(ph.pieces.begin(), ph.pieces.end(),
                                       [&](const Piece& p) { return !p.intra && !p.frozen && pred(p); });
      if (!touches) continue;
      if (incident < 0) {
        NicId ea = a;
        NicId eb = b;
        for (const auto& p : ph.pieces) {
          if (!p.intra && pred(p)) {
            ea = p.src;
            eb = p.dst;
            break;
          }
        }
        incident = open_incident(ea, eb, engine.now(), target);
      }
      freeze_matching(i, incident, pred);
    }
  }

  // Explicit round whose transmission began in the past (expanded batch).
  void start_explicit_at(std::size_t i, int round, double start, const HealthMap& view) {
    PhaseRun& ph = phases[i];
    ph.mode = Mode::kExplicit;
    ph.round = round;
    ph.transfers.clear();
    ph.spec->pass.round_transfers(round, ph.channels, ph.transfers);
    Routed r = route(ph.transfers, ph.rails, program->routing, view);
    if (!r.ok) {
      abort(r.error);
      return;
    }
    ph.pieces = std::move(r.pieces);
    ph.ledgers.clear();
    ph.conns.clear();
    ph.waiting.clear();
    ph.tx_start = start;
    ph.tx_end = start + ph.dur;
    const std::uint64_t gen = ++ph.gen;
    schedule_round_end(i, gen);
  }

  void inject(const FaultTarget& target) {
    const std::string key = describe(target);
    fault_times[key] = engine.now();
    if (const auto* n = std::get_if<NicTarget>(&target)) {
      physical.set_nic(n->nic, false);
      const NicId x = n->nic;
      hit_running([x](const Piece& p) { return p.src == x || p.dst == x; }, x, x, key);
    } else if (const auto* l = std::get_if<LinkTarget>(&target)) {
      physical.set_link(l->a, l->b, false);
      const NicId a = l->a;
      const NicId b = l->b;
      hit_running([a, b](const Piece& p) {
        return (p.src == a && p.dst == b) || (p.src == b && p.dst == a);
      }, a, b, key);
    } else if (const auto* t = std::get_if<TransportTarget>(&target)) {
      const ConnectionKey k = t->connection;
      hit_running([k](const Piece& p) {
        return p.src_server == k.src && p.dst_server == k.dst && p.rail == k.channel;
      }, NicId{}, NicId{}, key);
    }
  }

  void restore(const FaultTarget& target) {
    if (const auto* n = std::get_if<NicTarget>(&target)) {
      physical.set_nic(n->nic, true);
    } else if (const auto* l = std::get_if<LinkTarget>(&target)) {
      physical.set_link(l->a, l->b, true);
    }
  }

  void start_reprobe_nic(NicId nic, const Verdict& v) {
    const std::string key = describe(FaultTarget{NicTarget{nic}});
    if (!reprobing.insert(key).second) return;
    schedule_reprobe(key, v, ReprobeHistory{0, engine.now()}, [this, nic]() {
      if (!physical.nic_healthy(nic)) return false;
      known.set_nic(nic, true);
      return true;
    });
  }

  void start_reprobe_link(NicId a, NicId b, const Verdict& v) {
    const std::string key = describe(FaultTarget{LinkTarget{a, b}});
    if (!reprobing.insert(key).second) return;
    Verdict probe_v = v;
    if (probe_v.kind == VerdictKind::kInconclusive) probe_v.kind = VerdictKind::kLinkFault;
    schedule_reprobe(key, probe_v, ReprobeHistory{0, engine.now()}, [this, a, b]() {
      if (!physical.path_usable(a, b)) return false;
      known.set_link(a, b, true);
      return true;
    });
  }

  void schedule_reprobe(const std::string& key, const Verdict& v, ReprobeHistory history,
                        std::function<bool()> check) {
    const double at = reprobe_schedule(v, history, backoff);
    engine.schedule(at, EventKind::kProbeResult, "reprobe " + key,
                    [this, key, v, history, check](Engine& e) {
                      if (check()) {
                        reprobing.erase(key);
                        truncate_batches();
                        return;
                      }
                      schedule_reprobe(key, v, ReprobeHistory{history.attempts + 1, e.now()}, check);
                    });
  }
};

Runtime::Runtime(const ClusterTopology& topology, ExecConfig config, std::uint64_t seed)
    : impl_(std::make_unique<Impl>(topology, config, seed)) {
  config.cost.validate();
  if (!(config.chunk_size > 0.0)) throw std::invalid_argument("chunk_size must be > 0");
  if (!(config.spine_penalty > 0.0 && config.spine_penalty <= 1.0)) {
    throw std::invalid_argument("spine_penalty must lie in (0, 1]");
  }
}

Runtime::~Runtime() = default;

Engine& Runtime::engine() { return impl_->engine; }
const ClusterTopology& Runtime::topology() const { return impl_->topology; }
const ExecConfig& Runtime::config() const { return impl_->config; }
const HealthMap& Runtime::physical() const { return impl_->physical; }
const HealthMap& Runtime::known() const { return impl_->known; }
const std::vector<DetectionRecord>& Runtime::detections() const { return impl_->all_detections; }

void Runtime::apply_preexisting(const FaultTarget& target) {
  if (const auto* n = std::get_if<NicTarget>(&target)) {
    impl_->physical.set_nic(n->nic, false);
    impl_->known.set_nic(n->nic, false);
  } else if (const auto* l = std::get_if<LinkTarget>(&target)) {
    impl_->physical.set_link(l->a, l->b, false);
    impl_->known.set_link(l->a, l->b, false);
  }
}

void Runtime::schedule_fault(const FaultEvent& fault) {
  fault.validate();
  Impl* impl = impl_.get();
  const FaultTarget target = fault.target;
  impl->engine.schedule(fault.time, EventKind::kFaultInject, "inject " + describe(target),
                        [impl, target](Engine&) { impl->inject(target); });
  if (fault.recovery_time) {
    impl->engine.schedule(*fault.recovery_time, EventKind::kRecovery, "recover " + describe(target),
                          [impl, target](Engine&) { impl->restore(target); });
  } else if (!fault.permanent) {
    // A flap: the component is back right after it broke the transfers.
    impl->engine.schedule(fault.time, EventKind::kRecovery, "recover " + describe(target),
                          [impl, target](Engine&) { impl->restore(target); });
  }
}

ExecutionResult Runtime::execute(const Program& program, double start, GpuBuffers* buffers) {
  Impl& im = *impl_;
  ExecutionResult result;
  result.traffic.resize(im.res.nics, im.res.servers);
  if (start > im.engine.now()) im.engine.run_until(start);
  result.start = im.engine.now();

  im.program = &program;
  ++im.program_epoch;
  im.buffers = buffers;
  im.result = &result;
  im.complete = false;
  im.phases.clear();
  im.phases.resize(program.phases.size());
  for (std::size_t i = 0; i < program.phases.size(); ++i) {
    PhaseRun& ph = im.phases[i];
    ph.spec = &program.phases[i];
    ph.rails = ph.spec->rails.empty() ? im.all_rails : ph.spec->rails;
    ph.channels = static_cast<int>(ph.rails.size());
    ph.rounds = ph.spec->pass.rounds();
    for (int d : ph.spec->deps) {
      if (d < 0 || static_cast<std::size_t>(d) >= i) {
        throw std::invalid_argument("phase dependencies must point at earlier phases");
      }
    }
  }
  if (program.phases.empty()) {
    im.finish_program();
  } else {
    for (std::size_t i = 0; i < im.phases.size() && !im.complete; ++i) {
      if (im.phases[i].spec->deps.empty()) im.start_phase(i);
    }
  }
  while (!im.complete && im.engine.step()) {
  }
  if (!im.complete) {
    result.ok = false;
    result.error = "simulation stalled before the program finished";
    result.end = im.engine.now();
  }
  im.program = nullptr;
  im.phases.clear();
  im.buffers = nullptr;
  im.result = nullptr;
  return result;
}

}  // namespace ftsim
