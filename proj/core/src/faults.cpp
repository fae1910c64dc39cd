// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/faults.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace ftsim {

namespace {

std::pair<std::int32_t, std::int32_t> unordered(NicId a, NicId b) {
  auto x = static_cast<std::int32_t>(a);
  auto y = static_cast<std::int32_t>(b);
  return x < y ? std::pair{x, y} : std::pair{y, x};
}

const ProbeOutcome* find_outcome(std::span<const ProbeOutcome> outcomes, NicId prober,
                                 NicId target) {
  for (const auto& o : outcomes) {
    if (o.prober == prober && o.target == target) return &o;
  }
  return nullptr;
}

const ProbeOutcome& require(std::span<const ProbeOutcome> outcomes, NicId prober, NicId target) {
  const ProbeOutcome* o = find_outcome(outcomes, prober, target);
  if (o == nullptr) {
    throw FaultError(fmt::format("missing probe outcome {} -> {}", to_string(prober),
                                 to_string(target)));
  }
  return *o;
}

}  // namespace

void FaultEvent::validate() const {
  if (!std::isfinite(time) || time < 0.0) throw FaultError("fault time must be finite and >= 0");
  if (recovery_time) {
    if (permanent) throw FaultError("a permanent fault cannot have a recovery_time");
    if (!(*recovery_time > time)) throw FaultError("recovery_time must be after the fault time");
  }
  if (const auto* link = std::get_if<LinkTarget>(&target); link && link->a == link->b) {
    throw FaultError("link fault needs two distinct endpoints");
  }
  if (const auto* t = std::get_if<TransportTarget>(&target);
      t && t->connection.src == t->connection.dst) {
    throw FaultError("transport fault needs a cross-server connection");
  }
}

std::string describe(const FaultTarget& target) {
  return std::visit(
      [](const auto& t) -> std::string {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, NicTarget>) {
          return fmt::format("nic {}", to_string(t.nic));
        } else if constexpr (std::is_same_v<T, LinkTarget>) {
          return fmt::format("link {}-{}", to_string(t.a), to_string(t.b));
        } else {
          return fmt::format("connection s{}->s{} ch{}", to_index(t.connection.src),
                             to_index(t.connection.dst), t.connection.channel);
        }
      },
      target);
}

double peer_awareness_time(double detect_time, const DetectionConfig& cfg) {
  return detect_time + (cfg.oob_enabled ? cfg.oob_latency : cfg.poll_timeout);
}

OobDelivery OobChannel::notify_oob(Engine& engine, NicId detector, NicId peer,
                                   std::function<void(const OobDelivery&)> on_delivery) {
  OobDelivery d{detector, peer, engine.now(), peer_awareness_time(engine.now(), cfg_)};
  deliveries_.push_back(d);
  engine.schedule(d.delivered_at, EventKind::kOobNotify,
                  fmt::format("oob {} -> {}", to_string(detector), to_string(peer)),
                  [d, cb = std::move(on_delivery)](Engine&) {
                    if (cb) cb(d);
                  });
  return d;
}

bool OobChannel::claim_localization(NicId a, NicId b) {
  const auto key = unordered(a, b);
  if (std::find(open_.begin(), open_.end(), key) != open_.end()) return false;
  open_.push_back(key);
  return true;
}

void OobChannel::close_incident(NicId a, NicId b) {
  std::erase(open_, unordered(a, b));
}

std::string_view to_string(ProbeResult result) {
  switch (result) {
    case ProbeResult::kSuccess: return "Success";
    case ProbeResult::kLocalError: return "LocalError";
    case ProbeResult::kTimeout: return "Timeout";
  }
  return "Unknown";
}

ProbeOutcome probe(NicId prober, NicId target, const HealthMap& health,
                   const DetectionConfig& cfg) {
  if (prober == target) throw FaultError("a NIC cannot probe itself");
  if (!health.nic_healthy(prober)) {
    return {prober, target, ProbeResult::kLocalError, cfg.probe_rtt};
  }
  if (!health.nic_healthy(target) || !health.link_healthy(prober, target)) {
    return {prober, target, ProbeResult::kTimeout, cfg.probe_timeout};
  }
  return {prober, target, ProbeResult::kSuccess, cfg.probe_rtt};
}

std::string_view to_string(VerdictKind kind) {
  switch (kind) {
    case VerdictKind::kLocalNicFault: return "LocalNicFault";
    case VerdictKind::kRemoteNicFault: return "RemoteNicFault";
    case VerdictKind::kLinkFault: return "LinkFault";
    case VerdictKind::kDualEndpointFault: return "DualEndpointFault";
    case VerdictKind::kInconclusive: return "Inconclusive";
  }
  return "Unknown";
}

std::vector<NicId> Verdict::faulty_nics() const {
  switch (kind) {
    case VerdictKind::kLocalNicFault:
    case VerdictKind::kRemoteNicFault: return {first};
    case VerdictKind::kDualEndpointFault: return {first, second};
    case VerdictKind::kLinkFault:
    case VerdictKind::kInconclusive: return {};
  }
  return {};
}

std::string Verdict::describe() const {
  switch (kind) {
    case VerdictKind::kLocalNicFault:
    case VerdictKind::kRemoteNicFault:
      return fmt::format("{}({})", to_string(kind), to_string(first));
    case VerdictKind::kLinkFault:
    case VerdictKind::kDualEndpointFault:
    case VerdictKind::kInconclusive:
      return fmt::format("{}({}, {})", to_string(kind), to_string(first), to_string(second));
  }
  return "Unknown";
}

Verdict triangulate(NicId a, NicId b, std::span<const ProbeOutcome> outcomes,
                    std::optional<NicId> aux) {
  const ProbeResult ab = require(outcomes, a, b).result;
  const ProbeResult ba = require(outcomes, b, a).result;
  std::optional<std::pair<ProbeResult, ProbeResult>> aux_res;
  if (aux) {
    aux_res = std::pair{require(outcomes, *aux, a).result, require(outcomes, *aux, b).result};
  }

  const bool a_local = ab == ProbeResult::kLocalError;
  const bool b_local = ba == ProbeResult::kLocalError;
  if (a_local && b_local) {
    return {VerdictKind::kDualEndpointFault, a, b, true};
  }
  if (a_local) return {VerdictKind::kLocalNicFault, a, a};
  if (b_local) return {VerdictKind::kLocalNicFault, b, b};
  if (ab == ProbeResult::kSuccess && ba == ProbeResult::kSuccess) {
    return {VerdictKind::kInconclusive, a, b};
  }

  // At least one timeout and no local errors: the aux view decides.
  if (!aux_res || aux_res->first == ProbeResult::kLocalError ||
      aux_res->second == ProbeResult::kLocalError) {
    return {VerdictKind::kInconclusive, a, b};
  }
  const bool reach_a = aux_res->first == ProbeResult::kSuccess;
  const bool reach_b = aux_res->second == ProbeResult::kSuccess;
  if (reach_a && reach_b) return {VerdictKind::kLinkFault, a, b};
  if (!reach_a && reach_b) return {VerdictKind::kRemoteNicFault, a, a};
  if (reach_a && !reach_b) return {VerdictKind::kRemoteNicFault, b, b};
  return {VerdictKind::kDualEndpointFault, a, b};
}

std::optional<NicId> pick_aux(const ClusterTopology& topology, NicId a, NicId b,
                              const HealthMap& believed) {
  const auto& na = topology.nic(a);
  const auto& nb = topology.nic(b);
  std::optional<NicId> fallback;
  for (int s = 0; s < topology.servers(); ++s) {
    const auto server = make_id<ServerId>(static_cast<std::size_t>(s));
    if (server == na.server || server == nb.server) continue;
    for (const auto& nic : topology.server_nics(server)) {
      if (!believed.path_usable(nic.id, a) || !believed.path_usable(nic.id, b)) continue;
      if (nic.rail == na.rail) return nic.id;
      if (!fallback) fallback = nic.id;
    }
  }
  return fallback;
}

LocalizationResult localize(const ClusterTopology& topology, NicId a, NicId b,
                            const HealthMap& physical, const HealthMap& believed,
                            const DetectionConfig& cfg) {
  LocalizationResult r;
  r.outcomes.push_back(probe(a, b, physical, cfg));
  r.outcomes.push_back(probe(b, a, physical, cfg));
  const auto aux = pick_aux(topology, a, b, believed);
  if (aux) {
    r.outcomes.push_back(probe(*aux, a, physical, cfg));
    r.outcomes.push_back(probe(*aux, b, physical, cfg));
  }
  for (const auto& o : r.outcomes) r.probe_round = std::max(r.probe_round, o.latency);
  r.verdict = triangulate(a, b, r.outcomes, aux);
  return r;
}

ExponentialBackoff::ExponentialBackoff(double base, double max) : base_(base), max_(max) {
  if (!(base > 0.0) || !(max >= base)) {
    throw std::invalid_argument("backoff needs 0 < base <= max");
  }
}

double ExponentialBackoff::interval(int attempt) const {
  if (attempt < 0) throw std::invalid_argument("attempt must be >= 0");
  const double v = base_ * std::ldexp(1.0, std::min(attempt, 60));
  return std::min(v, max_);
}

double reprobe_schedule(const Verdict& verdict, const ReprobeHistory& history,
                        const ReprobePolicy& policy) {
  if (verdict.kind == VerdictKind::kInconclusive) {
    throw FaultError("nothing to reprobe for an inconclusive verdict");
  }
  return history.last_probe + policy.interval(history.attempts);
}

namespace {

struct ReprobeState {
  Verdict verdict;
  const HealthMap* physical;
  std::shared_ptr<const ReprobePolicy> policy;
  std::function<void(double, NicId)> on_recovered;
  std::function<bool()> keep_going;
  ReprobeHistory history;
  std::vector<NicId> pending;
};

void reprobe_step(Engine& engine, const std::shared_ptr<ReprobeState>& st) {
  const double next = reprobe_schedule(st->verdict, st->history, *st->policy);
  engine.schedule(next, EventKind::kProbeResult, "reprobe " + st->verdict.describe(),
                  [st](Engine& e) {
                    if (st->keep_going && !st->keep_going()) return;
                    st->history.attempts += 1;
                    st->history.last_probe = e.now();
                    std::vector<NicId> still;
                    for (NicId nic : st->pending) {
                      if (st->physical->nic_healthy(nic)) {
                        if (st->on_recovered) st->on_recovered(e.now(), nic);
                      } else {
                        still.push_back(nic);
                      }
                    }
                    st->pending = std::move(still);
                    if (!st->pending.empty()) reprobe_step(e, st);
                  });
}

}  // namespace

void start_reprobing(Engine& engine, const Verdict& verdict, const HealthMap& physical,
                     std::shared_ptr<const ReprobePolicy> policy, double start_time,
                     std::function<void(double, NicId)> on_recovered,
                     std::function<bool()> keep_going) {
  auto st = std::make_shared<ReprobeState>();
  st->verdict = verdict;
  st->physical = &physical;
  st->policy = std::move(policy);
  st->on_recovered = std::move(on_recovered);
  st->keep_going = std::move(keep_going);
  st->history.last_probe = start_time;
  st->pending = verdict.faulty_nics();
  if (st->pending.empty()) return;
  reprobe_step(engine, st);
}

}  // namespace ftsim
