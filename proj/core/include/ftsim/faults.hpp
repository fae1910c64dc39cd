// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ftsim/engine.hpp"
#include "ftsim/topology.hpp"

namespace ftsim {

/// A single inter-server connection: traffic from src to dst on one channel.
struct ConnectionKey {
  ServerId src{};
  ServerId dst{};
  int channel = 0;

  auto operator<=>(const ConnectionKey&) const = default;
};

struct NicTarget {
  NicId nic{};
  bool operator==(const NicTarget&) const = default;
};
struct LinkTarget {
  NicId a{};
  NicId b{};
  bool operator==(const LinkTarget&) const = default;
};
struct TransportTarget {
  ConnectionKey connection;
  bool operator==(const TransportTarget&) const = default;
};
using FaultTarget = std::variant<NicTarget, LinkTarget, TransportTarget>;

class FaultError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FaultEvent {
  double time = 0.0;
  FaultTarget target = NicTarget{};
  bool permanent = true;
  std::optional<double> recovery_time;

  /// recovery_time must follow time; permanent faults never recover.
  void validate() const;
};

std::string describe(const FaultTarget& target);

struct DetectionConfig {
  double oob_latency = 0.5e-3;
  double probe_rtt = 10e-6;
  double probe_timeout = 5e-3;
  double poll_timeout = 30.0;  // peer spin time when the OOB path is disabled
  bool oob_enabled = true;
};

/// When the peer of a connection learns about an error its partner saw at
/// detect_time.
double peer_awareness_time(double detect_time, const DetectionConfig& cfg);

struct OobDelivery {
  NicId detector{};
  NicId peer{};
  double detected_at = 0.0;
  double delivered_at = 0.0;
};

/// Out-of-band error notification. Tracks incidents so that simultaneous
/// detection on both sides delivers both notifications but yields a single
/// localization.
class OobChannel {
 public:
  explicit OobChannel(DetectionConfig cfg) : cfg_(cfg) {}

  /// Schedules an OobNotify event at the peer; returns the delivery record.
  OobDelivery notify_oob(Engine& engine, NicId detector, NicId peer,
                         std::function<void(const OobDelivery&)> on_delivery = {});

  /// First caller for an unordered endpoint pair gets true; later callers for
  /// the same open incident get false.
  bool claim_localization(NicId a, NicId b);
  void close_incident(NicId a, NicId b);

  const std::vector<OobDelivery>& deliveries() const { return deliveries_; }

 private:
  DetectionConfig cfg_;
  std::vector<OobDelivery> deliveries_;
  std::vector<std::pair<std::int32_t, std::int32_t>> open_;
};

enum class ProbeResult { kSuccess, kLocalError, kTimeout };
std::string_view to_string(ProbeResult result);

struct ProbeOutcome {
  NicId prober{};
  NicId target{};
  ProbeResult result = ProbeResult::kSuccess;
  double latency = 0.0;  // time until the outcome is known
};

/// Zero-byte probe from a dedicated probe queue pair.
ProbeOutcome probe(NicId prober, NicId target, const HealthMap& health, const DetectionConfig& cfg);

enum class VerdictKind {
  kLocalNicFault,
  kRemoteNicFault,
  kLinkFault,
  kDualEndpointFault,
  kInconclusive,
};
std::string_view to_string(VerdictKind kind);

struct Verdict {
  VerdictKind kind = VerdictKind::kInconclusive;
  NicId first{};
  NicId second{};
  // Both endpoints reported local errors in one probe round: two independent
  // NIC faults surfaced together rather than one dual impairment.
  bool independent_local_faults = false;

  std::vector<NicId> faulty_nics() const;
  std::string describe() const;
  bool operator==(const Verdict&) const = default;
};

/// Maps a probe round to exactly one verdict. Requires a->b and b->a outcomes,
/// plus aux->a and aux->b when an auxiliary NIC is given. Throws FaultError if
/// a required outcome is missing.
Verdict triangulate(NicId a, NicId b, std::span<const ProbeOutcome> outcomes,
                    std::optional<NicId> aux = std::nullopt);

/// An auxiliary prober on a third server (same rail as `a` when possible)
/// that the believed health map considers usable. None on 2-server clusters.
std::optional<NicId> pick_aux(const ClusterTopology& topology, NicId a, NicId b,
                              const HealthMap& believed);

/// Issues the probe round for the pair and returns the verdict together with
/// the time the slowest probe took.
struct LocalizationResult {
  Verdict verdict;
  std::vector<ProbeOutcome> outcomes;
  double probe_round = 0.0;
};
LocalizationResult localize(const ClusterTopology& topology, NicId a, NicId b,
                            const HealthMap& physical, const HealthMap& believed,
                            const DetectionConfig& cfg);

// Reprobing after a verdict. The backoff policy is pluggable.
class ReprobePolicy {
 public:
  virtual ~ReprobePolicy() = default;
  virtual double interval(int attempt) const = 0;
};

class ExponentialBackoff final : public ReprobePolicy {
 public:
  ExponentialBackoff(double base = 0.1, double max = 10.0);
  double interval(int attempt) const override;

 private:
  double base_;
  double max_;
};

struct ReprobeHistory {
  int attempts = 0;
  double last_probe = 0.0;
};

/// Time of the next reprobe for a standing verdict.
double reprobe_schedule(const Verdict& verdict, const ReprobeHistory& history,
                        const ReprobePolicy& policy);

/// Periodically probes the components of a verdict against the physical
/// health map until they answer, then calls on_recovered once. Probing stops
/// early when keep_going returns false.
void start_reprobing(Engine& engine, const Verdict& verdict, const HealthMap& physical,
                     std::shared_ptr<const ReprobePolicy> policy, double start_time,
                     std::function<void(double, NicId)> on_recovered,
                     std::function<bool()> keep_going);

/// Timeline of one handled fault.
struct DetectionRecord {
  double fault_time = 0.0;
  double detected_at = 0.0;     // first endpoint observes the error
  double peer_aware_at = 0.0;   // other endpoint stops spinning
  double verdict_at = 0.0;      // probe round finished, verdict broadcast
  double migrated_at = 0.0;     // traffic resumes on the backup path
  Verdict verdict;
  std::string target;
};

}  // namespace ftsim
