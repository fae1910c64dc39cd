// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/transport.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace ftsim {

namespace {

constexpr double kPartialGarbage = -1.0e300;

std::int64_t chunk_count(double bytes, double chunk_size) {
  if (bytes <= 0.0) return 0;
  auto n = static_cast<std::int64_t>(std::ceil(bytes / chunk_size));
  if (n > 1 && static_cast<double>(n - 1) * chunk_size >= bytes) --n;
  return std::max<std::int64_t>(n, 1);
}

}  // namespace

ChunkLedger::ChunkLedger(std::vector<double> payload, double total_bytes, double chunk_size)
    : payload_(std::move(payload)), total_bytes_(total_bytes), chunk_size_(chunk_size) {
  if (!(chunk_size > 0.0)) throw TransportError("chunk_size must be > 0");
  if (!(total_bytes >= 0.0)) throw TransportError("transfer size must be >= 0");
  const auto n = static_cast<std::size_t>(chunk_count(total_bytes, chunk_size));
  if (n == 0 && !payload_.empty()) throw TransportError("payload without bytes");
  received_.assign(payload_.size(), std::numeric_limits<double>::quiet_NaN());
  sender_.assign(n, SenderState::kNotSent);
  receiver_.assign(n, ReceiverState::kNotReceived);
  partial_.assign(n, 0.0);
}

double ChunkLedger::chunk_begin(std::int64_t i) const {
  return std::min(total_bytes_, static_cast<double>(i) * chunk_size_);
}

double ChunkLedger::chunk_end(std::int64_t i) const {
  return std::min(total_bytes_, static_cast<double>(i + 1) * chunk_size_);
}

std::pair<std::size_t, std::size_t> ChunkLedger::element_range(std::int64_t i) const {
  const auto n = static_cast<std::size_t>(total_chunks());
  const std::size_t ne = payload_.size();
  const auto k = static_cast<std::size_t>(i);
  return {k * ne / n, (k + 1) * ne / n};
}

std::uint64_t ChunkLedger::payload_checksum(std::int64_t i) const {
  // FNV-1a over the raw bit patterns of the chunk's values.
  std::uint64_t h = 1469598103934665603ULL;
  const auto [lo, hi] = element_range(i);
  for (std::size_t e = lo; e < hi; ++e) {
    const auto bits = std::bit_cast<std::uint64_t>(payload_[e]);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

void ChunkLedger::mark_in_flight(std::int64_t i) {
  auto& s = sender_.at(static_cast<std::size_t>(i));
  if (s == SenderState::kNotSent) s = SenderState::kInFlight;
}

void ChunkLedger::mark_completed(std::int64_t i) {
  sender_.at(static_cast<std::size_t>(i)) = SenderState::kCompleted;
}

void ChunkLedger::mark_confirmed(std::int64_t i) {
  const auto k = static_cast<std::size_t>(i);
  if (sender_.at(k) != SenderState::kCompleted) {
    throw TransportError(fmt::format("chunk {} confirmed before its completion", i));
  }
  if (receiver_[k] == ReceiverState::kConfirmed) return;
  const auto [lo, hi] = element_range(i);
  std::copy(payload_.begin() + static_cast<std::ptrdiff_t>(lo),
            payload_.begin() + static_cast<std::ptrdiff_t>(hi),
            received_.begin() + static_cast<std::ptrdiff_t>(lo));
  receiver_[k] = ReceiverState::kConfirmed;
  partial_[k] = 0.0;
}

void ChunkLedger::mark_partial(std::int64_t i, double bytes) {
  const auto k = static_cast<std::size_t>(i);
  if (receiver_.at(k) == ReceiverState::kConfirmed) return;
  receiver_[k] = ReceiverState::kPartial;
  partial_[k] = bytes;
  // Landed bytes are junk until the chunk is confirmed.
  const auto [lo, hi] = element_range(i);
  const double size = chunk_end(i) - chunk_begin(i);
  const auto landed =
      lo + static_cast<std::size_t>(static_cast<double>(hi - lo) * std::clamp(bytes / size, 0.0, 1.0));
  std::fill(received_.begin() + static_cast<std::ptrdiff_t>(lo),
            received_.begin() + static_cast<std::ptrdiff_t>(landed), kPartialGarbage);
}

void ChunkLedger::record_progress(double from, double sent, double confirmed) {
  const std::int64_t n = total_chunks();
  for (std::int64_t j = 0; j < n; ++j) {
    const double b = chunk_begin(j) - from;
    const double e = chunk_end(j) - from;
    if (e <= 0.0) continue;
    if (e <= sent) {
      mark_completed(j);
    } else if (b < sent) {
      mark_in_flight(j);
    } else {
      break;
    }
    if (e <= confirmed) {
      mark_confirmed(j);
    } else {
      mark_partial(j, std::min(sent, e) - std::max(b, 0.0));
    }
  }
}

RollbackPoint ChunkLedger::rollback() {
  const std::int64_t n = total_chunks();
  RollbackPoint p;
  p.sender_resume = n;
  for (std::int64_t i = 0; i < n; ++i) {
    if (sender_[static_cast<std::size_t>(i)] != SenderState::kCompleted) {
      p.sender_resume = i;
      break;
    }
  }
  for (std::int64_t i = n - 1; i >= 0; --i) {
    if (receiver_[static_cast<std::size_t>(i)] == ReceiverState::kConfirmed) {
      p.receiver_floor = i;
      break;
    }
  }
  p.retransmit_from = std::min(p.sender_resume, p.receiver_floor + 1);
  for (std::int64_t i = p.retransmit_from; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    sender_[k] = SenderState::kNotSent;
    if (receiver_[k] != ReceiverState::kConfirmed) {
      receiver_[k] = ReceiverState::kNotReceived;
      partial_[k] = 0.0;
      const auto [lo, hi] = element_range(i);
      std::fill(received_.begin() + static_cast<std::ptrdiff_t>(lo),
                received_.begin() + static_cast<std::ptrdiff_t>(hi),
                std::numeric_limits<double>::quiet_NaN());
    }
  }
  return p;
}

bool ChunkLedger::all_confirmed() const {
  return std::all_of(receiver_.begin(), receiver_.end(),
                     [](ReceiverState s) { return s == ReceiverState::kConfirmed; });
}

std::int64_t ChunkLedger::confirmed_count() const {
  return std::count(receiver_.begin(), receiver_.end(), ReceiverState::kConfirmed);
}

bool ChunkLedger::intact() const {
  if (!all_confirmed()) return false;
  for (std::size_t e = 0; e < payload_.size(); ++e) {
    if (std::bit_cast<std::uint64_t>(payload_[e]) != std::bit_cast<std::uint64_t>(received_[e])) {
      return false;
    }
  }
  return true;
}

double ChunkLedger::bytes_from(std::int64_t from) const {
  return total_bytes_ - chunk_begin(from);
}

Connection::Connection(const ClusterTopology& topology, GpuId gpu, ServerId peer,
                       RegistrationConfig reg)
    : topology_(&topology),
      gpu_(gpu),
      server_(topology.server_of(gpu)),
      peer_(peer),
      reg_(reg),
      chain_(failover_chain(topology, gpu)) {
  if (peer_ == server_) throw TransportError("a connection needs a peer on another server");
  registered_.push_back(chain_.front());
}

bool Connection::is_registered(NicId nic) const {
  return std::find(registered_.begin(), registered_.end(), nic) != registered_.end();
}

void Connection::register_multi(std::span<const NicId> nics) {
  for (NicId nic : nics) {
    if (topology_->nic(nic).server != server_) {
      throw TopologyError(fmt::format("{} is not on server {}", to_string(nic), to_index(server_)));
    }
  }
  std::vector<NicId> next(nics.begin(), nics.end());
  if (std::find(next.begin(), next.end(), active_nic()) == next.end()) {
    next.push_back(active_nic());
  }
  std::sort(next.begin(), next.end());
  next.erase(std::unique(next.begin(), next.end()), next.end());
  registered_ = std::move(next);
}

void Connection::start_on(NicId nic) {
  const auto it = std::find(chain_.begin(), chain_.end(), nic);
  if (it == chain_.end()) throw TransportError(fmt::format("{} is not in the failover chain", to_string(nic)));
  std::rotate(chain_.begin(), it, it + 1);
  position_ = 0;
  if (!is_registered(nic)) registered_.push_back(nic);
}

void Connection::truncate_chain(std::size_t length) {
  if (length == 0 || length > chain_.size()) throw TransportError("bad failover chain length");
  if (position_ >= length) throw TransportError("active NIC lies beyond the truncated chain");
  chain_.resize(length);
}

void Connection::reset_ledger(std::vector<double> payload, double bytes, double chunk_size) {
  ledger_ = ChunkLedger(std::move(payload), bytes, chunk_size);
  failure_pending_ = false;
}

RollbackPoint Connection::rollback() {
  if (!failure_pending_) throw TransportError("rollback without a pending failure");
  return ledger_.rollback();
}

NicId Connection::migrate(const HealthMap& health) {
  return migrate([&health](NicId nic) { return health.nic_healthy(nic); });
}

NicId Connection::migrate(const std::function<bool(NicId)>& usable) {
  last_registration_delay_ = 0.0;
  for (std::size_t p = position_ + 1; p < chain_.size(); ++p) {
    const NicId nic = chain_[p];
    if (!usable(nic)) continue;
    if (!is_registered(nic)) {
      if (reg_.multi_registration) continue;
      last_registration_delay_ = reg_.cost_per_buffer * static_cast<double>(reg_.buffers);
      registered_.push_back(nic);
    }
    position_ = p;
    failure_pending_ = false;
    ++migrations_;
    return nic;
  }
  throw NoBackupError(fmt::format("no backup NIC left for GPU {} after {}", to_index(gpu_),
                                  to_string(active_nic())));
}

TransferSession::TransferSession(Engine& engine, const ClusterTopology& topology, Connection& conn,
                                 HealthMap& physical, DetectionConfig detection, double alpha)
    : engine_(engine),
      topology_(topology),
      conn_(conn),
      physical_(physical),
      detection_(detection),
      alpha_(alpha),
      oob_(detection) {}

NicId TransferSession::peer_nic() const {
  const auto rail = topology_.nic(conn_.active_nic()).rail;
  if (auto nic = topology_.nic_on_rail(conn_.peer(), rail)) return *nic;
  return topology_.server_nics(conn_.peer()).front().id;
}

double TransferSession::rate() const {
  return std::min(topology_.nic(conn_.active_nic()).bandwidth, topology_.nic(peer_nic()).bandwidth);
}

void TransferSession::send_chunks(std::vector<double> data, double bytes, double chunk_size) {
  conn_.reset_ledger(std::move(data), bytes, chunk_size);
  result_ = Result{};
  if (conn_.ledger().total_chunks() == 0) {
    result_.complete = true;
    result_.finish_time = engine_.now();
    return;
  }
  start_transmission(0);
}

void TransferSession::start_transmission(std::int64_t from_chunk) {
  ++generation_;
  stalled_ = false;
  tx_start_ = engine_.now();
  tx_from_ = from_chunk;
  ChunkLedger& ledger = conn_.ledger();
  const std::int64_t n = ledger.total_chunks();
  if (from_chunk >= n) {
    result_.complete = true;
    result_.finish_time = engine_.now();
    return;
  }
  const NicId a = conn_.active_nic();
  const NicId b = peer_nic();
  if (!physical_.path_usable(a, b)) {
    handle_failure(physical_.nic_healthy(a) ? b : a);
    return;
  }
  const double base = ledger.chunk_begin(from_chunk);
  const double r = rate();
  const std::uint64_t gen = generation_;
  for (std::int64_t j = from_chunk; j < n; ++j) {
    ledger.mark_in_flight(j);
    const double done = tx_start_ + alpha_ + (ledger.chunk_end(j) - base) / r;
    engine_.schedule(done, EventKind::kChunkComplete, fmt::format("chunk {} sent", j),
                     [this, gen, j](Engine& e) {
                       if (gen != generation_) return;
                       conn_.ledger().mark_completed(j);
                       e.schedule(e.now() + alpha_, EventKind::kChunkComplete,
                                  fmt::format("chunk {} confirmed", j), [this, gen, j](Engine& e2) {
                                    if (gen != generation_) return;
                                    ChunkLedger& l = conn_.ledger();
                                    l.mark_confirmed(j);
                                    if (j == l.total_chunks() - 1 && l.all_confirmed()) {
                                      result_.complete = true;
                                      result_.finish_time = e2.now();
                                    }
                                  });
                     });
  }
}

void TransferSession::fail_nic(NicId nic) {
  physical_.set_nic(nic, false);
  if (result_.complete || result_.no_backup || stalled_) return;
  if (nic == conn_.active_nic() || nic == peer_nic()) handle_failure(nic);
}

void TransferSession::handle_failure(NicId /*failed*/) {
  ++generation_;
  stalled_ = true;
  ChunkLedger& ledger = conn_.ledger();
  // Chunk events already marked completions; the in-flight chunk holds only
  // part of its bytes at the receiver.
  const double base = ledger.chunk_begin(tx_from_);
  const double sent = std::max(0.0, engine_.now() - tx_start_ - alpha_) * rate();
  for (std::int64_t j = tx_from_; j < ledger.total_chunks(); ++j) {
    const double b = ledger.chunk_begin(j) - base;
    const double e = ledger.chunk_end(j) - base;
    if (ledger.sender(j) == SenderState::kCompleted) continue;
    if (b < sent && sent < e) ledger.mark_partial(j, sent - b);
    break;
  }
  conn_.flag_failure();
  const double fault_time = engine_.now();
  const OobDelivery d = oob_.notify_oob(engine_, conn_.active_nic(), peer_nic());
  engine_.schedule(d.delivered_at, EventKind::kProbeResult, "probe round",
                   [this, fault_time](Engine&) { resolve(fault_time, fault_time); });
}

void TransferSession::resolve(double fault_time, double detected_at) {
  const NicId a = conn_.active_nic();
  const NicId b = peer_nic();
  HealthMap believed = topology_.healthy_map();
  const LocalizationResult loc = localize(topology_, a, b, physical_, believed, detection_);
  const double verdict_at = engine_.now() + loc.probe_round;
  engine_.schedule(verdict_at, EventKind::kProbeResult, "verdict " + loc.verdict.describe(),
                   [this, loc, fault_time, detected_at](Engine& e) {
                     DetectionRecord rec;
                     rec.fault_time = fault_time;
                     rec.detected_at = detected_at;
                     rec.peer_aware_at = peer_awareness_time(detected_at, detection_);
                     rec.verdict_at = e.now();
                     rec.verdict = loc.verdict;
                     rec.target = loc.verdict.describe();
                     result_.rollbacks.push_back(conn_.rollback());
                     try {
                       conn_.migrate([this](NicId nic) { return known_usable(nic); });
                     } catch (const NoBackupError&) {
                       result_.no_backup = true;
                       rec.migrated_at = e.now();
                       result_.detections.push_back(rec);
                       return;
                     }
                     rec.migrated_at = e.now() + conn_.registration_delay();
                     result_.detections.push_back(rec);
                     const std::int64_t from = result_.rollbacks.back().retransmit_from;
                     e.schedule(rec.migrated_at, EventKind::kRecovery, "retransmit",
                                [this, from](Engine& e2) {
                                  if (on_migrated) on_migrated(e2.now(), conn_.active_nic());
                                  start_transmission(from);
                                });
                   });
  for (NicId nic : loc.verdict.faulty_nics()) known_failed_.push_back(nic);
}

bool TransferSession::known_usable(NicId nic) const {
  return std::find(known_failed_.begin(), known_failed_.end(), nic) == known_failed_.end();
}

}  // namespace ftsim
