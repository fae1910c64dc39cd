// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ftsim/engine.hpp"
#include "ftsim/faults.hpp"
#include "ftsim/topology.hpp"

namespace ftsim {

inline constexpr double kDefaultChunkSize = 1024.0 * 1024.0;

class NoBackupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TransportError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class SenderState { kNotSent, kInFlight, kCompleted };
enum class ReceiverState { kNotReceived, kPartial, kConfirmed };

struct RollbackPoint {
  std::int64_t sender_resume = 0;   // first chunk without a polled completion
  std::int64_t receiver_floor = -1; // last confirmed chunk
  std::int64_t retransmit_from = 0; // min(sender_resume, receiver_floor + 1)
};

/// Per-transfer record of chunk states on both ends. Payload values are mapped
/// onto chunks so the receiver's assembled copy can be compared bit for bit.
class ChunkLedger {
 public:
  ChunkLedger() = default;
  ChunkLedger(std::vector<double> payload, double total_bytes, double chunk_size);

  std::int64_t total_chunks() const { return static_cast<std::int64_t>(sender_.size()); }
  double total_bytes() const { return total_bytes_; }
  double chunk_size() const { return chunk_size_; }
  double chunk_begin(std::int64_t i) const;
  double chunk_end(std::int64_t i) const;

  SenderState sender(std::int64_t i) const { return sender_.at(static_cast<std::size_t>(i)); }
  ReceiverState receiver(std::int64_t i) const {
    return receiver_.at(static_cast<std::size_t>(i));
  }
  double partial_bytes(std::int64_t i) const { return partial_.at(static_cast<std::size_t>(i)); }
  std::uint64_t payload_checksum(std::int64_t i) const;

  void mark_in_flight(std::int64_t i);
  void mark_completed(std::int64_t i);
  /// Receiver sees the whole chunk; copies the sender's values.
  void mark_confirmed(std::int64_t i);
  /// Receiver holds only the first `bytes` of the chunk; the landed bytes are
  /// not trusted and get overwritten on retransmit.
  void mark_partial(std::int64_t i, double bytes);

  /// Applies a transmission that started at byte offset `from` and, at the
  /// moment of observation, had `sent` bytes completed at the sender and
  /// `confirmed` bytes visible to the receiver (both measured from `from`).
  void record_progress(double from, double sent, double confirmed);

  /// Rewinds every chunk from the retransmit point on.
  RollbackPoint rollback();

  bool all_confirmed() const;
  std::int64_t confirmed_count() const;

  /// Receiver's view of the payload; unconfirmed elements are NaN.
  const std::vector<double>& assembled() const { return received_; }
  const std::vector<double>& payload() const { return payload_; }
  bool intact() const;

  /// Bytes still to move when retransmitting from chunk `from`.
  double bytes_from(std::int64_t from) const;

 private:
  std::pair<std::size_t, std::size_t> element_range(std::int64_t i) const;

  std::vector<double> payload_;
  std::vector<double> received_;
  double total_bytes_ = 0.0;
  double chunk_size_ = kDefaultChunkSize;
  std::vector<SenderState> sender_;
  std::vector<ReceiverState> receiver_;
  std::vector<double> partial_;
};

struct RegistrationConfig {
  bool multi_registration = true;  // false: register lazily on migration (ablation)
  double cost_per_buffer = 2e-3;   // seconds per buffer per NIC
  int buffers = 1;
};

/// One side of a cross-server connection: the active NIC, its failover chain
/// and the pre-registered NIC set.
class Connection {
 public:
  Connection(const ClusterTopology& topology, GpuId gpu, ServerId peer,
             RegistrationConfig reg = {});

  GpuId gpu() const { return gpu_; }
  ServerId server() const { return server_; }
  ServerId peer() const { return peer_; }
  NicId active_nic() const { return chain_.at(position_); }
  const std::vector<NicId>& chain() const { return chain_; }
  const std::vector<NicId>& registered_nics() const { return registered_; }
  bool is_registered(NicId nic) const;

  /// Registers the buffer with every NIC in the set. Throws TopologyError for
  /// a NIC on another server. Idempotent.
  void register_multi(std::span<const NicId> nics);

  /// Moves `nic` to the head of the chain and makes it active; the rest keeps
  /// its order. Used when a connection starts on a NIC other than the GPU's
  /// nearest one.
  void start_on(NicId nic);

  /// Restricts the failover chain to the given prefix length (for tests and
  /// for servers that expose fewer backup NICs).
  void truncate_chain(std::size_t length);

  ChunkLedger& ledger() { return ledger_; }
  const ChunkLedger& ledger() const { return ledger_; }
  void reset_ledger(std::vector<double> payload, double bytes, double chunk_size);

  void flag_failure() { failure_pending_ = true; }
  void clear_failure() { failure_pending_ = false; }
  bool failure_pending() const { return failure_pending_; }

  /// Valid only with a failure pending.
  RollbackPoint rollback();

  /// Moves to the first NIC after the current chain position that `usable`
  /// accepts. Throws NoBackupError when the chain is exhausted. Returns the new
  /// active NIC; registration_delay() then reports what the move cost.
  NicId migrate(const HealthMap& health);
  NicId migrate(const std::function<bool(NicId)>& usable);
  double registration_delay() const { return last_registration_delay_; }
  int migrations() const { return migrations_; }

 private:
  const ClusterTopology* topology_;
  GpuId gpu_;
  ServerId server_;
  ServerId peer_;
  RegistrationConfig reg_;
  std::vector<NicId> chain_;
  std::size_t position_ = 0;
  std::vector<NicId> registered_;
  ChunkLedger ledger_;
  bool failure_pending_ = false;
  double last_registration_delay_ = 0.0;
  int migrations_ = 0;
};

/// Event-driven point-to-point transfer over a Connection, with in-band
/// failure handling: detection, OOB notify, probe round, rollback, migration
/// and retransmission.
class TransferSession {
 public:
  struct Result {
    bool complete = false;
    bool no_backup = false;
    double finish_time = 0.0;
    std::vector<DetectionRecord> detections;
    std::vector<RollbackPoint> rollbacks;
  };

  TransferSession(Engine& engine, const ClusterTopology& topology, Connection& conn,
                  HealthMap& physical, DetectionConfig detection, double alpha);

  /// Splits data into ceil(bytes/chunk_size) chunks and schedules pipelined
  /// ChunkComplete events at the active NIC's rate. Empty data completes now.
  void send_chunks(std::vector<double> data, double bytes, double chunk_size);

  /// Marks the NIC failed in the physical map; if it carries this transfer the
  /// sender observes the error at once.
  void fail_nic(NicId nic);

  std::function<void(double, NicId)> on_migrated;

  const Result& result() const { return result_; }
  NicId peer_nic() const;

 private:
  void start_transmission(std::int64_t from_chunk);
  void handle_failure(NicId failed);
  void resolve(double fault_time, double detected_at);
  bool known_usable(NicId nic) const;
  double rate() const;

  Engine& engine_;
  const ClusterTopology& topology_;
  Connection& conn_;
  HealthMap& physical_;
  DetectionConfig detection_;
  double alpha_;
  OobChannel oob_;
  std::uint64_t generation_ = 0;
  double tx_start_ = 0.0;
  std::int64_t tx_from_ = 0;
  bool stalled_ = false;
  std::vector<NicId> known_failed_;
  Result result_;
};

}  // namespace ftsim
