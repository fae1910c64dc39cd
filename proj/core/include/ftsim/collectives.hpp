// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ftsim/topology.hpp"

namespace ftsim {

enum class CollectiveKind {
  kReduceScatter,
  kAllGather,
  kBroadcast,
  kReduce,
  kAllReduce,
  kSendRecv,
  kAllToAll,
};
std::string_view to_string(CollectiveKind kind);
CollectiveKind parse_collective_kind(std::string_view name);

enum class ReduceOp { kSum };

class CollectiveError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CollectiveRequest {
  CollectiveKind kind = CollectiveKind::kAllReduce;
  double bytes = 1024.0 * 1024.0 * 1024.0;  // D per GPU
  std::vector<GpuId> participants;          // SendRecv: {src, dst}
  int root = 0;                             // index into participants
  ReduceOp reduction = ReduceOp::kSum;
  int channels = 0;                         // 0: one per rail

  void validate() const;
};

/// Every GPU of the topology, in rank order.
std::vector<GpuId> all_ranks(const ClusterTopology& topology);

/// Participants ordered server by server (in server_order), then by local
/// index.
std::vector<GpuId> server_major_ring(const ClusterTopology& topology,
                                     std::span<const ServerId> server_order,
                                     std::span<const GpuId> participants);

enum class StageTag {
  kReduceScatter,
  kAllGather,
  kBroadcast,
  kReduce,
  kSendRecv,
  kAllToAll,
  kIntraReduce,
  kContribution,
  kIntraBroadcast,
};
std::string_view to_string(StageTag tag);

enum class HopOp { kCopy, kAdd };

enum class PassKind { kRingReduceScatter, kRingAllGather, kChain, kSendRecv, kAllToAll };

/// One data movement of a round. Element ranges index the rank buffers; bytes
/// is the modeled wire size.
struct Transfer {
  GpuId src{};
  GpuId dst{};
  int channel = 0;
  int block = 0;
  HopOp op = HopOp::kCopy;
  bool from_snapshot = false;  // read the sender's pre-pass input (AllToAll)
  std::size_t src_begin = 0;
  std::size_t src_end = 0;
  std::size_t dst_begin = 0;
  std::size_t dst_end = 0;
  double bytes = 0.0;
};

/// A lockstep sequence of rounds over one element region. Ring passes move one
/// block per rank per round; chains pipeline `pieces` pieces along a path.
struct Pass {
  PassKind kind = PassKind::kRingReduceScatter;
  StageTag tag = StageTag::kReduceScatter;
  std::vector<GpuId> ranks;   // ring order, chain path or {src, dst}
  std::vector<int> shard_of;  // ring passes: shard owned by ranks[p]
  std::vector<HopOp> hop_ops; // chains: one per hop
  int pieces = 1;
  std::size_t elem_begin = 0;
  std::size_t elem_end = 0;
  double bytes = 0.0;         // modeled size of the region

  int rounds() const;
  /// True when every round moves the same traffic pattern.
  bool uniform_rounds() const;
  void round_transfers(int round, int channels, std::vector<Transfer>& out) const;
};

struct Step {
  int round = 0;
  int channel = 0;
  GpuId src{};
  GpuId dst{};
  int block = 0;
  StageTag tag = StageTag::kReduceScatter;
};

struct Schedule {
  std::vector<GpuId> ring_order;
  int channels = 1;
  std::vector<Pass> passes;  // executed back to back

  int rounds() const;
  /// Expands every pass into explicit steps, rounds numbered globally.
  std::vector<Step> steps() const;
};

/// Chain pipeline depth for a region: one piece per chunk, at least 1, at most
/// max_pieces.
int pipeline_pieces(double bytes, int channels, double chunk_size, int max_pieces = 128);

/// Ring schedule for the request over ring_order (a permutation of the
/// participants). Throws CollectiveError for fewer than 2 participants.
Schedule ring_schedule(const CollectiveRequest& req, std::span<const GpuId> ring_order,
                       int channels, double chunk_size, std::size_t elements);

/// Buffers indexed by participant index; every buffer holds `elements` values.
using RankBuffers = std::vector<std::vector<double>>;

/// Shard q of an E-element buffer split over P ranks: [q*E/P, (q+1)*E/P).
std::pair<std::size_t, std::size_t> shard_range(std::size_t elements, int ranks, int q);

/// Integer-valued deterministic inputs, shaped for the request's kind.
RankBuffers make_inputs(const CollectiveRequest& req, std::size_t elements, std::uint64_t seed);

struct OracleResult {
  RankBuffers buffers;        // expected output per participant
  std::vector<bool> defined;  // Reduce leaves non-root outputs undefined
};

OracleResult oracle(const CollectiveRequest& req, const RankBuffers& inputs);

/// Maps executed full-length buffers to the request's output shape
/// (ReduceScatter keeps only the owned shard).
RankBuffers extract_outputs(const CollectiveRequest& req, const RankBuffers& executed);

/// Exact equality on defined outputs; NaN never matches.
bool outputs_match(const OracleResult& expected, const RankBuffers& actual,
                   double rel_tolerance = 0.0);

}  // namespace ftsim
