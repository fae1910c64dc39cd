// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/collectives.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <fmt/format.h>

namespace ftsim {

std::string_view to_string(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::kReduceScatter: return "ReduceScatter";
    case CollectiveKind::kAllGather: return "AllGather";
    case CollectiveKind::kBroadcast: return "Broadcast";
    case CollectiveKind::kReduce: return "Reduce";
    case CollectiveKind::kAllReduce: return "AllReduce";
    case CollectiveKind::kSendRecv: return "SendRecv";
    case CollectiveKind::kAllToAll: return "AllToAll";
  }
  return "Unknown";
}

CollectiveKind parse_collective_kind(std::string_view name) {
  for (auto k : {CollectiveKind::kReduceScatter, CollectiveKind::kAllGather,
                 CollectiveKind::kBroadcast, CollectiveKind::kReduce, CollectiveKind::kAllReduce,
                 CollectiveKind::kSendRecv, CollectiveKind::kAllToAll}) {
    if (to_string(k) == name) return k;
  }
  throw CollectiveError("unknown collective kind: " + std::string(name));
}

std::string_view to_string(StageTag tag) {
  switch (tag) {
    case StageTag::kReduceScatter: return "reduce_scatter";
    case StageTag::kAllGather: return "all_gather";
    case StageTag::kBroadcast: return "broadcast";
    case StageTag::kReduce: return "reduce";
    case StageTag::kSendRecv: return "send_recv";
    case StageTag::kAllToAll: return "all_to_all";
    case StageTag::kIntraReduce: return "intra_reduce";
    case StageTag::kContribution: return "contribution";
    case StageTag::kIntraBroadcast: return "intra_broadcast";
  }
  return "unknown";
}

void CollectiveRequest::validate() const {
  if (!(bytes >= 0.0) || !std::isfinite(bytes)) throw CollectiveError("bytes must be finite and >= 0");
  if (participants.size() < 2) throw CollectiveError("a collective needs at least 2 participants");
  std::set<GpuId> seen(participants.begin(), participants.end());
  if (seen.size() != participants.size()) throw CollectiveError("participants must be distinct");
  if (kind == CollectiveKind::kSendRecv && participants.size() != 2) {
    throw CollectiveError("SendRecv takes exactly {src, dst}");
  }
  if (root < 0 || root >= static_cast<int>(participants.size())) {
    throw CollectiveError("root must index a participant");
  }
  if (channels < 0) throw CollectiveError("channels must be >= 0");
}

std::vector<GpuId> all_ranks(const ClusterTopology& topology) {
  std::vector<GpuId> out;
  for (int r = 0; r < topology.total_gpus(); ++r) out.push_back(make_id<GpuId>(static_cast<std::size_t>(r)));
  return out;
}

std::vector<GpuId> server_major_ring(const ClusterTopology& topology,
                                     std::span<const ServerId> server_order,
                                     std::span<const GpuId> participants) {
  std::vector<GpuId> out;
  out.reserve(participants.size());
  for (ServerId s : server_order) {
    for (int k = 0; k < topology.gpus_per_server(); ++k) {
      const GpuId gpu = topology.gpu(s, k);
      if (std::find(participants.begin(), participants.end(), gpu) != participants.end()) {
        out.push_back(gpu);
      }
    }
  }
  if (out.size() != participants.size()) {
    throw CollectiveError("server order does not cover every participant");
  }
  return out;
}

namespace {

std::pair<std::size_t, std::size_t> split(std::size_t begin, std::size_t end, std::size_t parts,
                                          std::size_t index) {
  const std::size_t len = end - begin;
  return {begin + index * len / parts, begin + (index + 1) * len / parts};
}

int mod(int a, int m) { return ((a % m) + m) % m; }

}  // namespace

std::pair<std::size_t, std::size_t> shard_range(std::size_t elements, int ranks, int q) {
  return split(0, elements, static_cast<std::size_t>(ranks), static_cast<std::size_t>(q));
}

int Pass::rounds() const {
  const int p = static_cast<int>(ranks.size());
  switch (kind) {
    case PassKind::kRingReduceScatter:
    case PassKind::kRingAllGather:
    case PassKind::kAllToAll: return p - 1;
    case PassKind::kChain: return p <= 1 ? 0 : pieces + p - 2;
    case PassKind::kSendRecv: return 1;
  }
  return 0;
}

bool Pass::uniform_rounds() const {
  switch (kind) {
    case PassKind::kRingReduceScatter:
    case PassKind::kRingAllGather:
    case PassKind::kSendRecv: return true;
    case PassKind::kChain: return ranks.size() == 2;
    case PassKind::kAllToAll: return false;
  }
  return false;
}

void Pass::round_transfers(int round, int channels, std::vector<Transfer>& out) const {
  const int p = static_cast<int>(ranks.size());
  const auto c_count = static_cast<std::size_t>(channels);
  auto emit = [&](GpuId src, GpuId dst, int c, int block, HopOp op, std::pair<std::size_t, std::size_t> s,
                  std::pair<std::size_t, std::size_t> d, double b, bool snap) {
    out.push_back(Transfer{src, dst, c, block, op, snap, s.first, s.second, d.first, d.second, b});
  };
  switch (kind) {
    case PassKind::kRingReduceScatter:
    case PassKind::kRingAllGather: {
      const bool rs = kind == PassKind::kRingReduceScatter;
      const double b = bytes / (static_cast<double>(p) * channels);
      for (int pos = 0; pos < p; ++pos) {
        const int shard = shard_of[static_cast<std::size_t>(mod(pos - round - (rs ? 1 : 0), p))];
        const auto sh = split(elem_begin, elem_end, static_cast<std::size_t>(p),
                              static_cast<std::size_t>(shard));
        for (int c = 0; c < channels; ++c) {
          const auto r = split(sh.first, sh.second, c_count, static_cast<std::size_t>(c));
          emit(ranks[static_cast<std::size_t>(pos)], ranks[static_cast<std::size_t>((pos + 1) % p)], c,
               shard, rs ? HopOp::kAdd : HopOp::kCopy, r, r, b, false);
        }
      }
      break;
    }
    case PassKind::kChain: {
      const int hops = p - 1;
      const double b = bytes / (static_cast<double>(pieces) * channels);
      for (int h = 0; h < hops; ++h) {
        const int k = round - h;
        if (k < 0 || k >= pieces) continue;
        for (int c = 0; c < channels; ++c) {
          const auto slice = split(elem_begin, elem_end, c_count, static_cast<std::size_t>(c));
          const auto r = split(slice.first, slice.second, static_cast<std::size_t>(pieces),
                               static_cast<std::size_t>(k));
          emit(ranks[static_cast<std::size_t>(h)], ranks[static_cast<std::size_t>(h + 1)], c, k,
               hop_ops[static_cast<std::size_t>(h)], r, r, b, false);
        }
      }
      break;
    }
    case PassKind::kSendRecv: {
      const double b = bytes / channels;
      for (int c = 0; c < channels; ++c) {
        const auto r = split(elem_begin, elem_end, c_count, static_cast<std::size_t>(c));
        emit(ranks[0], ranks[1], c, 0, HopOp::kCopy, r, r, b, false);
      }
      break;
    }
    case PassKind::kAllToAll: {
      const int step = round + 1;
      const double b = bytes / (static_cast<double>(p) * channels);
      for (int pos = 0; pos < p; ++pos) {
        const int to = (pos + step) % p;
        const auto src_block = split(elem_begin, elem_end, static_cast<std::size_t>(p),
                                     static_cast<std::size_t>(shard_of[static_cast<std::size_t>(to)]));
        const auto dst_block = split(elem_begin, elem_end, static_cast<std::size_t>(p),
                                     static_cast<std::size_t>(shard_of[static_cast<std::size_t>(pos)]));
        for (int c = 0; c < channels; ++c) {
          emit(ranks[static_cast<std::size_t>(pos)], ranks[static_cast<std::size_t>(to)], c,
               shard_of[static_cast<std::size_t>(to)], HopOp::kCopy,
               split(src_block.first, src_block.second, c_count, static_cast<std::size_t>(c)),
               split(dst_block.first, dst_block.second, c_count, static_cast<std::size_t>(c)), b, true);
        }
      }
      break;
    }
  }
}

int Schedule::rounds() const {
  int total = 0;
  for (const auto& pass : passes) total += pass.rounds();
  return total;
}

std::vector<Step> Schedule::steps() const {
  std::vector<Step> out;
  std::vector<Transfer> transfers;
  int base = 0;
  for (const auto& pass : passes) {
    for (int r = 0; r < pass.rounds(); ++r) {
      transfers.clear();
      pass.round_transfers(r, channels, transfers);
      for (const auto& t : transfers) {
        out.push_back(Step{base + r, t.channel, t.src, t.dst, t.block, pass.tag});
      }
    }
    base += pass.rounds();
  }
  return out;
}

int pipeline_pieces(double bytes, int channels, double chunk_size, int max_pieces) {
  const double per_channel = bytes / std::max(1, channels);
  const double pieces = std::ceil(per_channel / chunk_size);
  if (!(pieces >= 1.0)) return 1;
  return static_cast<int>(std::min<double>(pieces, max_pieces));
}

Schedule ring_schedule(const CollectiveRequest& req, std::span<const GpuId> ring_order, int channels,
                       double chunk_size, std::size_t elements) {
  req.validate();
  if (channels < 1) throw CollectiveError("channels must be >= 1");
  const std::set<GpuId> want(req.participants.begin(), req.participants.end());
  const std::set<GpuId> got(ring_order.begin(), ring_order.end());
  if (want != got || ring_order.size() != req.participants.size()) {
    throw CollectiveError("ring order must be a permutation of the participants");
  }
  const int p = static_cast<int>(ring_order.size());

  Schedule s;
  s.ring_order.assign(ring_order.begin(), ring_order.end());
  s.channels = channels;

  Pass base;
  base.ranks = s.ring_order;
  base.elem_begin = 0;
  base.elem_end = elements;
  base.bytes = req.bytes;
  for (GpuId g : s.ring_order) {
    const auto it = std::find(req.participants.begin(), req.participants.end(), g);
    base.shard_of.push_back(static_cast<int>(it - req.participants.begin()));
  }
  const GpuId root = req.participants[static_cast<std::size_t>(req.root)];
  const int root_pos =
      static_cast<int>(std::find(s.ring_order.begin(), s.ring_order.end(), root) - s.ring_order.begin());

  auto ring_pass = [&](PassKind kind, StageTag tag) {
    Pass pass = base;
    pass.kind = kind;
    pass.tag = tag;
    return pass;
  };
  auto chain_pass = [&](int first_pos, HopOp op, StageTag tag) {
    Pass pass = base;
    pass.kind = PassKind::kChain;
    pass.tag = tag;
    pass.ranks.clear();
    for (int i = 0; i < p; ++i) pass.ranks.push_back(s.ring_order[static_cast<std::size_t>((first_pos + i) % p)]);
    pass.shard_of.clear();
    pass.hop_ops.assign(static_cast<std::size_t>(p - 1), op);
    pass.pieces = pipeline_pieces(req.bytes, channels, chunk_size);
    return pass;
  };

  switch (req.kind) {
    case CollectiveKind::kReduceScatter:
      s.passes.push_back(ring_pass(PassKind::kRingReduceScatter, StageTag::kReduceScatter));
      break;
    case CollectiveKind::kAllGather:
      s.passes.push_back(ring_pass(PassKind::kRingAllGather, StageTag::kAllGather));
      break;
    case CollectiveKind::kAllReduce:
      s.passes.push_back(ring_pass(PassKind::kRingReduceScatter, StageTag::kReduceScatter));
      s.passes.push_back(ring_pass(PassKind::kRingAllGather, StageTag::kAllGather));
      break;
    case CollectiveKind::kBroadcast:
      s.passes.push_back(chain_pass(root_pos, HopOp::kCopy, StageTag::kBroadcast));
      break;
    case CollectiveKind::kReduce:
      s.passes.push_back(chain_pass(root_pos + 1, HopOp::kAdd, StageTag::kReduce));
      break;
    case CollectiveKind::kSendRecv: {
      Pass pass = base;
      pass.kind = PassKind::kSendRecv;
      pass.tag = StageTag::kSendRecv;
      pass.ranks = req.participants;
      pass.shard_of.clear();
      s.passes.push_back(pass);
      break;
    }
    case CollectiveKind::kAllToAll:
      s.passes.push_back(ring_pass(PassKind::kAllToAll, StageTag::kAllToAll));
      break;
  }
  return s;
}

RankBuffers make_inputs(const CollectiveRequest& req, std::size_t elements, std::uint64_t seed) {
  const int p = static_cast<int>(req.participants.size());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(-1000, 1000);
  RankBuffers in(static_cast<std::size_t>(p), std::vector<double>(elements, 0.0));
  for (int i = 0; i < p; ++i) {
    auto& buf = in[static_cast<std::size_t>(i)];
    if (req.kind == CollectiveKind::kAllGather) {
      const auto [lo, hi] = shard_range(elements, p, i);
      for (std::size_t e = lo; e < hi; ++e) buf[e] = dist(rng);
    } else {
      for (auto& v : buf) v = dist(rng);
    }
  }
  return in;
}

OracleResult oracle(const CollectiveRequest& req, const RankBuffers& inputs) {
  const int p = static_cast<int>(inputs.size());
  const std::size_t elements = inputs.empty() ? 0 : inputs.front().size();
  OracleResult r;
  r.defined.assign(static_cast<std::size_t>(p), true);
  std::vector<double> sum(elements, 0.0);
  for (const auto& buf : inputs) {
    for (std::size_t e = 0; e < elements; ++e) sum[e] += buf[e];
  }
  switch (req.kind) {
    case CollectiveKind::kAllReduce:
      r.buffers.assign(static_cast<std::size_t>(p), sum);
      break;
    case CollectiveKind::kReduceScatter:
      for (int i = 0; i < p; ++i) {
        const auto [lo, hi] = shard_range(elements, p, i);
        r.buffers.emplace_back(sum.begin() + static_cast<std::ptrdiff_t>(lo),
                               sum.begin() + static_cast<std::ptrdiff_t>(hi));
      }
      break;
    case CollectiveKind::kAllGather: {
      std::vector<double> all(elements, 0.0);
      for (int i = 0; i < p; ++i) {
        const auto [lo, hi] = shard_range(elements, p, i);
        std::copy(inputs[static_cast<std::size_t>(i)].begin() + static_cast<std::ptrdiff_t>(lo),
                  inputs[static_cast<std::size_t>(i)].begin() + static_cast<std::ptrdiff_t>(hi),
                  all.begin() + static_cast<std::ptrdiff_t>(lo));
      }
      r.buffers.assign(static_cast<std::size_t>(p), all);
      break;
    }
    case CollectiveKind::kBroadcast:
      r.buffers.assign(static_cast<std::size_t>(p), inputs[static_cast<std::size_t>(req.root)]);
      break;
    case CollectiveKind::kReduce:
      r.buffers.assign(static_cast<std::size_t>(p), std::vector<double>{});
      r.defined.assign(static_cast<std::size_t>(p), false);
      r.buffers[static_cast<std::size_t>(req.root)] = sum;
      r.defined[static_cast<std::size_t>(req.root)] = true;
      break;
    case CollectiveKind::kSendRecv:
      r.buffers = {inputs[0], inputs[0]};
      break;
    case CollectiveKind::kAllToAll:
      r.buffers.assign(static_cast<std::size_t>(p), std::vector<double>(elements, 0.0));
      for (int dst = 0; dst < p; ++dst) {
        for (int src = 0; src < p; ++src) {
          const auto [slo, shi] = shard_range(elements, p, dst);
          const auto [dlo, dhi] = shard_range(elements, p, src);
          (void)dhi;
          std::copy(inputs[static_cast<std::size_t>(src)].begin() + static_cast<std::ptrdiff_t>(slo),
                    inputs[static_cast<std::size_t>(src)].begin() + static_cast<std::ptrdiff_t>(shi),
                    r.buffers[static_cast<std::size_t>(dst)].begin() + static_cast<std::ptrdiff_t>(dlo));
        }
      }
      break;
  }
  return r;
}

RankBuffers extract_outputs(const CollectiveRequest& req, const RankBuffers& executed) {
  if (req.kind != CollectiveKind::kReduceScatter) return executed;
  const int p = static_cast<int>(executed.size());
  RankBuffers out;
  for (int i = 0; i < p; ++i) {
    const auto& buf = executed[static_cast<std::size_t>(i)];
    const auto [lo, hi] = shard_range(buf.size(), p, i);
    out.emplace_back(buf.begin() + static_cast<std::ptrdiff_t>(lo),
                     buf.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return out;
}

bool outputs_match(const OracleResult& expected, const RankBuffers& actual, double rel_tolerance) {
  if (expected.buffers.size() != actual.size()) return false;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (!expected.defined[i]) continue;
    const auto& want = expected.buffers[i];
    const auto& got = actual[i];
    if (want.size() != got.size()) return false;
    for (std::size_t e = 0; e < want.size(); ++e) {
      if (std::isnan(got[e])) return false;
      if (rel_tolerance == 0.0) {
        if (got[e] != want[e]) return false;
      } else if (std::abs(got[e] - want[e]) > rel_tolerance * std::max(1.0, std::abs(want[e]))) {
        return false;
      }
    }
  }
  return true;
}

}  // namespace ftsim
