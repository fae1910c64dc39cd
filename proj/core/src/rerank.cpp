// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/rerank.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace ftsim {

void LogicalRing::validate() const {
  std::set<int> seen;
  for (int node : order) {
    if (!seen.insert(node).second) throw RerankError(fmt::format("node {} appears twice", node));
    if (!rail_sets.contains(node)) throw RerankError(fmt::format("node {} has no rail set", node));
  }
}

const std::set<RailId>& LogicalRing::rails_of(int node) const {
  const auto it = rail_sets.find(node);
  if (it == rail_sets.end()) throw RerankError(fmt::format("node {} has no rail set", node));
  return it->second;
}

LogicalRing make_logical_ring(const ClusterTopology& topology, const HealthMap& health,
                              std::vector<int> order) {
  LogicalRing ring;
  if (order.empty()) {
    order.resize(static_cast<std::size_t>(topology.servers()));
    std::iota(order.begin(), order.end(), 0);
  }
  for (int s : order) {
    ring.rail_sets[s] = rail_set(topology, health, make_id<ServerId>(static_cast<std::size_t>(s)));
  }
  ring.order = std::move(order);
  ring.validate();
  return ring;
}

double capacity(const std::set<RailId>& rails, const RerankOptions& opt) {
  if (!opt.rail_weights) return static_cast<double>(rails.size());
  double sum = 0.0;
  for (RailId r : rails) {
    const auto it = opt.rail_weights->find(r);
    sum += it == opt.rail_weights->end() ? 1.0 : it->second;
  }
  return sum;
}

double overlap(const LogicalRing& ring, int a, int b, const RerankOptions& opt) {
  const auto& sa = ring.rails_of(a);
  const auto& sb = ring.rails_of(b);
  std::set<RailId> both;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.end()));
  return capacity(both, opt);
}

double global_floor(const LogicalRing& ring, const RerankOptions& opt) {
  if (ring.order.empty()) throw RerankError("ring is empty");
  double lo = std::numeric_limits<double>::infinity();
  for (int node : ring.order) lo = std::min(lo, capacity(ring.rails_of(node), opt));
  return lo;
}

std::vector<Candidate> find_candidates(const LogicalRing& ring, const RerankOptions& opt) {
  std::vector<Candidate> out;
  if (ring.order.size() < 2) return out;
  const double floor = global_floor(ring, opt);
  const int n = static_cast<int>(ring.order.size());
  for (int i = 0; i < n; ++i) {
    const int u = ring.order[static_cast<std::size_t>(i)];
    const int v = ring.order[static_cast<std::size_t>((i + 1) % n)];
    const double cap = overlap(ring, u, v, opt);
    if (cap < floor) out.push_back(Candidate{u, v, i, floor - cap});
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.gap > b.gap; });
  return out;
}

double min_adjacent_overlap(const LogicalRing& ring, const RerankOptions& opt) {
  const int n = static_cast<int>(ring.order.size());
  if (n == 0) throw RerankError("ring is empty");
  double lo = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    lo = std::min(lo, overlap(ring, ring.order[static_cast<std::size_t>(i)],
                              ring.order[static_cast<std::size_t>((i + 1) % n)], opt));
  }
  return lo;
}

RerankResult rerank_detailed(const LogicalRing& ring, const RerankOptions& opt) {
  ring.validate();
  RerankResult out;
  out.ring = ring;
  if (ring.order.empty()) return out;
  out.floor = global_floor(ring, opt);
  std::vector<int>& r = out.ring.order;
  const auto pos = [&](int node) {
    return static_cast<int>(std::find(r.begin(), r.end(), node) - r.begin());
  };

  for (const Candidate& c : find_candidates(ring, opt)) {
    const int n = static_cast<int>(r.size());
    // An earlier relocation may already have split this pair.
    if (r[static_cast<std::size_t>((pos(c.u) + 1) % n)] != c.v) continue;
    std::optional<int> bridge;
    for (int i = 0; i < n; ++i) {
      const int w = r[static_cast<std::size_t>(i)];
      if (w == c.u || w == c.v) continue;
      const int x = r[static_cast<std::size_t>((i + n - 1) % n)];
      const int y = r[static_cast<std::size_t>((i + 1) % n)];
      const double new_cap = std::min(overlap(out.ring, c.u, w, opt), overlap(out.ring, w, c.v, opt));
      const double removal_cap = overlap(out.ring, x, y, opt);
      if (new_cap >= out.floor && removal_cap >= out.floor) {
        bridge = w;
        break;
      }
    }
    if (!bridge) {
      out.unrepaired.push_back(c);
      continue;
    }
    r.erase(r.begin() + pos(*bridge));
    r.insert(r.begin() + pos(c.u) + 1, *bridge);
    out.relocations.push_back(Relocation{*bridge, c.u, c.v});
  }
  out.residual = find_candidates(out.ring, opt);
  return out;
}

LogicalRing rerank(const LogicalRing& ring, const RerankOptions& opt) { return rerank_detailed(ring, opt).ring; }

}  // namespace ftsim
