// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "ftsim/cost_model.hpp"

#include <stdexcept>
#include <string>

namespace ftsim {

void CostParams::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
}

double link_time(double size, const CostParams& p) {
  if (size < 0.0) throw std::invalid_argument("size must be >= 0");
  return p.alpha + size / p.beta;
}

double ring_allreduce_coefficient(int n, int g) {
  const double ranks = static_cast<double>(n) * static_cast<double>(g);
  if (ranks < 2.0) throw std::invalid_argument("ring AllReduce needs n*g >= 2");
  return 2.0 * (ranks - 1.0) / ranks;
}

double ring_allreduce_time(int n, int g, double data_bytes, double bandwidth) {
  if (data_bytes < 0.0) throw std::invalid_argument("data size must be >= 0");
  if (!(bandwidth > 0.0)) throw std::invalid_argument("bandwidth must be > 0");
  return ring_allreduce_coefficient(n, g) * data_bytes / bandwidth;
}

TrafficKind parse_traffic_kind(std::string_view name) {
  if (name == "ReduceScatter") return TrafficKind::kReduceScatter;
  if (name == "AllGather") return TrafficKind::kAllGather;
  if (name == "Broadcast" || name == "BroadcastRoot") return TrafficKind::kBroadcastRoot;
  throw std::invalid_argument("unknown op_kind: " + std::string(name));
}

double min_cross_server_traffic(TrafficKind kind, double total_bytes, int n) {
  if (n < 2) throw std::invalid_argument("min_cross_server_traffic needs n >= 2");
  if (total_bytes < 0.0) throw std::invalid_argument("data size must be >= 0");
  switch (kind) {
    case TrafficKind::kReduceScatter:
    case TrafficKind::kAllGather:
      return (static_cast<double>(n) - 1.0) / static_cast<double>(n) * total_bytes;
    case TrafficKind::kBroadcastRoot:
      return total_bytes;
  }
  throw std::invalid_argument("unknown op_kind");
}

double bottleneck_load(double y, double data_bytes, double ring_coefficient) {
  if (!(y >= 0.0 && y <= 1.0)) throw std::invalid_argument("Y must lie in [0, 1]");
  return ring_coefficient * (1.0 - y) * data_bytes + y * data_bytes;
}

}  // namespace ftsim
