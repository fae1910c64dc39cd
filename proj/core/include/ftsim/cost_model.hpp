// Copyright 2026 The ftsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string_view>

namespace ftsim {

/// Alpha-beta link parameters. Sizes are bytes, times seconds, rates bytes/s.
struct CostParams {
  double alpha = 2e-6;  // per-message latency
  double beta = 5e10;   // link bandwidth

  void validate() const;
};

/// kBandwidthOnly drops every latency term; kAlphaBeta keeps them.
enum class CostMode { kBandwidthOnly, kAlphaBeta };

double link_time(double size, const CostParams& p);

/// 2(ng-1)/(ng): bytes each rank moves per byte of AllReduce payload.
double ring_allreduce_coefficient(int n, int g);

double ring_allreduce_time(int n, int g, double data_bytes, double bandwidth);

enum class TrafficKind { kReduceScatter, kAllGather, kBroadcastRoot };

TrafficKind parse_traffic_kind(std::string_view name);

/// Least cross-server bytes any schedule must move for the collective.
double min_cross_server_traffic(TrafficKind kind, double total_bytes, int n);

/// Per-direction volume on the degraded server when a fraction y of the data
/// takes the partial-AllReduce + broadcast path. ring_coefficient defaults to
/// the large-ring limit of 2; pass ring_allreduce_coefficient(n, g) for the
/// exact volume of a finite ring.
double bottleneck_load(double y, double data_bytes, double ring_coefficient = 2.0);

}  // namespace ftsim
