#include <gtest/gtest.h>

#include "ftsim/faults.hpp"

namespace ftsim {
namespace {

const NicId A = make_id<NicId>(0), B = make_id<NicId>(1), X = make_id<NicId>(2);

Verdict tri(ProbeResult ab, ProbeResult ba) {
  const std::vector<ProbeOutcome> o = {{A, B, ab}, {B, A, ba}};
  return triangulate(A, B, o);
}

Verdict tri(ProbeResult ab, ProbeResult ba, ProbeResult xa, ProbeResult xb) {
  const std::vector<ProbeOutcome> o = {{A, B, ab}, {B, A, ba}, {X, A, xa}, {X, B, xb}};
  return triangulate(A, B, o, X);
}

using P = ProbeResult;

TEST(FaultEvent, Validation) {
  FaultEvent ok{1.0, NicTarget{A}, false, 2.0};
  EXPECT_NO_THROW(ok.validate());
  FaultEvent early{1.0, NicTarget{A}, false, 0.5};
  EXPECT_THROW(early.validate(), FaultError);
  FaultEvent perm{1.0, NicTarget{A}, true, 2.0};
  EXPECT_THROW(perm.validate(), FaultError);
}

TEST(Oob, PeerAwareness) {
  DetectionConfig cfg;
  EXPECT_DOUBLE_EQ(peer_awareness_time(5.0, cfg), 5.0005);
  cfg.oob_enabled = false;
  EXPECT_DOUBLE_EQ(peer_awareness_time(5.0, cfg) - 5.0, 30.0);
}

TEST(Oob, SimultaneousDetectionLocalizesOnce) {
  Engine e;
  OobChannel oob(DetectionConfig{});
  int delivered = 0;
  oob.notify_oob(e, A, B, [&](const OobDelivery&) { ++delivered; });
  oob.notify_oob(e, B, A, [&](const OobDelivery&) { ++delivered; });
  e.run();
  EXPECT_EQ(delivered, 2);
  EXPECT_EQ(oob.deliveries().size(), 2u);
  EXPECT_TRUE(oob.claim_localization(A, B));
  EXPECT_FALSE(oob.claim_localization(B, A));
  oob.close_incident(A, B);
  EXPECT_TRUE(oob.claim_localization(A, B));
}

TEST(Probe, Outcomes) {
  HealthMap h(3);
  DetectionConfig cfg;
  EXPECT_EQ(probe(A, B, h, cfg).result, P::kSuccess);
  EXPECT_DOUBLE_EQ(probe(A, B, h, cfg).latency, cfg.probe_rtt);
  h.set_nic(B, false);
  EXPECT_EQ(probe(A, B, h, cfg).result, P::kTimeout);
  EXPECT_DOUBLE_EQ(probe(A, B, h, cfg).latency, cfg.probe_timeout);
  EXPECT_EQ(probe(B, A, h, cfg).result, P::kLocalError);
  HealthMap l(3);
  l.set_link(A, B, false);
  EXPECT_EQ(probe(A, B, l, cfg).result, P::kTimeout);
  EXPECT_EQ(probe(X, B, l, cfg).result, P::kSuccess);
}

TEST(Triangulate, DecisionTable) {
  EXPECT_EQ(tri(P::kLocalError, P::kTimeout), (Verdict{VerdictKind::kLocalNicFault, A, A}));
  EXPECT_EQ(tri(P::kTimeout, P::kLocalError), (Verdict{VerdictKind::kLocalNicFault, B, B}));
  EXPECT_EQ(tri(P::kTimeout, P::kTimeout, P::kSuccess, P::kSuccess).kind, VerdictKind::kLinkFault);
  const Verdict at_a = tri(P::kTimeout, P::kTimeout, P::kTimeout, P::kSuccess);
  EXPECT_EQ(at_a.kind, VerdictKind::kRemoteNicFault);
  EXPECT_EQ(at_a.faulty_nics(), std::vector<NicId>{A});
  EXPECT_EQ(tri(P::kTimeout, P::kTimeout, P::kTimeout, P::kTimeout).kind, VerdictKind::kDualEndpointFault);
  EXPECT_EQ(tri(P::kTimeout, P::kTimeout).kind, VerdictKind::kInconclusive);
  EXPECT_EQ(tri(P::kSuccess, P::kSuccess).kind, VerdictKind::kInconclusive);
}

TEST(Triangulate, BothLocalErrorsAreIndependent) {
  const Verdict v = tri(P::kLocalError, P::kLocalError);
  EXPECT_EQ(v.kind, VerdictKind::kDualEndpointFault);
  EXPECT_TRUE(v.independent_local_faults);
  EXPECT_EQ(v.faulty_nics().size(), 2u);
}

TEST(Triangulate, MissingOutcomeThrows) {
  const std::vector<ProbeOutcome> o = {{A, B, P::kTimeout}};
  EXPECT_THROW(triangulate(A, B, o), FaultError);
  const std::vector<ProbeOutcome> o2 = {{A, B, P::kTimeout}, {B, A, P::kTimeout}};
  EXPECT_THROW(triangulate(A, B, o2, X), FaultError);
}

TEST(Triangulate, LocalizeMatchesPhysicalState) {
  const auto t = build_topology(TopologySpec::uniform(3, 2, 2, 1e9));
  const NicId a = *t.nic_on_rail(make_id<ServerId>(0), 0);
  const NicId b = *t.nic_on_rail(make_id<ServerId>(1), 0);
  const HealthMap believed = t.healthy_map();
  DetectionConfig cfg;

  HealthMap phys = t.healthy_map();
  phys.set_nic(b, false);
  auto r = localize(t, a, b, phys, believed, cfg);
  EXPECT_EQ(r.verdict.kind, VerdictKind::kLocalNicFault);
  EXPECT_EQ(r.verdict.first, b);
  EXPECT_DOUBLE_EQ(r.probe_round, cfg.probe_timeout);

  phys = t.healthy_map();
  phys.set_link(a, b, false);
  r = localize(t, a, b, phys, believed, cfg);
  EXPECT_EQ(r.verdict.kind, VerdictKind::kLinkFault);
  ASSERT_EQ(r.outcomes.size(), 4u);
  EXPECT_EQ(t.nic(r.outcomes[2].prober).server, make_id<ServerId>(2));
}

TEST(Triangulate, TwoServersHaveNoAux) {
  const auto t = build_topology(TopologySpec::uniform(2, 2, 2, 1e9));
  EXPECT_FALSE(pick_aux(t, make_id<NicId>(0), make_id<NicId>(2), t.healthy_map()).has_value());
}

TEST(Reprobe, ExponentialBackoff) {
  const ExponentialBackoff policy(0.1, 10.0);
  const Verdict v{VerdictKind::kLocalNicFault, A, A};
  double t = 0.0;
  const double expect[] = {0.1, 0.3, 0.7, 1.5};
  for (int i = 0; i < 4; ++i) {
    t = reprobe_schedule(v, {i, t}, policy);
    EXPECT_NEAR(t, expect[i], 1e-12);
  }
  EXPECT_DOUBLE_EQ(policy.interval(40), 10.0);
  EXPECT_THROW(reprobe_schedule(Verdict{}, {}, policy), FaultError);
}

TEST(Reprobe, RecoveryObservedAtFirstProbeAfter) {
  const auto t = build_topology(TopologySpec::uniform(2, 1, 1, 1e9));
  Engine e;
  HealthMap phys = t.healthy_map();
  phys.set_nic(A, false);
  e.schedule(0.35, EventKind::kRecovery, "heal", [&](Engine&) { phys.set_nic(A, true); });
  std::vector<double> seen;
  start_reprobing(e, Verdict{VerdictKind::kLocalNicFault, A, A}, phys,
                  std::make_shared<ExponentialBackoff>(0.1, 10.0), 0.0,
                  [&](double when, NicId nic) {
                    EXPECT_EQ(nic, A);
                    seen.push_back(when);
                  },
                  [] { return true; });
  e.run();
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_NEAR(seen[0], 0.7, 1e-9);
}

TEST(Reprobe, PermanentFaultCapsInterval) {
  const auto t = build_topology(TopologySpec::uniform(2, 1, 1, 1e9));
  Engine e;
  HealthMap phys = t.healthy_map();
  phys.set_nic(A, false);
  int probes = 0;
  start_reprobing(e, Verdict{VerdictKind::kLocalNicFault, A, A}, phys,
                  std::make_shared<ExponentialBackoff>(0.1, 1.0), 0.0, [](double, NicId) {},
                  [&] { return ++probes < 12; });
  e.run();
  const auto& tr = e.trace();
  ASSERT_GE(tr.size(), 3u);
  EXPECT_NEAR(tr[tr.size() - 1].time - tr[tr.size() - 2].time, 1.0, 1e-9);
}

}  // namespace
}  // namespace ftsim
