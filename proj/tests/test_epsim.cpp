#include "metapns/epsim.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace metapns;
using namespace metapns::epsim;

namespace {

const geometry::GraphLevel& sheet() {
  static const geometry::GraphLevel g = geometry::build_graph(geometry::grid_sheet(14, 14));
  return g;
}

Stimulus point_stimulus(int node, double amplitude = 1.0) { return {{node}, 0.0, 1.0, amplitude}; }

}  // namespace

TEST(ApRhs, RestingFixedPoint) {
  const auto& g = sheet();
  const Index n = g.node_count;
  const auto d = ap_rhs(Vec::Zero(n), Vec::Zero(n), uniform_tissue(n, 0.15), graph_laplacian(g), Vec::Zero(n), {});
  EXPECT_TRUE(d.du.isZero(0.0));
  EXPECT_TRUE(d.dv.isZero(0.0));
}

TEST(ApRhs, ConstantFieldHasNoDiffusion) {
  const auto& g = sheet();
  const SpMat L = graph_laplacian(g);
  EXPECT_NEAR((L * Vec::Constant(g.node_count, 0.5)).cwiseAbs().maxCoeff(), 0.0, 1e-15);
  ApParams p;
  const Index n = g.node_count;
  const auto with = ap_rhs(Vec::Constant(n, 0.5), Vec::Zero(n), uniform_tissue(n, 0.15), L, Vec::Zero(n), p);
  p.diffusion = 0.0;
  const auto without = ap_rhs(Vec::Constant(n, 0.5), Vec::Zero(n), uniform_tissue(n, 0.15), L, Vec::Zero(n), p);
  EXPECT_TRUE(with.du.isApprox(without.du, 1e-15));
}

TEST(ApRhs, SingleNodeMatchesScalarEvaluation) {
  const double u = 0.2, v = 0.1, a = 0.15, k = 8.0, e0 = 0.002, m1 = 0.2, m2 = 0.3;
  // Independent scalar evaluation of the two rate equations.
  const double du_ref = k * u * (1 - u) * (u - a) - u * v;
  const double dv_ref = (e0 + m1 * v / (u + m2)) * (-v - k * u * (u - a - 1));
  ApParams p;
  SpMat L(1, 1);
  const auto d = ap_rhs(Vec::Constant(1, u), Vec::Constant(1, v), uniform_tissue(1, a), L, Vec::Zero(1), p);
  EXPECT_DOUBLE_EQ(d.du[0], du_ref);
  EXPECT_DOUBLE_EQ(d.dv[0], dv_ref);
  EXPECT_NEAR(du_ref, 0.044, 1e-12);  // 0.064 - 0.02
}

TEST(ApRhs, ShapeMismatch) {
  SpMat L(3, 3);
  EXPECT_THROW(ap_rhs(Vec::Zero(3), Vec::Zero(2), uniform_tissue(3, 0.15), L, Vec::Zero(3), {}), Error);
}

TEST(Simulate, ZeroAmplitudeStaysAtRest) {
  const auto rec = simulate(sheet(), uniform_tissue(sheet().node_count, 0.15), point_stimulus(0, 0.0), {});
  EXPECT_TRUE(rec.x.isZero(0.0));
  EXPECT_EQ(rec.x.rows(), ApParams{}.frames());
}

TEST(Simulate, ActivationTimeIncreasesWithDistance) {
  const auto& g = sheet();
  const int origin = 0;
  const auto rec = simulate(g, uniform_tissue(g.node_count, 0.15), point_stimulus(origin), {});
  const Vec act = activation_frames(rec.x);
  const auto hops = geometry::hop_distance(g, {origin});
  // Mean activation frame per hop shell is strictly increasing.
  const int max_hop = *std::max_element(hops.begin(), hops.end());
  double prev = -1.0;
  for (int d = 0; d <= max_hop; ++d) {
    double sum = 0.0;
    int cnt = 0;
    for (Index i = 0; i < g.node_count; ++i)
      if (hops[static_cast<std::size_t>(i)] == d) {
        sum += act[i];
        ++cnt;
      }
    const double mean = sum / cnt;
    EXPECT_LT(mean, rec.x.rows()) << "shell " << d << " never activates";
    EXPECT_GT(mean, prev) << "shell " << d;
    prev = mean;
  }
  // Along each edge the node farther from the origin never activates earlier.
  for (const auto& [i, j] : g.edges) {
    const auto hi = hops[static_cast<std::size_t>(i)], hj = hops[static_cast<std::size_t>(j)];
    if (hi < hj) EXPECT_LE(act[i], act[j]);
    if (hj < hi) EXPECT_LE(act[j], act[i]);
  }
}

TEST(Simulate, FullBlockScarStopsPropagation) {
  const auto& g = sheet();
  // Scar ball around the sheet centre; stimulate at its centre.
  const int centre = 7 * 14 + 7;
  const ScarConfig cfg{"block", {{centre, 3.0, 0.95}}};
  const auto tissue = make_tissue(g, cfg, 0.15);
  const auto rec = simulate(g, tissue, point_stimulus(centre), {});
  const Vec act = activation_frames(rec.x);
  for (Index i = 0; i < g.node_count; ++i)
    if (!tissue.scar_mask[static_cast<std::size_t>(i)]) EXPECT_EQ(act[i], rec.x.rows()) << "node " << i;
}

TEST(Simulate, BoundedAndDeterministic) {
  const auto& g = sheet();
  const ScarConfig cfg{"slow", {{100, 3.0, 0.3}}};
  const auto tissue = make_tissue(g, cfg, 0.15);
  const auto a = simulate(g, tissue, point_stimulus(5), {});
  const auto b = simulate(g, tissue, point_stimulus(5), {});
  EXPECT_EQ(a.x, b.x);
  EXPECT_GE(a.x.minCoeff(), -0.05);
  EXPECT_LE(a.x.maxCoeff(), 1.05);
}

TEST(Simulate, StabilityAndInstabilityErrors) {
  const auto& g = sheet();
  ApParams p;
  p.dt = 1.0;  // dt*D*deg = 3 > 0.5
  EXPECT_THROW(simulate(g, uniform_tissue(g.node_count, 0.15), point_stimulus(0), p), Error);
  ApParams q;
  q.stability_limit = 100.0;
  q.dt = 1.5;
  q.steps = 40;
  try {
    simulate(g, uniform_tissue(g.node_count, 0.15), point_stimulus(0, 5.0), q);
    FAIL() << "expected instability";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
    EXPECT_NE(std::string(e.what()).find("integration unstable, reduce dt"), std::string::npos);
  }
}

TEST(Observe, NoiseFreeSubsampling) {
  const auto& g = sheet();
  const auto rec = simulate(g, uniform_tissue(g.node_count, 0.15), point_stimulus(0), {});
  const std::vector<int> sensors{3, 50, 120};
  const auto obs = observe(rec, sensors, 0.0, 1);
  for (std::size_t m = 0; m < sensors.size(); ++m) EXPECT_EQ(obs.y.col(static_cast<Index>(m)), rec.x.col(sensors[m]));
  std::vector<int> all(static_cast<std::size_t>(g.node_count));
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(observe(rec, all, 0.0, 1).y, rec.x);
  EXPECT_THROW(observe(rec, {1, 2, 1}, 0.0, 1), Error);
}

TEST(Observe, NoiseStatistics) {
  const auto& g = sheet();
  const auto rec = simulate(g, uniform_tissue(g.node_count, 0.15), point_stimulus(0), {});
  std::vector<int> all(static_cast<std::size_t>(g.node_count));
  std::iota(all.begin(), all.end(), 0);
  const auto obs = observe(rec, all, 0.01, 42);
  ASSERT_GE(obs.y.size(), 9000);
  const Mat diff = obs.y - rec.x;
  const double mean = diff.mean();
  const double sd = std::sqrt((diff.array() - mean).square().sum() / static_cast<double>(diff.size() - 1));
  EXPECT_NEAR(sd, 0.01, 0.002);
  EXPECT_EQ(observe(rec, all, 0.01, 42).y, obs.y);
}

TEST(Simulate, ScarSlowsDownstreamActivation) {
  const auto& g = sheet();
  // Slow-conduction band across the sheet between the origin row and the far rows.
  ScarConfig band{"band", {}};
  for (int j = 0; j < 14; j += 2) band.scars.push_back({6 * 14 + j, 1.5, 0.3});
  const auto tissue = make_tissue(g, band, 0.15);
  const Stimulus s = point_stimulus(7);  // row 0
  const Vec healthy = activation_frames(simulate(g, uniform_tissue(g.node_count, 0.15), s, {}).x);
  const Vec scarred = activation_frames(simulate(g, tissue, s, {}).x);
  double h = 0, sc = 0;
  int n = 0;
  for (Index i = 0; i < g.node_count; ++i) {
    if (tissue.scar_mask[static_cast<std::size_t>(i)] || g.node_coords(i, 0) < 9) continue;
    h += healthy[i];
    sc += scarred[i];
    ++n;
  }
  ASSERT_GT(n, 0);
  EXPECT_GT(sc / n, h / n);
}

TEST(SubjectBank, CountsAndPersistence) {
  const auto& g = sheet();
  BankSpec spec;
  spec.scar_configs = {{"healthy", {}}};
  spec.origins = {0, 195};
  spec.sensors = farthest_point_nodes(g, 20);
  spec.noise_std = 0.01;
  const auto bank = make_subject_bank(g, "sheet", spec);
  ASSERT_EQ(bank.subjects.size(), 1u);
  EXPECT_EQ(bank.subjects[0].records.size(), 2u);

  const auto dir = std::filesystem::temp_directory_path() / "metapns_bank_test";
  std::filesystem::remove_all(dir);
  save_bank(dir, bank);
  const auto loaded = load_bank(dir);
  ASSERT_EQ(loaded.subjects.size(), 1u);
  EXPECT_EQ(loaded.subjects[0].records.size(), 2u);
  EXPECT_TRUE(loaded.subjects[0].records[1].x.isApprox(bank.subjects[0].records[1].x, 1e-6));
  EXPECT_EQ(loaded.subjects[0].records[1].stimulus.origins, std::vector<int>{195});
  EXPECT_EQ(loaded.sensor_nodes, spec.sensors);
  std::filesystem::remove_all(dir);
}

TEST(SubjectBank, SixteenSubjects) {
  const auto g = geometry::build_graph(geometry::grid_sheet(5, 5));
  BankSpec spec;
  spec.scar_configs.push_back({"healthy", {}});
  for (int k = 0; k < 15; ++k) spec.scar_configs.push_back({cat("scar", k), {{k, 1.0, 0.3 + 0.01 * k}}});
  spec.origins = {0, 24};
  spec.sensors = {0, 6, 12, 18, 24};
  const auto bank = make_subject_bank(g, "sheet5", spec);
  EXPECT_EQ(bank.subjects.size(), 16u);
  EXPECT_EQ(bank.record_count(), 32u);
}

TEST(SubjectBank, PreconditionsAndFailureAttribution) {
  const auto& g = sheet();
  BankSpec spec;
  spec.scar_configs = {{"healthy", {}}};
  spec.origins = {0};
  spec.sensors = {0};
  EXPECT_THROW(make_subject_bank(g, "s", spec), Error);
  spec.origins = {0, 1};
  spec.params.dt = 0.15;
  spec.params.stability_limit = 10.0;
  spec.stim_amplitude = 60.0;
  try {
    make_subject_bank(g, "s", spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("subject 'healthy' origin 0"), std::string::npos) << e.what();
  }
}

TEST(Tissue, Invariants) {
  const auto& g = sheet();
  const auto t = make_tissue(g, {"s", {{30, 2.0, 0.5}}}, 0.15);
  EXPECT_NO_THROW(validate(t, 0.15));
  int scar = 0;
  for (bool b : t.scar_mask) scar += b;
  EXPECT_GT(scar, 1);
  EXPECT_TRUE(t.scar_mask[30]);
}
