#include "metapns/baselines.hpp"
#include "metapns/personalize.hpp"

#include <gtest/gtest.h>

using namespace metapns;
using namespace metapns::baselines;

namespace {

const GraphLevel& sheet() {
  static const GraphLevel g = geometry::build_graph(geometry::grid_sheet(14, 14));
  return g;
}

// Within-cluster sum of squares of a labelling.
double wcss(const Mat& X, const std::vector<int>& label, int k) {
  double s = 0;
  for (int c = 0; c < k; ++c) {
    Eigen::RowVector3d m = Eigen::RowVector3d::Zero();
    int n = 0;
    for (Index i = 0; i < X.rows(); ++i)
      if (label[static_cast<std::size_t>(i)] == c) {
        m += X.row(i);
        ++n;
      }
    if (n == 0) return std::numeric_limits<double>::infinity();
    m /= n;
    for (Index i = 0; i < X.rows(); ++i)
      if (label[static_cast<std::size_t>(i)] == c) s += (X.row(i) - m).squaredNorm();
  }
  return s;
}

}  // namespace

TEST(SegmentPartition, TrivialCounts) {
  const auto& g = sheet();
  const auto one = segment_partition(g, 1);
  EXPECT_EQ(one.sizes(), std::vector<int>{196});
  const auto all = segment_partition(g, 196);
  for (int s : all.sizes()) EXPECT_EQ(s, 1);
  const auto seven = segment_partition(g, 7, 3);
  validate(seven, 196);
  EXPECT_EQ(segment_partition(g, 7, 3).segment, seven.segment);
  EXPECT_THROW(segment_partition(g, 0), Error);
  EXPECT_THROW(segment_partition(g, 197), Error);
}

TEST(SegmentPartition, DumbbellMatchesBruteForce) {
  // Two lobes of five nodes joined by a two-node bar.
  Mat X(12, 3);
  X << 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0, 0.5, 0.5, 0,  //
      2, 0.5, 0, 3, 0.5, 0,                                  //
      4, 0, 0, 5, 0, 0, 4, 1, 0, 5, 1, 0, 4.5, 0.5, 0;
  std::vector<geometry::Edge> edges;
  for (int i = 0; i < 11; ++i) edges.push_back({i, i + 1});
  const GraphLevel g = geometry::make_level(X, edges);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_label;
  for (int mask = 1; mask < (1 << 12) - 1; ++mask) {
    std::vector<int> label(12);
    for (int i = 0; i < 12; ++i) label[static_cast<std::size_t>(i)] = (mask >> i) & 1;
    const double s = wcss(X, label, 2);
    if (s < best) {
      best = s;
      best_label = label;
    }
  }
  const auto p = segment_partition(g, 2, 11);
  EXPECT_NEAR(wcss(X, p.segment, 2), best, 1e-12);
  // Same split up to label swap.
  const bool same = p.segment == best_label;
  std::vector<int> flipped = best_label;
  for (int& l : flipped) l = 1 - l;
  EXPECT_TRUE(same || p.segment == flipped);
  for (int i = 1; i < 5; ++i) EXPECT_EQ(p.segment[static_cast<std::size_t>(i)], p.segment[0]);
  for (int i = 8; i < 12; ++i) EXPECT_NE(p.segment[static_cast<std::size_t>(i)], p.segment[0]);
}

TEST(Gp, InterpolatesAndQuantifiesUncertainty) {
  Mat X(4, 1);
  X << 0.1, 0.4, 0.6, 0.9;
  Vec y(4);
  y << 1.0, -0.5, 0.2, 2.0;
  GaussianProcess gp;
  gp.fit(X, y, {Vec::Constant(1, std::log(0.2)), 0.0});
  for (Index i = 0; i < 4; ++i) {
    const auto [mu, sd] = gp.predict(X.row(i));
    EXPECT_NEAR(mu, y[i], 1e-4);
    EXPECT_LT(sd, 1e-2);
  }
  EXPECT_GT(gp.predict(Eigen::RowVectorXd::Constant(1, 0.25)).second, 0.1);
}

TEST(Gp, ExpectedImprovementClosedForm) {
  EXPECT_NEAR(expected_improvement(0.0, 1.0, 0.0), 1.0 / std::sqrt(2.0 * M_PI), 1e-12);
  EXPECT_EQ(expected_improvement(3.0, 0.0, 1.0), 0.0);
  EXPECT_EQ(expected_improvement(0.5, 0.0, 1.0), 0.5);
  // z = 1: (1)Φ(1) + φ(1)
  EXPECT_NEAR(expected_improvement(0.0, 1.0, 1.0), 0.8413447460685429 + 0.24197072451914337, 1e-12);
}

TEST(BoMinimize, BudgetBoundsAndIncumbent) {
  int calls = 0;
  auto f = [&](const Vec& x) {
    ++calls;
    return (x.array() - Eigen::Array2d(0.3, -0.2)).square().sum();
  };
  BoSettings s;
  s.budget = 40;
  s.seed = 2;
  const Bounds b{Eigen::Vector2d(-1, -1), Eigen::Vector2d(1, 1)};
  const auto r = bo_minimize(f, b, s);
  EXPECT_EQ(calls, 40);
  EXPECT_EQ(r.state.points.rows(), 40);
  for (Index i = 0; i < r.state.points.rows(); ++i)
    for (Index c = 0; c < 2; ++c) {
      EXPECT_GE(r.state.points(i, c), -1.0);
      EXPECT_LE(r.state.points(i, c), 1.0);
    }
  EXPECT_EQ(r.objective, r.state.values.minCoeff());
  EXPECT_LT(r.objective, 1e-3);
}

TEST(BoMinimize, SingleEvaluationReturnsInitialPoint) {
  std::vector<Vec> seen;
  auto f = [&](const Vec& x) {
    seen.push_back(x);
    return x[0];
  };
  BoSettings s;
  s.budget = 1;
  const auto r = bo_minimize(f, uniform_bounds(1, 0.0, 1.0), s);
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_EQ(r.theta, seen[0]);
}

TEST(BoMinimize, UnstablePointsArePenalizedAndKept) {
  auto f = [](const Vec& x) -> double {
    if (x[0] > 0.5) fail_numeric("integration unstable, reduce dt");
    return (x[0] - 0.2) * (x[0] - 0.2);
  };
  BoSettings s;
  s.budget = 15;
  const auto r = bo_minimize(f, uniform_bounds(1, 0.0, 1.0), s);
  EXPECT_EQ(r.state.values.size(), 15);
  EXPECT_EQ(r.state.values.maxCoeff(), s.penalty);
  EXPECT_LT(r.theta[0], 0.5);
  // Other errors are not swallowed.
  EXPECT_THROW(bo_minimize([](const Vec&) -> double { fail("bad"); }, uniform_bounds(1, 0, 1), s), Error);
}

TEST(FsBo, SingleSegmentMatchesGridSearch) {
  const auto& g = sheet();
  const epsim::ApParams params;
  const SimulatorHandle sim(g, params);
  const auto part = segment_partition(g, 1);
  const double truth = 0.15;
  const epsim::Stimulus stim{{0}, 0.0, 1.0, 1.0};
  const auto rec = sim(segment_tissue(Vec::Constant(1, truth), part, params.a_healthy), stim);
  const auto y = epsim::observe(rec, epsim::farthest_point_nodes(g, 48, 7), 0.0, 0);
  const FsObjective obj(sim, part, {&y}, {stim});

  double grid_best = 0, grid_val = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 55; ++k) {
    const double a = 0.05 + 0.01 * k;
    double v;
    try {
      v = obj(Vec::Constant(1, a));
    } catch (const Error&) {
      continue;
    }
    if (v < grid_val) {
      grid_val = v;
      grid_best = a;
    }
  }
  BoSettings s;
  s.budget = 30;
  const std::size_t before = sim.calls();
  const auto r = bo_fit(sim, part, {&y}, {stim}, uniform_bounds(1, 0.05, 0.6), s);
  EXPECT_LE(sim.calls() - before, 30u);
  EXPECT_EQ(r.state.calls, sim.calls() - before);
  const double tol = std::max(std::abs(grid_best - truth), 0.005);
  EXPECT_LE(std::abs(r.theta[0] - truth), tol) << "bo " << r.theta[0] << " grid " << grid_best;
}

TEST(FsBo, BudgetCountsSimulatorCalls) {
  const auto& g = sheet();
  const SimulatorHandle sim(g, {});
  const auto part = segment_partition(g, 3);
  const auto t = segment_tissue(Eigen::Vector3d(0.15, 0.4, 0.15), part, 0.15);
  std::vector<epsim::Observation> ys;
  std::vector<epsim::Stimulus> st;
  for (int o : {0, 100, 195}) {
    st.push_back({{o}, 0.0, 1.0, 1.0});
    ys.push_back(epsim::observe(sim(t, st.back()), {1, 50, 150}, 0.0, 0));
  }
  BoSettings s;
  s.budget = 20;
  const auto r = bo_fit(sim, part, {&ys[0], &ys[1], &ys[2]}, st, uniform_bounds(3, 0.05, 0.6), s);
  EXPECT_EQ(r.state.calls, 18u);  // six evaluations of three simulations
  EXPECT_EQ(r.state.values.size(), 6);
  s.budget = 2;
  EXPECT_THROW(bo_fit(sim, part, {&ys[0], &ys[1], &ys[2]}, st, uniform_bounds(3, 0.05, 0.6), s), Error);
}

TEST(FsBo, TruthOnAlignedScarReproducesRecordExactly) {
  const auto& g = sheet();
  const SimulatorHandle sim(g, {});
  const auto part = segment_partition(g, 7);
  Vec theta = Vec::Constant(7, 0.15);
  theta[4] = 0.5;
  const epsim::Stimulus stim{{13}, 0.0, 1.0, 1.0};
  const auto truth = epsim::simulate(g, segment_tissue(theta, part, 0.15), stim, {});
  EXPECT_EQ(bo_predict(sim, theta, part, stim).x, truth.x);
}

TEST(FsBo, FlowsThroughTheHarness) {
  const auto& g = sheet();
  epsim::BankSpec spec;
  spec.scar_configs = {{"scar", {{100, 3.0, 0.5}}}};
  spec.origins = {0, 195, 13};
  spec.sensors = epsim::farthest_point_nodes(g, 20);
  const auto bank = epsim::make_subject_bank(g, "sheet", spec);
  const SimulatorHandle sim(g, spec.params);
  const auto part = segment_partition(g, 2);
  BoSettings s;
  s.budget = 12;
  std::size_t calls = 0;
  const auto out = eval::evaluate("fs-bo", fs_bo(sim, part, uniform_bounds(2, 0.05, 0.6), s,
                                                 [&](const std::string&, const BoResult& r) { calls = r.state.calls; }),
                                  bank, eval::draw_contexts(bank, 2, 1));
  EXPECT_LE(calls, 12u);
  ASSERT_EQ(out.rows.size(), 4u);  // context and target, per subject and pooled
  EXPECT_GT(eval::find_row(out.rows, "target").embed_seconds, 0.0);
}

TEST(Pns, InferenceIsTheSingletonPosterior) {
  metainfer::ModelConfig cfg;
  cfg.sur = {4, 2, 2, 2};
  cfg.meta.hidden = 2;
  cfg.meta.frames = 3;
  const auto m = metainfer::make_model(cfg, geometry::build_hierarchy(geometry::grid_sheet(2, 3), 2, 0.5, 1));
  epsim::Observation y;
  y.sensor_nodes = {0, 3, 5};
  y.y = Mat::Random(3, 3);
  const auto a = pns_infer(m, y);
  const auto b = metainfer::posterior(m, {&y});
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.sigma, b.sigma);
}
