#include "metapns/eval.hpp"
#include "metapns/personalize.hpp"

#include <gtest/gtest.h>

using namespace metapns;
using namespace metapns::eval;

namespace {

Mat random_mat(Index r, Index c, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Between-class variance argmax computed directly from the values: every
// value is binned on its own, classes are rebuilt for every candidate split.
double brute_force_otsu(const Vec& v) {
  const double lo = v.minCoeff(), hi = v.maxCoeff(), width = (hi - lo) / 256.0;
  std::vector<int> bin(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i)
    bin[static_cast<std::size_t>(i)] = std::min(255, std::max(0, static_cast<int>((v[i] - lo) / width)));
  double best = -1.0;
  int best_t = 0;
  for (int t = 0; t < 255; ++t) {
    double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (int b : bin) {
      const double centre = lo + (b + 0.5) * width;
      if (b <= t) {
        n0 += 1;
        s0 += centre;
      } else {
        n1 += 1;
        s1 += centre;
      }
    }
    if (n0 == 0 || n1 == 0) continue;
    const double n = n0 + n1;
    const double between = (n0 / n) * (n1 / n) * std::pow(s0 / n0 - s1 / n1, 2);
    if (between > best * (1.0 + 1e-12)) {
      best = between;
      best_t = t;
    }
  }
  return lo + (best_t + 1) * width;
}

const geometry::GraphLevel& sheet() {
  static const geometry::GraphLevel g = geometry::build_graph(geometry::grid_sheet(14, 14));
  return g;
}

}  // namespace

TEST(Mse, Cases) {
  const Mat a = random_mat(3, 4, 1), b = random_mat(3, 4, 2);
  EXPECT_EQ(mse(a, a), 0.0);
  EXPECT_NEAR(mse((a.array() + 0.01).matrix(), a), 1e-4, 1e-15);
  double ref = 0;
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) ref += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j)) / 12.0;
  EXPECT_NEAR(mse(a, b), ref, 1e-15);
  EXPECT_THROW(mse(a, Mat::Zero(4, 3)), Error);
}

TEST(Cc, PearsonProperties) {
  const Mat a = random_mat(5, 7, 3);
  EXPECT_NEAR(cc(a, a), 1.0, 1e-12);
  EXPECT_NEAR(cc(-a, a), -1.0, 1e-12);
  EXPECT_NEAR(cc((2.5 * a.array() + 4.0).matrix(), a), 1.0, 1e-12);
  // Per-frame affine maps keep every frame at 1.
  Mat b = a;
  for (Index t = 0; t < b.rows(); ++t) b.row(t) = b.row(t) * (t + 1.0) + RowVec::Constant(7, t * 0.3);
  EXPECT_NEAR(cc(b, a), 1.0, 1e-12);
  // Constant truth frames are skipped.
  Mat c = a;
  c.row(2).setConstant(0.4);
  Mat d = a;
  d.row(2) = -a.row(2);
  EXPECT_NEAR(cc(d, c), 1.0, 1e-12);
  try {
    cc(a, Mat::Constant(5, 7, 1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "undefined correlation");
  }
  // Manual Pearson for one frame.
  const Mat p = random_mat(1, 9, 4), q = random_mat(1, 9, 5);
  const double mp = p.mean(), mq = q.mean();
  double sxy = 0, sxx = 0, syy = 0;
  for (Index j = 0; j < 9; ++j) {
    sxy += (p(0, j) - mp) * (q(0, j) - mq);
    sxx += (p(0, j) - mp) * (p(0, j) - mp);
    syy += (q(0, j) - mq) * (q(0, j) - mq);
  }
  EXPECT_NEAR(cc(p, q), sxy / std::sqrt(sxx * syy), 1e-12);
}

TEST(Otsu, MatchesBruteForceOnRandomInputs) {
  for (int r = 0; r < 50; ++r) {
    Rng rng(static_cast<std::uint64_t>(r));
    std::uniform_int_distribution<int> size(2, 400);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vec v(size(rng));
    const double split = u(rng);
    for (Index i = 0; i < v.size(); ++i) v[i] = u(rng) < split ? nd(rng) : 3.0 + 0.5 * nd(rng);
    if (r % 5 == 0) v = v.array().round();  // heavy ties
    if (!(v.maxCoeff() > v.minCoeff())) continue;
    EXPECT_DOUBLE_EQ(otsu_threshold(v), brute_force_otsu(v)) << "input " << r;
  }
}

TEST(Otsu, SeparatesModes) {
  Vec half(10);
  half << 0, 0, 0, 0, 0, 1, 1, 1, 1, 1;
  const double t = otsu_threshold(half);
  EXPECT_GT(t, 0.0);
  EXPECT_LT(t, 1.0);
  Rng rng(8);
  std::normal_distribution<double> a(0.2, 0.05), b(0.8, 0.05);
  Vec two(2000);
  for (Index i = 0; i < 1000; ++i) {
    two[i] = a(rng);
    two[1000 + i] = b(rng);
  }
  // Any split inside the gap is optimal; the lowest one is taken.
  const double tt = otsu_threshold(two);
  EXPECT_GT(tt, two.head(1000).maxCoeff());
  EXPECT_LT(tt, two.tail(1000).minCoeff());
  EXPECT_THROW(otsu_threshold(Vec::Constant(5, 2.0)), Error);
}

TEST(Dice, Cases) {
  std::vector<bool> a{1, 1, 0, 0}, e(4, false);
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, {0, 0, 1, 1}), 0.0);
  EXPECT_EQ(dice(e, e), 1.0);
  std::vector<bool> x(8, false), y(8, false);
  for (int i : {0, 1, 2, 3}) x[static_cast<std::size_t>(i)] = true;
  for (int i : {1, 2, 3, 4, 5, 6}) y[static_cast<std::size_t>(i)] = true;
  EXPECT_DOUBLE_EQ(dice(x, y), 0.6);
  EXPECT_THROW(dice(a, std::vector<bool>(3)), Error);
}

TEST(AbnormalMask, BlockingScarIsRecovered) {
  const auto& g = sheet();
  const int centre = 9 * 14 + 9;
  const auto tissue = epsim::make_tissue(g, {"block", {{centre, 2.5, 0.95}}}, 0.15);
  const auto rec = epsim::simulate(g, tissue, {{0}, 0.0, 1.0, 1.0}, {});
  const auto m = abnormal_mask(rec.x);
  for (std::size_t i = 0; i < m.mask.size(); ++i)
    if (tissue.scar_mask[i]) EXPECT_TRUE(m.mask[i]) << i;
  EXPECT_GT(dice(m.mask, tissue.scar_mask), 0.7);
}

TEST(AbnormalMask, AffineInvariantAndDegenerate) {
  const auto& g = sheet();
  const auto tissue = epsim::make_tissue(g, {"slow", {{60, 3.0, 0.5}}}, 0.15);
  const auto rec = epsim::simulate(g, tissue, {{195}, 0.0, 1.0, 1.0}, {});
  const auto m = abnormal_mask(rec.x);
  EXPECT_EQ(abnormal_mask((3.0 * rec.x.array() - 7.0).matrix()).mask, m.mask);
  // Equal peaks everywhere: nothing is abnormal.
  Mat flat = Mat::Zero(10, 20);
  flat.bottomRows(5).setOnes();
  EXPECT_EQ(abnormal_mask(flat).count(), 0u);
  // A small dip stays under the contrast floor, a deep one is split off.
  flat(9, 3) = 0.95;
  EXPECT_EQ(abnormal_mask(flat).count(), 0u);
  flat.col(3).setConstant(0.2);
  flat.col(4).setConstant(0.3);
  const auto dip = abnormal_mask(flat);
  EXPECT_EQ(dip.count(), 2u);
  EXPECT_TRUE(dip.mask[3] && dip.mask[4]);
  EXPECT_THROW(abnormal_mask(Mat::Zero(10, 20)), Error);
  EXPECT_EQ(predicted_mask(Mat::Zero(10, 20)).count(), 0u);
}

TEST(AbnormalMask, HealthyTissueIsEmpty) {
  const auto& g = sheet();
  const auto tissue = epsim::make_tissue(g, {"healthy", {}}, 0.15);
  // Corner origins on the fast diagonal; from elsewhere the far corner is
  // still at rest when the window closes.
  for (int o : {0, 195}) EXPECT_EQ(abnormal_mask(epsim::simulate(g, tissue, {{o}, 0.0, 1.0, 1.0}, {}).x).count(), 0u) << o;
}

TEST(Evaluate, TruthScoresPerfectly) {
  const auto& g = sheet();
  epsim::BankSpec spec;
  spec.scar_configs = {{"healthy", {}}, {"scar", {{100, 3.0, 0.5}}}};
  spec.origins = {0, 13, 182, 195, 97, 50};
  spec.sensors = epsim::farthest_point_nodes(g, 30);
  const auto bank = epsim::make_subject_bank(g, "sheet", spec);
  const auto ctx = draw_contexts(bank, 2, 4);
  const auto out = evaluate("truth", personalize::truth(), bank, ctx);
  ASSERT_EQ(out.rows.size(), 6u);
  for (const auto& r : out.rows) {
    EXPECT_EQ(r.mse.mean, 0.0);
    EXPECT_NEAR(r.cc.mean, 1.0, 1e-12);
    EXPECT_EQ(r.dc.mean, 1.0);
  }
  EXPECT_EQ(find_row(out.rows, "target").n, 8u);
  const std::string csv = to_csv(out.rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n') + 1), metrics_header());

  // The sweep's largest size reproduces evaluate on the same context.
  const auto sweep = context_sweep("truth", personalize::truth(), bank, ctx, {2, 1});
  ASSERT_EQ(sweep.size(), 6u);
  EXPECT_EQ(sweep[0].nu, 2);
  EXPECT_EQ(sweep.back().nu, 1);

  ContextSets bad = ctx;
  bad.begin()->second.clear();
  EXPECT_THROW(evaluate("truth", personalize::truth(), bank, bad), Error);
}

TEST(DrawContexts, DeterministicAndDistinct) {
  const auto g = geometry::build_graph(geometry::grid_sheet(5, 5));
  epsim::BankSpec spec;
  spec.scar_configs = {{"a", {}}, {"b", {}}};
  spec.origins = {0, 4, 12, 20, 24, 7};
  spec.sensors = {0, 12, 24};
  const auto bank = epsim::make_subject_bank(g, "s", spec);
  const auto c1 = draw_contexts(bank, 4, 9), c2 = draw_contexts(bank, 4, 9);
  EXPECT_EQ(c1, c2);
  for (const auto& [_, ids] : c1) EXPECT_EQ(std::set<int>(ids.begin(), ids.end()).size(), 4u);
  EXPECT_THROW(draw_contexts(bank, 6, 9), Error);
}
