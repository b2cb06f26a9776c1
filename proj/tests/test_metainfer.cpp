#include "metapns/metainfer.hpp"

#include <gtest/gtest.h>

using namespace metapns;
using namespace metapns::metainfer;

namespace {

Model micro_model(std::uint64_t seed = 3) {
  ModelConfig cfg;
  cfg.sur = {4, 2, 2, 2};
  cfg.meta.hidden = 2;
  cfg.meta.frames = 3;
  cfg.init_seed = seed;
  Model m = make_model(cfg, geometry::build_hierarchy(geometry::grid_sheet(2, 3), 2, 0.5, 1));
  // Nonzero biases so every parameter has a generic gradient.
  Rng rng(seed + 100);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (auto& [name, v] : m.params.values)
    if (v.rows() == 1)
      for (Index j = 0; j < v.cols(); ++j) v(0, j) = u(rng);
  return m;
}

Mat random_mat(Index r, Index c, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

epsim::SimulationRecord record(int origin, std::uint64_t seed, Index n = 6, Index T = 3) {
  epsim::SimulationRecord r;
  r.x = random_mat(T, n, seed);
  r.stimulus = {{origin}, 0.0, 1.0, 1.0};
  return r;
}

epsim::Observation observation(std::uint64_t seed, std::vector<int> sensors = {0, 2, 5}, Index T = 3) {
  epsim::Observation o;
  o.sensor_nodes = std::move(sensors);
  o.y = random_mat(T, static_cast<Index>(o.sensor_nodes.size()), seed);
  return o;
}

// Plain scalar trapezoid integral of q log(q/p) for 1-D Gaussians.
double kl_numeric(double mq, double sq, double mp, double sp) {
  auto pdf = [](double x, double m, double s) {
    return std::exp(-0.5 * (x - m) * (x - m) / (s * s)) / (s * std::sqrt(2.0 * M_PI));
  };
  const double lo = mq - 12 * sq, hi = mq + 12 * sq;
  const int n = 200000;
  const double h = (hi - lo) / n;
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + i * h;
    const double q = pdf(x, mq, sq);
    const double f = q > 0 ? q * std::log(q / pdf(x, mp, sp)) : 0.0;
    acc += (i == 0 || i == n ? 0.5 : 1.0) * f;
  }
  return acc * h;
}

}  // namespace

TEST(Kl, ClosedFormMatchesNumericIntegration) {
  const double cases[][4] = {{0.0, 1.0, 0.0, 1.0}, {1.0, 0.5, 0.0, 1.0}, {-0.3, 2.0, 0.7, 0.8}};
  for (const auto& c : cases) {
    SetEmbedding q{RowVec::Constant(1, c[0]), RowVec::Constant(1, c[1])};
    SetEmbedding p{RowVec::Constant(1, c[2]), RowVec::Constant(1, c[3])};
    EXPECT_NEAR(kl_gaussian(q, p), kl_numeric(c[0], c[1], c[2], c[3]), 1e-6);
  }
  // Dimensions add.
  SetEmbedding q{RowVec(2), RowVec(2)}, p{RowVec(2), RowVec(2)};
  q.mu << 1.0, -0.3;
  q.sigma << 0.5, 2.0;
  p.mu << 0.0, 0.7;
  p.sigma << 1.0, 0.8;
  EXPECT_NEAR(kl_gaussian(q, p), kl_numeric(1.0, 0.5, 0.0, 1.0) + kl_numeric(-0.3, 2.0, 0.7, 0.8), 1e-6);
  // 1-D reference value: log 2 + (0.25 + 1)/2 - 1/2.
  EXPECT_NEAR(kl_gaussian({RowVec::Constant(1, 1.0), RowVec::Constant(1, 0.5)},
                          {RowVec::Constant(1, 0.0), RowVec::Constant(1, 1.0)}),
              0.818147, 1e-6);
}

TEST(Kl, NonNegativeAndZeroOnlyWhenEqual) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int r = 0; r < 200; ++r) {
    SetEmbedding q{RowVec(4), RowVec(4)}, p{RowVec(4), RowVec(4)};
    for (int d = 0; d < 4; ++d) {
      q.mu[d] = u(rng) - 1.0;
      p.mu[d] = u(rng) - 1.0;
      q.sigma[d] = u(rng);
      p.sigma[d] = u(rng);
    }
    EXPECT_GE(kl_gaussian(q, p), 0.0);
    EXPECT_NEAR(kl_gaussian(q, q), 0.0, 1e-14);
  }
  EXPECT_THROW(kl_gaussian({RowVec::Zero(1), RowVec::Zero(1)}, {RowVec::Zero(1), RowVec::Ones(1)}), Error);
}

TEST(Kl, TapeVersionMatchesValue) {
  ad::Tape t;
  SetEmbedding q{RowVec(2), RowVec(2)}, p{RowVec(2), RowVec(2)};
  q.mu << 0.2, -1.0;
  q.sigma << 0.3, 1.7;
  p.mu << -0.4, 0.1;
  p.sigma << 1.1, 0.6;
  GaussianVars qv{t.constant(q.mu), t.constant(q.sigma)}, pv{t.constant(p.mu), t.constant(p.sigma)};
  EXPECT_NEAR(kl_gaussian(qv, pv).scalar(), kl_gaussian(q, p), 1e-12);
}

TEST(SampleCondition, MomentsMatch) {
  SetEmbedding e{RowVec(2), RowVec(2)};
  e.mu << 1.5, -2.0;
  e.sigma << 0.5, 3.0;
  const int n = 20000;
  Mat s(n, 2);
  for (int i = 0; i < n; ++i) s.row(i) = sample_condition(e, derive_seed(7, static_cast<std::uint64_t>(i)));
  const RowVec mean = s.colwise().mean();
  const RowVec sd = ((s.rowwise() - mean).array().square().colwise().sum() / (n - 1)).sqrt();
  // Tolerances: ~4 standard errors.
  EXPECT_NEAR(mean[0], 1.5, 4 * 0.5 / std::sqrt(n));
  EXPECT_NEAR(mean[1], -2.0, 4 * 3.0 / std::sqrt(n));
  EXPECT_NEAR(sd[0], 0.5, 4 * 0.5 / std::sqrt(2.0 * n));
  EXPECT_NEAR(sd[1], 3.0, 4 * 3.0 / std::sqrt(2.0 * n));
  EXPECT_EQ(sample_condition(e, 11), sample_condition(e, 11));
  EXPECT_THROW(sample_condition(e, RowVec::Zero(3)), Error);
}

TEST(Aggregate, OrderAndDuplicateInvariant) {
  const Model m = micro_model();
  const auto a = observation(1), b = observation(2), c = observation(3);
  const RowVec abc = aggregate_value(m, {&a, &b, &c});
  EXPECT_TRUE(aggregate_value(m, {&c, &a, &b}).isApprox(abc, 1e-14));
  EXPECT_TRUE(aggregate_value(m, {&a, &a}).isApprox(aggregate_value(m, {&a}), 1e-14));
  EXPECT_TRUE(aggregate_value(m, {&a}).isApprox(embed_value(m, a), 1e-14));
  EXPECT_THROW(aggregate_value(m, {}), Error);
  EXPECT_THROW(aggregate({}), Error);
  const SetEmbedding p1 = posterior(m, {&a, &b, &c}), p2 = posterior(m, {&b, &c, &a});
  EXPECT_TRUE(p1.mu.isApprox(p2.mu, 1e-12));
  EXPECT_TRUE(p1.sigma.isApprox(p2.sigma, 1e-12));
}

TEST(Posterior, ExtraTargetJoinsTheMean) {
  const Model m = micro_model();
  const auto a = observation(1), b = observation(2);
  const auto x = record(0, 9);
  const RowVec expect_agg = (embed_value(m, a) + embed_value(m, b) + embed_value(m, epsim::full_observation(x))) / 3.0;
  const SetEmbedding q = posterior(m, {&a, &b}, &x);
  const SetEmbedding ref = heads_value(m, expect_agg);
  EXPECT_TRUE(q.mu.isApprox(ref.mu, 1e-12));
  EXPECT_TRUE(q.sigma.isApprox(ref.sigma, 1e-12));
  try {
    posterior(m, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "context required");
  }
}

TEST(Posterior, SigmaFloor) {
  Model m = micro_model();
  m.params.at("meta.sigma.W").setZero();
  m.params.at("meta.sigma.b").setConstant(-1000.0);
  const auto a = observation(1);
  const SetEmbedding e = posterior(m, {&a});
  EXPECT_TRUE(e.sigma.isApproxToConstant(1e-4, 1e-9));
  EXPECT_GT(e.sigma.minCoeff(), 0.0);
}

TEST(Embed, RejectsWrongFrameCount) {
  const Model m = micro_model();
  const auto a = observation(1, {0, 1}, 4);
  try {
    embed_value(m, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("4 frames"), std::string::npos);
  }
}

TEST(Predict, SamplesAndMean) {
  const Model m = micro_model();
  const auto a = observation(1), b = observation(2);
  const auto p = predict(m, {{2}, 0.0, 1.0, 1.0}, {&a, &b}, 4, 3, 21);
  ASSERT_EQ(p.samples.size(), 4u);
  Mat mean = Mat::Zero(3, 6);
  for (const Mat& s : p.samples) mean += s / 4.0;
  EXPECT_TRUE(p.mean.isApprox(mean, 1e-12));
  EXPECT_EQ(predict(m, {{2}, 0.0, 1.0, 1.0}, {&a, &b}, 4, 3, 21).mean, p.mean);
  EXPECT_THROW(predict(m, {{2}, 0.0, 1.0, 1.0}, {}, 1, 3, 0), Error);
}

TEST(Loss, ZeroLambdasLeaveReconstructionOnly) {
  const Model m = micro_model();
  const auto a = observation(1);
  const auto x = record(1, 5);
  const auto l = loss(m, {&a}, {&x}, {0.0, 0.0}, 3);
  EXPECT_DOUBLE_EQ(l.total, -l.recon);
  EXPECT_GE(l.kl_context_target, 0.0);
  EXPECT_GE(l.kl_prior, 0.0);
  // Reconstruction oracle: -1/2 * SSE of the rollout under the same draw.
  const SetEmbedding q = posterior(m, {&a}, &x);
  const RowVec c = sample_condition(q, seeded_epsilon(3)(0, 0, 2));
  const Mat xhat = rollout_value(m, StimulusEncoding::from(x.stimulus, 6), c, 3);
  EXPECT_NEAR(l.recon, -0.5 * (xhat - x.x).squaredNorm(), 1e-10);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Model m = micro_model();
  const auto a = observation(1), b = observation(2), c = observation(3, {1, 4});
  const auto x1 = record(0, 11), x2 = record(5, 12), x3 = record(3, 13);
  const std::vector<LossGroup> groups{{{&a, &b}, {&x1, &x2}, 0.5}, {{&c}, {&x3}, 0.25}};
  const LossWeights w{0.3, 0.7};
  const EpsilonFn eps = seeded_epsilon(77);

  nn::ParamMap grads = nn::zeros_like(m.params);
  const double base = evaluate_loss(m, groups, w, eps, &grads).total;
  EXPECT_DOUBLE_EQ(base, evaluate_loss(m, groups, w, eps, nullptr).total);

  const double h = 1e-6;
  double worst = 0.0;
  std::size_t checked = 0;
  for (auto& [name, value] : m.params.values) {
    for (Index i = 0; i < value.size(); ++i) {
      const double orig = value.data()[i];
      value.data()[i] = orig + h;
      const double fp = evaluate_loss(m, groups, w, eps, nullptr).total;
      value.data()[i] = orig - h;
      const double fm = evaluate_loss(m, groups, w, eps, nullptr).total;
      value.data()[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = grads.at(name).data()[i];
      const double rel = std::abs(an - fd) / std::max(1e-3, std::abs(fd) + std::abs(an));
      worst = std::max(worst, rel);
      EXPECT_LT(rel, 1e-4) << name << "[" << i << "] analytic " << an << " fd " << fd;
      ++checked;
    }
  }
  EXPECT_EQ(checked, m.params.count());
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Loss, PriorWeightCollapsesPriorKl) {
  const auto a = observation(1), b = observation(2);
  const auto x = record(2, 4);
  auto run = [&](double lambda2) {
    Model m = micro_model();
    nn::Adam opt;
    const LossWeights w{0.0, lambda2};
    for (int s = 0; s < 150; ++s) {
      nn::ParamMap g = nn::zeros_like(m.params);
      loss(m, {&a, &b}, {&x}, w, static_cast<std::uint64_t>(s), &g);
      opt.apply(m.params, g, 1e-2);
    }
    return loss(m, {&a, &b}, {&x}, w, 1).kl_prior;
  };
  const double free = run(0.0), heavy = run(1e3);
  EXPECT_LT(10.0 * heavy, free) << free << " vs " << heavy;
}

TEST(Loss, ContextRequired) {
  const Model m = micro_model();
  const auto x = record(2, 4);
  EXPECT_THROW(loss(m, {}, {&x}, {}, 1), Error);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c;
  c.sur = {12, 5, 7, 3};
  c.meta = {4, 20, 1e-3};
  c.init_seed = 99;
  const ModelConfig r = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(r), to_json(c));
}
