#pragma once

// Comparison methods: PNS (per-sample conditioning, no set aggregation) and
// FS-BO (segment-wise excitability fitted by Bayesian optimization against the
// simulator).

#include "metapns/eval.hpp"
#include "metapns/metainfer.hpp"

#include <Eigen/Cholesky>

#include <functional>
#include <limits>

namespace metapns::baselines {

using geometry::GraphLevel;

// ---------------------------------------------------------------------------
// PNS: the meta-model with the context set replaced by the paired sample.

inline metainfer::SetEmbedding pns_infer(const metainfer::Model& m, const epsim::Observation& y) {
  return metainfer::posterior(m, {&y});
}

// ---------------------------------------------------------------------------
// Segments.

struct SegmentPartition {
  std::vector<int> segment;  // per node
  int count = 0;

  std::vector<int> sizes() const {
    std::vector<int> s(static_cast<std::size_t>(count), 0);
    for (int k : segment) ++s[static_cast<std::size_t>(k)];
    return s;
  }
};

inline void validate(const SegmentPartition& p, Index nodes) {
  require(static_cast<Index>(p.segment.size()) == nodes,
          cat("segment partition: ", p.segment.size(), " labels for ", nodes, " nodes"));
  require(p.count >= 1, "segment partition: no segments");
  for (int k : p.segment) require(k >= 0 && k < p.count, cat("segment partition: label ", k, " out of range"));
  for (int s : p.sizes()) require(s > 0, "segment partition: empty segment");
}

/// Lloyd's k-means on node coordinates, k-means++ seeding. Ties in the nearest
/// centre go to the lower segment id.
inline SegmentPartition segment_partition(const GraphLevel& g, int S, std::uint64_t seed = 0) {
  const Index n = g.node_count;
  require(S >= 1 && S <= n, cat("segment_partition: need 1 <= S <= ", n, ", got ", S));
  const Mat& X = g.node_coords;
  auto d2 = [&](Index i, const Eigen::RowVector3d& c) { return (X.row(i) - c).squaredNorm(); };

  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(attempt), 0x5e6));
    std::vector<Eigen::RowVector3d> centre;
    centre.push_back(X.row(std::uniform_int_distribution<Index>(0, n - 1)(rng)));
    Vec best = Vec::Constant(n, std::numeric_limits<double>::infinity());
    while (static_cast<int>(centre.size()) < S) {
      for (Index i = 0; i < n; ++i) best[i] = std::min(best[i], d2(i, centre.back()));
      const double total = best.sum();
      Index pick = 0;
      if (total > 0.0) {
        double r = std::uniform_real_distribution<double>(0.0, total)(rng);
        for (pick = 0; pick < n - 1; ++pick) {
          r -= best[pick];
          if (r < 0.0) break;
        }
      }
      centre.push_back(X.row(pick));
    }

    SegmentPartition p{std::vector<int>(static_cast<std::size_t>(n), -1), S};
    bool changed = true;
    for (int it = 0; it < 200 && changed; ++it) {
      changed = false;
      for (Index i = 0; i < n; ++i) {
        int arg = 0;
        double dmin = d2(i, centre[0]);
        for (int k = 1; k < S; ++k) {
          const double d = d2(i, centre[static_cast<std::size_t>(k)]);
          if (d < dmin) {
            dmin = d;
            arg = k;
          }
        }
        if (p.segment[static_cast<std::size_t>(i)] != arg) {
          p.segment[static_cast<std::size_t>(i)] = arg;
          changed = true;
        }
      }
      std::vector<Eigen::RowVector3d> sum(static_cast<std::size_t>(S), Eigen::RowVector3d::Zero());
      std::vector<int> cnt(static_cast<std::size_t>(S), 0);
      for (Index i = 0; i < n; ++i) {
        sum[static_cast<std::size_t>(p.segment[static_cast<std::size_t>(i)])] += X.row(i);
        ++cnt[static_cast<std::size_t>(p.segment[static_cast<std::size_t>(i)])];
      }
      for (int k = 0; k < S; ++k)
        if (cnt[static_cast<std::size_t>(k)] > 0) centre[static_cast<std::size_t>(k)] = sum[static_cast<std::size_t>(k)] / cnt[static_cast<std::size_t>(k)];
    }
    const auto sz = p.sizes();
    if (std::all_of(sz.begin(), sz.end(), [](int s) { return s > 0; })) return p;
  }
  fail(cat("segment_partition: empty segment after 10 attempts (S = ", S, ")"));
}

inline epsim::TissueField segment_tissue(const Vec& theta, const SegmentPartition& p, double healthy) {
  require(theta.size() == p.count, cat("segment_tissue: ", theta.size(), " values for ", p.count, " segments"));
  const Index n = static_cast<Index>(p.segment.size());
  epsim::TissueField t = epsim::uniform_tissue(n, healthy);
  for (Index i = 0; i < n; ++i) {
    t.excitability[i] = theta[p.segment[static_cast<std::size_t>(i)]];
    t.scar_mask[static_cast<std::size_t>(i)] = t.excitability[i] > healthy;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Instrumented simulator.

class SimulatorHandle {
 public:
  SimulatorHandle(const GraphLevel& g, epsim::ApParams params) : g_(&g), params_(params) {}

  epsim::SimulationRecord operator()(const epsim::TissueField& t, const epsim::Stimulus& s) const {
    ++calls_;
    return epsim::simulate(*g_, t, s, params_);
  }

  std::size_t calls() const { return calls_.load(); }
  const epsim::ApParams& params() const { return params_; }
  const GraphLevel& graph() const { return *g_; }

 private:
  const GraphLevel* g_;
  epsim::ApParams params_;
  mutable std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Gaussian process with a squared-exponential kernel on the unit cube.

struct GpHyper {
  Vec log_length;
  double log_signal = 0.0;
};

class GaussianProcess {
 public:
  static constexpr double kNugget = 1e-6;

  void fit(const Mat& X, const Vec& y, const GpHyper& h) {
    X_ = X;
    h_ = h;
    mean_ = y.mean();
    scale_ = 1.0;
    if (y.size() > 1) {
      const double sd = std::sqrt((y.array() - mean_).square().sum() / static_cast<double>(y.size() - 1));
      if (sd > 0.0) scale_ = sd;
    }
    const Vec z = (y.array() - mean_) / scale_;
    llt_.compute(gram(X_));
    require(llt_.info() == Eigen::Success, "gp: kernel matrix not positive definite");
    alpha_ = llt_.solve(z);
    nll_ = 0.5 * z.dot(alpha_) + llt_.matrixLLT().diagonal().array().log().sum() +
           0.5 * static_cast<double>(z.size()) * std::log(2.0 * M_PI);
  }

  /// Posterior mean and standard deviation in objective units.
  std::pair<double, double> predict(const Eigen::RowVectorXd& x) const {
    Vec k(X_.rows());
    for (Index i = 0; i < X_.rows(); ++i) k[i] = kernel(x, X_.row(i));
    const double mu = k.dot(alpha_);
    const Vec v = llt_.matrixL().solve(k);
    const double var = std::max(0.0, std::exp(2.0 * h_.log_signal) + kNugget - v.squaredNorm());
    return {mean_ + scale_ * mu, scale_ * std::sqrt(var)};
  }

  double negative_log_likelihood() const { return nll_; }

  /// Marginal-likelihood fit over log length-scales and signal amplitude:
  /// a fixed candidate set followed by coordinate refinement.
  static GpHyper optimize(const Mat& X, const Vec& y, const GpHyper& start) {
    const Index d = X.cols();
    auto score = [&](const GpHyper& h) {
      GaussianProcess gp;
      try {
        gp.fit(X, y, h);
      } catch (const Error&) {
        return std::numeric_limits<double>::infinity();
      }
      return gp.negative_log_likelihood();
    };
    GpHyper best = start;
    double best_s = score(best);
    for (double l : {-3.0, -2.0, -1.0, 0.0, 1.0}) {
      GpHyper h{Vec::Constant(d, l), 0.0};
      const double s = score(h);
      if (s < best_s) {
        best_s = s;
        best = h;
      }
    }
    for (double step : {0.5, 0.25, 0.1}) {
      bool moved = true;
      for (int round = 0; round < 20 && moved; ++round) {
        moved = false;
        for (Index c = 0; c <= d; ++c) {
          for (double dir : {-1.0, 1.0}) {
            GpHyper h = best;
            double& v = c < d ? h.log_length[c] : h.log_signal;
            v = std::clamp(v + dir * step, -5.0, 3.0);
            const double s = score(h);
            if (s < best_s - 1e-12) {
              best_s = s;
              best = h;
              moved = true;
            }
          }
        }
      }
    }
    return best;
  }

 private:
  double kernel(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) const {
    const double r2 = ((a - b).array() / h_.log_length.transpose().array().exp()).square().sum();
    return std::exp(2.0 * h_.log_signal) * std::exp(-0.5 * r2);
  }

  Mat gram(const Mat& X) const {
    Mat K(X.rows(), X.rows());
    for (Index i = 0; i < X.rows(); ++i)
      for (Index j = 0; j <= i; ++j) K(i, j) = K(j, i) = kernel(X.row(i), X.row(j));
    K.diagonal().array() += kNugget;
    return K;
  }

  Mat X_;
  GpHyper h_;
  double mean_ = 0.0, scale_ = 1.0, nll_ = 0.0;
  Eigen::LLT<Mat> llt_;
  Vec alpha_;
};

/// Expected improvement for minimization.
inline double expected_improvement(double mu, double sd, double best) {
  if (sd <= 0.0) return std::max(0.0, best - mu);
  const double z = (best - mu) / sd;
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  return (best - mu) * cdf + sd * pdf;
}

// ---------------------------------------------------------------------------
// FS-BO.

struct Bounds {
  Vec lo, hi;
};

inline Bounds uniform_bounds(int S, double lo, double hi) { return {Vec::Constant(S, lo), Vec::Constant(S, hi)}; }

struct BoSettings {
  int budget = 100;
  int initial = 10;
  int refit_every = 10;
  int candidates = 2000;
  double penalty = 1e3;  // objective for a parameter set the simulator cannot integrate
  std::uint64_t seed = 0;
  int workers = 1;
};

struct BoState {
  Mat points;  // evaluated θ, one per row
  Vec values;
  GpHyper hyper;
  std::size_t calls = 0;
  std::size_t budget = 0;

  Index best_index() const {
    Index i = 0;
    values.minCoeff(&i);
    return i;
  }
};

struct BoResult {
  Vec theta;
  double objective = 0.0;
  BoState state;
};

/// Σ over context items of mse(observe(simulate(tissue(θ))), y), noise-free.
class FsObjective {
 public:
  FsObjective(const SimulatorHandle& sim, const SegmentPartition& part,
              std::vector<const epsim::Observation*> obs, std::vector<epsim::Stimulus> stimuli, int workers = 1)
      : sim_(sim), part_(part), obs_(std::move(obs)), stim_(std::move(stimuli)), workers_(workers) {
    require(!obs_.empty(), "fs-bo: empty context");
    require(obs_.size() == stim_.size(), "fs-bo: one stimulus per context item");
    validate(part_, sim_.graph().node_count);
  }

  /// Throws Numerical if any context simulation is unstable.
  double operator()(const Vec& theta) const {
    const auto tissue = segment_tissue(theta, part_, sim_.params().a_healthy);
    std::vector<double> err(obs_.size());
    parallel_for(obs_.size(), workers_, [&](std::size_t i) {
      const auto rec = sim_(tissue, stim_[i]);
      const auto pred = epsim::observe(rec, obs_[i]->sensor_nodes, 0.0, 0);
      err[i] = eval::mse(pred.y, obs_[i]->y);
    });
    double s = 0.0;
    for (double e : err) s += e;
    return s;
  }

  std::size_t calls_per_evaluation() const { return obs_.size(); }

 private:
  const SimulatorHandle& sim_;
  const SegmentPartition& part_;
  std::vector<const epsim::Observation*> obs_;
  std::vector<epsim::Stimulus> stim_;
  int workers_;
};

/// Latin hypercube sample in the unit cube.
inline Mat latin_hypercube(int n, Index d, Rng& rng) {
  Mat u(n, d);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Index c = 0; c < d; ++c) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < n; ++i) u(i, c) = (perm[static_cast<std::size_t>(i)] + unif(rng)) / n;
  }
  return u;
}

/// Generic box-constrained minimizer; `budget` counts objective evaluations.
inline BoResult bo_minimize(const std::function<double(const Vec&)>& f, const Bounds& b, const BoSettings& s) {
  const Index d = b.lo.size();
  require(d >= 1 && b.hi.size() == d, "bo: bounds dimension mismatch");
  for (Index c = 0; c < d; ++c) require(b.hi[c] > b.lo[c], "bo: empty bound interval");
  require(s.budget >= 1, "bo: budget must be positive");
  Rng rng(derive_seed(s.seed, "bo"));
  const Vec width = b.hi - b.lo;
  auto to_theta = [&](const Eigen::RowVectorXd& u) -> Vec { return b.lo + width.cwiseProduct(u.transpose()); };

  BoState st;
  st.budget = static_cast<std::size_t>(s.budget);
  st.hyper = {Vec::Constant(d, std::log(0.3)), 0.0};
  Mat U(0, d);
  std::vector<double> vals;
  auto evaluate = [&](const Eigen::RowVectorXd& u) {
    double v;
    try {
      v = f(to_theta(u));
      if (!std::isfinite(v)) v = s.penalty;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numerical) throw;
      v = s.penalty;
    }
    U.conservativeResize(U.rows() + 1, Eigen::NoChange);
    U.row(U.rows() - 1) = u;
    vals.push_back(v);
    ++st.calls;
  };

  const int n0 = std::min(s.initial, s.budget);
  const Mat init = latin_hypercube(n0, d, rng);
  for (int i = 0; i < n0; ++i) evaluate(init.row(i));

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  while (static_cast<int>(vals.size()) < s.budget) {
    const Vec y = Eigen::Map<const Vec>(vals.data(), static_cast<Index>(vals.size()));
    if (static_cast<int>(vals.size()) == n0 || (static_cast<int>(vals.size()) - n0) % s.refit_every == 0)
      st.hyper = GaussianProcess::optimize(U, y, st.hyper);
    GaussianProcess gp;
    gp.fit(U, y, st.hyper);
    Index bi = 0;
    const double best = y.minCoeff(&bi);

    // Random candidates plus Gaussian perturbations of the incumbent.
    Eigen::RowVectorXd arg = U.row(bi);
    double arg_ei = -1.0;
    for (int c = 0; c < s.candidates; ++c) {
      Eigen::RowVectorXd u(d);
      if (c % 2 == 0) {
        for (Index k = 0; k < d; ++k) u[k] = unif(rng);
      } else {
        const double radius = c % 4 == 1 ? 0.1 : 0.01;
        for (Index k = 0; k < d; ++k) u[k] = std::clamp(U(bi, k) + radius * nd(rng), 0.0, 1.0);
      }
      const auto [mu, sd] = gp.predict(u);
      const double ei = expected_improvement(mu, sd, best);
      if (ei > arg_ei) {
        arg_ei = ei;
        arg = u;
      }
    }
    evaluate(arg);
  }

  st.values = Eigen::Map<const Vec>(vals.data(), static_cast<Index>(vals.size()));
  st.points.resize(U.rows(), d);
  for (Index i = 0; i < U.rows(); ++i) st.points.row(i) = to_theta(U.row(i)).transpose();
  const Index bi = st.best_index();
  return {st.points.row(bi).transpose(), st.values[bi], std::move(st)};
}

/// Fits segment excitabilities to a context set; `budget` counts simulator
/// calls, so each objective evaluation spends one call per context item.
inline BoResult bo_fit(const SimulatorHandle& sim, const SegmentPartition& part,
                       const std::vector<const epsim::Observation*>& context,
                       const std::vector<epsim::Stimulus>& stimuli, const Bounds& bounds, BoSettings s) {
  const FsObjective objective(sim, part, context, stimuli, s.workers);
  require(bounds.lo.size() == part.count, cat("bo_fit: bounds have ", bounds.lo.size(), " dims for ", part.count, " segments"));
  const std::size_t per = objective.calls_per_evaluation();
  const std::size_t start = sim.calls();
  s.budget = static_cast<int>(static_cast<std::size_t>(s.budget) / per);
  require(s.budget >= 1, cat("bo_fit: simulator budget below one evaluation (", per, " context items)"));
  BoResult r = bo_minimize([&](const Vec& th) { return objective(th); }, bounds, s);
  r.state.calls = sim.calls() - start;
  r.state.budget = static_cast<std::size_t>(s.budget) * per;
  return r;
}

inline epsim::SimulationRecord bo_predict(const SimulatorHandle& sim, const Vec& theta, const SegmentPartition& part,
                                          const epsim::Stimulus& stim) {
  return sim(segment_tissue(theta, part, sim.params().a_healthy), stim);
}

/// FS-BO as an evaluation-harness predictor.
inline eval::Personalizer fs_bo(const SimulatorHandle& sim, const SegmentPartition& part, Bounds bounds,
                                BoSettings s, std::function<void(const std::string&, const BoResult&)> on_fit = {}) {
  return [&sim, &part, bounds, s, on_fit](const epsim::Subject& subj, const std::vector<int>& ctx) {
    std::vector<const epsim::Observation*> obs;
    std::vector<epsim::Stimulus> stim;
    for (int id : ctx) {
      obs.push_back(&subj.observations.at(static_cast<std::size_t>(id)));
      stim.push_back(subj.records.at(static_cast<std::size_t>(id)).stimulus);
    }
    const auto t0 = std::chrono::steady_clock::now();
    BoSettings local = s;
    local.seed = derive_seed(s.seed, subj.key);
    const BoResult fit = bo_fit(sim, part, obs, stim, bounds, local);
    eval::Personalized p;
    p.embed_seconds = eval::seconds_since(t0);
    if (on_fit) on_fit(subj.key, fit);
    const Vec theta = fit.theta;
    p.generate = [&sim, &part, &subj, theta](std::size_t id) {
      return bo_predict(sim, theta, part, subj.records.at(id).stimulus).x;
    };
    return p;
  };
}

}  // namespace metapns::baselines
