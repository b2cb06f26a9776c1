#pragma once

// Named parameters, the optimizer, precomputed graph operators and the layer
// building blocks shared by the surrogate and the meta-model.

#include "metapns/autodiff.hpp"
#include "metapns/geometry.hpp"

#include <cmath>
#include <map>
#include <vector>

namespace metapns::nn {

using ad::SparseOp;
using ad::Tape;
using ad::Var;

using ParamMap = std::map<std::string, Mat>;

struct ParamStore {
  ParamMap values;

  void add(const std::string& name, Mat init) {
    require(!values.contains(name), cat("duplicate parameter ", name));
    values.emplace(name, std::move(init));
  }
  const Mat& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) fail(cat("unknown parameter ", name));
    return it->second;
  }
  Mat& at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) fail(cat("unknown parameter ", name));
    return it->second;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : values) n += static_cast<std::size_t>(m.size());
    return n;
  }
};

/// Glorot-uniform weights.
inline Mat glorot(Index rows, Index cols, Index fan_in, Index fan_out, Rng& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-lim, lim);
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  return m;
}

/// Binds a ParamStore to one tape. Parameters become leaves on first use:
/// differentiable variables when `trainable`, constants otherwise.
class Bound {
 public:
  Bound(Tape& tape, const ParamStore& store, bool trainable) : tape_(tape), store_(store), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Mat& m = store_.at(name);
    Var v = trainable_ ? tape_.variable(m) : tape_.constant(m);
    vars_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }
  bool trainable() const { return trainable_; }

  /// Adds d(loss)/d(param) for every bound parameter into `grads`.
  void collect(ParamMap& grads) const {
    for (const auto& [name, v] : vars_) {
      Mat g = tape_.grad(v);
      auto it = grads.find(name);
      if (it == grads.end()) grads.emplace(name, std::move(g));
      else it->second += g;
    }
  }

 private:
  Tape& tape_;
  const ParamStore& store_;
  bool trainable_;
  std::map<std::string, Var> vars_;
};

inline ParamMap zeros_like(const ParamStore& store) {
  ParamMap g;
  for (const auto& [name, m] : store.values) g.emplace(name, Mat::Zero(m.rows(), m.cols()));
  return g;
}

inline void add_into(ParamMap& acc, const ParamMap& g) {
  for (const auto& [name, m] : g) {
    auto it = acc.find(name);
    if (it == acc.end()) acc.emplace(name, m);
    else it->second += m;
  }
}

/// Adam with bias correction.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  ParamMap m;
  ParamMap v;

  void apply(ParamStore& params, const ParamMap& grads, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (auto& [name, p] : params.values) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Mat& g = git->second;
      auto [mit, m_new] = m.try_emplace(name, Mat::Zero(p.rows(), p.cols()));
      auto [vit, v_new] = v.try_emplace(name, Mat::Zero(p.rows(), p.cols()));
      mit->second = beta1 * mit->second + (1.0 - beta1) * g;
      vit->second = beta2 * vit->second + (1.0 - beta2) * g.cwiseProduct(g);
      p.array() -= lr * (mit->second.array() / c1) / ((vit->second.array() / c2).sqrt() + eps);
    }
  }
};

// ---------------------------------------------------------------------------
// Graph operators per hierarchy level.

/// Open B-spline basis of degree 1 with `ks` knots per dimension over [0,1]^3.
/// Returns (kernel index, weight) pairs; weights sum to one.
inline std::vector<std::pair<int, double>> spline_basis(const Eigen::RowVector3d& u, int ks) {
  std::array<std::array<std::pair<int, double>, 2>, 3> per_dim{};
  for (int d = 0; d < 3; ++d) {
    const double pos = std::clamp(u[d], 0.0, 1.0) * (ks - 1);
    const int i0 = std::min(static_cast<int>(std::floor(pos)), ks - 2);
    const double frac = pos - i0;
    per_dim[static_cast<std::size_t>(d)] = {{{i0, 1.0 - frac}, {i0 + 1, frac}}};
  }
  std::vector<std::pair<int, double>> out;
  out.reserve(8);
  for (const auto& a : per_dim[0])
    for (const auto& b : per_dim[1])
      for (const auto& c : per_dim[2]) {
        const double w = a.second * b.second * c.second;
        if (w != 0.0) out.emplace_back(a.first + ks * (b.first + ks * c.first), w);
      }
  return out;
}

struct LevelOps {
  Index nodes = 0;
  std::shared_ptr<const std::vector<SparseOp>> spline;  // K operators, mean-normalized
  std::shared_ptr<const SparseOp> gcn;                   // mean over the closed neighbourhood
};

struct GraphOps {
  int kernel_size = 2;
  std::vector<LevelOps> levels;
  std::vector<std::shared_ptr<const SparseOp>> pool;    // level l -> l+1
  std::vector<std::shared_ptr<const SparseOp>> unpool;  // level l+1 -> l
  std::shared_ptr<const SparseOp> pool_to_coarsest;     // level 0 -> last

  int kernels() const { return kernel_size * kernel_size * kernel_size; }
  Index nodes(std::size_t l) const { return levels.at(l).nodes; }
};

inline LevelOps make_level_ops(const geometry::GraphLevel& g, int ks) {
  const int K = ks * ks * ks;
  const Index n = g.node_count;
  std::vector<double> deg(static_cast<std::size_t>(n), 0.0);
  for (const auto& [i, j] : g.edges) {
    deg[static_cast<std::size_t>(i)] += 1.0;
    deg[static_cast<std::size_t>(j)] += 1.0;
  }
  std::vector<std::vector<Eigen::Triplet<double>>> trip(static_cast<std::size_t>(K));
  std::vector<Eigen::Triplet<double>> gcn;
  auto message = [&](int recv, int send, const Eigen::RowVector3d& attr) {
    for (auto [k, w] : spline_basis(attr, ks))
      trip[static_cast<std::size_t>(k)].emplace_back(recv, send, w / deg[static_cast<std::size_t>(recv)]);
    gcn.emplace_back(recv, send, 1.0 / (deg[static_cast<std::size_t>(recv)] + 1.0));
  };
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto& [i, j] = g.edges[e];
    const Eigen::RowVector3d a = g.edge_attr.row(static_cast<Index>(e));
    message(i, j, a);  // attribute of coord(j) - coord(i)
    message(j, i, Eigen::RowVector3d::Ones() - a);
  }
  for (Index i = 0; i < n; ++i) gcn.emplace_back(i, i, 1.0 / (deg[static_cast<std::size_t>(i)] + 1.0));
  auto ops = std::make_shared<std::vector<SparseOp>>();
  for (int k = 0; k < K; ++k) {
    SpMat m(n, n);
    m.setFromTriplets(trip[static_cast<std::size_t>(k)].begin(), trip[static_cast<std::size_t>(k)].end());
    ops->emplace_back(std::move(m));
  }
  SpMat gm(n, n);
  gm.setFromTriplets(gcn.begin(), gcn.end());
  return {n, std::move(ops), std::make_shared<SparseOp>(std::move(gm))};
}

inline GraphOps make_graph_ops(const geometry::GraphHierarchy& h, int kernel_size) {
  require(kernel_size >= 2, "kernel_size must be >= 2");
  GraphOps ops;
  ops.kernel_size = kernel_size;
  for (const auto& lv : h.levels) ops.levels.push_back(make_level_ops(lv, kernel_size));
  SpMat chain;
  for (std::size_t l = 0; l < h.assign.size(); ++l) {
    const auto& a = h.assign[l];
    const Index nf = h.levels[l].node_count, nc = h.levels[l + 1].node_count;
    std::vector<double> cnt(static_cast<std::size_t>(nc), 0.0);
    for (int c : a) cnt[static_cast<std::size_t>(c)] += 1.0;
    std::vector<Eigen::Triplet<double>> pt, ut;
    for (std::size_t v = 0; v < a.size(); ++v) {
      pt.emplace_back(a[v], static_cast<int>(v), 1.0 / cnt[static_cast<std::size_t>(a[v])]);
      ut.emplace_back(static_cast<int>(v), a[v], 1.0);
    }
    SpMat p(nc, nf), u(nf, nc);
    p.setFromTriplets(pt.begin(), pt.end());
    u.setFromTriplets(ut.begin(), ut.end());
    chain = l == 0 ? p : SpMat(p * chain);
    ops.pool.push_back(std::make_shared<SparseOp>(std::move(p)));
    ops.unpool.push_back(std::make_shared<SparseOp>(std::move(u)));
  }
  if (h.assign.empty()) {
    SpMat id(h.levels[0].node_count, h.levels[0].node_count);
    id.setIdentity();
    chain = id;
  }
  ops.pool_to_coarsest = std::make_shared<SparseOp>(std::move(chain));
  return ops;
}

// ---------------------------------------------------------------------------
// Layers. Each takes the bound parameters and a name prefix.

struct ParamSpec {
  std::string name;
  Index rows, cols;
  Index fan_in, fan_out;
  bool bias;
};

inline void declare_linear(std::vector<ParamSpec>& specs, const std::string& prefix, Index in, Index out) {
  specs.push_back({prefix + ".W", in, out, in, out, false});
  specs.push_back({prefix + ".b", 1, out, in, out, true});
}

inline Var linear(Bound& p, const Var& x, const std::string& prefix) {
  return ad::add_row(ad::matmul(x, p(prefix + ".W")), p(prefix + ".b"));
}

inline void declare_gcnn_block(std::vector<ParamSpec>& specs, const std::string& prefix, Index in, Index out,
                               int kernels) {
  specs.push_back({prefix + ".root", in, out, in, out, false});
  specs.push_back({prefix + ".spline", in * kernels, out, in, out, false});
  specs.push_back({prefix + ".b", 1, out, in, out, true});
  specs.push_back({prefix + ".skip", in, out, in, out, false});
  specs.push_back({prefix + ".skip_b", 1, out, in, out, true});
}

/// ELU(x W_root + sum_k B_k(e) x_j W_k averaged over neighbours + b) + (x W_skip + b_skip).
inline Var gcnn_block(Bound& p, const Var& x, const LevelOps& lv, const std::string& prefix) {
  const Var& root = p(prefix + ".root");
  if (x.cols() != root.rows())
    fail(cat("gcnn_block ", prefix, ": feature width ", x.cols(), " but block expects ", root.rows()));
  Var agg = ad::sparse_gather(x, lv.spline);
  Var conv = ad::add(ad::matmul(x, root), ad::matmul(agg, p(prefix + ".spline")));
  conv = ad::elu(ad::add_row(conv, p(prefix + ".b")));
  Var skip = ad::add_row(ad::matmul(x, p(prefix + ".skip")), p(prefix + ".skip_b"));
  return ad::add(conv, skip);
}

inline void materialize(ParamStore& store, const std::vector<ParamSpec>& specs, Rng& rng) {
  for (const ParamSpec& s : specs) {
    if (s.bias) store.add(s.name, Mat::Zero(s.rows, s.cols));
    else store.add(s.name, glorot(s.rows, s.cols, s.fan_in, s.fan_out, rng));
  }
}

}  // namespace metapns::nn
