#pragma once

// Amortized inference over context sets: a graph-recurrent encoder embeds each
// observed sequence, embeddings are averaged over the set, and two linear
// heads parameterize a diagonal Gaussian over the condition vector c. The
// same networks serve the prior p(c | Y) and the posterior q(c | Y u x).

#include "metapns/surrogate.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>

namespace metapns::metainfer {

using ad::Tape;
using ad::Var;
using epsim::Observation;
using epsim::SimulationRecord;
using nn::Bound;
using nn::GraphOps;
using surrogate::StimulusEncoding;
using surrogate::SurrogateConfig;

struct MetaConfig {
  int hidden = 8;       // recurrent cell width
  int frames = 50;      // sequence length the time-compression layer expects
  double sigma_floor = 1e-4;
};

struct ModelConfig {
  SurrogateConfig sur;
  MetaConfig meta;
  std::uint64_t init_seed = 0;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"hidden", c.sur.hidden},       {"d_z", c.sur.d_z},
          {"d_c", c.sur.d_c},             {"kernel_size", c.sur.kernel_size},
          {"gate_bias", c.sur.gate_bias},
          {"meta_hidden", c.meta.hidden}, {"frames", c.meta.frames},
          {"sigma_floor", c.meta.sigma_floor}, {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.sur.hidden = j.at("hidden");
  c.sur.d_z = j.at("d_z");
  c.sur.d_c = j.at("d_c");
  c.sur.kernel_size = j.at("kernel_size");
  c.sur.gate_bias = j.at("gate_bias");
  c.meta.hidden = j.at("meta_hidden");
  c.meta.frames = j.at("frames");
  c.meta.sigma_floor = j.at("sigma_floor");
  c.init_seed = j.at("init_seed");
  return c;
}

/// Surrogate and meta-model parameters over one graph hierarchy.
struct Model {
  ModelConfig config;
  geometry::GraphHierarchy hierarchy;
  GraphOps ops;
  nn::ParamStore params;

  Index nodes() const { return ops.nodes(0); }
  int frames() const { return config.meta.frames; }
};

inline void declare_meta(std::vector<nn::ParamSpec>& specs, const ModelConfig& c, Index coarse_nodes) {
  const Index H = c.meta.hidden, dc = c.sur.d_c, T = c.meta.frames;
  specs.push_back({"meta.gru.Wx", 2, 3 * H, 2, H, false});
  specs.push_back({"meta.gru.bx", 1, 3 * H, 2, H, true});
  specs.push_back({"meta.gru.Wh_ru", H, 2 * H, H, H, false});
  specs.push_back({"meta.gru.Wh_n", H, H, H, H, false});
  specs.push_back({"meta.time.w", 1, T, T, 1, false});
  specs.push_back({"meta.time.b", 1, coarse_nodes * H, T, 1, true});
  nn::declare_linear(specs, "meta.feat", coarse_nodes * H, dc);
  nn::declare_linear(specs, "meta.mu", dc, dc);
  nn::declare_linear(specs, "meta.sigma", dc, dc);
}

inline Model make_model(const ModelConfig& cfg, geometry::GraphHierarchy hier) {
  geometry::check_hierarchy(hier);
  require(cfg.sur.hidden > 0 && cfg.sur.d_z > 0 && cfg.sur.d_c > 0 && cfg.meta.hidden > 0 && cfg.meta.frames >= 1,
          "model: sizes must be positive");
  Model m;
  m.config = cfg;
  m.hierarchy = std::move(hier);
  m.ops = nn::make_graph_ops(m.hierarchy, cfg.sur.kernel_size);
  std::vector<nn::ParamSpec> specs;
  surrogate::declare(specs, cfg.sur, m.ops.kernels());
  declare_meta(specs, cfg, m.hierarchy.coarsest().node_count);
  Rng rng(mix_seed(cfg.init_seed));
  nn::materialize(m.params, specs, rng);
  surrogate::init_transition(m.params, cfg.sur);
  return m;
}

// ---------------------------------------------------------------------------
// Plain-value types.

struct SetEmbedding {
  RowVec mu;
  RowVec sigma;
};

using ConditionVector = RowVec;

/// KL(q || p) between diagonal Gaussians, summed over dimensions.
inline double kl_gaussian(const SetEmbedding& q, const SetEmbedding& p) {
  require(q.mu.size() == p.mu.size() && q.sigma.size() == q.mu.size() && p.sigma.size() == p.mu.size(),
          "kl_gaussian: dimension mismatch");
  if ((q.sigma.array() <= 0.0).any() || (p.sigma.array() <= 0.0).any()) fail("kl_gaussian: nonpositive sigma");
  const auto sq = q.sigma.array(), sp = p.sigma.array();
  return ((sp / sq).log() + (sq.square() + (q.mu - p.mu).array().square()) / (2.0 * sp.square()) - 0.5).sum();
}

inline ConditionVector sample_condition(const SetEmbedding& e, const RowVec& eps) {
  require(eps.size() == e.mu.size(), "sample_condition: epsilon dimension mismatch");
  return e.mu + eps.cwiseProduct(e.sigma);
}

inline RowVec standard_normal(Index d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  RowVec e(d);
  for (Index i = 0; i < d; ++i) e[i] = nd(rng);
  return e;
}

inline ConditionVector sample_condition(const SetEmbedding& e, std::uint64_t seed) {
  return sample_condition(e, standard_normal(e.mu.size(), seed));
}

// ---------------------------------------------------------------------------
// Differentiable pieces.

/// Frame-stacked encoder input (T*N x 2): channel 0 = sensor value scattered
/// onto its node, channel 1 = sensor-presence mask.
inline Mat observation_input(const Observation& obs, Index n) {
  const Index T = obs.y.rows();
  require(static_cast<Index>(obs.sensor_nodes.size()) == obs.y.cols(), "observation: sensor count mismatch");
  Mat x = Mat::Zero(T * n, 2);
  for (std::size_t m = 0; m < obs.sensor_nodes.size(); ++m) {
    const int node = obs.sensor_nodes[m];
    require(node >= 0 && node < n, cat("observation: sensor node ", node, " outside mesh"));
    for (Index t = 0; t < T; ++t) {
      x(t * n + node, 0) = obs.y(t, static_cast<Index>(m));
      x(t * n + node, 1) = 1.0;
    }
  }
  return x;
}

/// h_phi(y): graph-convolutional GRU over the frames, pooled to the coarsest
/// level, compressed across time by a linear layer, then a feature layer.
inline Var embed_sequence(Bound& p, const Model& m, const Observation& obs) {
  const Index T = obs.y.rows();
  if (T != m.frames())
    fail(cat("embed_sequence: sequence has ", T, " frames, meta-model configured for ", m.frames()));
  const Index n = m.nodes();
  const Index H = m.config.meta.hidden;
  Tape& tape = p.tape();
  const auto& gcn = m.ops.levels[0].gcn;

  Var x = tape.constant(observation_input(obs, n));
  Var xa = ad::add_row(ad::matmul(ad::sparse_apply(x, gcn), p("meta.gru.Wx")), p("meta.gru.bx"));
  Var h = tape.constant(Mat::Zero(n, H));
  std::vector<Var> hs;
  hs.reserve(static_cast<std::size_t>(T));
  for (Index t = 0; t < T; ++t) {
    Var xt = ad::slice_rows(xa, t * n, n);
    Var ha = ad::sparse_apply(h, gcn);
    Var ru = ad::sigmoid(ad::add(ad::slice_cols(xt, 0, 2 * H), ad::matmul(ha, p("meta.gru.Wh_ru"))));
    Var r = ad::slice_cols(ru, 0, H);
    Var u = ad::slice_cols(ru, H, H);
    Var cand = ad::tanh(ad::add(ad::slice_cols(xt, 2 * H, H), ad::mul(r, ad::matmul(ha, p("meta.gru.Wh_n")))));
    h = ad::add(ad::mul(ad::affine(u, -1.0, 1.0), cand), ad::mul(u, h));
    hs.push_back(h);
  }
  const Index nc = m.ops.levels.back().nodes;
  Var pooled = ad::sparse_apply(ad::concat_rows(hs), m.ops.pool_to_coarsest);  // T*nc x H
  Var seq = ad::reshape(pooled, T, nc * H);
  Var comp = ad::elu(ad::add(ad::matmul(p("meta.time.w"), seq), p("meta.time.b")));
  return nn::linear(p, comp, "meta.feat");
}

/// Mean of per-item embeddings.
inline Var aggregate(const std::vector<Var>& embeddings) {
  if (embeddings.empty()) fail("aggregate: empty context set");
  Var acc = embeddings.front();
  for (std::size_t i = 1; i < embeddings.size(); ++i) acc = ad::add(acc, embeddings[i]);
  return ad::scale(acc, 1.0 / static_cast<double>(embeddings.size()));
}

struct GaussianVars {
  Var mu;
  Var sigma;
};

inline GaussianVars heads(Bound& p, const Model& m, const Var& agg) {
  Var mu = nn::linear(p, agg, "meta.mu");
  Var sigma = ad::affine(ad::softplus(nn::linear(p, agg, "meta.sigma")), 1.0, m.config.meta.sigma_floor);
  return {mu, sigma};
}

inline Var sample_condition(const GaussianVars& e, const RowVec& eps) {
  Var ev = e.mu.tape()->constant(eps);
  return ad::add(e.mu, ad::mul(ev, e.sigma));
}

inline Var kl_gaussian(const GaussianVars& q, const GaussianVars& p) {
  Var ratio = ad::div(q.sigma, p.sigma);
  Var dm = ad::sub(q.mu, p.mu);
  Var quad = ad::div(ad::add(ad::square(q.sigma), ad::square(dm)), ad::scale(ad::square(p.sigma), 2.0));
  return ad::sum(ad::affine(ad::sub(quad, ad::log(ratio)), 1.0, -0.5));
}

inline GaussianVars standard_normal_vars(Tape& t, Index d) {
  return {t.constant(Mat::Zero(1, d)), t.constant(Mat::Ones(1, d))};
}

// ---------------------------------------------------------------------------
// Value-level inference API.

inline SetEmbedding to_embedding(const GaussianVars& g) {
  return {g.mu.value().row(0), g.sigma.value().row(0)};
}

inline RowVec embed_value(const Model& m, const Observation& obs) {
  Tape t;
  Bound p(t, m.params, false);
  return embed_sequence(p, m, obs).value().row(0);
}

/// Mean embedding of a context set.
inline RowVec aggregate_value(const Model& m, const std::vector<const Observation*>& context) {
  if (context.empty()) fail("aggregate: empty context set");
  RowVec acc = RowVec::Zero(m.config.sur.d_c);
  for (const Observation* o : context) acc += embed_value(m, *o);
  return acc / static_cast<double>(context.size());
}

inline SetEmbedding heads_value(const Model& m, const RowVec& agg) {
  Tape t;
  Bound p(t, m.params, false);
  return to_embedding(heads(p, m, t.constant(agg)));
}

/// p(c | Y) when `extra` is empty, else q(c | Y u x) with x embedded as a
/// full-node observation.
inline SetEmbedding posterior(const Model& m, const std::vector<const Observation*>& context,
                              const SimulationRecord* extra = nullptr) {
  if (context.empty()) fail("context required");
  RowVec acc = RowVec::Zero(m.config.sur.d_c);
  for (const Observation* o : context) acc += embed_value(m, *o);
  double count = static_cast<double>(context.size());
  if (extra != nullptr) {
    acc += embed_value(m, epsim::full_observation(*extra));
    count += 1.0;
  }
  return heads_value(m, acc / count);
}

inline Mat rollout_value(const Model& m, const StimulusEncoding& s, const ConditionVector& c, int T) {
  Tape t;
  Bound p(t, m.params, false);
  return surrogate::rollout(p, m.ops, s, t.constant(c), T).value();
}

struct Prediction {
  std::vector<Mat> samples;
  Mat mean;
};

/// Monte-Carlo estimate of the predictive process: c ~ p(c | Y), then rollout.
inline Prediction predict(const Model& m, const epsim::Stimulus& stim, const std::vector<const Observation*>& context,
                          int n_samples, int T, std::uint64_t seed) {
  if (context.empty()) fail("context required");
  require(n_samples >= 1, "predict: n_samples must be >= 1");
  const SetEmbedding e = posterior(m, context);
  const auto s = StimulusEncoding::from(stim, m.nodes());
  Prediction out;
  out.mean = Mat::Zero(T, m.nodes());
  for (int i = 0; i < n_samples; ++i) {
    out.samples.push_back(rollout_value(m, s, sample_condition(e, derive_seed(seed, static_cast<std::uint64_t>(i))), T));
    out.mean += out.samples.back();
  }
  out.mean /= static_cast<double>(n_samples);
  return out;
}

// ---------------------------------------------------------------------------
// Objective:
//   total = -recon + lambda1 * KL(q(c|Y u x) || p(c|Y)) + lambda2 * KL(p(c|Y) || N(0,I))
// with recon = -1/2 * sum of squared error (unit-variance Gaussian, constants dropped).

struct LossBreakdown {
  double recon = 0.0;
  double kl_context_target = 0.0;
  double kl_prior = 0.0;
  double total = 0.0;
};

struct LossWeights {
  double lambda1 = 1e-4;
  double lambda2 = 0.1;
};

/// A context set and the samples generated from it. Each item contributes
/// `item_weight` of its terms; the group's prior KL is weighted by the sum.
struct LossGroup {
  std::vector<const Observation*> context;
  std::vector<const SimulationRecord*> items;
  double item_weight = 1.0;
};

/// Epsilon for group g, item i.
using EpsilonFn = std::function<RowVec(std::size_t group, std::size_t item, Index dim)>;

inline EpsilonFn seeded_epsilon(std::uint64_t seed) {
  return [seed](std::size_t g, std::size_t i, Index d) {
    return standard_normal(d, derive_seed(seed, static_cast<std::uint64_t>(g), static_cast<std::uint64_t>(i)));
  };
}

namespace detail {
inline void check_term(double v, const char* term) {
  if (!std::isfinite(v)) fail_numeric(cat("loss: non-finite ", term, " term"));
}
}  // namespace detail

/// Evaluates the objective over groups; when `grads` is given, adds
/// d(total)/d(param) into it. Context embeddings are computed once per group
/// and receive gradients accumulated from every item of that group.
inline LossBreakdown evaluate_loss(const Model& m, const std::vector<LossGroup>& groups, const LossWeights& w,
                                   const EpsilonFn& eps, nn::ParamMap* grads) {
  const bool train = grads != nullptr;
  const Index dc = m.config.sur.d_c;
  LossBreakdown out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const LossGroup& grp = groups[g];
    if (grp.context.empty()) fail("context required");
    require(!grp.items.empty(), "loss: group without generation samples");
    const double nu = static_cast<double>(grp.context.size());

    Tape ctx_tape;
    Bound cp(ctx_tape, m.params, train);
    std::vector<Var> embs;
    for (const Observation* o : grp.context) embs.push_back(embed_sequence(cp, m, *o));
    Var ctx_sum = embs.front();
    for (std::size_t i = 1; i < embs.size(); ++i) ctx_sum = ad::add(ctx_sum, embs[i]);
    const GaussianVars prior = heads(cp, m, ad::scale(ctx_sum, 1.0 / nu));
    Var kl_prior = kl_gaussian(prior, standard_normal_vars(ctx_tape, dc));
    const double group_weight = grp.item_weight * static_cast<double>(grp.items.size());
    detail::check_term(kl_prior.scalar(), "kl_prior");
    out.kl_prior += group_weight * kl_prior.scalar();

    Mat d_ctx_sum = Mat::Zero(1, dc);
    for (std::size_t i = 0; i < grp.items.size(); ++i) {
      const SimulationRecord& rec = *grp.items[i];
      Tape t;
      Bound p(t, m.params, train);
      Var sum_leaf = train ? t.variable(ctx_sum.value()) : t.constant(ctx_sum.value());
      Var ex = embed_sequence(p, m, epsim::full_observation(rec));
      const GaussianVars q = heads(p, m, ad::scale(ad::add(sum_leaf, ex), 1.0 / (nu + 1.0)));
      const GaussianVars pr = heads(p, m, ad::scale(sum_leaf, 1.0 / nu));
      Var c = sample_condition(q, eps(g, i, dc));
      Var xhat = surrogate::rollout(p, m.ops, StimulusEncoding::from(rec.stimulus, m.nodes()), c,
                                    static_cast<int>(rec.x.rows()));
      Var recon = ad::scale(ad::sum(ad::square(ad::sub(xhat, t.constant(rec.x)))), -0.5);
      Var kl_ct = kl_gaussian(q, pr);
      detail::check_term(recon.scalar(), "reconstruction");
      detail::check_term(kl_ct.scalar(), "kl_context_target");
      out.recon += grp.item_weight * recon.scalar();
      out.kl_context_target += grp.item_weight * kl_ct.scalar();
      if (train) {
        Var obj = ad::scale(ad::add(ad::scale(recon, -1.0), ad::scale(kl_ct, w.lambda1)), grp.item_weight);
        t.backward(obj);
        p.collect(*grads);
        d_ctx_sum += t.grad(sum_leaf);
      }
    }
    if (train) {
      ctx_tape.backward({{ctx_sum, d_ctx_sum}, {kl_prior, Mat::Constant(1, 1, w.lambda2 * group_weight)}});
      cp.collect(*grads);
    }
  }
  out.total = -out.recon + w.lambda1 * out.kl_context_target + w.lambda2 * out.kl_prior;
  detail::check_term(out.total, "total");
  return out;
}

/// Single-episode objective: every item shares the context, weights 1/|D_x|.
inline LossBreakdown loss(const Model& m, const std::vector<const Observation*>& context,
                          const std::vector<const SimulationRecord*>& items, const LossWeights& w,
                          std::uint64_t seed, nn::ParamMap* grads = nullptr) {
  require(!items.empty(), "loss: need at least one generation sample");
  LossGroup g{context, items, 1.0 / static_cast<double>(items.size())};
  return evaluate_loss(m, {g}, w, seeded_epsilon(seed), grads);
}

}  // namespace metapns::metainfer
