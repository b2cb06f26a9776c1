#pragma once

// Set-conditioned generative surrogate: a graph encoder maps the stimulus to
// the initial latent state on the coarsest level, a conditional gated
// transition advances it, and a graph decoder emits one potential per node.

#include "metapns/epsim.hpp"
#include "metapns/nn.hpp"

#include <cmath>
#include <vector>

namespace metapns::surrogate {

using ad::Var;
using nn::Bound;
using nn::GraphOps;

struct SurrogateConfig {
  int hidden = 32;
  int d_z = 16;
  int d_c = 16;
  int kernel_size = 2;
  double gate_bias = -5.0;  // initial b1; negative keeps the gate mostly closed
};

/// Per-node indicator of the stimulus origin set on the finest level.
struct StimulusEncoding {
  Mat channels;  // N x 1

  static StimulusEncoding from(const epsim::Stimulus& s, Index n) {
    epsim::validate(s, n);
    StimulusEncoding e;
    e.channels = Mat::Zero(n, 1);
    for (int o : s.origins) e.channels(o, 0) = 1.0;
    return e;
  }
};

/// Hierarchy level of each of the four graph blocks, finest first.
inline std::vector<std::size_t> encoder_levels(std::size_t depth) {
  std::vector<std::size_t> lv;
  for (int b = 0; b < 4; ++b)
    lv.push_back(static_cast<std::size_t>(std::lround(b * static_cast<double>(depth - 1) / 3.0)));
  return lv;
}

inline std::vector<std::size_t> decoder_levels(std::size_t depth) {
  auto lv = encoder_levels(depth);
  std::reverse(lv.begin(), lv.end());
  return lv;
}

inline void declare(std::vector<nn::ParamSpec>& specs, const SurrogateConfig& c, int kernels) {
  const Index h = c.hidden, dz = c.d_z, dc = c.d_c;
  for (int b = 0; b < 4; ++b) nn::declare_gcnn_block(specs, cat("sur.enc.g", b), b == 0 ? 1 : h, h, kernels);
  nn::declare_linear(specs, "sur.enc.conv0", h, h);
  nn::declare_linear(specs, "sur.enc.conv1", h, h);
  nn::declare_linear(specs, "sur.rho", h, dz);
  for (int i = 1; i <= 3; ++i) {
    specs.push_back({cat("sur.trans.alpha", i), dz, dz, dz, dz, false});
    specs.push_back({cat("sur.trans.beta", i), dc, dz, dc, dz, false});
    specs.push_back({cat("sur.trans.gamma", i), 1, dz, dz, dz, true});
    specs.push_back({cat("sur.trans.W", i), dz, dz, dz, dz, false});
    specs.push_back({cat("sur.trans.b", i), 1, dz, dz, dz, true});
  }
  nn::declare_linear(specs, "sur.dec.conv0", dz, h);
  for (int b = 0; b < 4; ++b) nn::declare_gcnn_block(specs, cat("sur.dec.g", b), h, h, kernels);
  nn::declare_linear(specs, "sur.dec.conv1", h, 1);
}

/// Starts the linear branch at the identity with c out of it, so the stimulus
/// code in z0 persists across many steps before training shapes the dynamics.
inline void init_transition(nn::ParamStore& store, const SurrogateConfig& c) {
  store.at("sur.trans.alpha3").setIdentity();
  store.at("sur.trans.W3").setIdentity();
  store.at("sur.trans.beta3").setZero();
  store.at("sur.trans.b1").setConstant(c.gate_bias);
}

inline Var pool_to(const Var& x, const GraphOps& ops, std::size_t from, std::size_t to) {
  Var y = x;
  for (std::size_t l = from; l < to; ++l) y = ad::sparse_apply(y, ops.pool[l]);
  return y;
}

inline Var unpool_to(const Var& x, const GraphOps& ops, std::size_t from, std::size_t to) {
  Var y = x;
  for (std::size_t l = from; l > to; --l) y = ad::sparse_apply(y, ops.unpool[l - 1]);
  return y;
}

/// z0 = f_rho(encoder(s)) on the coarsest level.
inline Var encode_stimulus(Bound& p, const GraphOps& ops, const StimulusEncoding& s) {
  if (s.channels.rows() != ops.nodes(0))
    fail(cat("encode_stimulus: encoding has ", s.channels.rows(), " nodes, hierarchy finest level has ", ops.nodes(0)));
  const auto levels = encoder_levels(ops.levels.size());
  Var h = p.tape().constant(s.channels);
  std::size_t at = 0;
  for (int b = 0; b < 4; ++b) {
    const std::size_t lv = levels[static_cast<std::size_t>(b)];
    h = pool_to(h, ops, at, lv);
    at = lv;
    h = nn::gcnn_block(p, h, ops.levels[lv], cat("sur.enc.g", b));
  }
  h = pool_to(h, ops, at, ops.levels.size() - 1);
  h = ad::elu(nn::linear(p, h, "sur.enc.conv0"));
  h = ad::elu(nn::linear(p, h, "sur.enc.conv1"));
  return nn::linear(p, h, "sur.rho");
}

namespace detail {
inline void check_finite(const Var& v, const char* gate) {
  if (!v.value().allFinite()) fail_numeric(cat("transition_step: non-finite value in ", gate));
}
}  // namespace detail

/// One conditional gated transition:
///   g = sigmoid(W1 z1 + b1),  z1 = ELU(a1 z + b1' c + g1)
///   h = ELU(W2 z2 + b2),      z2 = ELU(a2 z + b2' c + g2)
///   z' = (1 - g) * (W3 z3 + b3) + g * h,  z3 = a3 z + b3' c + g3
/// z is (coarse nodes x d_z); c (1 x d_c) is broadcast to every node.
inline Var transition_step(Bound& p, const Var& z, const Var& c) {
  auto pre = [&](int i) {
    Var row = ad::add(ad::matmul(c, p(cat("sur.trans.beta", i))), p(cat("sur.trans.gamma", i)));
    return ad::add_row(ad::matmul(z, p(cat("sur.trans.alpha", i))), row);
  };
  Var z1 = ad::elu(pre(1));
  detail::check_finite(z1, "z1 (gate input)");
  Var g = ad::sigmoid(ad::add_row(ad::matmul(z1, p("sur.trans.W1")), p("sur.trans.b1")));
  detail::check_finite(g, "g (gate)");
  Var z2 = ad::elu(pre(2));
  detail::check_finite(z2, "z2 (nonlinear branch input)");
  Var h = ad::elu(ad::add_row(ad::matmul(z2, p("sur.trans.W2")), p("sur.trans.b2")));
  detail::check_finite(h, "h (nonlinear branch)");
  Var lin = ad::add_row(ad::matmul(pre(3), p("sur.trans.W3")), p("sur.trans.b3"));
  detail::check_finite(lin, "linear branch");
  Var out = ad::add(ad::mul(ad::affine(g, -1.0, 1.0), lin), ad::mul(g, h));
  detail::check_finite(out, "z_next");
  return out;
}

/// Decodes frame-stacked coarsest-level latents (B*n_coarse x d_z) to
/// (B*n_finest x 1) potentials.
inline Var emit(Bound& p, const GraphOps& ops, const Var& z) {
  const std::size_t last = ops.levels.size() - 1;
  ad::frames_of(z, ops.nodes(last), "emit");
  const auto levels = decoder_levels(ops.levels.size());
  Var h = ad::elu(nn::linear(p, z, "sur.dec.conv0"));
  std::size_t at = last;
  for (int b = 0; b < 4; ++b) {
    const std::size_t lv = levels[static_cast<std::size_t>(b)];
    h = unpool_to(h, ops, at, lv);
    at = lv;
    h = nn::gcnn_block(p, h, ops.levels[lv], cat("sur.dec.g", b));
  }
  h = unpool_to(h, ops, at, 0);
  return nn::linear(p, h, "sur.dec.conv1");
}

/// T x N rollout: z0 = encode(s), z_t = transition(z_{t-1}, c), x_t = emit(z_t).
inline Var rollout(Bound& p, const GraphOps& ops, const StimulusEncoding& s, const Var& c, int T) {
  require(T >= 1, "rollout: T must be >= 1");
  Var z = encode_stimulus(p, ops, s);
  std::vector<Var> zs;
  zs.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    z = transition_step(p, z, c);
    zs.push_back(z);
  }
  Var x = emit(p, ops, ad::concat_rows(zs));
  return ad::reshape(x, T, ops.nodes(0));
}

}  // namespace metapns::surrogate
