#pragma once

// Adapters from trained models to the evaluation harness.

#include "metapns/eval.hpp"
#include "metapns/metainfer.hpp"

namespace metapns::personalize {

using metainfer::Model;

/// metaPNS: c = mean of p(c | Y) over the whole context set, used for every
/// generated sample.
inline eval::Personalizer meta(const Model& m) {
  return [&m](const epsim::Subject& s, const std::vector<int>& ctx) {
    std::vector<const epsim::Observation*> obs;
    for (int id : ctx) obs.push_back(&s.observations.at(static_cast<std::size_t>(id)));
    const auto t0 = std::chrono::steady_clock::now();
    const RowVec c = metainfer::posterior(m, obs).mu;
    eval::Personalized p;
    p.embed_seconds = eval::seconds_since(t0);
    p.generate = [&m, &s, c](std::size_t id) {
      const auto& rec = s.records.at(id);
      return metainfer::rollout_value(m, surrogate::StimulusEncoding::from(rec.stimulus, m.nodes()), c,
                                      static_cast<int>(rec.x.rows()));
    };
    return p;
  };
}

/// PNS: each sample's c is inferred from its own observation. Context samples
/// use their own c; a target never sees its own data and borrows the first
/// context sample's c.
inline eval::Personalizer pns(const Model& m) {
  return [&m](const epsim::Subject& s, const std::vector<int>& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    std::map<int, RowVec> own;
    for (int id : ctx) own[id] = metainfer::posterior(m, {&s.observations.at(static_cast<std::size_t>(id))}).mu;
    eval::Personalized p;
    p.embed_seconds = eval::seconds_since(t0) / static_cast<double>(ctx.size());
    const RowVec first = own.at(ctx.front());
    p.generate = [&m, &s, own, first](std::size_t id) {
      auto it = own.find(static_cast<int>(id));
      const RowVec& c = it != own.end() ? it->second : first;
      const auto& rec = s.records.at(id);
      return metainfer::rollout_value(m, surrogate::StimulusEncoding::from(rec.stimulus, m.nodes()), c,
                                      static_cast<int>(rec.x.rows()));
    };
    return p;
  };
}

/// Ground truth as a predictor; scores the harness itself.
inline eval::Personalizer truth() {
  return [](const epsim::Subject& s, const std::vector<int>&) {
    eval::Personalized p;
    p.generate = [&s](std::size_t id) { return s.records.at(id).x; };
    return p;
  };
}

}  // namespace metapns::personalize
