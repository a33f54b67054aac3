// Brute-force link prediction: encode every entity from the exported global
// tables, score each query against all of them, fully sort.

#pragma once

#include <algorithm>
#include <vector>

#include "bess/inference.hpp"

namespace bess::testing {

template <class Real>
RankedPredictions brute_force_topk(const BessRuntime<Real>& rt, const std::vector<Query>& queries, std::size_t K) {
  const auto params = rt.export_parameters();
  const auto& model = rt.model();
  const auto& g = rt.graph();
  const auto& mt = model.tie_projections ? params.head_projection : params.tail_projection;
  std::vector<std::vector<Real>> heads, tails;
  for (EntityId e = 0; e < g.entity_count; ++e) {
    std::vector<Real> f(model.feature_dim);
    for (std::size_t c = 0; c < f.size(); ++c)
      f[c] = round_to_storage(static_cast<Real>(g.features(e, c)), rt.config().precision);
    heads.push_back(encode_entity<Real>(params.entity.row(e), f, params.head_projection));
    tails.push_back(encode_entity<Real>(params.entity.row(e), f, mt));
  }
  RankedPredictions out;
  for (const auto& q : queries) {
    std::vector<Prediction> all;
    const auto w = model.uses_normals() ? params.normals.row(q.relation) : std::span<const Real>{};
    for (EntityId e = 0; e < g.entity_count; ++e) {
      const Real s = score<Real>(model.score_fn, heads[q.head], params.relations.row(q.relation), tails[e], w,
                                 model.distance_p);
      all.push_back({e, static_cast<double>(s)});
    }
    std::sort(all.begin(), all.end(), [](const Prediction& a, const Prediction& b) {
      return a.score > b.score || (a.score == b.score && a.entity < b.entity);
    });
    all.resize(std::min<std::size_t>(K, all.size()));
    out.push_back({q.query_id, all});
  }
  return out;
}

inline std::vector<Query> random_queries(const KnowledgeGraph& g, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Query> out;
  for (std::size_t q = 0; q < n; ++q)
    out.push_back({q * 3 + 1, static_cast<EntityId>(rng() % g.entity_count),
                   static_cast<RelationId>(rng() % g.relation_count), static_cast<EntityId>(rng() % g.entity_count)});
  return out;
}

}  // namespace bess::testing
