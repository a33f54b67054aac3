/*
 * Copyright (c) 2026, The BESS-KGE Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Power-rank fusion of per-model top-K lists. Only ranks enter the fused
// score; raw model scores are never read.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "bess/inference.hpp"

namespace bess {

struct EnsembleConfig {
  double power = -0.5;            // p
  std::size_t depth = 100;        // K, ranks read from each model
  std::size_t output_depth = 10;
  bool allow_partial = false;     // a model missing a query counts as all-absent

  void validate() const {
    require(power != 0.0 && std::isfinite(power), "config", "ensemble.power must be finite and non-zero");
    require(depth >= 10, "config", "ensemble.depth must be at least 10, got " + std::to_string(depth));
    require(output_depth >= 1 && output_depth <= depth, "config",
            "ensemble.output_depth must lie in [1, depth]");
  }
};

/// Contribution of rank k (1-based) under power p.
inline double rank_contribution(std::size_t k, double p) {
  const double sign = p > 0 ? 1.0 : -1.0;
  return -sign * std::pow(static_cast<double>(k), p);
}

/// Contribution of an entity absent from a model's top-K: zero for p < 0,
/// -(K+1)^p for p > 0.
inline double absent_contribution(std::size_t K, double p) {
  return p > 0 ? -std::pow(static_cast<double>(K + 1), p) : 0.0;
}

/// Accumulated s(t) for one query.
using FusionScoreTable = std::map<EntityId, double>;

namespace detail {

inline std::string list_ids(const std::vector<std::uint64_t>& ids) {
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (k == 8) return out + ", ... (" + std::to_string(ids.size()) + " total)";
    out += (k ? ", " : "") + std::to_string(ids[k]);
  }
  return out;
}

}  // namespace detail

/// Fused scores for one query given each model's list (nullptr when the
/// model lacks the query). Contributions are summed in ascending rank order
/// so the result does not depend on the order of the models.
inline FusionScoreTable fusion_scores(const std::vector<const RankedList*>& lists, const EnsembleConfig& cfg) {
  std::map<EntityId, std::vector<std::size_t>> ranks;
  for (const auto* l : lists) {
    if (l == nullptr) continue;
    const auto n = std::min(cfg.depth, l->items.size());
    for (std::size_t k = 0; k < n; ++k) ranks[l->items[k].entity].push_back(k + 1);
  }
  FusionScoreTable table;
  const double absent = absent_contribution(cfg.depth, cfg.power);
  for (auto& [entity, rs] : ranks) {
    std::sort(rs.begin(), rs.end());
    double s = 0.0;
    for (auto k : rs) s += rank_contribution(k, cfg.power);
    s += static_cast<double>(lists.size() - rs.size()) * absent;
    table.emplace(entity, s);
  }
  return table;
}

/// Fuses M prediction sets into top-`output_depth` lists, one per query in
/// ascending query_id order. Ties in s(t) go to the smaller entity id.
inline RankedPredictions fuse(const std::vector<RankedPredictions>& models, const EnsembleConfig& cfg) {
  cfg.validate();
  require(!models.empty(), "ensemble", "no prediction sets to fuse");
  std::vector<std::map<std::uint64_t, const RankedList*>> index(models.size());
  std::set<std::uint64_t> all_ids;
  for (std::size_t m = 0; m < models.size(); ++m) {
    for (const auto& l : models[m]) {
      require(index[m].emplace(l.query_id, &l).second, "ensemble",
              fmt::format("model {} lists query {} twice", m, l.query_id));
      all_ids.insert(l.query_id);
    }
  }
  for (std::size_t m = 0; m < models.size() && !cfg.allow_partial; ++m) {
    std::vector<std::uint64_t> missing;
    for (auto q : all_ids) {
      if (!index[m].contains(q)) missing.push_back(q);
    }
    require(missing.empty(), "ensemble",
            fmt::format("model {} is missing query_ids {}", m, detail::list_ids(missing)));
  }
  for (std::size_t m = 0; m < models.size(); ++m) {
    for (const auto& [q, l] : index[m]) {
      require(l->items.size() >= cfg.depth, "ensemble",
              fmt::format("model {} query {} lists {} entities, fewer than K={}", m, q, l->items.size(), cfg.depth));
    }
  }

  RankedPredictions out;
  out.reserve(all_ids.size());
  std::vector<const RankedList*> lists(models.size());
  for (auto q : all_ids) {
    for (std::size_t m = 0; m < models.size(); ++m) {
      auto it = index[m].find(q);
      lists[m] = it == index[m].end() ? nullptr : it->second;
    }
    RankedList fused{q, {}};
    for (const auto& [entity, s] : fusion_scores(lists, cfg)) fused.items.push_back({entity, s});
    keep_top_k(fused.items, cfg.output_depth);
    out.push_back(std::move(fused));
  }
  return out;
}

inline std::vector<double> default_power_grid() { return {-1.0, -0.9, -0.8, -0.7, -0.6, -0.5}; }

struct PowerSweepRow {
  double power = 0.0;
  double mrr = 0.0;
};

inline std::vector<PowerSweepRow> sweep_power(const std::vector<RankedPredictions>& models,
                                              const std::vector<Query>& labels, EnsembleConfig cfg,
                                              const std::vector<double>& powers = default_power_grid()) {
  std::vector<PowerSweepRow> out;
  for (double p : powers) {
    cfg.power = p;
    out.push_back({p, mrr_at_10(fuse(models, cfg), labels)});
  }
  return out;
}

struct AblationRow {
  std::string subset;  // group labels joined by '+'
  std::size_t model_count = 0;
  double mrr = 0.0;
};

/// MRR of the ensemble restricted to subsets of model groups. With no
/// explicit subsets the report covers the full set, every single group,
/// every leave-one-group-out set and every pair, without duplicates.
inline std::vector<AblationRow> ablate(const std::vector<RankedPredictions>& models,
                                       const std::vector<std::string>& group_of_model, const EnsembleConfig& cfg,
                                       const std::vector<Query>& labels,
                                       std::vector<std::vector<std::string>> subsets = {}) {
  require(models.size() == group_of_model.size(), "ensemble",
          fmt::format("{} prediction sets but {} group labels", models.size(), group_of_model.size()));
  const std::set<std::string> groups(group_of_model.begin(), group_of_model.end());
  const std::vector<std::string> g(groups.begin(), groups.end());
  if (subsets.empty()) {
    subsets.push_back(g);
    for (const auto& a : g) subsets.push_back({a});
    for (const auto& a : g) {
      std::vector<std::string> rest;
      for (const auto& b : g) {
        if (b != a) rest.push_back(b);
      }
      if (!rest.empty()) subsets.push_back(rest);
    }
    for (std::size_t a = 0; a < g.size(); ++a) {
      for (std::size_t b = a + 1; b < g.size(); ++b) subsets.push_back({g[a], g[b]});
    }
  }

  std::vector<AblationRow> out;
  std::set<std::set<std::string>> seen;
  for (const auto& subset : subsets) {
    const std::set<std::string> s(subset.begin(), subset.end());
    for (const auto& name : s) require(groups.contains(name), "ensemble", "unknown group label '" + name + "'");
    require(!s.empty(), "ensemble", "empty ablation subset");
    if (!seen.insert(s).second) continue;
    std::vector<RankedPredictions> chosen;
    for (std::size_t m = 0; m < models.size(); ++m) {
      if (s.contains(group_of_model[m])) chosen.push_back(models[m]);
    }
    std::string label;
    for (const auto& name : s) label += (label.empty() ? "" : "+") + name;
    out.push_back({label, chosen.size(), mrr_at_10(fuse(chosen, cfg), labels)});
  }
  return out;
}

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::string out = "subset\tmodel_count\tmrr\n";
  for (const auto& r : rows) out += fmt::format("{}\t{}\t{:.6f}\n", r.subset, r.model_count, r.mrr);
  return out;
}

}  // namespace bess
