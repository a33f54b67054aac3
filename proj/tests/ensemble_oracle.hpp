// Test-only oracle for power-rank fusion: every mentioned entity is scored
// straight from the formula, ranks are found by linear search and sums are
// carried in long double.

#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "bess/inference.hpp"

namespace bess::testing {

inline RankedPredictions exhaustive_fuse(const std::vector<RankedPredictions>& models, std::size_t K, double p,
                                  std::size_t out_depth) {
  RankedPredictions out;
  for (std::size_t q = 0; q < models[0].size(); ++q) {
    std::set<EntityId> mentioned;
    for (const auto& m : models) {
      for (std::size_t k = 0; k < K; ++k) mentioned.insert(m[q].items[k].entity);
    }
    std::vector<std::pair<long double, EntityId>> scored;
    for (auto e : mentioned) {
      long double s = 0;
      for (const auto& m : models) {
        std::size_t rank = 0;
        for (std::size_t k = 0; k < K; ++k) {
          if (m[q].items[k].entity == e) rank = k + 1;
        }
        if (rank > 0) {
          s += (p < 0 ? 1.0L : -1.0L) * std::pow(static_cast<long double>(rank), static_cast<long double>(p));
        } else if (p > 0) {
          s -= std::pow(static_cast<long double>(K + 1), static_cast<long double>(p));
        }
      }
      scored.emplace_back(s, e);
    }
    std::sort(scored.begin(), scored.end(), [](auto& a, auto& b) {
      if (std::abs(a.first - b.first) > 1e-12L) return a.first > b.first;
      return a.second < b.second;
    });
    RankedList l{models[0][q].query_id, {}};
    for (std::size_t k = 0; k < out_depth && k < scored.size(); ++k)
      l.items.push_back({scored[k].second, static_cast<double>(scored[k].first)});
    out.push_back(l);
  }
  return out;
}

}  // namespace bess::testing
