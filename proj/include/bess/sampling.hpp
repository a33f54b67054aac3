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

// Micro-batch planning: for every worker i and tail shard j, B/D positives
// drawn from bucket T_{i,j} and N/D shared negatives drawn from shard j.
// Plans are index-only; moving embedding rows is the runtime's job.

#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bess/common.hpp"
#include "bess/kg_data.hpp"

namespace bess {

struct SamplerConfig {
  std::uint64_t micro_batch_size = 64;  // B, positives per worker per step
  std::uint64_t negative_count = 64;    // N, shared negatives per worker per step
  std::uint32_t shard_count = 1;        // D
  std::uint64_t seed = 0;
  bool cube_root_relation_sampling = true;
  bool filter_false_negatives = false;
  // Weight relations by their global training counts instead of the
  // counts inside each bucket.
  bool global_relation_counts = false;

  friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;

  void validate() const {
    const auto D = std::uint64_t{shard_count};
    require(D >= 1, "config", "sampler.shard_count must be at least 1");
    require(micro_batch_size >= 1, "config", "sampler.micro_batch_size must be positive");
    require(negative_count >= 1, "config", "sampler.negative_count must be positive");
    require(D <= micro_batch_size, "config",
            "D=" + std::to_string(D) + " exceeds micro_batch_size=" + std::to_string(micro_batch_size));
    require(D <= negative_count, "config",
            "D=" + std::to_string(D) + " exceeds negative_count=" + std::to_string(negative_count));
    require(micro_batch_size % D == 0, "config",
            "micro_batch_size=" + std::to_string(micro_batch_size) + " is not a multiple of D=" + std::to_string(D));
    require(negative_count % D == 0, "config",
            "negative_count=" + std::to_string(negative_count) + " is not a multiple of D=" + std::to_string(D));
  }
};

/// One worker's share of a step. Positives are laid out in D consecutive
/// segments of B/D (segment j drawn from T_{i,j}); negatives likewise in D
/// segments of N/D (segment j drawn from shard j).
struct WorkerBatch {
  std::vector<std::uint64_t> triples;  // indices into the graph's triple list
  std::vector<EntityId> negatives;

  friend bool operator==(const WorkerBatch&, const WorkerBatch&) = default;
};

struct MicroBatchPlan {
  std::uint64_t step = 0;
  std::uint32_t shard_count = 0;
  std::uint64_t micro_batch_size = 0;
  std::uint64_t negative_count = 0;
  std::vector<WorkerBatch> workers;
  std::vector<std::uint8_t> fallback;  // [i * D + j], 1 when T_{i,j} was empty

  std::uint64_t positives_per_shard() const { return micro_batch_size / shard_count; }
  std::uint64_t negatives_per_shard() const { return negative_count / shard_count; }

  friend bool operator==(const MicroBatchPlan&, const MicroBatchPlan&) = default;
};

namespace detail {

// Portable draws: the standard distributions are implementation-defined,
// and plans must be identical across toolchains.
__extension__ using uint128 = unsigned __int128;

inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>((static_cast<uint128>(rng()) * n) >> 64);
}

inline double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

/// Two-stage draw over a fixed set of triples: relation r with probability
/// proportional to weight(r), then a uniform triple with that relation.
class RelationStratifiedSampler {
 public:
  RelationStratifiedSampler() = default;

  /// `relation_weight(r, n_r)` gives the unnormalised weight of relation r
  /// whose count inside this set is n_r. With `stratified` off, draws are
  /// uniform over the triples.
  template <class WeightFn>
  RelationStratifiedSampler(const KnowledgeGraph& g, std::vector<std::uint64_t> triple_ids, WeightFn relation_weight,
                            bool stratified)
      : stratified_(stratified), all_(std::move(triple_ids)) {
    if (!stratified_ || all_.empty()) return;
    std::vector<std::vector<std::uint64_t>> by_relation(g.relation_count);
    for (auto k : all_) by_relation[g.triples[k].relation].push_back(k);
    double total = 0.0;
    for (std::uint64_t r = 0; r < g.relation_count; ++r) {
      if (by_relation[r].empty()) continue;
      const double w = relation_weight(static_cast<RelationId>(r), by_relation[r].size());
      if (w <= 0.0) continue;
      total += w;
      relations_.push_back(static_cast<RelationId>(r));
      cumulative_.push_back(total);
      members_.push_back(std::move(by_relation[r]));
    }
    for (auto& c : cumulative_) c /= total;
    cumulative_.back() = 1.0;
  }

  bool empty() const noexcept { return all_.empty(); }
  std::size_t size() const noexcept { return all_.size(); }

  /// Relation probabilities in ascending relation-id order (stratified only).
  std::vector<std::pair<RelationId, double>> relation_probabilities() const {
    std::vector<std::pair<RelationId, double>> out;
    double prev = 0.0;
    for (std::size_t k = 0; k < relations_.size(); ++k) {
      out.emplace_back(relations_[k], cumulative_[k] - prev);
      prev = cumulative_[k];
    }
    return out;
  }

  std::uint64_t draw(std::mt19937_64& rng) const {
    if (!stratified_) return all_[detail::uniform_index(rng, all_.size())];
    const double u = detail::uniform_unit(rng);
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    if (it == cumulative_.end()) --it;
    const auto& m = members_[static_cast<std::size_t>(it - cumulative_.begin())];
    return m[detail::uniform_index(rng, m.size())];
  }

 private:
  bool stratified_ = false;
  std::vector<std::uint64_t> all_;
  std::vector<RelationId> relations_;
  std::vector<double> cumulative_;
  std::vector<std::vector<std::uint64_t>> members_;
};

class BessSampler {
 public:
  BessSampler(const KnowledgeGraph& graph, const EntityPartition& partition, const TripleBuckets& buckets,
              SamplerConfig config)
      : partition_(&partition), config_(config) {
    config_.validate();
    const auto D = config_.shard_count;
    require(partition.shard_count() == D && buckets.shard_count == D, "config",
            "sampler D=" + std::to_string(D) + " does not match partition D=" +
                std::to_string(partition.shard_count()));
    require(partition.entity_count() == graph.entity_count, "config", "partition does not cover the graph");
    for (std::uint32_t j = 0; j < D; ++j) {
      require(partition.real_count(j) > 0, "sampling",
              "shard " + std::to_string(j) + " holds no real entities (|E|=" + std::to_string(graph.entity_count) +
                  ", D=" + std::to_string(D) + "); negatives cannot be drawn from it");
    }

    const auto global_cube = [&](RelationId r, std::size_t) {
      return std::cbrt(static_cast<double>(graph.relation_counts[r]));
    };
    const auto local_cube = [](RelationId, std::size_t n) { return std::cbrt(static_cast<double>(n)); };
    auto make = [&](std::vector<std::uint64_t> ids) {
      if (config_.global_relation_counts) {
        return RelationStratifiedSampler(graph, std::move(ids), global_cube, config_.cube_root_relation_sampling);
      }
      return RelationStratifiedSampler(graph, std::move(ids), local_cube, config_.cube_root_relation_sampling);
    };

    cells_.resize(std::size_t{D} * D);
    fallback_.assign(std::size_t{D} * D, 0);
    for (std::uint32_t i = 0; i < D; ++i) {
      std::vector<std::uint64_t> row_union;
      for (std::uint32_t j = 0; j < D; ++j) {
        const auto& b = buckets.bucket(i, j);
        row_union.insert(row_union.end(), b.begin(), b.end());
      }
      std::sort(row_union.begin(), row_union.end());
      for (std::uint32_t j = 0; j < D; ++j) {
        const auto& b = buckets.bucket(i, j);
        if (!b.empty()) {
          cells_[std::size_t{i} * D + j] = make(b);
          continue;
        }
        require(!row_union.empty(), "sampling",
                "worker " + std::to_string(i) + " has no training triples with a head in its shard");
        spdlog::warn("bucket T[{},{}] is empty; sampling its positives from all of worker {}'s buckets", i, j, i);
        cells_[std::size_t{i} * D + j] = make(row_union);
        fallback_[std::size_t{i} * D + j] = 1;
      }
    }
  }

  const SamplerConfig& config() const noexcept { return config_; }
  const RelationStratifiedSampler& cell(std::uint32_t i, std::uint32_t j) const {
    return cells_[std::size_t{i} * config_.shard_count + j];
  }

  /// Plan for one step; a pure function of (seed, step).
  MicroBatchPlan sample(std::uint64_t step) const {
    const auto D = config_.shard_count;
    const auto bd = config_.micro_batch_size / D;
    const auto nd = config_.negative_count / D;
    MicroBatchPlan plan;
    plan.step = step;
    plan.shard_count = D;
    plan.micro_batch_size = config_.micro_batch_size;
    plan.negative_count = config_.negative_count;
    plan.fallback = fallback_;
    plan.workers.resize(D);
    for (std::uint32_t i = 0; i < D; ++i) {
      auto& w = plan.workers[i];
      w.triples.reserve(config_.micro_batch_size);
      w.negatives.reserve(config_.negative_count);
      for (std::uint32_t j = 0; j < D; ++j) {
        auto rng = derive_rng(config_.seed, 0x5a3b1eULL, step, i, j);
        const auto& c = cell(i, j);
        for (std::uint64_t k = 0; k < bd; ++k) w.triples.push_back(c.draw(rng));
      }
      for (std::uint32_t j = 0; j < D; ++j) {
        auto rng = derive_rng(config_.seed, 0x4e6a7eULL, step, i, j);
        const auto real = partition_->real_count(j);
        for (std::uint64_t k = 0; k < nd; ++k) {
          w.negatives.push_back(partition_->entity_at(j, detail::uniform_index(rng, real)));
        }
      }
    }
    return plan;
  }

 private:
  const EntityPartition* partition_;
  SamplerConfig config_;
  std::vector<RelationStratifiedSampler> cells_;
  std::vector<std::uint8_t> fallback_;
};

/// mask[b][i] = 0 when filtering is on and negative i is positive b's true
/// tail; otherwise 1.
inline Matrix<std::uint8_t> make_shared_negative_mask(const WorkerBatch& batch, const KnowledgeGraph& graph,
                                                      bool filter_false_negatives) {
  Matrix<std::uint8_t> mask(batch.triples.size(), batch.negatives.size());
  mask.fill(1);
  if (!filter_false_negatives) return mask;
  for (std::size_t b = 0; b < batch.triples.size(); ++b) {
    const auto tail = graph.triples[batch.triples[b]].tail;
    for (std::size_t i = 0; i < batch.negatives.size(); ++i) {
      if (batch.negatives[i] == tail) mask(b, i) = 0;
    }
  }
  return mask;
}

}  // namespace bess
