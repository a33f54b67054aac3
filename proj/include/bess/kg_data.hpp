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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bess/common.hpp"

namespace bess {

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
};

/// A (head, relation, ?) query. `tail` is kPaddingEntity when unlabelled.
struct Query {
  std::uint64_t query_id = 0;
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = kPaddingEntity;

  bool labelled() const noexcept { return tail != kPaddingEntity; }
  friend bool operator==(const Query&, const Query&) = default;
};

struct KnowledgeGraph {
  std::uint64_t entity_count = 0;
  std::uint64_t relation_count = 0;
  std::vector<Triple> triples;
  Matrix<float> features;  // entity_count x feature_dim, may be empty
  std::vector<std::uint64_t> relation_counts;

  std::size_t feature_dim() const noexcept { return features.cols(); }

  /// Recomputes relation_counts in one pass over the triples.
  void recount() {
    relation_counts.assign(relation_count, 0);
    for (const auto& t : triples) ++relation_counts[t.relation];
  }

  void validate() const {
    require(relation_counts.size() == relation_count, "graph", "relation_counts size mismatch");
    std::uint64_t total = 0;
    for (auto c : relation_counts) total += c;
    require(total == triples.size(), "graph", "relation_counts do not sum to the triple count");
    require(features.empty() || features.rows() == entity_count, "graph",
            "feature rows (" + std::to_string(features.rows()) + ") != entity_count (" +
                std::to_string(entity_count) + ")");
    for (std::size_t i = 0; i < triples.size(); ++i) {
      const auto& t = triples[i];
      require(t.head < entity_count && t.tail < entity_count && t.relation < relation_count, "graph",
              "triple " + std::to_string(i) + " has an id out of range");
    }
  }

  friend bool operator==(const KnowledgeGraph&, const KnowledgeGraph&) = default;
};

// ---------------------------------------------------------------------------
// KGT: "KGT1", u64 entity_count, u64 relation_count, u64 triple_count, then
// triple_count records of (u32 head, u32 relation, u32 tail).

inline std::vector<std::byte> serialize_triples(const KnowledgeGraph& g) {
  ByteWriter w;
  w.put_magic("KGT1");
  w.put<std::uint64_t>(g.entity_count);
  w.put<std::uint64_t>(g.relation_count);
  w.put<std::uint64_t>(g.triples.size());
  for (const auto& t : g.triples) {
    w.put<std::uint32_t>(t.head);
    w.put<std::uint32_t>(t.relation);
    w.put<std::uint32_t>(t.tail);
  }
  return std::move(w.bytes());
}

struct IngestOptions {
  std::optional<std::uint64_t> entity_count;    // must match header when set
  std::optional<std::uint64_t> relation_count;  // must match header when set
};

inline KnowledgeGraph parse_triples(std::span<const std::byte> bytes, const IngestOptions& opts = {}) {
  ByteReader r(bytes, "ingest");
  r.expect_magic("KGT1");
  KnowledgeGraph g;
  g.entity_count = r.get<std::uint64_t>("entity_count");
  g.relation_count = r.get<std::uint64_t>("relation_count");
  const auto triple_count = r.get<std::uint64_t>("triple_count");
  if (opts.entity_count && *opts.entity_count != g.entity_count) {
    r.fail("header entity_count " + std::to_string(g.entity_count) + " != expected " +
           std::to_string(*opts.entity_count));
  }
  if (opts.relation_count && *opts.relation_count != g.relation_count) {
    r.fail("header relation_count " + std::to_string(g.relation_count) + " != expected " +
           std::to_string(*opts.relation_count));
  }
  if (g.entity_count > std::uint64_t{kPaddingEntity} || g.relation_count > std::uint64_t{kPaddingEntity}) {
    r.fail("entity/relation count exceeds 32-bit id space");
  }
  if (r.remaining() / 12 < triple_count) {
    r.fail("truncated triple section: header declares " + std::to_string(triple_count) + " records");
  }
  g.triples.reserve(triple_count);
  g.relation_counts.assign(g.relation_count, 0);
  for (std::uint64_t i = 0; i < triple_count; ++i) {
    const auto record_offset = r.offset();
    Triple t;
    t.head = r.get<std::uint32_t>("head");
    t.relation = r.get<std::uint32_t>("relation");
    t.tail = r.get<std::uint32_t>("tail");
    if (t.head >= g.entity_count || t.tail >= g.entity_count || t.relation >= g.relation_count) {
      throw Error("ingest", "id out of range in record " + std::to_string(i) + " at byte offset " +
                                std::to_string(record_offset));
    }
    ++g.relation_counts[t.relation];
    g.triples.push_back(t);
  }
  if (r.remaining() != 0) r.fail("trailing bytes after triple section");
  return g;
}

inline KnowledgeGraph ingest_triples(const std::string& path, const IngestOptions& opts = {}) {
  const auto bytes = read_file_bytes(path, "ingest");
  return parse_triples(bytes, opts);
}

inline void write_triples(const KnowledgeGraph& g, const std::string& path) {
  write_file_bytes(path, serialize_triples(g), "ingest");
}

// ---------------------------------------------------------------------------
// KGF: "KGF1", u64 row_count, u32 dim, u8 precision flag (0=f32, 1=f16),
// row-major values.

inline std::vector<std::byte> serialize_features(const Matrix<float>& f, Precision precision) {
  require(precision != Precision::Double, "ingest", "features file supports f32 or f16 only");
  ByteWriter w;
  w.put_magic("KGF1");
  w.put<std::uint64_t>(f.rows());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.cols()));
  w.put<std::uint8_t>(precision == Precision::Half ? 1 : 0);
  if (precision == Precision::Half) {
    for (float v : f.flat()) w.put<std::uint16_t>(to_half_bits(v));
  } else {
    w.put_span<float>(f.flat());
  }
  return std::move(w.bytes());
}

inline Matrix<float> parse_features(std::span<const std::byte> bytes) {
  ByteReader r(bytes, "ingest");
  r.expect_magic("KGF1");
  const auto rows = r.get<std::uint64_t>("row_count");
  const auto dim = r.get<std::uint32_t>("dim");
  const auto flag = r.get<std::uint8_t>("precision flag");
  if (flag > 1) r.fail("unknown precision flag " + std::to_string(flag));
  const std::size_t elem = flag == 1 ? 2 : 4;
  if (dim != 0 && r.remaining() / elem / dim < rows) r.fail("truncated feature values");
  Matrix<float> f(rows, dim);
  if (flag == 1) {
    for (auto& v : f.flat()) v = from_half_bits(r.get<std::uint16_t>("value"));
  } else {
    r.get_span<float>(f.flat(), "values");
  }
  if (r.remaining() != 0) r.fail("trailing bytes after feature values");
  return f;
}

inline Matrix<float> read_features(const std::string& path) {
  return parse_features(read_file_bytes(path, "ingest"));
}

inline void write_features(const Matrix<float>& f, const std::string& path, Precision precision) {
  write_file_bytes(path, serialize_features(f, precision), "ingest");
}

// ---------------------------------------------------------------------------
// Synthetic graphs.
//
// Entities are grouped into latent clusters; each relation maps a head
// cluster to a target cluster through a seeded permutation, and the tail is
// drawn from the target cluster with a popularity skew. Relation frequencies
// follow n_r ∝ (r + 1)^-skew. The structure makes held-out triples
// predictable, which the learning smoke tests rely on.

struct SyntheticSpec {
  std::uint64_t entity_count = 1000;
  std::uint64_t relation_count = 10;
  std::uint64_t triple_count = 50000;
  double skew = 1.0;
  std::uint64_t seed = 0;
  std::size_t feature_dim = 16;
  std::uint64_t cluster_count = 0;  // 0 = round(sqrt(entity_count))
  double noise = 0.05;              // probability of a uniformly random tail
};

inline KnowledgeGraph generate_synthetic(const SyntheticSpec& spec) {
  require(spec.entity_count >= 2, "config", "synthetic graph needs entity_count >= 2");
  require(spec.triple_count >= 1, "config", "synthetic graph needs triple_count >= 1");
  require(spec.relation_count >= 1, "config", "synthetic graph needs relation_count >= 1");
  require(spec.skew >= 0.0, "config", "synthetic skew must be >= 0");

  KnowledgeGraph g;
  g.entity_count = spec.entity_count;
  g.relation_count = spec.relation_count;

  const std::uint64_t clusters =
      std::clamp<std::uint64_t>(spec.cluster_count != 0 ? spec.cluster_count
                                                        : static_cast<std::uint64_t>(std::llround(
                                                              std::sqrt(static_cast<double>(spec.entity_count)))),
                                1, spec.entity_count);

  auto rng = derive_rng(spec.seed, 0x5e7a11ULL);

  std::vector<double> relation_weights(spec.relation_count);
  for (std::uint64_t r = 0; r < spec.relation_count; ++r) {
    relation_weights[r] = std::pow(static_cast<double>(r + 1), -spec.skew);
  }
  std::discrete_distribution<std::uint32_t> pick_relation(relation_weights.begin(), relation_weights.end());

  // cluster c holds entities {e : e mod clusters == c}
  std::vector<std::vector<std::uint64_t>> cluster_map(spec.relation_count, std::vector<std::uint64_t>(clusters));
  for (auto& m : cluster_map) {
    std::iota(m.begin(), m.end(), 0);
    std::shuffle(m.begin(), m.end(), rng);
  }
  auto cluster_members = [&](std::uint64_t c) {
    return (spec.entity_count - c + clusters - 1) / clusters;
  };
  std::vector<std::discrete_distribution<std::uint64_t>> pick_member;
  pick_member.reserve(clusters);
  for (std::uint64_t c = 0; c < clusters; ++c) {
    std::vector<double> w(cluster_members(c));
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = 1.0 / static_cast<double>(k + 1);
    pick_member.emplace_back(w.begin(), w.end());
  }

  std::uniform_int_distribution<std::uint32_t> pick_entity(0, static_cast<std::uint32_t>(spec.entity_count - 1));
  std::bernoulli_distribution is_noise(spec.noise);

  g.triples.reserve(spec.triple_count);
  for (std::uint64_t i = 0; i < spec.triple_count; ++i) {
    Triple t;
    t.head = pick_entity(rng);
    t.relation = pick_relation(rng);
    if (is_noise(rng)) {
      t.tail = pick_entity(rng);
    } else {
      const auto target = cluster_map[t.relation][t.head % clusters];
      t.tail = static_cast<EntityId>(target + clusters * pick_member[target](rng));
    }
    g.triples.push_back(t);
  }
  g.recount();

  g.features = Matrix<float>(spec.entity_count, spec.feature_dim);
  std::normal_distribution<float> normal(0.0F, 1.0F);
  for (auto& v : g.features.flat()) v = normal(rng);
  return g;
}

/// Removes `count` triples (chosen by seed) from the graph and returns them as
/// labelled queries with ids 0..count-1.
inline std::vector<Query> split_holdout(KnowledgeGraph& g, std::uint64_t count, std::uint64_t seed) {
  require(count < g.triples.size(), "config", "holdout size must be smaller than the triple count");
  std::vector<std::uint64_t> idx(g.triples.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = derive_rng(seed, 0x401d0ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<bool> held(g.triples.size(), false);
  std::vector<Query> queries;
  queries.reserve(count);
  for (std::uint64_t q = 0; q < count; ++q) {
    held[idx[q]] = true;
    const auto& t = g.triples[idx[q]];
    queries.push_back({q, t.head, t.relation, t.tail});
  }
  std::vector<Triple> kept;
  kept.reserve(g.triples.size() - count);
  for (std::size_t i = 0; i < g.triples.size(); ++i) {
    if (!held[i]) kept.push_back(g.triples[i]);
  }
  g.triples = std::move(kept);
  g.recount();
  return queries;
}

// ---------------------------------------------------------------------------
// Entity partitioning.

struct RowLocation {
  std::uint32_t shard = 0;
  std::uint32_t row = 0;
  friend bool operator==(const RowLocation&, const RowLocation&) = default;
};

class EntityPartition {
 public:
  EntityPartition() = default;

  /// Builds a partition from an explicit shard-major entity order;
  /// `order.size()` must equal entity_count.
  EntityPartition(std::uint64_t entity_count, std::uint32_t shard_count, std::vector<EntityId> order)
      : entity_count_(entity_count), shard_count_(shard_count) {
    require(shard_count >= 1, "config", "partition needs at least one shard");
    require(shard_count <= entity_count, "config",
            "cannot partition " + std::to_string(entity_count) + " entities into " +
                std::to_string(shard_count) + " shards");
    require(order.size() == entity_count, "config", "partition order size mismatch");
    shard_size_ = (entity_count + shard_count - 1) / shard_count;
    rows_.assign(shard_size_ * shard_count, kPaddingEntity);
    location_.assign(entity_count, RowLocation{});
    std::vector<bool> seen(entity_count, false);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto e = order[k];
      require(e < entity_count && !seen[e], "config", "partition order is not a permutation");
      seen[e] = true;
      rows_[k] = e;
      location_[e] = {static_cast<std::uint32_t>(k / shard_size_), static_cast<std::uint32_t>(k % shard_size_)};
    }
  }

  std::uint64_t entity_count() const noexcept { return entity_count_; }
  std::uint32_t shard_count() const noexcept { return shard_count_; }
  std::uint64_t shard_size() const noexcept { return shard_size_; }

  RowLocation locate(EntityId e) const { return location_.at(e); }
  std::uint32_t shard_of(EntityId e) const { return location_.at(e).shard; }

  /// Entity stored at (shard, row), or kPaddingEntity.
  EntityId entity_at(std::uint32_t shard, std::uint64_t row) const { return rows_[shard * shard_size_ + row]; }

  std::uint64_t real_count(std::uint32_t shard) const {
    const auto begin = std::uint64_t{shard} * shard_size_;
    if (begin >= entity_count_) return 0;
    return std::min(shard_size_, entity_count_ - begin);
  }
  std::uint64_t padding_count(std::uint32_t shard) const { return shard_size_ - real_count(shard); }

  /// Shard-major entity order (row 0 of shard 0 first), without padding.
  std::vector<EntityId> order() const {
    std::vector<EntityId> out;
    out.reserve(entity_count_);
    for (auto e : rows_) {
      if (e != kPaddingEntity) out.push_back(e);
    }
    return out;
  }

  friend bool operator==(const EntityPartition&, const EntityPartition&) = default;

 private:
  std::uint64_t entity_count_ = 0;
  std::uint32_t shard_count_ = 0;
  std::uint64_t shard_size_ = 0;
  std::vector<EntityId> rows_;
  std::vector<RowLocation> location_;
};

/// Uniformly random split of the entities into `shard_count` shards of
/// ceil(|E|/D) rows; the last shard is padded.
inline EntityPartition partition_entities(std::uint64_t entity_count, std::uint32_t shard_count,
                                          std::uint64_t seed) {
  require(shard_count >= 1, "config", "partition needs at least one shard");
  require(shard_count <= entity_count, "config",
          "D=" + std::to_string(shard_count) + " exceeds entity count " + std::to_string(entity_count));
  std::vector<EntityId> order(entity_count);
  std::iota(order.begin(), order.end(), EntityId{0});
  auto rng = derive_rng(seed, 0x9a27ULL);
  std::shuffle(order.begin(), order.end(), rng);
  return EntityPartition(entity_count, shard_count, std::move(order));
}

inline EntityPartition partition_entities(const KnowledgeGraph& g, std::uint32_t shard_count, std::uint64_t seed) {
  return partition_entities(g.entity_count, shard_count, seed);
}

// ---------------------------------------------------------------------------
// Triple buckets T_{i,j}: head in shard i, tail in shard j.

struct TripleBuckets {
  std::uint32_t shard_count = 0;
  std::uint64_t relation_count = 0;
  std::vector<std::vector<std::uint64_t>> buckets;          // [i * D + j] -> triple indices
  std::vector<std::vector<std::uint64_t>> relation_counts;  // [i * D + j] -> n_r per relation

  const std::vector<std::uint64_t>& bucket(std::uint32_t i, std::uint32_t j) const {
    return buckets[std::size_t{i} * shard_count + j];
  }
  const std::vector<std::uint64_t>& counts(std::uint32_t i, std::uint32_t j) const {
    return relation_counts[std::size_t{i} * shard_count + j];
  }
};

inline TripleBuckets bucket_triples(const KnowledgeGraph& g, const EntityPartition& partition) {
  require(partition.entity_count() == g.entity_count, "config", "partition does not cover the graph's entities");
  const auto D = partition.shard_count();
  TripleBuckets b;
  b.shard_count = D;
  b.relation_count = g.relation_count;
  b.buckets.resize(std::size_t{D} * D);
  b.relation_counts.assign(std::size_t{D} * D, std::vector<std::uint64_t>(g.relation_count, 0));
  for (std::uint64_t k = 0; k < g.triples.size(); ++k) {
    const auto& t = g.triples[k];
    const auto cell = std::size_t{partition.shard_of(t.head)} * D + partition.shard_of(t.tail);
    b.buckets[cell].push_back(k);
    ++b.relation_counts[cell][t.relation];
  }
  return b;
}

// ---------------------------------------------------------------------------
// Split statistics.

/// p(r) = c_r^{1/3} / sum_r' c_r'^{1/3}. All-zero input gives all zeros.
inline std::vector<double> cube_root_distribution(std::span<const std::uint64_t> counts) {
  std::vector<double> p(counts.size());
  double total = 0.0;
  for (std::size_t r = 0; r < counts.size(); ++r) {
    p[r] = std::cbrt(static_cast<double>(counts[r]));
    total += p[r];
  }
  if (total > 0.0) {
    for (auto& v : p) v /= total;
  }
  return p;
}

struct RelationFrequency {
  RelationId relation = 0;
  std::uint64_t count = 0;
  double frequency = 0.0;
  double cumulative = 0.0;
};

struct SetStats {
  std::string name;
  std::uint64_t size = 0;
  std::vector<RelationFrequency> table;  // count descending, relation id ascending
  std::vector<double> cumulative_curve;  // cumulative frequency at rank 1..|R|
  /// Fraction of labelled query tails never seen as a training tail; NaN if
  /// the set carries no labels. Always 0 for the training set itself.
  double tail_coverage_gap = 0.0;
};

struct NamedQuerySet {
  std::string name;
  std::vector<Query> queries;
};

struct StatsReport {
  SetStats training;
  std::vector<double> cube_root_probability;  // indexed by relation id
  std::vector<SetStats> query_sets;

  /// Training-set TSV: one row per relation, in table order.
  std::string training_tsv() const { return tsv(training, true); }
  std::string query_set_tsv(std::size_t i) const { return tsv(query_sets.at(i), false); }

 private:
  std::string tsv(const SetStats& s, bool with_cube_root) const {
    std::ostringstream out;
    out << "relation_id\tcount\tfrequency\tcumulative_frequency\tcube_root_probability\n";
    out << std::setprecision(9);
    for (const auto& row : s.table) {
      out << row.relation << '\t' << row.count << '\t' << row.frequency << '\t' << row.cumulative << '\t'
          << (with_cube_root ? cube_root_probability[row.relation] : 0.0) << '\n';
    }
    return out.str();
  }
};

namespace detail {

inline SetStats relation_table(std::string name, std::span<const std::uint64_t> counts) {
  SetStats s;
  s.name = std::move(name);
  for (auto c : counts) s.size += c;
  std::vector<RelationId> order(counts.size());
  std::iota(order.begin(), order.end(), RelationId{0});
  std::stable_sort(order.begin(), order.end(), [&](RelationId a, RelationId b) { return counts[a] > counts[b]; });
  double cumulative = 0.0;
  for (auto r : order) {
    const double f = s.size ? static_cast<double>(counts[r]) / static_cast<double>(s.size) : 0.0;
    cumulative += f;
    s.table.push_back({r, counts[r], f, cumulative});
    s.cumulative_curve.push_back(cumulative);
  }
  return s;
}

}  // namespace detail

inline StatsReport split_stats(const KnowledgeGraph& g, std::span<const NamedQuerySet> query_sets) {
  StatsReport report;
  report.training = detail::relation_table("train", g.relation_counts);
  report.cube_root_probability = cube_root_distribution(g.relation_counts);

  std::vector<bool> training_tail(g.entity_count, false);
  for (const auto& t : g.triples) training_tail[t.tail] = true;

  for (const auto& qs : query_sets) {
    std::vector<std::uint64_t> counts(g.relation_count, 0);
    std::uint64_t labelled = 0;
    std::uint64_t unseen = 0;
    for (const auto& q : qs.queries) {
      require(q.relation < g.relation_count && q.head < g.entity_count, "stats",
              "query " + std::to_string(q.query_id) + " in set '" + qs.name + "' has an id out of range");
      ++counts[q.relation];
      if (q.labelled()) {
        require(q.tail < g.entity_count, "stats", "query tail out of range in set '" + qs.name + "'");
        ++labelled;
        if (!training_tail[q.tail]) ++unseen;
      }
    }
    auto s = detail::relation_table(qs.name, counts);
    s.tail_coverage_gap = labelled ? static_cast<double>(unseen) / static_cast<double>(labelled)
                                   : std::numeric_limits<double>::quiet_NaN();
    report.query_sets.push_back(std::move(s));
  }
  return report;
}

}  // namespace bess
