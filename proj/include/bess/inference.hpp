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

// Full-vocabulary link prediction on the sharded model, MRR@10 and the
// predictions / queries TSV formats.
//
// Queries are grouped by the shard that owns their head. Owners encode the
// heads, an AllGather shares them, every worker scores all of them against
// its local tails, and the per-worker top-K lists are merged. Ties are
// broken by ascending entity id at every stage, so the merged lists equal a
// global sort.

#pragma once

#include <spdlog/fmt/fmt.h>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bess/common.hpp"
#include "bess/kg_data.hpp"
#include "bess/model.hpp"
#include "bess/runtime.hpp"

namespace bess {

struct Prediction {
  EntityId entity = 0;
  double score = 0.0;
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct RankedList {
  std::uint64_t query_id = 0;
  std::vector<Prediction> items;  // best first
  friend bool operator==(const RankedList&, const RankedList&) = default;
};

using RankedPredictions = std::vector<RankedList>;

/// Total order used everywhere: higher score first, then lower entity id.
inline bool ranks_before(const Prediction& a, const Prediction& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.entity < b.entity;
}

/// Keeps the best K of `items` in ranked order.
inline void keep_top_k(std::vector<Prediction>& items, std::size_t K) {
  if (items.size() > K) {
    std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(K), items.end(), ranks_before);
    items.resize(K);
  } else {
    std::sort(items.begin(), items.end(), ranks_before);
  }
}

struct InferenceOptions {
  std::size_t top_k = 100;
  std::size_t query_batch = 64;  // queries per worker per AllGather round
};

/// Encoded (no dropout) embeddings of every row of worker k's shard, using
/// the head or tail projection.
template <class Real>
Matrix<Real> encode_shard(const BessRuntime<Real>& rt, std::uint32_t k, bool tail_side) {
  const auto& ws = rt.worker(k);
  const auto& small = rt.small_parameters();
  const auto& m = tail_side ? small.tail_projection_or_head() : small.head_projection;
  const auto d = rt.model().embedding_dim;
  Matrix<Real> out(ws.shallow.rows(), d);
  std::vector<Real> projected(d);
  for (std::size_t row = 0; row < ws.shallow.rows(); ++row) {
    encode_entity<Real>(ws.shallow.row(row), ws.features.row(row), m, {}, projected, out.row(row));
  }
  return out;
}

template <class Real>
RankedPredictions infer_topk(BessRuntime<Real>& rt, const std::vector<Query>& queries, const InferenceOptions& opt) {
  require(opt.top_k >= 1, "inference", "K must be at least 1");
  require(opt.query_batch >= 1, "inference", "query batch size must be at least 1");
  const auto& graph = rt.graph();
  const auto& part = rt.partition();
  const auto& model = rt.model();
  const auto& small = rt.small_parameters();
  const std::uint32_t D = rt.worker_count();
  const auto d = model.embedding_dim;
  const std::size_t K = std::min<std::size_t>(opt.top_k, graph.entity_count);

  // Group queries by the shard owning the head, keeping stream order.
  std::vector<std::vector<std::size_t>> by_shard(D);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& query = queries[q];
    require(query.head < graph.entity_count, "inference",
            "query " + std::to_string(query.query_id) + ": head " + std::to_string(query.head) +
                " not found in any shard");
    require(query.relation < graph.relation_count, "inference",
            "query " + std::to_string(query.query_id) + ": relation " + std::to_string(query.relation) +
                " out of range");
    by_shard[part.shard_of(query.head)].push_back(q);
  }

  std::vector<Matrix<Real>> tails(D), heads(D);
  detail::for_each_worker(D, rt.config().parallel, [&](std::uint32_t k) {
    tails[k] = encode_shard(rt, k, true);
    heads[k] = encode_shard(rt, k, false);
  });

  std::size_t rounds = 0;
  for (const auto& s : by_shard) rounds = std::max(rounds, (s.size() + opt.query_batch - 1) / opt.query_batch);

  // Gathered query record: stream position (u64, max = padding), relation
  // (u32), encoded head (d x Real).
  const std::size_t record = 8 + 4 + d * sizeof(Real);
  // Returned candidate: entity (u32) + score (Real); padding entity marks
  // unused slots.
  const std::size_t candidate = 4 + sizeof(Real);
  std::vector<RankedList> out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) out[q].query_id = queries[q].query_id;

  for (std::size_t round = 0; round < rounds; ++round) {
    std::vector<std::vector<std::byte>> send(D, std::vector<std::byte>(opt.query_batch * record, std::byte{0}));
    for (std::uint32_t k = 0; k < D; ++k) {
      for (std::size_t s = 0; s < opt.query_batch; ++s) {
        auto* dst = send[k].data() + s * record;
        const auto idx = round * opt.query_batch + s;
        std::uint64_t pos = std::numeric_limits<std::uint64_t>::max();
        if (idx < by_shard[k].size()) {
          pos = by_shard[k][idx];
          const auto& query = queries[pos];
          const std::uint32_t rel = query.relation;
          std::memcpy(dst + 8, &rel, 4);
          std::memcpy(dst + 12, heads[k].row(part.locate(query.head).row).data(), d * sizeof(Real));
        }
        std::memcpy(dst, &pos, 8);
      }
    }
    const auto gathered = rt.fabric().all_gather("inference_queries", send);

    const std::size_t slots = std::size_t{D} * opt.query_batch;
    std::vector<std::vector<std::byte>> local(D, std::vector<std::byte>(slots * K * candidate, std::byte{0}));
    detail::for_each_worker(D, rt.config().parallel, [&](std::uint32_t k) {
      const auto& buf = gathered[k];
      std::vector<Real> head(d), scratch(d);
      PreparedQuery<Real> pq;
      std::vector<Prediction> cand;
      for (std::size_t s = 0; s < slots; ++s) {
        const auto* src = buf.data() + s * record;
        std::uint64_t pos;
        std::memcpy(&pos, src, 8);
        auto* dst = local[k].data() + s * K * candidate;
        for (std::size_t c = 0; c < K; ++c) std::memcpy(dst + c * candidate, &kPaddingEntity, 4);
        if (pos == std::numeric_limits<std::uint64_t>::max()) continue;
        std::uint32_t rel;
        std::memcpy(&rel, src + 8, 4);
        std::memcpy(head.data(), src + 12, d * sizeof(Real));
        const auto normal = model.uses_normals() ? small.normals.row(rel) : std::span<const Real>{};
        prepare_query<Real>(model.score_fn, head, small.relations.row(rel), normal, pq);
        cand.clear();
        for (std::uint64_t row = 0; row < part.real_count(k); ++row) {
          const Real sc = score_prepared<Real>(model.score_fn, model.distance_p, pq, tails[k].row(row), scratch);
          cand.push_back({part.entity_at(k, row), static_cast<double>(sc)});
        }
        keep_top_k(cand, K);
        for (std::size_t c = 0; c < cand.size(); ++c) {
          const Real sc = static_cast<Real>(cand[c].score);
          std::memcpy(dst + c * candidate, &cand[c].entity, 4);
          std::memcpy(dst + c * candidate + 4, &sc, sizeof(Real));
        }
      }
    });
    const auto reduced = rt.fabric().all_gather("inference_topk", local);

    // Merge the D local lists of every query (done on worker 0's copy).
    const auto& all = reduced.front();
    const std::size_t per_worker = slots * K * candidate;
    for (std::size_t s = 0; s < slots; ++s) {
      std::uint64_t pos;
      std::memcpy(&pos, gathered.front().data() + s * record, 8);
      if (pos == std::numeric_limits<std::uint64_t>::max()) continue;
      std::vector<Prediction> merged;
      for (std::uint32_t k = 0; k < D; ++k) {
        const auto* src = all.data() + k * per_worker + s * K * candidate;
        for (std::size_t c = 0; c < K; ++c) {
          EntityId e;
          Real sc;
          std::memcpy(&e, src + c * candidate, 4);
          if (e == kPaddingEntity) break;
          std::memcpy(&sc, src + c * candidate + 4, sizeof(Real));
          merged.push_back({e, static_cast<double>(sc)});
        }
      }
      keep_top_k(merged, K);
      out[pos].items = std::move(merged);
    }
  }
  return out;
}

/// Mean over queries of 1/rank when the true tail is in the first ten
/// predictions, 0 otherwise.
inline double mrr_at_10(const RankedPredictions& predictions, const std::vector<Query>& labels) {
  std::map<std::uint64_t, EntityId> truth;
  for (const auto& q : labels) {
    require(q.labelled(), "evaluate", "query " + std::to_string(q.query_id) + " has no ground-truth tail");
    require(truth.emplace(q.query_id, q.tail).second, "evaluate",
            "duplicate label for query " + std::to_string(q.query_id));
  }
  require(predictions.size() == truth.size(), "evaluate",
          std::to_string(predictions.size()) + " prediction lists for " + std::to_string(truth.size()) + " labels");
  if (predictions.empty()) return 0.0;
  double total = 0.0;
  for (const auto& list : predictions) {
    auto it = truth.find(list.query_id);
    require(it != truth.end(), "evaluate", "predictions name query " + std::to_string(list.query_id) +
                                               " which has no label");
    const auto depth = std::min<std::size_t>(10, list.items.size());
    for (std::size_t k = 0; k < depth; ++k) {
      if (list.items[k].entity == it->second) {
        total += 1.0 / static_cast<double>(k + 1);
        break;
      }
    }
  }
  return total / static_cast<double>(predictions.size());
}

/// MRR@10 of a random ranking of |E| candidates: H_10 / |E|.
inline double random_baseline_mrr(std::uint64_t entity_count) {
  double h = 0.0;
  for (std::uint64_t k = 1; k <= std::min<std::uint64_t>(10, entity_count); ++k) h += 1.0 / static_cast<double>(k);
  return h / static_cast<double>(entity_count);
}

// ---------------------------------------------------------------------------
// TSV formats.

inline constexpr std::string_view kPredictionsHeader = "query_id\trank\tentity_id\tscore";

// Scores are written with nine significant digits, which is exactly enough
// to round-trip a float; both directions go through float so that export
// followed by import is lossless.
inline std::string format_predictions(const RankedPredictions& predictions) {
  std::vector<const RankedList*> order;
  for (const auto& l : predictions) order.push_back(&l);
  std::stable_sort(order.begin(), order.end(),
                   [](const RankedList* a, const RankedList* b) { return a->query_id < b->query_id; });
  std::string out(kPredictionsHeader);
  out += '\n';
  for (const auto* l : order) {
    for (std::size_t k = 0; k < l->items.size(); ++k) {
      out += fmt::format("{}\t{}\t{}\t{}\n", l->query_id, k + 1, l->items[k].entity,
                         fmt::format("{:.9g}", static_cast<float>(l->items[k].score)));
    }
  }
  return out;
}

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return fields;
}

template <class T>
T parse_number(std::string_view field, std::string_view category, std::size_t line, std::string_view what) {
  T v{};
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, v);
  require(ec == std::errc() && ptr == end && !field.empty(), category,
          "line " + std::to_string(line) + ": bad " + std::string(what) + " '" + std::string(field) + "'");
  return v;
}

inline std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = nl + 1;
  }
  return lines;
}

inline std::string read_text(const std::string& path, std::string_view category) {
  const auto bytes = read_file_bytes(path, category);
  return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

inline void write_text(const std::string& path, std::string_view text, std::string_view category) {
  write_file_bytes(path, std::as_bytes(std::span(text.data(), text.size())), category);
}

}  // namespace detail

inline RankedPredictions parse_predictions(std::string_view text) {
  const auto lines = detail::lines_of(text);
  require(!lines.empty() && lines.front() == kPredictionsHeader, "predictions",
          "line 1: expected header '" + std::string(kPredictionsHeader) + "'");
  RankedPredictions out;
  for (std::size_t n = 1; n < lines.size(); ++n) {
    const auto line_no = n + 1;
    if (lines[n].empty() && n + 1 == lines.size()) break;
    const auto f = detail::split_tabs(lines[n]);
    require(f.size() == 4, "predictions",
            "line " + std::to_string(line_no) + ": expected 4 fields, found " + std::to_string(f.size()));
    const auto qid = detail::parse_number<std::uint64_t>(f[0], "predictions", line_no, "query_id");
    const auto rank = detail::parse_number<std::uint64_t>(f[1], "predictions", line_no, "rank");
    const auto entity = detail::parse_number<EntityId>(f[2], "predictions", line_no, "entity_id");
    const auto score = detail::parse_number<float>(f[3], "predictions", line_no, "score");
    if (out.empty() || out.back().query_id != qid) {
      require(out.empty() || qid > out.back().query_id, "predictions",
              "line " + std::to_string(line_no) + ": query ids must be ascending");
      out.push_back({qid, {}});
    }
    require(rank == out.back().items.size() + 1, "predictions",
            "line " + std::to_string(line_no) + ": expected rank " + std::to_string(out.back().items.size() + 1) +
                ", found " + std::to_string(rank));
    out.back().items.push_back({entity, static_cast<double>(score)});
  }
  return out;
}

inline void export_predictions(const RankedPredictions& p, const std::string& path) {
  detail::write_text(path, format_predictions(p), "predictions");
}

inline RankedPredictions import_predictions(const std::string& path) {
  return parse_predictions(detail::read_text(path, "predictions"));
}

inline std::string format_queries(const std::vector<Query>& queries) {
  const bool labelled = std::all_of(queries.begin(), queries.end(), [](const Query& q) { return q.labelled(); }) &&
                        !queries.empty();
  std::string out = labelled ? "query_id\thead\trelation\ttail\n" : "query_id\thead\trelation\n";
  for (const auto& q : queries) {
    out += labelled ? fmt::format("{}\t{}\t{}\t{}\n", q.query_id, q.head, q.relation, q.tail)
                    : fmt::format("{}\t{}\t{}\n", q.query_id, q.head, q.relation);
  }
  return out;
}

/// Parses a queries TSV; the header line is optional.
inline std::vector<Query> parse_queries(std::string_view text) {
  const auto lines = detail::lines_of(text);
  std::vector<Query> out;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const auto line_no = n + 1;
    if (lines[n].empty()) continue;
    if (n == 0 && lines[n].starts_with("query_id")) continue;
    const auto f = detail::split_tabs(lines[n]);
    require(f.size() == 3 || f.size() == 4, "queries",
            "line " + std::to_string(line_no) + ": expected 3 or 4 fields, found " + std::to_string(f.size()));
    Query q;
    q.query_id = detail::parse_number<std::uint64_t>(f[0], "queries", line_no, "query_id");
    q.head = detail::parse_number<EntityId>(f[1], "queries", line_no, "head");
    q.relation = detail::parse_number<RelationId>(f[2], "queries", line_no, "relation");
    if (f.size() == 4) q.tail = detail::parse_number<EntityId>(f[3], "queries", line_no, "tail");
    out.push_back(q);
  }
  return out;
}

inline void write_queries(const std::vector<Query>& q, const std::string& path) {
  detail::write_text(path, format_queries(q), "queries");
}

inline std::vector<Query> read_queries(const std::string& path) {
  return parse_queries(detail::read_text(path, "queries"));
}

/// Labelled queries built from a seeded sample of training triples.
inline std::vector<Query> sample_training_queries(const KnowledgeGraph& g, std::size_t count, std::uint64_t seed) {
  std::vector<Query> out;
  if (g.triples.empty()) return out;
  auto rng = derive_rng(seed, 0x7a11ULL);
  for (std::size_t q = 0; q < count; ++q) {
    const auto& t = g.triples[detail::uniform_index(rng, g.triples.size())];
    out.push_back({q, t.head, t.relation, t.tail});
  }
  return out;
}

template <class Real>
double evaluate_mrr(BessRuntime<Real>& rt, const std::vector<Query>& labelled, std::size_t query_batch = 64) {
  if (labelled.empty()) return 0.0;
  return mrr_at_10(infer_topk(rt, labelled, {.top_k = 10, .query_batch = query_batch}), labelled);
}

}  // namespace bess
