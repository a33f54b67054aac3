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

// Simulated D-worker BESS training. Each worker owns one shard of entity
// rows (shallow embedding, optimiser state, features) and a replica of the
// small parameters. A step moves tail and negative rows to the worker that
// needs them with one AllToAll, replicates the small parameters with an
// AllGather, runs forward/backward, and sends gradients back the same way.
//
// Gradients for an entity row are summed by its owner in a fixed order
// (micro-batch, then heads, tails, negatives in plan order), and the small
// parameter gradients are summed in micro-batch order. The arithmetic is
// therefore the same for any worker count, and a replayed plan gives
// bit-identical parameters on 1, 2 or 4 workers.

#pragma once

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "bess/collectives.hpp"
#include "bess/common.hpp"
#include "bess/kg_data.hpp"
#include "bess/model.hpp"
#include "bess/optimizer.hpp"
#include "bess/sampling.hpp"

namespace bess {

struct RuntimeConfig {
  std::uint32_t workers = 1;
  Precision precision = Precision::Single;
  std::uint64_t seed = 0;
  bool parallel = false;  // one thread per worker inside each phase

  friend bool operator==(const RuntimeConfig&, const RuntimeConfig&) = default;

  void validate() const {
    require(workers >= 1, "config", "runtime.workers must be at least 1");
  }
};

template <class Real>
struct WorkerState {
  std::uint32_t index = 0;
  Matrix<Real> shallow;   // shard_size x d, at storage precision
  Matrix<Real> features;  // shard_size x F, at storage precision
  Matrix<Real> adam_m;    // shard_size x d (Adam only)
  Matrix<Real> adam_v;
  std::vector<std::uint64_t> row_updates;  // Adam step count per row
  ModelParameters<Real> replica;           // small parameters, entity empty
  std::vector<Real> small_m, small_v;      // replicated optimiser state
  std::uint64_t small_updates = 0;

  Matrix<Real> grad_scratch;               // shard_size x d, zero between steps
  std::vector<std::uint8_t> touched;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::uint64_t bytes = 0;
  TrafficMatrix traffic;
};

namespace detail {

template <class Real>
void put_row(std::span<const Real> row, Precision p, std::byte* out) {
  switch (p) {
    case Precision::Half:
      for (std::size_t c = 0; c < row.size(); ++c) {
        const auto bits = to_half_bits(static_cast<float>(row[c]));
        std::memcpy(out + 2 * c, &bits, 2);
      }
      return;
    case Precision::Single:
      for (std::size_t c = 0; c < row.size(); ++c) {
        const auto v = static_cast<float>(row[c]);
        std::memcpy(out + 4 * c, &v, 4);
      }
      return;
    case Precision::Double:
      for (std::size_t c = 0; c < row.size(); ++c) {
        const auto v = static_cast<double>(row[c]);
        std::memcpy(out + 8 * c, &v, 8);
      }
      return;
  }
}

template <class Real>
void get_row(const std::byte* in, Precision p, std::span<Real> row) {
  switch (p) {
    case Precision::Half:
      for (std::size_t c = 0; c < row.size(); ++c) {
        std::uint16_t bits;
        std::memcpy(&bits, in + 2 * c, 2);
        row[c] = static_cast<Real>(from_half_bits(bits));
      }
      return;
    case Precision::Single:
      for (std::size_t c = 0; c < row.size(); ++c) {
        float v;
        std::memcpy(&v, in + 4 * c, 4);
        row[c] = static_cast<Real>(v);
      }
      return;
    case Precision::Double:
      for (std::size_t c = 0; c < row.size(); ++c) {
        double v;
        std::memcpy(&v, in + 8 * c, 8);
        row[c] = static_cast<Real>(v);
      }
      return;
  }
}

template <class Real>
std::size_t small_parameter_count(const ModelParameters<Real>& p) {
  return p.relations.size() + p.normals.size() + p.head_projection.size() + p.tail_projection.size();
}

template <class Real>
std::vector<std::span<Real>> small_blocks(ModelParameters<Real>& p) {
  return {p.relations.flat(), p.normals.flat(), p.head_projection.flat(), p.tail_projection.flat()};
}

template <class Real>
std::vector<Real> flatten_small(const ModelParameters<Real>& p) {
  std::vector<Real> out;
  out.reserve(small_parameter_count(p));
  for (const auto* m : {&p.relations, &p.normals, &p.head_projection, &p.tail_projection})
    out.insert(out.end(), m->flat().begin(), m->flat().end());
  return out;
}

template <class Real>
void unflatten_small(std::span<const Real> flat, ModelParameters<Real>& p) {
  std::size_t off = 0;
  for (auto block : small_blocks(p)) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + block.size()), block.begin());
    off += block.size();
  }
}

/// Runs fn(w) for every worker, optionally on one thread per worker.
inline void for_each_worker(std::uint32_t workers, bool parallel, const std::function<void(std::uint32_t)>& fn) {
  if (!parallel || workers == 1) {
    for (std::uint32_t w = 0; w < workers; ++w) fn(w);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    for (std::uint32_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          fn(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

template <class Real>
class BessRuntime {
 public:
  BessRuntime(const KnowledgeGraph& graph, ModelConfig model, TrainSchedule schedule, RuntimeConfig runtime,
              EntityPartition partition)
      : graph_(&graph),
        model_(model),
        schedule_(schedule),
        config_(runtime),
        partition_(std::move(partition)),
        fabric_(runtime.workers) {
    model_.validate();
    schedule_.validate();
    config_.validate();
    require(std::is_same_v<Real, double> == (config_.precision == Precision::Double), "config",
            "runtime precision '" + std::string(to_string(config_.precision)) + "' does not match compute type");
    require(partition_.shard_count() == config_.workers, "config",
            "partition has " + std::to_string(partition_.shard_count()) + " shards but runtime has " +
                std::to_string(config_.workers) + " workers");
    require(partition_.entity_count() == graph.entity_count, "config", "partition does not cover the graph");
    require(graph.features.rows() == graph.entity_count && graph.features.cols() == model_.feature_dim, "config",
            "feature table is " + std::to_string(graph.features.rows()) + " x " +
                std::to_string(graph.features.cols()) + ", model expects " + std::to_string(graph.entity_count) +
                " x " + std::to_string(model_.feature_dim));
    init_state();
  }

  const ModelConfig& model() const noexcept { return model_; }
  const TrainSchedule& schedule() const noexcept { return schedule_; }
  const RuntimeConfig& config() const noexcept { return config_; }
  const EntityPartition& partition() const noexcept { return partition_; }
  const KnowledgeGraph& graph() const noexcept { return *graph_; }
  CollectiveFabric& fabric() noexcept { return fabric_; }
  std::uint32_t worker_count() const noexcept { return config_.workers; }
  const WorkerState<Real>& worker(std::uint32_t w) const { return workers_.at(w); }
  std::uint64_t step() const noexcept { return step_; }
  void set_parallel(bool parallel) noexcept { config_.parallel = parallel; }

  /// Small parameters as every worker sees them.
  const ModelParameters<Real>& small_parameters() const { return workers_.front().replica; }

  bool replicas_consistent() const {
    for (const auto& w : workers_) {
      if (!(w.replica == workers_.front().replica) || w.small_m != workers_.front().small_m ||
          w.small_v != workers_.front().small_v)
        return false;
    }
    return true;
  }

  /// Global parameter table indexed by entity id.
  ModelParameters<Real> export_parameters() const {
    ModelParameters<Real> p = small_parameters();
    p.entity = Matrix<Real>(graph_->entity_count, model_.embedding_dim);
    for (EntityId e = 0; e < graph_->entity_count; ++e) {
      const auto loc = partition_.locate(e);
      const auto src = workers_[loc.shard].shallow.row(loc.row);
      std::copy(src.begin(), src.end(), p.entity.row(e).begin());
    }
    return p;
  }

  /// Overwrites all parameters from a global table (entity rows are
  /// rounded to storage precision). Optimiser state is left untouched.
  void import_parameters(const ModelParameters<Real>& p) {
    require(p.entity.rows() == graph_->entity_count && p.entity.cols() == model_.embedding_dim, "runtime",
            "entity table shape mismatch");
    require(detail::small_parameter_count(p) == detail::small_parameter_count(small_parameters()) &&
                p.relations.rows() == small_parameters().relations.rows(),
            "runtime", "small parameter shape mismatch");
    for (EntityId e = 0; e < graph_->entity_count; ++e) {
      const auto loc = partition_.locate(e);
      auto dst = workers_[loc.shard].shallow.row(loc.row);
      const auto src = p.entity.row(e);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = round_to_storage(src[c], config_.precision);
    }
    for (auto& ws : workers_) {
      ws.replica = p;
      ws.replica.entity = Matrix<Real>();
    }
  }

  /// One synchronous step. `plan.step` must equal the runtime's step
  /// counter. The plan may come from a sampler with a different worker
  /// count (replay) as long as each plan worker's heads live on a single
  /// runtime worker.
  StepMetrics train_step(const MicroBatchPlan& plan) {
    require(plan.step == step_, "runtime",
            "plan is for step " + std::to_string(plan.step) + " but the runtime is at step " + std::to_string(step_));
    require(step_ < schedule_.total_steps, "runtime", "training already reached schedule.total_steps");
    validate_plan(plan);
    fabric_.begin_step();
    const double lr = lr_at(schedule_, step_);
    const auto d = model_.embedding_dim;
    const auto F = model_.feature_dim;
    const std::uint32_t D = config_.workers;
    const std::uint32_t M = plan.shard_count;
    const auto row_bytes = (d + F) * bytes_per_element(config_.precision);

    // Routing: which worker runs each micro-batch, and which owner rows it
    // needs, in canonical order.
    struct Slot {
      std::uint32_t owner;
      std::uint32_t index;
    };
    struct Routing {
      std::uint32_t exec = 0;
      std::vector<std::uint32_t> head_rows;
      std::vector<Slot> tails, negatives;
    };
    std::vector<Routing> routes(M);
    std::vector<std::vector<std::vector<std::uint32_t>>> requests(D, std::vector<std::vector<std::uint32_t>>(D));
    for (std::uint32_t m = 0; m < M; ++m) {
      const auto& wb = plan.workers[m];
      auto& rt = routes[m];
      rt.exec = partition_.shard_of(graph_->triples[wb.triples.front()].head);
      for (std::size_t b = 0; b < wb.triples.size(); ++b) {
        const auto loc = partition_.locate(graph_->triples[wb.triples[b]].head);
        require(loc.shard == rt.exec, "runtime",
                "plan/shard mismatch: micro-batch of worker " + std::to_string(m) + " (bucket T[" + std::to_string(m) +
                    "," + std::to_string(b / plan.positives_per_shard()) + "]) has heads on runtime workers " +
                    std::to_string(rt.exec) + " and " + std::to_string(loc.shard));
        rt.head_rows.push_back(loc.row);
      }
      auto route = [&](EntityId e) {
        const auto loc = partition_.locate(e);
        auto& req = requests[loc.shard][rt.exec];
        req.push_back(loc.row);
        return Slot{loc.shard, static_cast<std::uint32_t>(req.size() - 1)};
      };
      for (auto k : wb.triples) rt.tails.push_back(route(graph_->triples[k].tail));
      for (auto e : wb.negatives) rt.negatives.push_back(route(e));
    }
    std::size_t chunk_rows = 0;
    for (const auto& per_owner : requests)
      for (const auto& req : per_owner) chunk_rows = std::max(chunk_rows, req.size());

    // (1)-(3) owners pack requested rows; AllToAll moves them.
    std::vector<std::vector<std::vector<std::byte>>> send(D, std::vector<std::vector<std::byte>>(D));
    detail::for_each_worker(D, config_.parallel, [&](std::uint32_t k) {
      const auto& ws = workers_[k];
      for (std::uint32_t w = 0; w < D; ++w) {
        auto& chunk = send[k][w];
        chunk.assign(chunk_rows * row_bytes, std::byte{0});
        const auto& req = requests[k][w];
        for (std::size_t s = 0; s < req.size(); ++s) {
          auto* out = chunk.data() + s * row_bytes;
          detail::put_row<Real>(ws.shallow.row(req[s]), config_.precision, out);
          detail::put_row<Real>(ws.features.row(req[s]), config_.precision,
                                out + d * bytes_per_element(config_.precision));
        }
      }
    });
    const auto received = fabric_.all_to_all("rows", std::move(send));

    // (4) AllGather reconstructs the small parameters from per-worker slices.
    const auto gathered = gather_small_parameters();

    // (5) forward/backward for every micro-batch on its executing worker.
    std::vector<std::vector<std::uint32_t>> executes(D);
    for (std::uint32_t m = 0; m < M; ++m) executes[routes[m].exec].push_back(m);
    std::vector<MicroBatchGradients<Real>> grads(M);
    const std::size_t P = detail::small_parameter_count(small_parameters());
    std::vector<std::vector<Real>> small_grads(M);
    detail::for_each_worker(D, config_.parallel, [&](std::uint32_t w) {
      const auto& ws = workers_[w];
      const auto& params = gathered[w];
      const auto& mt = model_.tie_projections ? params.head_projection : params.tail_projection;
      for (auto m : executes[w]) {
        const auto& wb = plan.workers[m];
        const auto& rt = routes[m];
        const auto B = wb.triples.size();
        const auto N = wb.negatives.size();
        MicroBatchInputs<Real> in;
        in.entity_count = graph_->entity_count;
        in.head_shallow = Matrix<Real>(B, d);
        in.head_features = Matrix<Real>(B, F);
        in.tail_shallow = Matrix<Real>(B, d);
        in.tail_features = Matrix<Real>(B, F);
        in.negative_shallow = Matrix<Real>(N, d);
        in.negative_features = Matrix<Real>(N, F);
        in.relations = Matrix<Real>(B, model_.relation_dim());
        if (model_.uses_normals()) in.normals = Matrix<Real>(B, d);
        auto unpack = [&](const Slot& s, std::span<Real> shallow, std::span<Real> features) {
          const auto* src = received[w][s.owner].data() + std::size_t{s.index} * row_bytes;
          detail::get_row<Real>(src, config_.precision, shallow);
          detail::get_row<Real>(src + d * bytes_per_element(config_.precision), config_.precision, features);
        };
        for (std::size_t b = 0; b < B; ++b) {
          const auto& t = graph_->triples[wb.triples[b]];
          std::ranges::copy(ws.shallow.row(rt.head_rows[b]), in.head_shallow.row(b).begin());
          std::ranges::copy(ws.features.row(rt.head_rows[b]), in.head_features.row(b).begin());
          unpack(rt.tails[b], in.tail_shallow.row(b), in.tail_features.row(b));
          std::ranges::copy(params.relations.row(t.relation), in.relations.row(b).begin());
          if (model_.uses_normals()) std::ranges::copy(params.normals.row(t.relation), in.normals.row(b).begin());
        }
        for (std::size_t i = 0; i < N; ++i) unpack(rt.negatives[i], in.negative_shallow.row(i), in.negative_features.row(i));
        if (model_.feature_dropout > 0.0) {
          in.head_dropout = dropout_matrix(B, m, 0);
          in.tail_dropout = dropout_matrix(B, m, 1);
          in.negative_dropout = dropout_matrix(N, m, 2);
        }
        if (filter_false_negatives_) in.negative_mask = make_shared_negative_mask(wb, *graph_, true);

        grads[m] = batch_forward_backward<Real>(model_, in, params.head_projection, mt);

        // Scatter relation/normal gradients into a full-size buffer.
        ModelParameters<Real> g;
        g.relations = Matrix<Real>(params.relations.rows(), params.relations.cols());
        g.normals = Matrix<Real>(params.normals.rows(), params.normals.cols());
        for (std::size_t b = 0; b < B; ++b) {
          const auto r = graph_->triples[wb.triples[b]].relation;
          auto dst = g.relations.row(r);
          const auto src = grads[m].relations.row(b);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
          if (model_.uses_normals()) {
            auto nd = g.normals.row(r);
            const auto ns = grads[m].normals.row(b);
            for (std::size_t c = 0; c < nd.size(); ++c) nd[c] += ns[c];
          }
        }
        g.head_projection = std::move(grads[m].head_projection);
        g.tail_projection = std::move(grads[m].tail_projection);
        small_grads[m] = detail::flatten_small(g);
      }
    });

    // (6) gradients of tails and negatives travel back to their owners.
    const auto grad_row_bytes = d * sizeof(Real);
    std::vector<std::vector<std::vector<std::byte>>> back(D, std::vector<std::vector<std::byte>>(D));
    detail::for_each_worker(D, config_.parallel, [&](std::uint32_t w) {
      for (std::uint32_t k = 0; k < D; ++k) back[w][k].assign(chunk_rows * grad_row_bytes, std::byte{0});
      for (auto m : executes[w]) {
        const auto& rt = routes[m];
        auto write = [&](const Slot& s, std::span<const Real> g) {
          std::memcpy(back[w][s.owner].data() + std::size_t{s.index} * grad_row_bytes, g.data(), grad_row_bytes);
        };
        for (std::size_t b = 0; b < rt.tails.size(); ++b) write(rt.tails[b], grads[m].tail_shallow.row(b));
        for (std::size_t i = 0; i < rt.negatives.size(); ++i) write(rt.negatives[i], grads[m].negative_shallow.row(i));
      }
    });
    const auto returned = fabric_.all_to_all("gradients", std::move(back));

    // (7) small-parameter gradients: AllGather of each worker's per
    // micro-batch buffers, summed in micro-batch order on every replica.
    std::size_t slots = 0;
    for (const auto& e : executes) slots = std::max(slots, e.size());
    std::vector<std::vector<Real>> contributions(D, std::vector<Real>(slots * P, Real{0}));
    for (std::uint32_t w = 0; w < D; ++w)
      for (std::size_t s = 0; s < executes[w].size(); ++s)
        std::ranges::copy(small_grads[executes[w][s]], contributions[w].begin() + static_cast<std::ptrdiff_t>(s * P));
    const auto all_contrib = fabric_.all_gather("small_gradients", contributions);

    // (8) owners update their rows; replicas apply the summed gradient.
    detail::for_each_worker(D, config_.parallel, [&](std::uint32_t k) {
      auto& ws = workers_[k];
      std::vector<std::uint32_t> touched_rows;
      auto add = [&](std::uint32_t row, std::span<const Real> g) {
        auto dst = ws.grad_scratch.row(row);
        for (std::size_t c = 0; c < d; ++c) dst[c] += g[c];
        if (!ws.touched[row]) {
          ws.touched[row] = 1;
          touched_rows.push_back(row);
        }
      };
      std::vector<Real> tmp(d);
      auto take = [&](std::uint32_t from, const Slot& s) {
        std::memcpy(tmp.data(), returned[k][from].data() + std::size_t{s.index} * grad_row_bytes, grad_row_bytes);
        add(requests[k][from][s.index], tmp);
      };
      for (std::uint32_t m = 0; m < M; ++m) {
        const auto& rt = routes[m];
        if (rt.exec == k) {
          for (std::size_t b = 0; b < rt.head_rows.size(); ++b) add(rt.head_rows[b], grads[m].head_shallow.row(b));
        }
        for (const auto& s : rt.tails)
          if (s.owner == k) take(rt.exec, s);
        for (const auto& s : rt.negatives)
          if (s.owner == k) take(rt.exec, s);
      }
      std::sort(touched_rows.begin(), touched_rows.end());
      for (auto row : touched_rows) {
        auto p = ws.shallow.row(row);
        auto g = ws.grad_scratch.row(row);
        if (schedule_.optimizer == OptimizerKind::Adam) {
          adam_update<Real>(p, g, ws.adam_m.row(row), ws.adam_v.row(row), ++ws.row_updates[row], lr,
                            schedule_.beta1, schedule_.beta2, schedule_.epsilon);
        } else {
          sgd_update<Real>(p, g, lr);
        }
        for (auto& v : p) v = round_to_storage(v, config_.precision);
        std::fill(g.begin(), g.end(), Real{0});
        ws.touched[row] = 0;
      }

      std::vector<Real> total(P, Real{0});
      for (std::uint32_t m = 0; m < M; ++m) {
        const auto w = routes[m].exec;
        const auto pos = static_cast<std::size_t>(std::find(executes[w].begin(), executes[w].end(), m) - executes[w].begin());
        const auto* src = all_contrib[k].data() + (std::size_t{w} * slots + pos) * P;
        for (std::size_t c = 0; c < P; ++c) total[c] += src[c];
      }
      auto flat = detail::flatten_small(ws.replica);
      if (schedule_.optimizer == OptimizerKind::Adam) {
        adam_update<Real>(flat, total, ws.small_m, ws.small_v, ++ws.small_updates, lr, schedule_.beta1,
                          schedule_.beta2, schedule_.epsilon);
      } else {
        sgd_update<Real>(flat, total, lr);
      }
      detail::unflatten_small<Real>(flat, ws.replica);
    });

    StepMetrics metrics;
    metrics.step = step_;
    metrics.lr = lr;
    double loss = 0.0;
    for (const auto& g : grads) loss += static_cast<double>(g.loss);
    metrics.loss = loss / static_cast<double>(M);
    metrics.traffic = fabric_.step_traffic();
    metrics.bytes = fabric_.step_bytes();
    ++step_;
    return metrics;
  }

  void set_filter_false_negatives(bool on) noexcept { filter_false_negatives_ = on; }

  /// Digest of everything that must match for a checkpoint to be resumable.
  std::uint64_t config_digest() const {
    std::string s;
    auto add = [&](std::string_view k, auto v) {
      s += k;
      s += '=';
      if constexpr (std::is_convertible_v<decltype(v), std::string_view>) {
        s += std::string_view(v);
      } else {
        s += std::to_string(v);
      }
      s += ';';
    };
    add("score", to_string(model_.score_fn));
    add("p", model_.distance_p);
    add("d", model_.embedding_dim);
    add("F", model_.feature_dim);
    add("margin", model_.margin);
    add("temp", model_.adversarial_temperature);
    add("loss", to_string(model_.loss));
    add("lt", model_.lambda_t);
    add("ls", model_.lambda_s);
    add("lf", model_.lambda_f);
    add("plain", static_cast<int>(model_.reg_use_plain_norm));
    add("dropout", model_.feature_dropout);
    add("tie", static_cast<int>(model_.tie_projections));
    add("init", model_.init_std);
    add("steps", schedule_.total_steps);
    add("lr", schedule_.initial_lr);
    add("decay", to_string(schedule_.decay));
    add("opt", to_string(schedule_.optimizer));
    add("b1", schedule_.beta1);
    add("b2", schedule_.beta2);
    add("eps", schedule_.epsilon);
    add("workers", config_.workers);
    add("precision", to_string(config_.precision));
    add("seed", config_.seed);
    add("E", graph_->entity_count);
    add("R", graph_->relation_count);
    add("T", graph_->triples.size());
    return detail::fnv1a(s);
  }

  std::vector<std::byte> save_checkpoint() const {
    ByteWriter w;
    w.put_magic("KGC1");
    w.put<std::uint32_t>(1);  // format version
    w.put<std::uint64_t>(config_digest());
    w.put<std::uint64_t>(step_);
    w.put<std::uint64_t>(config_.seed);
    w.put<std::uint64_t>(step_);  // sampler cursor: plans are keyed by (seed, step)
    w.put<std::uint32_t>(sizeof(Real));
    w.put<std::uint32_t>(config_.workers);
    const auto order = partition_.order();
    w.put<std::uint64_t>(order.size());
    w.put_span<EntityId>(order);
    for (const auto& ws : workers_) {
      w.put_span<Real>(ws.shallow.flat());
      w.put_span<Real>(ws.adam_m.flat());
      w.put_span<Real>(ws.adam_v.flat());
      w.put_span<std::uint64_t>(ws.row_updates);
    }
    const auto& ws = workers_.front();
    const auto flat = detail::flatten_small(ws.replica);
    w.put<std::uint64_t>(flat.size());
    w.put_span<Real>(flat);
    w.put_span<Real>(ws.small_m);
    w.put_span<Real>(ws.small_v);
    w.put<std::uint64_t>(ws.small_updates);
    return std::move(w.bytes());
  }

  void load_checkpoint(std::span<const std::byte> bytes) {
    ByteReader r(bytes, "checkpoint");
    r.expect_magic("KGC1");
    if (r.get<std::uint32_t>("version") != 1) r.fail("unsupported checkpoint version");
    if (r.get<std::uint64_t>("config digest") != config_digest()) {
      r.fail("checkpoint was written under a different configuration or dataset");
    }
    const auto step = r.get<std::uint64_t>("step");
    if (r.get<std::uint64_t>("seed") != config_.seed) r.fail("seed mismatch");
    if (r.get<std::uint64_t>("sampler cursor") != step) r.fail("sampler cursor does not match step");
    if (r.get<std::uint32_t>("element size") != sizeof(Real)) r.fail("compute precision mismatch");
    if (r.get<std::uint32_t>("workers") != config_.workers) r.fail("worker count mismatch");
    std::vector<EntityId> order(r.get<std::uint64_t>("entity count"));
    if (order.size() != graph_->entity_count) r.fail("entity count mismatch");
    r.get_span<EntityId>(order, "partition");
    EntityPartition partition(graph_->entity_count, config_.workers, std::move(order));
    std::vector<WorkerState<Real>> restored = workers_;
    if (!(partition == partition_)) {
      partition_ = partition;
      restored = fresh_workers();
    }
    for (auto& ws : restored) {
      r.get_span<Real>(ws.shallow.flat(), "shard rows");
      r.get_span<Real>(ws.adam_m.flat(), "shard optimiser state");
      r.get_span<Real>(ws.adam_v.flat(), "shard optimiser state");
      r.get_span<std::uint64_t>(ws.row_updates, "shard update counts");
    }
    if (r.get<std::uint64_t>("small parameter count") != detail::small_parameter_count(small_parameters())) {
      r.fail("small parameter layout mismatch");
    }
    std::vector<Real> flat(detail::small_parameter_count(small_parameters()));
    std::vector<Real> m(workers_.front().small_m.size()), v(workers_.front().small_v.size());
    r.get_span<Real>(flat, "small parameters");
    r.get_span<Real>(m, "small optimiser state");
    r.get_span<Real>(v, "small optimiser state");
    const auto updates = r.get<std::uint64_t>("small update count");
    if (r.remaining() != 0) r.fail("trailing bytes");
    for (auto& ws : restored) {
      detail::unflatten_small<Real>(flat, ws.replica);
      ws.small_m = m;
      ws.small_v = v;
      ws.small_updates = updates;
    }
    workers_ = std::move(restored);
    step_ = step;
  }

 private:
  std::vector<WorkerState<Real>> fresh_workers() const {
    const auto d = model_.embedding_dim;
    const auto F = model_.feature_dim;
    const auto rows = partition_.shard_size();
    ModelParameters<Real> small;
    init_small_parameters(model_, graph_->relation_count, config_.seed, small);
    const auto P = detail::small_parameter_count(small);
    const bool adam = schedule_.optimizer == OptimizerKind::Adam;
    std::vector<WorkerState<Real>> workers(config_.workers);
    for (std::uint32_t k = 0; k < config_.workers; ++k) {
      auto& ws = workers[k];
      ws.index = k;
      ws.shallow = Matrix<Real>(rows, d);
      ws.features = Matrix<Real>(rows, F);
      ws.adam_m = adam ? Matrix<Real>(rows, d) : Matrix<Real>();
      ws.adam_v = adam ? Matrix<Real>(rows, d) : Matrix<Real>();
      ws.row_updates.assign(adam ? rows : 0, 0);
      ws.grad_scratch = Matrix<Real>(rows, d);
      ws.touched.assign(rows, 0);
      for (std::uint64_t row = 0; row < rows; ++row) {
        const auto e = partition_.entity_at(k, row);
        if (e == kPaddingEntity) continue;
        auto s = ws.shallow.row(row);
        init_entity_row<Real>(model_, config_.seed, e, s);
        for (auto& v : s) v = round_to_storage(v, config_.precision);
        const auto src = graph_->features.row(e);
        auto f = ws.features.row(row);
        for (std::size_t c = 0; c < F; ++c) f[c] = round_to_storage(static_cast<Real>(src[c]), config_.precision);
      }
      ws.replica = small;
      ws.small_m.assign(adam ? P : 0, Real{0});
      ws.small_v.assign(adam ? P : 0, Real{0});
    }
    return workers;
  }

  void init_state() { workers_ = fresh_workers(); }

  void validate_plan(const MicroBatchPlan& plan) const {
    require(plan.shard_count >= 1 && plan.workers.size() == plan.shard_count, "runtime",
            "plan has " + std::to_string(plan.workers.size()) + " worker batches for D=" +
                std::to_string(plan.shard_count));
    for (std::uint32_t m = 0; m < plan.shard_count; ++m) {
      const auto& wb = plan.workers[m];
      require(wb.triples.size() == plan.micro_batch_size && wb.negatives.size() == plan.negative_count, "runtime",
              "plan worker " + std::to_string(m) + " has " + std::to_string(wb.triples.size()) + " positives and " +
                  std::to_string(wb.negatives.size()) + " negatives, expected " +
                  std::to_string(plan.micro_batch_size) + " and " + std::to_string(plan.negative_count));
      for (auto k : wb.triples)
        require(k < graph_->triples.size(), "runtime", "plan worker " + std::to_string(m) + " names triple " +
                                                            std::to_string(k) + " outside the training set");
      for (auto e : wb.negatives)
        require(e < graph_->entity_count, "runtime",
                "plan worker " + std::to_string(m) + " names negative entity " + std::to_string(e) +
                    " outside the entity range");
    }
  }

  Matrix<Real> dropout_matrix(std::size_t rows, std::uint32_t m, std::uint32_t role) const {
    Matrix<Real> out(rows, model_.embedding_dim);
    for (std::size_t r = 0; r < rows; ++r)
      dropout_row<Real>(model_.feature_dropout, out.row(r), config_.seed, 0xd809ULL, step_, m, role, r);
    return out;
  }

  /// Each worker contributes a 1/D slice of its replica; the concatenation
  /// is what the compute phase uses.
  std::vector<ModelParameters<Real>> gather_small_parameters() {
    const std::uint32_t D = config_.workers;
    const std::size_t P = detail::small_parameter_count(small_parameters());
    const std::size_t slice = (P + D - 1) / D;
    std::vector<std::vector<Real>> slices(D);
    for (std::uint32_t w = 0; w < D; ++w) {
      const auto flat = detail::flatten_small(workers_[w].replica);
      slices[w].assign(slice, Real{0});
      for (std::size_t c = 0; c < slice && w * slice + c < P; ++c) slices[w][c] = flat[w * slice + c];
    }
    const auto joined = fabric_.all_gather("small_parameters", slices);
    std::vector<ModelParameters<Real>> out(D, small_parameters());
    for (std::uint32_t w = 0; w < D; ++w) {
      detail::unflatten_small<Real>(std::span<const Real>(joined[w]).first(P), out[w]);
    }
    return out;
  }

  const KnowledgeGraph* graph_;
  ModelConfig model_;
  TrainSchedule schedule_;
  RuntimeConfig config_;
  EntityPartition partition_;
  CollectiveFabric fabric_;
  std::vector<WorkerState<Real>> workers_;
  std::uint64_t step_ = 0;
  bool filter_false_negatives_ = false;
};

// ---------------------------------------------------------------------------
// Cost model and throughput measurement.

struct CostEstimate {
  double t_compute = 0.0;
  double t_comms = 0.0;
  double memory = 0.0;  // element units
  bool feasible = false;
};

/// Per-step cost of one worker: B positives scored against N shared
/// negatives plus the feature projections of B + N rows.
inline CostEstimate cost_model(double B, double N, double d, double feature_dim, double c_compute, double c_comms,
                               double memory_limit) {
  CostEstimate c;
  c.t_compute = c_compute * (B * N * d + (B + N) * feature_dim * d);
  c.t_comms = c_comms * (B + N) * (d + feature_dim);
  c.memory = (B + N) * (d + feature_dim);
  c.feasible = c.memory < memory_limit;
  return c;
}

struct ThroughputReport {
  std::uint64_t steps = 0;
  std::uint64_t triples_per_step = 0;
  double elapsed_seconds = 0.0;
  double triples_per_second = 0.0;
  double mean_step_ms = 0.0;
  double min_step_ms = 0.0;
  double max_step_ms = 0.0;
  double bytes_per_step = 0.0;
};

template <class Real>
ThroughputReport benchmark_throughput(BessRuntime<Real>& runtime, const BessSampler& sampler, std::uint64_t steps) {
  require(steps > 0, "benchmark", "no measurement window");
  ThroughputReport rep;
  rep.steps = steps;
  rep.triples_per_step = sampler.config().micro_batch_size * sampler.config().shard_count;
  rep.min_step_ms = std::numeric_limits<double>::infinity();
  double bytes = 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t k = 0; k < steps; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto plan = sampler.sample(runtime.step());
    const auto m = runtime.train_step(plan);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rep.min_step_ms = std::min(rep.min_step_ms, ms);
    rep.max_step_ms = std::max(rep.max_step_ms, ms);
    bytes += static_cast<double>(m.bytes);
  }
  rep.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rep.mean_step_ms = 1000.0 * rep.elapsed_seconds / static_cast<double>(steps);
  rep.triples_per_second =
      static_cast<double>(rep.triples_per_step * steps) / std::max(rep.elapsed_seconds, 1e-12);
  rep.bytes_per_step = bytes / static_cast<double>(steps);
  return rep;
}

/// One metrics-log record.
struct MetricsRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_mrr = 0.0;
  double valid_mrr = 0.0;
  double triples_per_second = 0.0;
  double bytes_per_step = 0.0;
};

inline std::string format_metrics(const MetricsRecord& r) {
  return fmt::format("step={} lr={:.6g} loss={:.6f} train_mrr={:.6f} valid_mrr={:.6f} triples_per_s={:.1f} bytes_per_step={:.0f}",
                     r.step, r.lr, r.train_loss, r.train_mrr, r.valid_mrr, r.triples_per_second, r.bytes_per_step);
}

}  // namespace bess
