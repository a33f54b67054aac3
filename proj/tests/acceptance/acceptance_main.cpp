// Acceptance suite: one PASS/FAIL line per criterion. Exit status is
// non-zero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "bess/ensemble.hpp"
#include "bess/inference.hpp"
#include "bess/runtime.hpp"
#include "bess/sampling.hpp"
#include "ensemble_oracle.hpp"
#include "gradient_check.hpp"
#include "inference_oracle.hpp"

using namespace bess;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  double worst = 0.0;
  std::string where;
  const auto grid = testing::gradient_check_grid(8, 5);
  for (const auto& cfg : grid) {
    const auto r = testing::check_gradients(cfg, 4, 6, 11);
    if (r.max_relative_error >= worst) {
      worst = r.max_relative_error;
      where = testing::describe(cfg) + " " + r.worst_parameter;
    }
  }
  return {worst <= 1e-5, fmt::format("{} combinations, max relative error {:.2e} ({})", grid.size(), worst, where)};
}

template <class Real>
double max_relative_difference(const ModelParameters<Real>& a, const ModelParameters<Real>& b) {
  double worst = 0.0;
  auto cmp = [&](const Matrix<Real>& x, const Matrix<Real>& y) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      diff = std::max(diff, std::abs(static_cast<double>(x.flat()[k]) - static_cast<double>(y.flat()[k])));
      scale = std::max(scale, std::abs(static_cast<double>(y.flat()[k])));
    }
    if (x.size() != y.size()) diff = INFINITY;
    worst = std::max(worst, scale > 0 ? diff / scale : diff);
  };
  cmp(a.entity, b.entity);
  cmp(a.relations, b.relations);
  cmp(a.normals, b.normals);
  cmp(a.head_projection, b.head_projection);
  cmp(a.tail_projection, b.tail_projection);
  return worst;
}

KnowledgeGraph invariance_graph() {
  return generate_synthetic({.entity_count = 1000, .relation_count = 10, .triple_count = 50000, .seed = 21,
                             .feature_dim = 8});
}

template <class Real>
double replay_error(const KnowledgeGraph& g, ScoreFunction fn) {
  ModelConfig m;
  m.score_fn = fn;
  m.embedding_dim = 16;
  m.feature_dim = 8;
  m.margin = is_distance_based(fn) ? 4.0 : 0.0;
  m.adversarial_temperature = 1.0;
  m.lambda_t = m.lambda_s = m.lambda_f = 1e-4;
  m.feature_dropout = 0.1;
  const auto p4 = partition_entities(g, 4, 5);
  const auto buckets = bucket_triples(g, p4);
  const BessSampler sampler(g, p4, buckets, {.micro_batch_size = 64, .negative_count = 64, .shard_count = 4, .seed = 9});
  const Precision prec = std::is_same_v<Real, double> ? Precision::Double : Precision::Single;
  auto make = [&](EntityPartition p) {
    return BessRuntime<Real>(g, m, TrainSchedule{.total_steps = 100, .initial_lr = 0.01},
                             RuntimeConfig{.workers = p.shard_count(), .precision = prec, .seed = 3}, std::move(p));
  };
  auto r4 = make(p4);
  auto r2 = make(EntityPartition(g.entity_count, 2, p4.order()));
  auto r1 = make(partition_entities(g, 1, 0));
  for (std::uint64_t k = 0; k < 100; ++k) {
    const auto plan = sampler.sample(k);
    r4.train_step(plan);
    r2.train_step(plan);
    r1.train_step(plan);
  }
  const auto ref = r1.export_parameters();
  return std::max(max_relative_difference(r4.export_parameters(), ref),
                  max_relative_difference(r2.export_parameters(), ref));
}

Outcome d_invariance() {
  const auto g = invariance_graph();
  const double single = replay_error<float>(g, ScoreFunction::TransE);
  const double dbl = replay_error<double>(g, ScoreFunction::TransE);
  return {single <= 1e-5 && dbl <= 1e-10,
          fmt::format("100 replayed steps, D in {{1,2,4}}: max relative error single {:.2e}, double {:.2e}", single,
                      dbl)};
}

Outcome distributed_topk() {
  const auto g = generate_synthetic({.entity_count = 200, .relation_count = 6, .triple_count = 2000, .seed = 4,
                                     .feature_dim = 4});
  const auto queries = testing::random_queries(g, 100, 5);
  ModelConfig m;
  m.embedding_dim = 8;
  m.feature_dim = 4;
  std::size_t compared = 0, mismatched = 0;
  for (std::uint32_t D : {1U, 2U, 4U}) {
    BessRuntime<float> rt(g, m, {}, RuntimeConfig{.workers = D, .seed = 2}, partition_entities(g, D, 9));
    for (std::size_t K : {1UL, 10UL, 100UL}) {
      const auto got = infer_topk(rt, queries, {.top_k = K, .query_batch = 16});
      const auto want = testing::brute_force_topk(rt, queries, K);
      ++compared;
      mismatched += got != want;
    }
  }
  return {mismatched == 0, fmt::format("{} (D, K) cases x 100 queries, {} mismatched", compared, mismatched)};
}

Outcome sampled_softmax_exactness() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0.0, 2.0);
  std::vector<double> logits(11);
  for (auto& v : logits) v = normal(rng);
  double worst = 0.0;
  for (std::size_t target = 0; target < 11; ++target) {
    std::vector<double> neg;
    for (std::size_t e = 0; e < 11; ++e) {
      if (e != target) neg.push_back(logits[e]);
    }
    long double z = 0;
    for (double l : logits) z += std::exp(static_cast<long double>(l));
    const auto full = static_cast<double>(std::log(z) - logits[target]);
    worst = std::max(worst, std::abs(sampled_softmax_ce_loss<double>(logits[target], neg, 11).loss - full));
  }
  return {worst <= 1e-10, fmt::format("|E|=11, N=10: max |sampled - full| = {:.2e}", worst)};
}

Outcome cube_root_sampler() {
  const auto g = generate_synthetic({.entity_count = 2000, .relation_count = 20, .triple_count = 100000,
                                     .skew = 1.5, .seed = 3, .feature_dim = 0});
  const auto p = partition_entities(g, 1, 0);
  const auto b = bucket_triples(g, p);
  const BessSampler sampler(g, p, b, {.micro_batch_size = 1000, .negative_count = 1, .shard_count = 1, .seed = 8});
  std::vector<double> hits(g.relation_count, 0.0);
  const std::uint64_t steps = 1000;
  for (std::uint64_t s = 0; s < steps; ++s) {
    for (const auto plan = sampler.sample(s); auto k : plan.workers[0].triples) hits[g.triples[k].relation] += 1.0;
  }
  double z = 0.0;
  for (auto n : g.relation_counts) z += std::cbrt(static_cast<double>(n));
  double tv = 0.0;
  for (std::size_t r = 0; r < hits.size(); ++r) {
    tv += std::abs(hits[r] / (1000.0 * steps) - std::cbrt(static_cast<double>(g.relation_counts[r])) / z);
  }
  tv /= 2.0;
  return {tv < 0.01, fmt::format("10^6 draws over {} relations: total variation {:.5f}", g.relation_count, tv)};
}

Outcome balanced_communication() {
  const auto g = invariance_graph();
  const auto p = partition_entities(g, 4, 5);
  const auto b = bucket_triples(g, p);
  const BessSampler sampler(g, p, b, {.micro_batch_size = 64, .negative_count = 64, .shard_count = 4, .seed = 9});
  ModelConfig m;
  m.embedding_dim = 16;
  m.feature_dim = 8;
  BessRuntime<float> rt(g, m, {}, RuntimeConfig{.workers = 4, .seed = 1}, p);
  TrafficMatrix first;
  bool ok = true;
  std::uint64_t off = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto t = rt.train_step(sampler.sample(s)).traffic;
    if (s == 0) {
      first = t;
      off = t(0, 1);
    }
    ok = ok && t == first;
    for (std::uint32_t i = 0; i < 4; ++i) {
      for (std::uint32_t j = 0; j < 4; ++j) {
        if (i != j) ok = ok && t(i, j) == off;
      }
    }
  }
  return {ok && off > 0, fmt::format("50 steps, D=4: every off-diagonal entry {} bytes on every step", off)};
}

RankedPredictions random_lists(std::size_t queries, std::size_t K, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RankedPredictions out;
  for (std::size_t q = 0; q < queries; ++q) {
    std::vector<std::pair<double, EntityId>> keyed;
    for (EntityId e = 0; e < 300; ++e) keyed.emplace_back(u(rng) * (1.0 + e / 50.0), e);
    std::sort(keyed.begin(), keyed.end());
    RankedList l{q, {}};
    for (std::size_t k = 0; k < K; ++k) l.items.push_back({keyed[k].second, 1.0 - 0.001 * static_cast<double>(k)});
    out.push_back(l);
  }
  return out;
}

Outcome ensemble_oracle() {
  std::vector<RankedPredictions> models;
  for (std::uint64_t s = 0; s < 5; ++s) models.push_back(random_lists(20, 100, 40 + s));
  const auto fused = fuse(models, {});
  const auto want = testing::exhaustive_fuse(models, 100, -0.5, 10);
  bool oracle = fused.size() == want.size();
  for (std::size_t q = 0; oracle && q < fused.size(); ++q) {
    oracle = fused[q].items.size() == want[q].items.size();
    for (std::size_t k = 0; oracle && k < fused[q].items.size(); ++k) {
      oracle = fused[q].items[k].entity == want[q].items[k].entity &&
               std::abs(fused[q].items[k].score - want[q].items[k].score) < 1e-9;
    }
  }
  bool idempotent = true;
  const auto single = fuse({models[0]}, {});
  for (std::size_t q = 0; q < single.size(); ++q) {
    for (std::size_t k = 0; k < 10; ++k) idempotent = idempotent && single[q].items[k].entity == models[0][q].items[k].entity;
  }
  auto transformed = models;
  for (auto& m : transformed) {
    for (auto& l : m) {
      for (auto& it : l.items) it.score = std::atan(7.0 * it.score) * 100.0 - 3.0;
    }
  }
  const bool rank_only = fuse(transformed, {}) == fused;
  return {oracle && idempotent && rank_only,
          fmt::format("5 models x 20 queries: oracle {}, single-model idempotence {}, monotone invariance {}",
                      oracle ? "match" : "MISMATCH", idempotent ? "holds" : "FAILS", rank_only ? "holds" : "FAILS")};
}

Outcome mrr_fixtures() {
  RankedList l{0, {{4, 0.9}, {5, 0.8}, {6, 0.7}}};
  const double first = mrr_at_10({l}, {{0, 0, 0, 4}});
  const double third = mrr_at_10({l}, {{0, 0, 0, 6}});
  const double absent = mrr_at_10({l}, {{0, 0, 0, 9}});
  return {first == 1.0 && third == 1.0 / 3.0 && absent == 0.0,
          fmt::format("ranks {{1, 3, absent}} -> {{{}, {}, {}}}", first, third, absent)};
}

// Shared by the learning smoke check and the ensemble check.
struct SmokeTask {
  KnowledgeGraph graph;
  std::vector<Query> held_out;
  ModelConfig model;

  SmokeTask() {
    graph = generate_synthetic({.entity_count = 1000, .relation_count = 10, .triple_count = 50000, .seed = 1,
                                .feature_dim = 16});
    held_out = split_holdout(graph, 1000, 1);
    model.score_fn = ScoreFunction::TransE;
    model.embedding_dim = 32;
    model.feature_dim = 16;
    model.margin = 6.0;
  }

  /// Trains one model (2,000 steps, D=4) and returns its top-100 lists on
  /// the held-out queries.
  RankedPredictions train_and_predict(std::uint64_t seed) const {
    const auto p = partition_entities(graph, 4, seed);
    const auto b = bucket_triples(graph, p);
    const BessSampler sampler(graph, p, b,
                              {.micro_batch_size = 64, .negative_count = 64, .shard_count = 4, .seed = seed});
    BessRuntime<float> rt(graph, model, TrainSchedule{.total_steps = 2000, .initial_lr = 0.01},
                          RuntimeConfig{.workers = 4, .seed = seed}, p);
    for (std::uint64_t s = 0; s < 2000; ++s) rt.train_step(sampler.sample(s));
    return infer_topk(rt, held_out, {.top_k = 100});
  }
};

const SmokeTask& smoke_task() {
  static const SmokeTask task;
  return task;
}

std::vector<RankedPredictions> smoke_models;

Outcome learning_smoke() {
  const auto& task = smoke_task();
  smoke_models.push_back(task.train_and_predict(1));
  const double mrr = mrr_at_10(smoke_models.front(), task.held_out);
  const double baseline = random_baseline_mrr(task.graph.entity_count);
  return {mrr >= 5.0 * baseline,
          fmt::format("TransE d=32 B=64 N=64 D=4, 2000 steps: held-out MRR@10 {:.4f} = {:.1f}x random {:.5f}", mrr,
                      mrr / baseline, baseline)};
}

Outcome ensemble_beats_members() {
  const auto& task = smoke_task();
  for (std::uint64_t seed = smoke_models.size() + 1; seed <= 5; ++seed) smoke_models.push_back(task.train_and_predict(seed));
  double best = 0.0;
  std::string members;
  for (const auto& m : smoke_models) {
    const double v = mrr_at_10(m, task.held_out);
    best = std::max(best, v);
    members += fmt::format("{}{:.4f}", members.empty() ? "" : " ", v);
  }
  const double fused = mrr_at_10(fuse(smoke_models, {}), task.held_out);
  return {fused >= best - 0.005,
          fmt::format("5 seeds, members [{}], fused {:.4f} vs best {:.4f}", members, fused, best)};
}

Outcome checkpoint_resume() {
  const auto g = generate_synthetic({.entity_count = 500, .relation_count = 8, .triple_count = 20000, .seed = 6,
                                     .feature_dim = 8});
  const auto p = partition_entities(g, 4, 2);
  const auto b = bucket_triples(g, p);
  const BessSampler sampler(g, p, b, {.micro_batch_size = 32, .negative_count = 32, .shard_count = 4, .seed = 4});
  ModelConfig m;
  m.score_fn = ScoreFunction::RotatE;
  m.embedding_dim = 16;
  m.feature_dim = 8;
  m.margin = 4.0;
  m.feature_dropout = 0.2;
  m.adversarial_temperature = 0.5;
  const TrainSchedule sched{.total_steps = 200, .initial_lr = 0.01};
  const RuntimeConfig rc{.workers = 4, .seed = 12};
  BessRuntime<float> full(g, m, sched, rc, p);
  for (std::uint64_t s = 0; s < 200; ++s) full.train_step(sampler.sample(s));

  std::vector<std::byte> saved;
  {
    BessRuntime<float> first(g, m, sched, rc, p);
    for (std::uint64_t s = 0; s < 87; ++s) first.train_step(sampler.sample(s));
    saved = first.save_checkpoint();
  }
  BessRuntime<float> resumed(g, m, sched, rc, p);
  resumed.load_checkpoint(saved);
  while (resumed.step() < 200) resumed.train_step(sampler.sample(resumed.step()));
  const bool same = resumed.save_checkpoint() == full.save_checkpoint();
  return {same, fmt::format("interrupted at step 87 of 200: final state {}", same ? "bit-identical" : "DIFFERS")};
}

Outcome cost_model_example() {
  const auto c = cost_model(512, 1024, 256, 768, 1.0, 1.0, 1e12);
  const bool ok = c.t_compute == 436207616.0 && c.t_comms == 1536.0 * 1024.0 && c.memory == 1536.0 * 1024.0;
  return {ok, fmt::format("B=512 N=1024 d=256 F=768: t_compute/c_compute = {:.0f}, t_comms/c_comms = {:.0f}",
                          c.t_compute, c.t_comms)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient oracle", gradient_oracle},
      {"D-invariance", d_invariance},
      {"distributed top-K oracle", distributed_topk},
      {"sampled-softmax exactness", sampled_softmax_exactness},
      {"cube-root sampler distribution", cube_root_sampler},
      {"balanced communication", balanced_communication},
      {"ensemble oracle", ensemble_oracle},
      {"MRR metric", mrr_fixtures},
      {"end-to-end learning smoke", learning_smoke},
      {"ensemble beats members", ensemble_beats_members},
      {"checkpoint/resume", checkpoint_resume},
      {"cost model", cost_model_example},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    fmt::print("{} criterion {:>2} {}: {} [{:.1f} s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
               o.detail, secs);
    std::fflush(stdout);
  }
  fmt::print("{} of {} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
