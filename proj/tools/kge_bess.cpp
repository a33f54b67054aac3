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

// kge-bess: command-line front end for ingest, training, inference,
// evaluation and ensembling.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bess/config.hpp"
#include "bess/ensemble.hpp"
#include "bess/inference.hpp"
#include "bess/kg_data.hpp"
#include "bess/runtime.hpp"
#include "bess/sampling.hpp"

namespace fs = std::filesystem;
using namespace bess;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> workers;
  std::optional<std::string> precision;
  std::string out;
};

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("kge-bess");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("KGE_LOG_LEVEL")) {
    const std::string v(env);
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "warn") spdlog::set_level(spdlog::level::warn);
    else if (v == "info") spdlog::set_level(spdlog::level::info);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else throw Error("config", "KGE_LOG_LEVEL must be one of error, warn, info, debug; got '" + v + "'");
  }
}

/// Config file (if any) with command-line overrides applied, validated.
RunConfig effective_config(const GlobalOptions& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  if (g.seed) c.runtime.seed = *g.seed;
  if (g.workers) c.runtime.workers = *g.workers;
  if (g.precision) c.runtime.precision = parse_precision(*g.precision);
  c.validate();
  return c;
}

KnowledgeGraph load_graph(const RunConfig& c) {
  require(!c.graph_path.empty(), "config", "data.graph is not set");
  auto g = ingest_triples(c.graph_path);
  if (c.features_path.empty()) {
    g.features = Matrix<float>(g.entity_count, 0);
  } else {
    g.features = read_features(c.features_path);
  }
  g.validate();
  return g;
}

fs::path out_dir(const GlobalOptions& g) {
  const fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, "io", "cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

std::string out_file(const GlobalOptions& g, const char* what) {
  require(!g.out.empty(), "usage", std::string("--out <file> is required for ") + what);
  return g.out;
}

/// Writes through a temporary so an interrupted write never clobbers the
/// previous file.
void write_atomically(const fs::path& path, std::span<const std::byte> bytes) {
  const auto tmp = fs::path(path.string() + ".tmp");
  write_file_bytes(tmp.string(), bytes, "checkpoint");
  std::error_code ec;
  fs::rename(tmp, path, ec);
  require(!ec, "checkpoint", "cannot move checkpoint into place: " + ec.message());
}

/// Everything a training-shaped command needs, for one storage precision.
template <class Real>
struct Session {
  RunConfig config;
  KnowledgeGraph graph;
  EntityPartition partition;
  TripleBuckets buckets;
  BessSampler sampler;
  BessRuntime<Real> runtime;

  Session(RunConfig c, KnowledgeGraph g)
      : config(std::move(c)),
        graph(std::move(g)),
        partition(partition_entities(graph, config.runtime.workers, config.runtime.seed)),
        buckets(bucket_triples(graph, partition)),
        sampler(graph, partition, buckets, config.effective_sampler()),
        runtime(graph, config.model, config.schedule, config.runtime, partition) {
    runtime.set_filter_false_negatives(config.sampler.filter_false_negatives);
  }
};

template <class Fn>
int with_session(RunConfig c, Fn&& fn) {
  auto g = load_graph(c);
  if (c.runtime.precision == Precision::Double) {
    auto s = std::make_unique<Session<double>>(std::move(c), std::move(g));
    return fn(*s);
  }
  auto s = std::make_unique<Session<float>>(std::move(c), std::move(g));
  return fn(*s);
}

// ---------------------------------------------------------------------------

struct IngestArgs {
  std::string triples;
  std::string features;
  std::optional<std::uint64_t> entity_count;
  std::optional<std::uint64_t> relation_count;
  bool synthetic = false;
  SyntheticSpec spec;
  std::uint64_t holdout = 0;
};

int cmd_ingest(const GlobalOptions& go, const IngestArgs& a) {
  const auto seed = go.seed.value_or(0);
  KnowledgeGraph g;
  if (a.synthetic) {
    auto spec = a.spec;
    spec.seed = seed;
    g = generate_synthetic(spec);
  } else {
    require(!a.triples.empty(), "usage", "ingest needs --triples <file> or --synthetic");
    g = ingest_triples(a.triples, {a.entity_count, a.relation_count});
    if (!a.features.empty()) g.features = read_features(a.features);
    g.validate();
  }
  std::vector<Query> held;
  if (a.holdout > 0) held = split_holdout(g, a.holdout, seed);

  const auto dir = out_dir(go);
  write_triples(g, (dir / "train.kgt").string());
  if (!g.features.empty()) {
    const auto p = go.precision ? parse_precision(*go.precision) : Precision::Single;
    write_features(g.features, (dir / "features.kgf").string(), p == Precision::Half ? Precision::Half : Precision::Single);
  }
  if (!held.empty()) write_queries(held, (dir / "valid.tsv").string());
  fmt::print("entities={} relations={} triples={} feature_dim={} holdout={}\n", g.entity_count, g.relation_count,
             g.triples.size(), g.feature_dim(), held.size());
  return 0;
}

int cmd_stats(const GlobalOptions& go, const std::string& graph_path, const std::vector<std::string>& query_specs) {
  const auto g = ingest_triples(graph_path);
  std::vector<NamedQuerySet> sets;
  for (const auto& spec : query_specs) {
    const auto eq = spec.find('=');
    require(eq != std::string::npos && eq > 0, "usage", "--queries expects name=path, got '" + spec + "'");
    sets.push_back({spec.substr(0, eq), read_queries(spec.substr(eq + 1))});
  }
  const auto report = split_stats(g, sets);
  if (go.out.empty()) {
    fmt::print("{}", report.training_tsv());
    return 0;
  }
  const auto dir = out_dir(go);
  detail::write_text((dir / "train_stats.tsv").string(), report.training_tsv(), "stats");
  for (std::size_t i = 0; i < sets.size(); ++i) {
    detail::write_text((dir / (sets[i].name + "_stats.tsv")).string(), report.query_set_tsv(i), "stats");
    fmt::print("{}: {} queries, tail coverage gap {:.6f}\n", sets[i].name, report.query_sets[i].size,
               report.query_sets[i].tail_coverage_gap);
  }
  return 0;
}

int cmd_partition_check(const GlobalOptions& go, const std::string& graph_path) {
  const auto g = ingest_triples(graph_path);
  const auto D = go.workers.value_or(1);
  const auto p = partition_entities(g, D, go.seed.value_or(0));
  const auto b = bucket_triples(g, p);
  fmt::print("shards={} rows_per_shard={} padding={}\n", D, p.shard_size(), p.padding_count(D - 1));
  std::uint64_t empty = 0;
  for (std::uint32_t i = 0; i < D; ++i) {
    std::string row;
    for (std::uint32_t j = 0; j < D; ++j) {
      const auto n = b.bucket(i, j).size();
      empty += n == 0;
      row += fmt::format("{}{}", j ? "\t" : "", n);
    }
    fmt::print("shard {} real={} buckets {}\n", i, p.real_count(i), row);
  }
  fmt::print("empty_buckets={}\n", empty);
  return 0;
}

int cmd_train(const GlobalOptions& go, const std::string& resume, std::optional<std::uint64_t> stop_after) {
  return with_session(effective_config(go), [&](auto& s) {
    auto& rt = s.runtime;
    const auto dir = out_dir(go);
    detail::write_text((dir / "config.txt").string(), format_run_config(s.config), "io");
    if (!resume.empty()) rt.load_checkpoint(read_file_bytes(resume, "checkpoint"));

    const auto train_queries = sample_training_queries(s.graph, s.config.train_eval_samples, s.config.runtime.seed);
    std::vector<Query> valid;
    if (!s.config.valid_path.empty()) valid = read_queries(s.config.valid_path);

    std::ofstream log(dir / "metrics.log", resume.empty() ? std::ios::trunc : std::ios::app);
    require(static_cast<bool>(log), "io", "cannot open metrics log in '" + dir.string() + "'");
    const auto checkpoint = dir / "checkpoint.kgc";
    const auto total = s.config.schedule.total_steps;
    const auto interval = s.config.schedule.eval_interval;

    double loss_sum = 0.0;
    double bytes_sum = 0.0;
    std::uint64_t window = 0;
    auto t0 = std::chrono::steady_clock::now();
    const auto stop = std::min(total, stop_after.value_or(total));
    while (rt.step() < stop) {
      const auto m = rt.train_step(s.sampler.sample(rt.step()));
      loss_sum += m.loss;
      bytes_sum += static_cast<double>(m.bytes);
      ++window;
      const auto step = rt.step();
      if ((interval > 0 && step % interval == 0) || step == total) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        MetricsRecord r;
        r.step = step;
        r.lr = m.lr;
        r.train_loss = loss_sum / static_cast<double>(window);
        r.triples_per_second = static_cast<double>(window * s.config.sampler.micro_batch_size *
                                                   s.config.runtime.workers) / std::max(secs, 1e-12);
        r.bytes_per_step = bytes_sum / static_cast<double>(window);
        if (!train_queries.empty()) r.train_mrr = evaluate_mrr(rt, train_queries, s.config.eval_query_batch);
        if (!valid.empty()) r.valid_mrr = evaluate_mrr(rt, valid, s.config.eval_query_batch);
        const auto line = format_metrics(r);
        log << line << '\n' << std::flush;
        fmt::print("{}\n", line);
        loss_sum = bytes_sum = 0.0;
        window = 0;
        t0 = std::chrono::steady_clock::now();
      }
      const auto every = s.config.checkpoint_interval;
      if (every > 0 && step % every == 0 && step != total) write_atomically(checkpoint, rt.save_checkpoint());
    }
    write_atomically(checkpoint, rt.save_checkpoint());
    spdlog::info("final checkpoint at step {} written to {}", rt.step(), checkpoint.string());
    return 0;
  });
}

int cmd_predict(const GlobalOptions& go, const std::string& checkpoint, const std::string& queries,
                std::size_t top_k, std::size_t query_batch) {
  const auto target = out_file(go, "predict");
  return with_session(effective_config(go), [&](auto& s) {
    s.runtime.load_checkpoint(read_file_bytes(checkpoint, "checkpoint"));
    const auto q = read_queries(queries);
    export_predictions(infer_topk(s.runtime, q, {.top_k = top_k, .query_batch = query_batch}), target);
    fmt::print("wrote {} ranked lists to {}\n", q.size(), target);
    return 0;
  });
}

int cmd_evaluate(const std::string& predictions, const std::string& labels) {
  const auto p = import_predictions(predictions);
  const auto q = read_queries(labels);
  fmt::print("MRR {:.6f}\n", mrr_at_10(p, q));
  return 0;
}

struct EnsembleArgs {
  std::vector<std::string> inputs;
  EnsembleConfig config;
  std::string labels;
  std::vector<std::string> groups;
  std::string ablation;
  bool sweep = false;
};

int cmd_ensemble(const GlobalOptions& go, const EnsembleArgs& a) {
  std::vector<RankedPredictions> models;
  for (const auto& path : a.inputs) models.push_back(import_predictions(path));
  const auto fused = fuse(models, a.config);
  if (!go.out.empty()) export_predictions(fused, go.out);
  if (a.labels.empty()) {
    require(a.groups.empty() && !a.sweep, "usage", "--groups and --sweep-power need --labels");
    return 0;
  }
  const auto labels = read_queries(a.labels);
  fmt::print("MRR {:.6f}\n", mrr_at_10(fused, labels));
  if (a.sweep) {
    for (const auto& r : sweep_power(models, labels, a.config)) fmt::print("power={:g} MRR {:.6f}\n", r.power, r.mrr);
  }
  if (!a.groups.empty()) {
    const auto table = format_ablation(ablate(models, a.groups, a.config, labels));
    if (a.ablation.empty()) {
      fmt::print("{}", table);
    } else {
      detail::write_text(a.ablation, table, "ensemble");
    }
  }
  return 0;
}

int cmd_benchmark(const GlobalOptions& go, std::uint64_t steps, std::uint64_t warmup) {
  auto c = effective_config(go);
  c.schedule.total_steps = std::max<std::uint64_t>(c.schedule.total_steps, steps + warmup);
  return with_session(c, [&](auto& s) {
    for (std::uint64_t k = 0; k < warmup; ++k) s.runtime.train_step(s.sampler.sample(s.runtime.step()));
    const auto r = benchmark_throughput(s.runtime, s.sampler, steps);
    fmt::print("steps={} triples_per_step={} triples_per_s={:.1f} mean_step_ms={:.3f} min_step_ms={:.3f} "
               "max_step_ms={:.3f} bytes_per_step={:.0f}\n",
               r.steps, r.triples_per_step, r.triples_per_second, r.mean_step_ms, r.min_step_ms, r.max_step_ms,
               r.bytes_per_step);
    return 0;
  });
}

int cmd_sweep(const GlobalOptions& go) {
  require(!go.config_path.empty(), "usage", "sweep needs --config <grid file>");
  const auto points = expand_sweep(detail::read_text(go.config_path, "config"));
  const auto dir = out_dir(go);
  std::string manifest = "name";
  if (!points.empty()) {
    for (const auto& [k, v] : points.front().varied) manifest += "\t" + k;
  }
  manifest += "\n";
  for (const auto& p : points) {
    detail::write_text((dir / (p.name + ".txt")).string(), format_run_config(p.config), "io");
    manifest += p.name;
    for (const auto& [k, v] : p.varied) manifest += "\t" + v;
    manifest += "\n";
  }
  detail::write_text((dir / "manifest.tsv").string(), manifest, "io");
  fmt::print("wrote {} configs to {}\n", points.size(), dir.string());
  return 0;
}

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed knowledge graph embedding training and inference"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions go;
  app.add_option("--config", go.config_path, "Run configuration file");
  app.add_option("--seed", go.seed, "Override runtime.seed");
  app.add_option("--workers", go.workers, "Override runtime.workers (D)");
  app.add_option("--precision", go.precision, "Override runtime.precision")
      ->check(CLI::IsMember({"half", "single", "double"}));
  app.add_option("--out", go.out, "Output file or directory");

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Validate a triples file or generate a synthetic graph");
  c_ingest->add_option("--triples", ingest.triples, "KGT triples file");
  c_ingest->add_option("--features", ingest.features, "KGF features file");
  c_ingest->add_option("--entity-count", ingest.entity_count, "Expected entity count");
  c_ingest->add_option("--relation-count", ingest.relation_count, "Expected relation count");
  c_ingest->add_flag("--synthetic", ingest.synthetic, "Generate a synthetic graph instead");
  c_ingest->add_option("--entities", ingest.spec.entity_count, "Synthetic entity count");
  c_ingest->add_option("--relations", ingest.spec.relation_count, "Synthetic relation count");
  c_ingest->add_option("--triple-count", ingest.spec.triple_count, "Synthetic triple count");
  c_ingest->add_option("--skew", ingest.spec.skew, "Synthetic relation power-law exponent");
  c_ingest->add_option("--feature-dim", ingest.spec.feature_dim, "Synthetic feature dimension");
  c_ingest->add_option("--holdout", ingest.holdout, "Hold out this many triples as labelled validation queries");

  std::string stats_graph;
  std::vector<std::string> stats_queries;
  auto* c_stats = app.add_subcommand("stats", "Relation frequency report");
  c_stats->add_option("--graph", stats_graph, "KGT triples file")->required();
  c_stats->add_option("--queries", stats_queries, "Query sets as name=path");

  std::string pc_graph;
  auto* c_pc = app.add_subcommand("partition-check", "Show shard sizes and bucket counts");
  c_pc->add_option("--graph", pc_graph, "KGT triples file")->required();

  std::string resume;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--resume", resume, "Checkpoint to resume from");
  std::optional<std::uint64_t> stop_after;
  c_train->add_option("--stop-after", stop_after, "Stop (and checkpoint) after this step; the schedule is unchanged");

  std::string ckpt, queries;
  std::size_t top_k = 100, query_batch = 64;
  auto* c_predict = app.add_subcommand("predict", "Top-K tail predictions for a query file");
  c_predict->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  c_predict->add_option("--queries", queries, "Queries TSV")->required();
  c_predict->add_option("--top-k", top_k, "List depth K");
  c_predict->add_option("--query-batch", query_batch, "Queries per worker per round");

  std::string eval_pred, eval_labels;
  auto* c_eval = app.add_subcommand("evaluate", "MRR@10 of a predictions file");
  c_eval->add_option("--predictions", eval_pred, "Predictions TSV")->required();
  c_eval->add_option("--queries", eval_labels, "Labelled queries TSV")->required();

  EnsembleArgs ens;
  auto* c_ens = app.add_subcommand("ensemble", "Power-rank fusion of prediction files");
  c_ens->add_option("--predictions", ens.inputs, "Predictions TSV files")->required();
  c_ens->add_option("--power", ens.config.power, "Rank power p");
  c_ens->add_option("--depth", ens.config.depth, "Ranks read from each model (K)");
  c_ens->add_flag("--allow-partial", ens.config.allow_partial, "Treat missing queries as all-absent");
  c_ens->add_option("--queries", ens.labels, "Labelled queries for MRR reporting");
  c_ens->add_option("--groups", ens.groups, "Group label per predictions file, for ablation")->delimiter(',');
  c_ens->add_option("--ablation", ens.ablation, "Write the ablation TSV here");
  c_ens->add_flag("--sweep-power", ens.sweep, "Report MRR over p in [-1, -0.5]");

  std::uint64_t bench_steps = 20, bench_warmup = 2;
  auto* c_bench = app.add_subcommand("benchmark", "Measure training throughput");
  c_bench->add_option("--steps", bench_steps, "Measured steps");
  c_bench->add_option("--warmup", bench_warmup, "Unmeasured warm-up steps");

  auto* c_sweep = app.add_subcommand("sweep", "Expand list-valued config keys into a directory of configs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error:usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    configure_logging();
    if (*c_ingest) return cmd_ingest(go, ingest);
    if (*c_stats) return cmd_stats(go, stats_graph, stats_queries);
    if (*c_pc) return cmd_partition_check(go, pc_graph);
    if (*c_train) return cmd_train(go, resume, stop_after);
    if (*c_predict) return cmd_predict(go, ckpt, queries, top_k, query_batch);
    if (*c_eval) return cmd_evaluate(eval_pred, eval_labels);
    if (*c_ens) return cmd_ensemble(go, ens);
    if (*c_bench) return cmd_benchmark(go, bench_steps, bench_warmup);
    if (*c_sweep) return cmd_sweep(go);
  } catch (const Error& e) {
    std::cerr << "error:" << e.category() << ": " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error:internal: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
