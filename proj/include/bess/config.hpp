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

// Run configuration: flat `key = value` text with section prefixes
// (data., model., sampler., schedule., runtime., eval.). Unknown keys,
// repeated keys and malformed values are hard errors.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "bess/common.hpp"
#include "bess/inference.hpp"
#include "bess/model.hpp"
#include "bess/optimizer.hpp"
#include "bess/runtime.hpp"
#include "bess/sampling.hpp"

namespace bess {

struct RunConfig {
  std::string graph_path;        // KGT training graph
  std::string features_path;     // KGF entity features; empty means no features
  std::string valid_path;        // labelled queries TSV; empty disables validation
  ModelConfig model;
  SamplerConfig sampler;         // shard_count and seed come from runtime
  TrainSchedule schedule;
  RuntimeConfig runtime;
  std::uint64_t checkpoint_interval = 0;  // 0 = final checkpoint only
  std::size_t train_eval_samples = 15000;
  std::size_t eval_query_batch = 64;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  /// Sampler settings with the runtime's D and seed filled in.
  SamplerConfig effective_sampler() const {
    auto s = sampler;
    s.shard_count = runtime.workers;
    s.seed = runtime.seed;
    return s;
  }

  void validate() const {
    model.validate();
    schedule.validate();
    runtime.validate();
    effective_sampler().validate();
    require(eval_query_batch >= 1, "config", "eval.query_batch must be positive");
  }
};

namespace detail {

template <class T>
T parse_config_value(std::string_view v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return std::string(v);
  } else if constexpr (std::is_same_v<T, bool>) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw Error("config", "expected true or false, got '" + std::string(v) + "'");
  } else if constexpr (std::is_same_v<T, ScoreFunction>) {
    return parse_score_function(v);
  } else if constexpr (std::is_same_v<T, LossFunction>) {
    return parse_loss_function(v);
  } else if constexpr (std::is_same_v<T, OptimizerKind>) {
    return parse_optimizer(v);
  } else if constexpr (std::is_same_v<T, LrDecay>) {
    return parse_lr_decay(v);
  } else if constexpr (std::is_same_v<T, Precision>) {
    return parse_precision(v);
  } else {
    T out{};
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    require(ec == std::errc() && ptr == end && !v.empty(), "config", "cannot parse '" + std::string(v) + "'");
    return out;
  }
}

template <class T>
std::string format_config_value(const T& x) {
  if constexpr (std::is_same_v<T, std::string>) {
    return x;
  } else if constexpr (std::is_same_v<T, bool>) {
    return x ? "true" : "false";
  } else if constexpr (std::is_enum_v<T>) {
    return std::string(to_string(x));
  } else {
    return fmt::format("{}", x);  // shortest round-trip form
  }
}

struct FieldBinding {
  std::function<void(std::string_view)> set;
  std::function<std::string()> get;
};

template <class T>
FieldBinding bind(T& field) {
  return {[&field](std::string_view v) { field = parse_config_value<T>(v); },
          [&field] { return format_config_value(field); }};
}

/// Every key, in serialisation order, bound to the fields of `c`.
inline std::vector<std::pair<std::string, FieldBinding>> config_fields(RunConfig& c) {
  auto& m = c.model;
  auto& s = c.sampler;
  auto& t = c.schedule;
  auto& r = c.runtime;
  return {
      {"data.graph", bind(c.graph_path)},
      {"data.features", bind(c.features_path)},
      {"data.valid", bind(c.valid_path)},
      {"model.score_fn", bind(m.score_fn)},
      {"model.distance_p", bind(m.distance_p)},
      {"model.embedding_dim", bind(m.embedding_dim)},
      {"model.feature_dim", bind(m.feature_dim)},
      {"model.margin", bind(m.margin)},
      {"model.adversarial_temperature", bind(m.adversarial_temperature)},
      {"model.loss", bind(m.loss)},
      {"model.lambda_t", bind(m.lambda_t)},
      {"model.lambda_s", bind(m.lambda_s)},
      {"model.lambda_f", bind(m.lambda_f)},
      {"model.reg_use_plain_norm", bind(m.reg_use_plain_norm)},
      {"model.feature_dropout", bind(m.feature_dropout)},
      {"model.tie_projections", bind(m.tie_projections)},
      {"model.init_std", bind(m.init_std)},
      {"sampler.micro_batch_size", bind(s.micro_batch_size)},
      {"sampler.negative_count", bind(s.negative_count)},
      {"sampler.cube_root_relation_sampling", bind(s.cube_root_relation_sampling)},
      {"sampler.filter_false_negatives", bind(s.filter_false_negatives)},
      {"sampler.global_relation_counts", bind(s.global_relation_counts)},
      {"schedule.total_steps", bind(t.total_steps)},
      {"schedule.lr", bind(t.initial_lr)},
      {"schedule.decay", bind(t.decay)},
      {"schedule.optimizer", bind(t.optimizer)},
      {"schedule.beta1", bind(t.beta1)},
      {"schedule.beta2", bind(t.beta2)},
      {"schedule.epsilon", bind(t.epsilon)},
      {"schedule.eval_interval", bind(t.eval_interval)},
      {"runtime.workers", bind(r.workers)},
      {"runtime.precision", bind(r.precision)},
      {"runtime.seed", bind(r.seed)},
      {"runtime.parallel", bind(r.parallel)},
      {"runtime.checkpoint_interval", bind(c.checkpoint_interval)},
      {"eval.train_samples", bind(c.train_eval_samples)},
      {"eval.query_batch", bind(c.eval_query_batch)},
  };
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct ConfigLine {
  std::size_t line = 0;
  std::string key;
  std::vector<std::string> values;  // more than one only in sweep files
};

inline std::vector<ConfigLine> split_config(std::string_view text) {
  std::vector<ConfigLine> out;
  std::size_t n = 0;
  for (auto raw : lines_of(text)) {
    ++n;
    auto line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string_view::npos, "config", fmt::format("line {}: expected 'key = value'", n));
    ConfigLine l{n, std::string(trim(line.substr(0, eq))), {}};
    auto rest = trim(line.substr(eq + 1));
    while (true) {
      const auto comma = rest.find(',');
      l.values.emplace_back(trim(rest.substr(0, comma)));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace detail

/// Applies `key = value` assignments on top of `base` (defaults when omitted).
inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
  auto fields = detail::config_fields(base);
  std::map<std::string, detail::FieldBinding*> by_key;
  for (auto& [k, b] : fields) by_key.emplace(k, &b);
  std::map<std::string, std::size_t> seen;
  for (const auto& l : detail::split_config(text)) {
    auto it = by_key.find(l.key);
    require(it != by_key.end(), "config", fmt::format("line {}: unknown key '{}'", l.line, l.key));
    auto [prev, fresh] = seen.emplace(l.key, l.line);
    require(fresh, "config", fmt::format("line {}: key '{}' already set on line {}", l.line, l.key, prev->second));
    require(l.values.size() == 1, "config",
            fmt::format("line {}: '{}' has a list value; expand it with the sweep command", l.line, l.key));
    try {
      it->second->set(l.values[0]);
    } catch (const Error& e) {
      throw Error("config", fmt::format("line {}: {}: {}", l.line, l.key, e.what()));
    }
  }
  base.validate();
  return base;
}

inline std::string format_run_config(const RunConfig& config) {
  auto copy = config;
  std::string out;
  for (auto& [k, b] : detail::config_fields(copy)) out += k + " = " + b.get() + "\n";
  return out;
}

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config(detail::read_text(path, "config"));
}

struct SweepPoint {
  std::string name;                                   // cfg_0000, cfg_0001, ...
  std::vector<std::pair<std::string, std::string>> varied;  // key, value
  RunConfig config;
};

/// Expands list-valued keys (`a, b, c`) into their Cartesian product; the
/// first list key varies slowest. Every point is validated.
inline std::vector<SweepPoint> expand_sweep(std::string_view text) {
  const auto lines = detail::split_config(text);
  std::vector<std::size_t> lists;
  std::size_t total = 1;
  for (std::size_t k = 0; k < lines.size(); ++k) {
    if (lines[k].values.size() > 1) {
      lists.push_back(k);
      total *= lines[k].values.size();
    }
  }
  std::vector<SweepPoint> out;
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::vector<std::size_t> pick(lines.size(), 0);
    std::size_t rem = idx;
    for (auto k = lists.rbegin(); k != lists.rend(); ++k) {
      pick[*k] = rem % lines[*k].values.size();
      rem /= lines[*k].values.size();
    }
    std::string single;
    SweepPoint p;
    p.name = fmt::format("cfg_{:04d}", idx);
    for (std::size_t k = 0; k < lines.size(); ++k) {
      std::string filler(lines[k].line - 1 - static_cast<std::size_t>(std::count(single.begin(), single.end(), '\n')),
                         '\n');
      single += filler + lines[k].key + " = " + lines[k].values[pick[k]] + "\n";
      if (lines[k].values.size() > 1) p.varied.emplace_back(lines[k].key, lines[k].values[pick[k]]);
    }
    try {
      p.config = parse_run_config(single);
    } catch (const Error& e) {
      throw Error("config", fmt::format("sweep point {}: {}", p.name, e.what()));
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace bess
