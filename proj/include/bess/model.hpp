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

// Encoder, scoring functions, losses and L3 regularisation with analytic
// gradients. Everything here is a pure function over caller-owned buffers
// and is templated on the compute type (float for training, double for
// reference checks).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bess/common.hpp"

namespace bess {

enum class ScoreFunction { TransE, TransH, RotatE, DistMult, ComplEx };
enum class LossFunction { LogSigmoid, SampledSoftmax };

inline std::string_view to_string(ScoreFunction f) {
  switch (f) {
    case ScoreFunction::TransE: return "TransE";
    case ScoreFunction::TransH: return "TransH";
    case ScoreFunction::RotatE: return "RotatE";
    case ScoreFunction::DistMult: return "DistMult";
    case ScoreFunction::ComplEx: return "ComplEx";
  }
  return "?";
}

inline ScoreFunction parse_score_function(std::string_view s) {
  for (auto f : {ScoreFunction::TransE, ScoreFunction::TransH, ScoreFunction::RotatE, ScoreFunction::DistMult,
                 ScoreFunction::ComplEx}) {
    if (s == to_string(f)) return f;
  }
  throw Error("config", "unknown score function '" + std::string(s) + "'");
}

inline std::string_view to_string(LossFunction l) {
  return l == LossFunction::LogSigmoid ? "LogSigmoid" : "SampledSoftmaxCE";
}

inline LossFunction parse_loss_function(std::string_view s) {
  if (s == "LogSigmoid") return LossFunction::LogSigmoid;
  if (s == "SampledSoftmaxCE") return LossFunction::SampledSoftmax;
  throw Error("config", "unknown loss '" + std::string(s) + "' (expected LogSigmoid|SampledSoftmaxCE)");
}

inline bool is_distance_based(ScoreFunction f) {
  return f == ScoreFunction::TransE || f == ScoreFunction::TransH || f == ScoreFunction::RotatE;
}

inline bool is_complex_valued(ScoreFunction f) {
  return f == ScoreFunction::RotatE || f == ScoreFunction::ComplEx;
}

struct ModelConfig {
  ScoreFunction score_fn = ScoreFunction::TransE;
  int distance_p = 2;
  std::size_t embedding_dim = 32;
  std::size_t feature_dim = 16;
  double margin = 0.0;
  double adversarial_temperature = 0.0;
  LossFunction loss = LossFunction::LogSigmoid;
  double lambda_t = 0.0;
  double lambda_s = 0.0;
  double lambda_f = 0.0;
  bool reg_use_plain_norm = false;
  double feature_dropout = 0.0;
  bool tie_projections = false;
  double init_std = 0.0;  // 0 = 1/sqrt(embedding_dim)

  std::size_t relation_dim() const {
    return score_fn == ScoreFunction::RotatE ? embedding_dim / 2 : embedding_dim;
  }
  bool uses_normals() const { return score_fn == ScoreFunction::TransH; }
  double effective_init_std() const {
    return init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(embedding_dim));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  void validate() const {
    require(embedding_dim >= 1, "config", "model.embedding_dim must be >= 1");
    require(!is_complex_valued(score_fn) || embedding_dim % 2 == 0, "config",
            "model.embedding_dim must be even for " + std::string(to_string(score_fn)));
    require(distance_p == 1 || distance_p == 2, "config", "model.distance_p must be 1 or 2");
    require(margin >= 0.0, "config", "model.margin must be >= 0");
    require(is_distance_based(score_fn) || margin == 0.0, "config",
            "model.margin must be 0 for " + std::string(to_string(score_fn)));
    require(adversarial_temperature >= 0.0, "config", "model.adversarial_temperature must be >= 0");
    require(lambda_t >= 0.0 && lambda_s >= 0.0 && lambda_f >= 0.0, "config", "model.lambda_* must be >= 0");
    require(feature_dropout >= 0.0 && feature_dropout < 1.0, "config", "model.feature_dropout must be in [0, 1)");
    require(init_std >= 0.0, "config", "model.init_std must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Parameters of a whole model, indexed by global entity / relation id. The
// distributed runtime holds the same data sharded; this layout is used for
// export, checkpoints and single-process reference paths.

template <class Real>
struct ModelParameters {
  Matrix<Real> entity;           // |E| x d shallow embeddings
  Matrix<Real> relations;        // |R| x k
  Matrix<Real> normals;          // |R| x d, TransH only
  Matrix<Real> head_projection;  // d x F
  Matrix<Real> tail_projection;  // d x F, empty when tied

  const Matrix<Real>& tail_projection_or_head() const {
    return tail_projection.empty() ? head_projection : tail_projection;
  }
  friend bool operator==(const ModelParameters&, const ModelParameters&) = default;
};

/// Seeded initialisation. Entity rows depend only on (seed, entity id), so
/// any sharding of the table initialises identically.
template <class Real>
void init_entity_row(const ModelConfig& cfg, std::uint64_t seed, EntityId e, std::span<Real> row) {
  auto rng = derive_rng(seed, 0xe7171ULL, e);
  std::normal_distribution<double> normal(0.0, cfg.effective_init_std());
  for (auto& v : row) v = static_cast<Real>(normal(rng));
}

template <class Real>
void init_small_parameters(const ModelConfig& cfg, std::uint64_t relation_count, std::uint64_t seed,
                           ModelParameters<Real>& p) {
  const auto d = cfg.embedding_dim;
  const auto k = cfg.relation_dim();
  const auto F = cfg.feature_dim;
  const double sd = cfg.effective_init_std();

  p.relations = Matrix<Real>(relation_count, k);
  for (std::uint64_t r = 0; r < relation_count; ++r) {
    auto rng = derive_rng(seed, 0x7e1ULL, r);
    if (cfg.score_fn == ScoreFunction::RotatE) {
      std::uniform_real_distribution<double> phase(-std::numbers::pi, std::numbers::pi);
      for (auto& v : p.relations.row(r)) v = static_cast<Real>(phase(rng));
    } else {
      std::normal_distribution<double> normal(0.0, sd);
      for (auto& v : p.relations.row(r)) v = static_cast<Real>(normal(rng));
    }
  }
  p.normals = Matrix<Real>();
  if (cfg.uses_normals()) {
    p.normals = Matrix<Real>(relation_count, d);
    for (std::uint64_t r = 0; r < relation_count; ++r) {
      auto rng = derive_rng(seed, 0x40e3ULL, r);
      std::normal_distribution<double> normal(0.0, 1.0);
      for (auto& v : p.normals.row(r)) v = static_cast<Real>(normal(rng));
    }
  }
  const double proj_sd = F ? sd / std::sqrt(static_cast<double>(F)) : 0.0;
  auto init_projection = [&](std::uint64_t tag) {
    Matrix<Real> m(d, F);
    auto rng = derive_rng(seed, 0x9a0ULL, tag);
    std::normal_distribution<double> normal(0.0, proj_sd);
    for (auto& v : m.flat()) v = static_cast<Real>(normal(rng));
    return m;
  };
  p.head_projection = init_projection(0);
  p.tail_projection = cfg.tie_projections ? Matrix<Real>() : init_projection(1);
}

template <class Real>
ModelParameters<Real> init_parameters(const ModelConfig& cfg, std::uint64_t entity_count,
                                      std::uint64_t relation_count, std::uint64_t seed) {
  ModelParameters<Real> p;
  p.entity = Matrix<Real>(entity_count, cfg.embedding_dim);
  for (std::uint64_t e = 0; e < entity_count; ++e) {
    init_entity_row<Real>(cfg, seed, static_cast<EntityId>(e), p.entity.row(e));
  }
  init_small_parameters(cfg, relation_count, seed, p);
  return p;
}

// ---------------------------------------------------------------------------
// Encoder: e = e_S + dropout(M e_F).

/// out = M * features.
template <class Real>
void project(const Matrix<Real>& m, std::span<const Real> features, std::span<Real> out) {
  require(features.size() == m.cols() && out.size() == m.rows(), "model", "projection shape mismatch");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Real acc = 0;
    const auto row = m.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * features[c];
    out[i] = acc;
  }
}

/// Writes e_S + mask ⊙ (M e_F) to `out`; `dropout_scale` may be empty (no
/// dropout). Returns nothing; `projected` receives mask ⊙ (M e_F).
template <class Real>
void encode_entity(std::span<const Real> shallow, std::span<const Real> features, const Matrix<Real>& projection,
                   std::span<const Real> dropout_scale, std::span<Real> projected, std::span<Real> out) {
  require(shallow.size() == out.size() && projected.size() == out.size(), "model", "encoder shape mismatch");
  require(dropout_scale.empty() || dropout_scale.size() == out.size(), "model", "dropout mask shape mismatch");
  if (projection.cols() == 0) {
    std::fill(projected.begin(), projected.end(), Real{0});
  } else {
    project(projection, features, projected);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!dropout_scale.empty()) projected[i] *= dropout_scale[i];
    out[i] = shallow[i] + projected[i];
  }
}

template <class Real>
std::vector<Real> encode_entity(std::span<const Real> shallow, std::span<const Real> features,
                                const Matrix<Real>& projection, std::span<const Real> dropout_scale = {}) {
  std::vector<Real> projected(shallow.size());
  std::vector<Real> out(shallow.size());
  encode_entity<Real>(shallow, features, projection, dropout_scale, projected, out);
  return out;
}

/// Inverted-dropout scales (0 or 1/(1-rate)) for one row, a pure function of
/// the key tuple so the mask is reproducible from the run seed.
template <class Real, class... Keys>
void dropout_row(double rate, std::span<Real> out, std::uint64_t seed, Keys... keys) {
  const Real keep = static_cast<Real>(1.0 / (1.0 - rate));
  const auto base = mix_keys(seed, keys...);
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c] = hash_to_unit(splitmix64(base ^ (c * 0x9e3779b97f4a7c15ULL))) < rate ? Real{0} : keep;
  }
}

// ---------------------------------------------------------------------------
// Scoring functions.
//
// Scores are evaluated in two stages: a per-(head, relation) "prepared
// query" q, then a cheap comparison of q against each candidate tail. This
// lets one query be scored against many shared negatives at O(d) each.
//
//   TransE    q = h + r                 f = -|q - t|_p
//   TransH    q = h⊥ + r, u = w/|w|     f = -|q - (t - (u·t)u)|_p
//   RotatE    q = h ∘ e^{i r}           f = -|q - t|_p  (complex modulus)
//   DistMult  q = h ∘ r                 f = <q, t>
//   ComplEx   q = h ∘ r  (complex)      f = Re <q, conj(t)>
//
// Complex vectors use interleaved (re, im) pairs.

template <class Real>
struct PreparedQuery {
  std::vector<Real> q;
  std::vector<Real> unit_normal;  // TransH
  Real normal_norm = 0;           // TransH, |w| before normalisation
};

template <class Real>
void prepare_query(ScoreFunction fn, std::span<const Real> h, std::span<const Real> r, std::span<const Real> w,
                   PreparedQuery<Real>& out) {
  const std::size_t d = h.size();
  out.q.resize(d);
  switch (fn) {
    case ScoreFunction::TransE:
      for (std::size_t i = 0; i < d; ++i) out.q[i] = h[i] + r[i];
      break;
    case ScoreFunction::TransH: {
      Real nn = 0;
      for (auto v : w) nn += v * v;
      out.normal_norm = std::sqrt(nn);
      out.unit_normal.resize(d);
      for (std::size_t i = 0; i < d; ++i) out.unit_normal[i] = w[i] / out.normal_norm;
      Real uh = 0;
      for (std::size_t i = 0; i < d; ++i) uh += out.unit_normal[i] * h[i];
      for (std::size_t i = 0; i < d; ++i) out.q[i] = h[i] - uh * out.unit_normal[i] + r[i];
      break;
    }
    case ScoreFunction::RotatE:
      for (std::size_t j = 0; j < d / 2; ++j) {
        const Real c = std::cos(r[j]);
        const Real s = std::sin(r[j]);
        const Real hr = h[2 * j];
        const Real hi = h[2 * j + 1];
        out.q[2 * j] = hr * c - hi * s;
        out.q[2 * j + 1] = hr * s + hi * c;
      }
      break;
    case ScoreFunction::DistMult:
      for (std::size_t i = 0; i < d; ++i) out.q[i] = h[i] * r[i];
      break;
    case ScoreFunction::ComplEx:
      for (std::size_t j = 0; j < d / 2; ++j) {
        const Real hr = h[2 * j], hi = h[2 * j + 1];
        const Real rr = r[2 * j], ri = r[2 * j + 1];
        out.q[2 * j] = hr * rr - hi * ri;
        out.q[2 * j + 1] = hr * ri + hi * rr;
      }
      break;
  }
}

namespace detail {

/// Difference vector v = q - t' where t' is t projected for TransH.
template <class Real>
void distance_vector(ScoreFunction fn, const PreparedQuery<Real>& pq, std::span<const Real> t, std::span<Real> v) {
  const std::size_t d = t.size();
  if (fn == ScoreFunction::TransH) {
    Real ut = 0;
    for (std::size_t i = 0; i < d; ++i) ut += pq.unit_normal[i] * t[i];
    for (std::size_t i = 0; i < d; ++i) v[i] = pq.q[i] - t[i] + ut * pq.unit_normal[i];
  } else {
    for (std::size_t i = 0; i < d; ++i) v[i] = pq.q[i] - t[i];
  }
}

template <class Real>
Real negative_distance(ScoreFunction fn, int p, std::span<const Real> v) {
  Real acc = 0;
  if (fn == ScoreFunction::RotatE && p == 1) {
    for (std::size_t j = 0; j + 1 < v.size(); j += 2) acc += std::hypot(v[j], v[j + 1]);
    return -acc;
  }
  if (p == 1) {
    for (auto x : v) acc += std::abs(x);
    return -acc;
  }
  for (auto x : v) acc += x * x;
  return -std::sqrt(acc);
}

/// g = upstream * d(-|v|_p)/dv, written in place over v.
template <class Real>
void negative_distance_grad_inplace(ScoreFunction fn, int p, Real upstream, std::span<Real> v) {
  if (fn == ScoreFunction::RotatE && p == 1) {
    for (std::size_t j = 0; j + 1 < v.size(); j += 2) {
      const Real m = std::hypot(v[j], v[j + 1]);
      const Real s = m > 0 ? -upstream / m : Real{0};
      v[j] *= s;
      v[j + 1] *= s;
    }
    return;
  }
  if (p == 1) {
    for (auto& x : v) x = x > 0 ? -upstream : (x < 0 ? upstream : Real{0});
    return;
  }
  Real nn = 0;
  for (auto x : v) nn += x * x;
  const Real n = std::sqrt(nn);
  const Real s = n > 0 ? -upstream / n : Real{0};
  for (auto& x : v) x *= s;
}

}  // namespace detail

/// f(q, t). `scratch` must have t.size() elements (distance functions only).
template <class Real>
Real score_prepared(ScoreFunction fn, int p, const PreparedQuery<Real>& pq, std::span<const Real> t,
                    std::span<Real> scratch) {
  const std::size_t d = t.size();
  switch (fn) {
    case ScoreFunction::TransE:
    case ScoreFunction::TransH:
    case ScoreFunction::RotatE:
      detail::distance_vector(fn, pq, t, scratch);
      return detail::negative_distance<Real>(fn, p, scratch);
    case ScoreFunction::DistMult:
    case ScoreFunction::ComplEx: {
      // Re<q, conj t> with interleaved pairs is the plain dot product.
      Real acc = 0;
      for (std::size_t i = 0; i < d; ++i) acc += pq.q[i] * t[i];
      return acc;
    }
  }
  return 0;
}

/// Accumulates upstream * df/dq into dq, df/dt into dt and (TransH) df/du
/// into du.
template <class Real>
void score_prepared_backward(ScoreFunction fn, int p, const PreparedQuery<Real>& pq, std::span<const Real> t,
                             Real upstream, std::span<Real> dq, std::span<Real> dt, std::span<Real> du,
                             std::span<Real> scratch) {
  const std::size_t d = t.size();
  switch (fn) {
    case ScoreFunction::TransE:
    case ScoreFunction::RotatE:
      detail::distance_vector(fn, pq, t, scratch);
      detail::negative_distance_grad_inplace<Real>(fn, p, upstream, scratch);
      for (std::size_t i = 0; i < d; ++i) {
        dq[i] += scratch[i];
        dt[i] -= scratch[i];
      }
      break;
    case ScoreFunction::TransH: {
      // v = q - t + (u·t)u
      const auto& u = pq.unit_normal;
      Real ut = 0;
      for (std::size_t i = 0; i < d; ++i) ut += u[i] * t[i];
      detail::distance_vector(fn, pq, t, scratch);
      detail::negative_distance_grad_inplace<Real>(fn, p, upstream, scratch);
      Real ug = 0;
      for (std::size_t i = 0; i < d; ++i) ug += u[i] * scratch[i];
      for (std::size_t i = 0; i < d; ++i) {
        dq[i] += scratch[i];
        dt[i] += -scratch[i] + ug * u[i];
        du[i] += ut * scratch[i] + ug * t[i];
      }
      break;
    }
    case ScoreFunction::DistMult:
    case ScoreFunction::ComplEx:
      for (std::size_t i = 0; i < d; ++i) {
        dq[i] += upstream * t[i];
        dt[i] += upstream * pq.q[i];
      }
      break;
  }
}

/// Propagates dq (and du for TransH) back to h, r and the raw normal w.
template <class Real>
void prepare_query_backward(ScoreFunction fn, std::span<const Real> h, std::span<const Real> r,
                            const PreparedQuery<Real>& pq, std::span<const Real> dq, std::span<const Real> du_in,
                            std::span<Real> dh, std::span<Real> dr, std::span<Real> dw) {
  const std::size_t d = h.size();
  switch (fn) {
    case ScoreFunction::TransE:
      for (std::size_t i = 0; i < d; ++i) {
        dh[i] += dq[i];
        dr[i] += dq[i];
      }
      break;
    case ScoreFunction::TransH: {
      // q = h - (u·h)u + r
      const auto& u = pq.unit_normal;
      Real uh = 0, udq = 0;
      for (std::size_t i = 0; i < d; ++i) {
        uh += u[i] * h[i];
        udq += u[i] * dq[i];
      }
      std::vector<Real> du(du_in.begin(), du_in.end());
      for (std::size_t i = 0; i < d; ++i) {
        dh[i] += dq[i] - udq * u[i];
        dr[i] += dq[i];
        du[i] -= uh * dq[i] + udq * h[i];
      }
      // u = w / |w|  =>  dw = (du - (u·du)u) / |w|
      Real udu = 0;
      for (std::size_t i = 0; i < d; ++i) udu += u[i] * du[i];
      for (std::size_t i = 0; i < d; ++i) dw[i] += (du[i] - udu * u[i]) / pq.normal_norm;
      break;
    }
    case ScoreFunction::RotatE:
      for (std::size_t j = 0; j < d / 2; ++j) {
        const Real c = std::cos(r[j]);
        const Real s = std::sin(r[j]);
        const Real gr = dq[2 * j], gi = dq[2 * j + 1];
        dh[2 * j] += gr * c + gi * s;
        dh[2 * j + 1] += -gr * s + gi * c;
        dr[j] += -gr * pq.q[2 * j + 1] + gi * pq.q[2 * j];
      }
      break;
    case ScoreFunction::DistMult:
      for (std::size_t i = 0; i < d; ++i) {
        dh[i] += dq[i] * r[i];
        dr[i] += dq[i] * h[i];
      }
      break;
    case ScoreFunction::ComplEx:
      for (std::size_t j = 0; j < d / 2; ++j) {
        const Real hr = h[2 * j], hi = h[2 * j + 1];
        const Real rr = r[2 * j], ri = r[2 * j + 1];
        const Real gr = dq[2 * j], gi = dq[2 * j + 1];
        dh[2 * j] += gr * rr + gi * ri;
        dh[2 * j + 1] += -gr * ri + gi * rr;
        dr[2 * j] += gr * hr + gi * hi;
        dr[2 * j + 1] += -gr * hi + gi * hr;
      }
      break;
  }
}

/// One-shot f(h, r, t). `w` is the TransH normal (ignored otherwise).
template <class Real>
Real score(ScoreFunction fn, std::span<const Real> h, std::span<const Real> r, std::span<const Real> t,
           std::span<const Real> w = {}, int distance_p = 2) {
  const std::size_t d = h.size();
  require(t.size() == d, "model", "head/tail dimension mismatch");
  require(!is_complex_valued(fn) || d % 2 == 0, "model", "complex scores need an even dimension");
  const std::size_t k = fn == ScoreFunction::RotatE ? d / 2 : d;
  require(r.size() == k, "model", "relation dimension mismatch");
  require(fn != ScoreFunction::TransH || w.size() == d, "model", "TransH needs a normal of dimension d");
  PreparedQuery<Real> pq;
  prepare_query<Real>(fn, h, r, w, pq);
  std::vector<Real> scratch(d);
  return score_prepared<Real>(fn, distance_p, pq, t, scratch);
}

// ---------------------------------------------------------------------------
// Losses. Both return the per-positive loss and dL/d(score) for the positive
// and each negative. `mask` (optional, 0/1 per negative) removes negatives.

template <class Real>
struct LossTerms {
  Real loss = 0;
  Real d_positive = 0;
  std::vector<Real> d_negative;
  std::vector<Real> weights;  // self-adversarial weights (log-sigmoid only)
};

/// log σ(x) = -softplus(-x).
template <class Real>
Real log_sigmoid(Real x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

template <class Real>
Real sigmoid(Real x) {
  if (x >= 0) return Real{1} / (Real{1} + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real{1} + e);
}

/// Self-adversarial weights softmax(a·f) over the unmasked negatives.
template <class Real>
std::vector<Real> self_adversarial_weights(std::span<const Real> neg, Real temperature,
                                           std::span<const std::uint8_t> mask = {}) {
  std::vector<Real> w(neg.size(), Real{0});
  Real mx = -std::numeric_limits<Real>::infinity();
  for (std::size_t i = 0; i < neg.size(); ++i) {
    if (mask.empty() || mask[i]) mx = std::max(mx, temperature * neg[i]);
  }
  Real total = 0;
  for (std::size_t i = 0; i < neg.size(); ++i) {
    if (mask.empty() || mask[i]) {
      w[i] = std::exp(temperature * neg[i] - mx);
      total += w[i];
    }
  }
  if (total > 0) {
    for (auto& v : w) v /= total;
  }
  return w;
}

template <class Real>
LossTerms<Real> log_sigmoid_loss(Real positive, std::span<const Real> negatives, Real margin, Real temperature,
                                 std::span<const std::uint8_t> mask = {}) {
  require(!negatives.empty(), "model", "log-sigmoid loss needs at least one negative");
  require(mask.empty() || mask.size() == negatives.size(), "model", "negative mask size mismatch");
  LossTerms<Real> out;
  out.weights = self_adversarial_weights<Real>(negatives, temperature, mask);
  out.loss = -log_sigmoid(margin + positive);
  out.d_positive = -sigmoid(-margin - positive);
  out.d_negative.assign(negatives.size(), Real{0});
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    if (out.weights[i] == Real{0}) continue;
    out.loss -= out.weights[i] * log_sigmoid(-margin - negatives[i]);
    out.d_negative[i] = out.weights[i] * sigmoid(margin + negatives[i]);
  }
  return out;
}

/// L = -f + log(e^f + Σ e^{f_i + c}), c = log((|E| - 1) / N') where N' is the
/// number of unmasked negatives.
template <class Real>
LossTerms<Real> sampled_softmax_ce_loss(Real positive, std::span<const Real> negatives, std::uint64_t entity_count,
                                        std::span<const std::uint8_t> mask = {}) {
  require(!negatives.empty(), "model", "sampled softmax loss needs at least one negative");
  require(entity_count >= 2, "model", "sampled softmax loss needs entity_count >= 2");
  require(mask.empty() || mask.size() == negatives.size(), "model", "negative mask size mismatch");
  std::size_t active = 0;
  for (std::size_t i = 0; i < negatives.size(); ++i) active += mask.empty() || mask[i];

  LossTerms<Real> out;
  out.d_negative.assign(negatives.size(), Real{0});
  if (active == 0) return out;  // only the target logit remains: loss 0

  const Real c = static_cast<Real>(std::log(static_cast<double>(entity_count - 1) / static_cast<double>(active)));
  Real mx = positive;
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    if (mask.empty() || mask[i]) mx = std::max(mx, negatives[i] + c);
  }
  Real total = std::exp(positive - mx);
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    if (mask.empty() || mask[i]) {
      out.d_negative[i] = std::exp(negatives[i] + c - mx);
      total += out.d_negative[i];
    }
  }
  const Real lse = mx + std::log(total);
  out.loss = lse - positive;
  out.d_positive = std::exp(positive - mx) / total - Real{1};
  for (auto& g : out.d_negative) g /= total;
  return out;
}

// ---------------------------------------------------------------------------
// L3 regularisation. Default is the cubed norm Σ|x|³; `plain` selects the
// norm itself, (Σ|x|³)^{1/3}.

template <class Real>
Real l3_penalty(std::span<const Real> x, bool plain) {
  Real acc = 0;
  for (auto v : x) acc += std::abs(v) * v * v;
  return plain ? std::cbrt(acc) : acc;
}

/// grad += scale * d penalty / dx.
template <class Real>
void l3_penalty_grad(std::span<const Real> x, bool plain, Real scale, std::span<Real> grad) {
  if (scale == Real{0}) return;
  if (!plain) {
    for (std::size_t i = 0; i < x.size(); ++i) grad[i] += scale * Real{3} * x[i] * std::abs(x[i]);
    return;
  }
  // d/dx (Σ|x|³)^{1/3} = x|x| / (Σ|x|³)^{2/3}
  Real acc = 0;
  for (auto v : x) acc += std::abs(v) * v * v;
  if (acc <= Real{0}) return;
  const Real denom = std::cbrt(acc * acc);
  for (std::size_t i = 0; i < x.size(); ++i) grad[i] += scale * x[i] * std::abs(x[i]) / denom;
}

/// Rows of the nine vector families entering the regulariser for one
/// micro-batch: final embeddings, shallow parts and projected features for
/// heads, positive tails and shared negative tails.
template <class Real>
struct RegulariserInputs {
  const Matrix<Real>* heads = nullptr;
  const Matrix<Real>* tails = nullptr;
  const Matrix<Real>* negatives = nullptr;
  const Matrix<Real>* head_shallow = nullptr;
  const Matrix<Real>* tail_shallow = nullptr;
  const Matrix<Real>* negative_shallow = nullptr;
  const Matrix<Real>* head_projected = nullptr;
  const Matrix<Real>* tail_projected = nullptr;
  const Matrix<Real>* negative_projected = nullptr;
};

/// λ_T Ω_T + λ_S Ω_S + λ_F Ω_F (unscaled by batch size).
template <class Real>
Real l3_regulariser(const RegulariserInputs<Real>& in, Real lambda_t, Real lambda_s, Real lambda_f,
                    bool plain = false) {
  auto sum_rows = [plain](const Matrix<Real>* m) {
    Real acc = 0;
    if (m == nullptr) return acc;
    for (std::size_t r = 0; r < m->rows(); ++r) acc += l3_penalty<Real>(m->row(r), plain);
    return acc;
  };
  const Real omega_t = sum_rows(in.heads) + sum_rows(in.tails) + sum_rows(in.negatives);
  const Real omega_s = sum_rows(in.head_shallow) + sum_rows(in.tail_shallow) + sum_rows(in.negative_shallow);
  const Real omega_f = sum_rows(in.head_projected) + sum_rows(in.tail_projected) + sum_rows(in.negative_projected);
  return lambda_t * omega_t + lambda_s * omega_s + lambda_f * omega_f;
}

// ---------------------------------------------------------------------------
// Micro-batch forward/backward with shared negatives.

template <class Real>
struct MicroBatchInputs {
  Matrix<Real> head_shallow;       // B x d
  Matrix<Real> head_features;      // B x F
  Matrix<Real> tail_shallow;       // B x d
  Matrix<Real> tail_features;      // B x F
  Matrix<Real> negative_shallow;   // N x d
  Matrix<Real> negative_features;  // N x F
  Matrix<Real> relations;          // B x k
  Matrix<Real> normals;            // B x d (TransH), else empty
  // Inverted-dropout scales; empty means no dropout.
  Matrix<Real> head_dropout;      // B x d
  Matrix<Real> tail_dropout;      // B x d
  Matrix<Real> negative_dropout;  // N x d
  Matrix<std::uint8_t> negative_mask;  // B x N, empty means all ones
  std::uint64_t entity_count = 0;      // |E|, for the sampled-softmax correction

  std::size_t batch_size() const { return head_shallow.rows(); }
  std::size_t negative_count() const { return negative_shallow.rows(); }
};

/// Forward intermediates retained for the backward pass.
template <class Real>
struct ScoredBatch {
  Matrix<Real> heads, tails, negatives;                                 // final embeddings
  Matrix<Real> head_projected, tail_projected, negative_projected;     // after dropout
  std::vector<PreparedQuery<Real>> queries;
  std::vector<Real> positive_scores;  // B
  Matrix<Real> negative_scores;       // B x N
};

template <class Real>
struct MicroBatchGradients {
  Real loss = 0;             // (Σ_b L_b + regulariser) / B
  Real regulariser = 0;      // unscaled regulariser value
  Matrix<Real> head_shallow;      // B x d
  Matrix<Real> tail_shallow;      // B x d
  Matrix<Real> negative_shallow;  // N x d
  Matrix<Real> relations;         // B x k
  Matrix<Real> normals;           // B x d (TransH)
  Matrix<Real> head_projection;   // d x F (includes tail part when tied)
  Matrix<Real> tail_projection;   // d x F, empty when tied
};

namespace detail {

template <class Real>
void check_inputs(const ModelConfig& cfg, const MicroBatchInputs<Real>& in, const Matrix<Real>& head_projection,
                  const Matrix<Real>& tail_projection) {
  const auto B = in.batch_size();
  const auto N = in.negative_count();
  const auto d = cfg.embedding_dim;
  const auto F = cfg.feature_dim;
  require(B >= 1, "model", "micro-batch must contain at least one positive");
  require(N >= 1, "model", "micro-batch must contain at least one negative");
  auto shape = [](const Matrix<Real>& m, std::size_t r, std::size_t c) { return m.rows() == r && m.cols() == c; };
  require(shape(in.head_shallow, B, d) && shape(in.tail_shallow, B, d) && shape(in.negative_shallow, N, d), "model",
          "shallow embedding shape mismatch");
  require(shape(in.head_features, B, F) && shape(in.tail_features, B, F) && shape(in.negative_features, N, F),
          "model", "feature shape mismatch");
  require(shape(in.relations, B, cfg.relation_dim()), "model", "relation shape mismatch");
  require(!cfg.uses_normals() || shape(in.normals, B, d), "model", "normal shape mismatch");
  require(shape(head_projection, d, F) && shape(tail_projection, d, F), "model", "projection shape mismatch");
  require(in.head_dropout.empty() || shape(in.head_dropout, B, d), "model", "head dropout shape mismatch");
  require(in.tail_dropout.empty() || shape(in.tail_dropout, B, d), "model", "tail dropout shape mismatch");
  require(in.negative_dropout.empty() || shape(in.negative_dropout, N, d), "model",
          "negative dropout shape mismatch");
  require(in.negative_mask.empty() || (in.negative_mask.rows() == B && in.negative_mask.cols() == N), "model",
          "negative mask shape mismatch");
}

template <class Real>
std::span<const Real> optional_row(const Matrix<Real>& m, std::size_t r) {
  return m.empty() ? std::span<const Real>{} : m.row(r);
}

}  // namespace detail

template <class Real>
ScoredBatch<Real> score_batch(const ModelConfig& cfg, const MicroBatchInputs<Real>& in,
                              const Matrix<Real>& head_projection, const Matrix<Real>& tail_projection) {
  detail::check_inputs(cfg, in, head_projection, tail_projection);
  const auto B = in.batch_size();
  const auto N = in.negative_count();
  const auto d = cfg.embedding_dim;

  ScoredBatch<Real> s;
  s.heads = Matrix<Real>(B, d);
  s.tails = Matrix<Real>(B, d);
  s.negatives = Matrix<Real>(N, d);
  s.head_projected = Matrix<Real>(B, d);
  s.tail_projected = Matrix<Real>(B, d);
  s.negative_projected = Matrix<Real>(N, d);
  for (std::size_t b = 0; b < B; ++b) {
    encode_entity<Real>(in.head_shallow.row(b), in.head_features.row(b), head_projection,
                        detail::optional_row(in.head_dropout, b), s.head_projected.row(b), s.heads.row(b));
    encode_entity<Real>(in.tail_shallow.row(b), in.tail_features.row(b), tail_projection,
                        detail::optional_row(in.tail_dropout, b), s.tail_projected.row(b), s.tails.row(b));
  }
  for (std::size_t i = 0; i < N; ++i) {
    encode_entity<Real>(in.negative_shallow.row(i), in.negative_features.row(i), tail_projection,
                        detail::optional_row(in.negative_dropout, i), s.negative_projected.row(i),
                        s.negatives.row(i));
  }

  s.queries.resize(B);
  s.positive_scores.resize(B);
  s.negative_scores = Matrix<Real>(B, N);
  std::vector<Real> scratch(d);
  for (std::size_t b = 0; b < B; ++b) {
    prepare_query<Real>(cfg.score_fn, s.heads.row(b), in.relations.row(b), detail::optional_row(in.normals, b),
                        s.queries[b]);
    s.positive_scores[b] = score_prepared<Real>(cfg.score_fn, cfg.distance_p, s.queries[b], s.tails.row(b), scratch);
    for (std::size_t i = 0; i < N; ++i) {
      s.negative_scores(b, i) =
          score_prepared<Real>(cfg.score_fn, cfg.distance_p, s.queries[b], s.negatives.row(i), scratch);
    }
  }
  return s;
}

/// Loss (mean over the B positives, regulariser added once and scaled by
/// 1/B) and analytic gradients for every parameter the micro-batch touches.
/// Gradients of shared negatives accumulate over all positives.
template <class Real>
MicroBatchGradients<Real> batch_forward_backward(const ModelConfig& cfg, const MicroBatchInputs<Real>& in,
                                                 const Matrix<Real>& head_projection,
                                                 const Matrix<Real>& tail_projection) {
  const auto s = score_batch<Real>(cfg, in, head_projection, tail_projection);
  const auto B = in.batch_size();
  const auto N = in.negative_count();
  const auto d = cfg.embedding_dim;
  const auto F = cfg.feature_dim;
  const Real scale = Real{1} / static_cast<Real>(B);
  const auto fn = cfg.score_fn;
  const int p = cfg.distance_p;

  MicroBatchGradients<Real> g;
  g.head_shallow = Matrix<Real>(B, d);
  g.tail_shallow = Matrix<Real>(B, d);
  g.negative_shallow = Matrix<Real>(N, d);
  g.relations = Matrix<Real>(B, cfg.relation_dim());
  if (cfg.uses_normals()) g.normals = Matrix<Real>(B, d);
  g.head_projection = Matrix<Real>(d, F);
  if (!cfg.tie_projections) g.tail_projection = Matrix<Real>(d, F);

  // d(objective)/d(final embedding), before routing through the encoder.
  Matrix<Real> d_heads(B, d), d_tails(B, d), d_negatives(N, d);
  std::vector<Real> dq(d), du(d), scratch(d);
  std::span<Real> du_span = cfg.uses_normals() ? std::span<Real>(du) : std::span<Real>{};

  Real data_loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto neg_scores = s.negative_scores.row(b);
    const auto mask = in.negative_mask.empty() ? std::span<const std::uint8_t>{} : in.negative_mask.row(b);
    const auto terms = cfg.loss == LossFunction::LogSigmoid
                           ? log_sigmoid_loss<Real>(s.positive_scores[b], neg_scores, static_cast<Real>(cfg.margin),
                                                    static_cast<Real>(cfg.adversarial_temperature), mask)
                           : sampled_softmax_ce_loss<Real>(s.positive_scores[b], neg_scores, in.entity_count, mask);
    data_loss += terms.loss;

    std::fill(dq.begin(), dq.end(), Real{0});
    std::fill(du.begin(), du.end(), Real{0});
    score_prepared_backward<Real>(fn, p, s.queries[b], s.tails.row(b), scale * terms.d_positive, dq,
                                  d_tails.row(b), du_span, scratch);
    for (std::size_t i = 0; i < N; ++i) {
      if (terms.d_negative[i] == Real{0}) continue;
      score_prepared_backward<Real>(fn, p, s.queries[b], s.negatives.row(i), scale * terms.d_negative[i], dq,
                                    d_negatives.row(i), du_span, scratch);
    }
    prepare_query_backward<Real>(fn, s.heads.row(b), in.relations.row(b), s.queries[b], dq, du, d_heads.row(b),
                                 g.relations.row(b),
                                 cfg.uses_normals() ? g.normals.row(b) : std::span<Real>{});
  }

  const bool plain = cfg.reg_use_plain_norm;
  const Real lt = static_cast<Real>(cfg.lambda_t);
  const Real ls = static_cast<Real>(cfg.lambda_s);
  const Real lf = static_cast<Real>(cfg.lambda_f);
  RegulariserInputs<Real> reg{&s.heads,        &s.tails,          &s.negatives,
                              &in.head_shallow, &in.tail_shallow, &in.negative_shallow,
                              &s.head_projected, &s.tail_projected, &s.negative_projected};
  g.regulariser = l3_regulariser<Real>(reg, lt, ls, lf, plain);
  g.loss = scale * (data_loss + g.regulariser);

  // Route through the encoder: e = e_S + mask ⊙ (M e_F).
  std::vector<Real> d_proj(d);
  auto route = [&](const Matrix<Real>& final_emb, const Matrix<Real>& shallow, const Matrix<Real>& projected,
                   const Matrix<Real>& features, const Matrix<Real>& dropout, Matrix<Real>& d_final,
                   Matrix<Real>& d_shallow, Matrix<Real>& d_projection) {
    for (std::size_t r = 0; r < final_emb.rows(); ++r) {
      auto df = d_final.row(r);
      l3_penalty_grad<Real>(final_emb.row(r), plain, scale * lt, df);
      auto ds = d_shallow.row(r);
      for (std::size_t c = 0; c < d; ++c) ds[c] += df[c];
      l3_penalty_grad<Real>(shallow.row(r), plain, scale * ls, ds);
      std::copy(df.begin(), df.end(), d_proj.begin());
      l3_penalty_grad<Real>(projected.row(r), plain, scale * lf, d_proj);
      if (!dropout.empty()) {
        const auto m = dropout.row(r);
        for (std::size_t c = 0; c < d; ++c) d_proj[c] *= m[c];
      }
      const auto ef = features.row(r);
      for (std::size_t c = 0; c < d; ++c) {
        if (d_proj[c] == Real{0}) continue;
        auto mrow = d_projection.row(c);
        for (std::size_t f = 0; f < F; ++f) mrow[f] += d_proj[c] * ef[f];
      }
    }
  };
  Matrix<Real>& d_tail_projection = cfg.tie_projections ? g.head_projection : g.tail_projection;
  route(s.heads, in.head_shallow, s.head_projected, in.head_features, in.head_dropout, d_heads, g.head_shallow,
        g.head_projection);
  route(s.tails, in.tail_shallow, s.tail_projected, in.tail_features, in.tail_dropout, d_tails, g.tail_shallow,
        d_tail_projection);
  route(s.negatives, in.negative_shallow, s.negative_projected, in.negative_features, in.negative_dropout,
        d_negatives, g.negative_shallow, d_tail_projection);
  return g;
}

}  // namespace bess
