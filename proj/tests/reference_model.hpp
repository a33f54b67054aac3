// Test-only naive reference evaluators. Deliberately written straight from
// the formulas (std::complex, explicit projections, long double sums) and
// sharing no code with the library's kernels.

#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <optional>
#include <vector>

#include "bess/model.hpp"

namespace bess::testing {

using Vec = std::vector<double>;

inline double ref_pnorm_real(const Vec& v, int p) {
  long double acc = 0;
  for (double x : v) acc += p == 1 ? std::fabs(x) : x * x;
  return p == 1 ? static_cast<double>(acc) : std::sqrt(static_cast<double>(acc));
}

inline double ref_score(ScoreFunction fn, const Vec& h, const Vec& r, const Vec& t, const Vec& w, int p) {
  const std::size_t d = h.size();
  switch (fn) {
    case ScoreFunction::TransE: {
      Vec v(d);
      for (std::size_t i = 0; i < d; ++i) v[i] = h[i] + r[i] - t[i];
      return -ref_pnorm_real(v, p);
    }
    case ScoreFunction::TransH: {
      double wn = 0;
      for (double x : w) wn += x * x;
      wn = std::sqrt(wn);
      Vec u(d);
      for (std::size_t i = 0; i < d; ++i) u[i] = w[i] / wn;
      double uh = 0, ut = 0;
      for (std::size_t i = 0; i < d; ++i) {
        uh += u[i] * h[i];
        ut += u[i] * t[i];
      }
      Vec v(d);
      for (std::size_t i = 0; i < d; ++i) v[i] = (h[i] - uh * u[i]) + r[i] - (t[i] - ut * u[i]);
      return -ref_pnorm_real(v, p);
    }
    case ScoreFunction::RotatE: {
      long double acc = 0;
      for (std::size_t j = 0; j < d / 2; ++j) {
        const std::complex<double> hc(h[2 * j], h[2 * j + 1]);
        const std::complex<double> tc(t[2 * j], t[2 * j + 1]);
        const auto v = hc * std::polar(1.0, r[j]) - tc;
        acc += p == 1 ? std::abs(v) : std::norm(v);
      }
      return p == 1 ? -static_cast<double>(acc) : -std::sqrt(static_cast<double>(acc));
    }
    case ScoreFunction::DistMult: {
      long double acc = 0;
      for (std::size_t i = 0; i < d; ++i) acc += static_cast<long double>(r[i]) * h[i] * t[i];
      return static_cast<double>(acc);
    }
    case ScoreFunction::ComplEx: {
      std::complex<long double> acc = 0;
      for (std::size_t j = 0; j < d / 2; ++j) {
        const std::complex<long double> hc(h[2 * j], h[2 * j + 1]);
        const std::complex<long double> rc(r[2 * j], r[2 * j + 1]);
        const std::complex<long double> tc(t[2 * j], t[2 * j + 1]);
        acc += rc * hc * std::conj(tc);
      }
      return static_cast<double>(acc.real());
    }
  }
  return 0;
}

inline Vec row_of(const Matrix<double>& m, std::size_t r) {
  const auto s = m.row(r);
  return Vec(s.begin(), s.end());
}

/// Naive micro-batch objective (loss mean over B plus regulariser / B).
/// `frozen_weights` (B x N) replaces the self-adversarial weights, which
/// are constants under differentiation.
struct ReferenceObjective {
  ModelConfig cfg;

  Vec encode(const Vec& shallow, const Vec& features, const Matrix<double>& m, const Matrix<double>& dropout,
             std::size_t row, Vec* projected) const {
    Vec e(shallow.size());
    Vec proj(shallow.size(), 0.0);
    for (std::size_t i = 0; i < shallow.size(); ++i) {
      long double acc = 0;
      for (std::size_t f = 0; f < features.size(); ++f) acc += static_cast<long double>(m(i, f)) * features[f];
      proj[i] = static_cast<double>(acc) * (dropout.empty() ? 1.0 : dropout(row, i));
      e[i] = shallow[i] + proj[i];
    }
    if (projected) *projected = proj;
    return e;
  }

  double penalty(const Vec& x) const {
    long double acc = 0;
    for (double v : x) acc += std::pow(std::fabs(v), 3.0L);
    return cfg.reg_use_plain_norm ? std::cbrt(static_cast<double>(acc)) : static_cast<double>(acc);
  }

  /// Self-adversarial weights at the given inputs (for freezing).
  std::vector<Vec> weights(const MicroBatchInputs<double>& in, const Matrix<double>& mh,
                           const Matrix<double>& mt) const {
    const auto scores = all_scores(in, mh, mt);
    std::vector<Vec> w;
    for (const auto& row : scores.second) {
      Vec wr(row.size());
      long double total = 0;
      for (std::size_t i = 0; i < row.size(); ++i) total += std::exp(cfg.adversarial_temperature * row[i]);
      for (std::size_t i = 0; i < row.size(); ++i)
        wr[i] = static_cast<double>(std::exp(cfg.adversarial_temperature * row[i]) / total);
      w.push_back(wr);
    }
    return w;
  }

  std::pair<Vec, std::vector<Vec>> all_scores(const MicroBatchInputs<double>& in, const Matrix<double>& mh,
                                              const Matrix<double>& mt) const {
    const auto B = in.batch_size();
    const auto N = in.negative_count();
    Vec pos(B);
    std::vector<Vec> neg(B, Vec(N));
    std::vector<Vec> negs;
    for (std::size_t i = 0; i < N; ++i)
      negs.push_back(encode(row_of(in.negative_shallow, i), row_of(in.negative_features, i), mt, in.negative_dropout,
                            i, nullptr));
    for (std::size_t b = 0; b < B; ++b) {
      const auto h = encode(row_of(in.head_shallow, b), row_of(in.head_features, b), mh, in.head_dropout, b, nullptr);
      const auto t = encode(row_of(in.tail_shallow, b), row_of(in.tail_features, b), mt, in.tail_dropout, b, nullptr);
      const auto r = row_of(in.relations, b);
      const auto w = cfg.uses_normals() ? row_of(in.normals, b) : Vec{};
      pos[b] = ref_score(cfg.score_fn, h, r, t, w, cfg.distance_p);
      for (std::size_t i = 0; i < N; ++i) neg[b][i] = ref_score(cfg.score_fn, h, r, negs[i], w, cfg.distance_p);
    }
    return {pos, neg};
  }

  double operator()(const MicroBatchInputs<double>& in, const Matrix<double>& mh, const Matrix<double>& mt,
                    const std::vector<Vec>& frozen_weights) const {
    const auto B = in.batch_size();
    const auto N = in.negative_count();
    const auto [pos, neg] = all_scores(in, mh, mt);
    auto log_sig = [](double x) { return -std::log1p(std::exp(-x)); };
    long double data = 0;
    for (std::size_t b = 0; b < B; ++b) {
      if (cfg.loss == LossFunction::LogSigmoid) {
        data += -log_sig(cfg.margin + pos[b]);
        for (std::size_t i = 0; i < N; ++i) data += -frozen_weights[b][i] * log_sig(-cfg.margin - neg[b][i]);
      } else {
        const double c = std::log(static_cast<double>(in.entity_count - 1) / static_cast<double>(N));
        long double z = std::exp(static_cast<long double>(pos[b]));
        for (std::size_t i = 0; i < N; ++i) z += std::exp(static_cast<long double>(neg[b][i] + c));
        data += -pos[b] + std::log(z);
      }
    }
    long double reg = 0;
    auto add_entity = [&](const Vec& shallow, const Vec& features, const Matrix<double>& m,
                          const Matrix<double>& dropout, std::size_t row) {
      Vec proj;
      const auto e = encode(shallow, features, m, dropout, row, &proj);
      reg += cfg.lambda_t * penalty(e) + cfg.lambda_s * penalty(shallow) + cfg.lambda_f * penalty(proj);
    };
    for (std::size_t b = 0; b < B; ++b) {
      add_entity(row_of(in.head_shallow, b), row_of(in.head_features, b), mh, in.head_dropout, b);
      add_entity(row_of(in.tail_shallow, b), row_of(in.tail_features, b), mt, in.tail_dropout, b);
    }
    for (std::size_t i = 0; i < N; ++i)
      add_entity(row_of(in.negative_shallow, i), row_of(in.negative_features, i), mt, in.negative_dropout, i);
    return static_cast<double>((data + reg) / static_cast<long double>(B));
  }
};

/// Random micro-batch at double precision.
inline MicroBatchInputs<double> random_batch(const ModelConfig& cfg, std::size_t B, std::size_t N,
                                             std::uint64_t entity_count, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  auto fill = [&](std::size_t r, std::size_t c) {
    Matrix<double> m(r, c);
    for (auto& v : m.flat()) v = normal(rng);
    return m;
  };
  const auto d = cfg.embedding_dim;
  const auto F = cfg.feature_dim;
  MicroBatchInputs<double> in;
  in.head_shallow = fill(B, d);
  in.head_features = fill(B, F);
  in.tail_shallow = fill(B, d);
  in.tail_features = fill(B, F);
  in.negative_shallow = fill(N, d);
  in.negative_features = fill(N, F);
  in.relations = fill(B, cfg.relation_dim());
  if (cfg.uses_normals()) in.normals = fill(B, d);
  in.entity_count = entity_count;
  return in;
}

}  // namespace bess::testing
