#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ctsfda/adapt.hpp"

namespace ctsfda {

enum class StabilityWeighting { kCosine, kEntropy, kOff };

inline StabilityWeighting parse_weighting(const std::string& s) {
  if (s == "cosine") return StabilityWeighting::kCosine;
  if (s == "entropy") return StabilityWeighting::kEntropy;
  if (s == "off") return StabilityWeighting::kOff;
  throw ConfigError("tta.weighting must be cosine, entropy or off, got " + s);
}

struct TTAConfig {
  double delta = 0.001;  // perturbation step
  int n = 10;            // half-span; the grid has 2n+1 points

  void validate() const {
    if (delta <= 0) throw ConfigError("TTAConfig: delta must be positive");
    if (n < 1) throw ConfigError("TTAConfig: n must be >= 1");
  }
};

// Ascending grid [1 - n*delta, ..., 1, ..., 1 + n*delta].
inline std::vector<double> perturbation_grid(const TTAConfig& cfg) {
  cfg.validate();
  std::vector<double> grid;
  grid.reserve(static_cast<std::size_t>(2 * cfg.n + 1));
  for (int j = -cfg.n; j <= cfg.n; ++j)
    grid.push_back(1.0 + static_cast<double>(j) * cfg.delta);
  return grid;
}

template <typename T>
T cosine_similarity(const ProbVector<T>& p, const ProbVector<T>& r) {
  if (p.p.size() != r.p.size())
    throw ShapeError("cosine_similarity: dimension mismatch");
  T dot = 0, np = 0, nr = 0;
  for (std::size_t k = 0; k < p.p.size(); ++k) {
    dot += p.p[k] * r.p[k];
    np += p.p[k] * p.p[k];
    nr += r.p[k] * r.p[k];
  }
  if (np == T(0) || nr == T(0))
    throw ShapeError("cosine_similarity: zero vector");
  return dot / (std::sqrt(np) * std::sqrt(nr));
}

// Softmax of the similarity scores.
template <typename T>
std::vector<T> stability_weights(const std::vector<T>& sims) {
  if (sims.empty()) throw ShapeError("stability_weights: empty input");
  T mx = sims[0];
  for (T s : sims) mx = std::max(mx, s);
  std::vector<T> w(sims.size());
  T z = 0;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    w[i] = std::exp(sims[i] - mx);
    z += w[i];
  }
  for (auto& v : w) v /= z;
  return w;
}

template <typename T>
T shannon_entropy(const ProbVector<T>& p) {
  T h = 0;
  for (T v : p.p)
    if (v > T(0)) h -= v * std::log(v);
  return h;
}

// Diagnostic record of one instance's grid sweep.
template <typename T>
struct StabilityEnsemble {
  std::vector<double> grid;        // 2n+1 v_S values, ascending
  std::vector<ProbVector<T>> probs;  // one per grid point
  std::vector<T> sims;             // 2n consecutive cosine similarities
  std::vector<T> weights;          // 2n softmax weights, sum 1
  ProbVector<T> ensembled;
};

// Everything ensemble_predict needs besides the instance itself.
template <typename T>
struct EnsembleContext {
  const UNet<T>* unet;
  ModelParams<T>* theta;
  const WarpBlock<T>* warp;
  ModelParams<T>* phi;
  const Backbone<T>* backbone;
  ModelParams<T>* backbone_params;
  ReshapeSpec spec;
  ScalingFactors<T> factors;
  TTAConfig cfg;
  StabilityWeighting weighting = StabilityWeighting::kCosine;
};

namespace detail {

template <typename T>
std::vector<ProbVector<T>> softmax_rows(const Tensor<T>& logits) {
  const std::int64_t B = logits.shape[0], K = logits.shape[1];
  std::vector<ProbVector<T>> out(static_cast<std::size_t>(B));
  for (std::int64_t nb = 0; nb < B; ++nb) {
    const T* lp = &logits[nb * K];
    T mx = lp[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    T z = 0;
    std::vector<T> p(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
      p[static_cast<std::size_t>(k)] = std::exp(lp[k] - mx);
      z += p[static_cast<std::size_t>(k)];
    }
    for (auto& v : p) v /= z;
    out[static_cast<std::size_t>(nb)].p = std::move(p);
  }
  return out;
}

}  // namespace detail

// Instance-wise adaptation: sweep v_S over the grid, classify the composed
// reconstruction at every step, weight the 2n predictions p_j (j = -n+1..n)
// by the softmaxed similarity to their predecessor, and ensemble. Gradient
// free; mutates nothing. Returns one ProbVector per instance in x.
template <typename T>
std::vector<ProbVector<T>> ensemble_predict(
    const TimeSeriesBatch<T>& x, const EnsembleContext<T>& ctx,
    std::vector<StabilityEnsemble<T>>* record = nullptr) {
  ctx.cfg.validate();
  if (!ctx.theta->all_frozen() || !assert_frozen(*ctx.theta) ||
      !ctx.backbone_params->all_frozen() ||
      !assert_frozen(*ctx.backbone_params) || !ctx.phi->all_frozen() ||
      !assert_frozen(*ctx.phi))
    throw InvariantError("ensemble_predict: all parameters must be frozen");

  const auto grid = perturbation_grid(ctx.cfg);
  const std::int64_t B = x.batch();

  auto img = series_to_image(x, ctx.spec);
  auto u_img = unet_forward(*ctx.unet, *ctx.theta, img);
  auto w_img = warp_forward(*ctx.warp, *ctx.phi, u_img).reconstructed;
  auto u = image_to_series(u_img, ctx.spec);
  auto w = image_to_series(w_img, ctx.spec);

  // probs[j][i]: prediction for instance i at grid point j
  std::vector<std::vector<ProbVector<T>>> probs;
  probs.reserve(grid.size());
  for (double vs : grid) {
    ScalingFactors<T> s{static_cast<T>(vs), ctx.factors.v_t};
    auto composed = compose_reconstruction(u, w, s);
    probs.push_back(detail::softmax_rows(
        backbone_forward(*ctx.backbone, *ctx.backbone_params, composed)));
  }

  if (!assert_frozen(*ctx.theta) || !assert_frozen(*ctx.backbone_params) ||
      !assert_frozen(*ctx.phi))
    throw InvariantError("ensemble_predict: parameters changed during sweep");

  const std::size_t m = grid.size() - 1;  // 2n weighted predictions
  std::vector<ProbVector<T>> out(static_cast<std::size_t>(B));
  if (record) record->resize(static_cast<std::size_t>(B));
  for (std::int64_t i = 0; i < B; ++i) {
    std::vector<T> sims(m);
    for (std::size_t j = 0; j < m; ++j)
      sims[j] = cosine_similarity(probs[j][static_cast<std::size_t>(i)],
                                  probs[j + 1][static_cast<std::size_t>(i)]);
    std::vector<T> weights;
    switch (ctx.weighting) {
      case StabilityWeighting::kCosine:
        weights = stability_weights(sims);
        break;
      case StabilityWeighting::kEntropy: {
        std::vector<T> neg_ent(m);
        for (std::size_t j = 0; j < m; ++j)
          neg_ent[j] =
              -shannon_entropy(probs[j + 1][static_cast<std::size_t>(i)]);
        weights = stability_weights(neg_ent);
        break;
      }
      case StabilityWeighting::kOff:
        weights.assign(m, T(1) / static_cast<T>(m));
        break;
    }
    const std::size_t K = probs[0][0].p.size();
    ProbVector<T> p;
    p.p.assign(K, T(0));
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < K; ++k)
        p.p[k] += weights[j] * probs[j + 1][static_cast<std::size_t>(i)].p[k];
    p.validate();
    if (record) {
      auto& rec = (*record)[static_cast<std::size_t>(i)];
      rec.grid = grid;
      rec.sims = sims;
      rec.weights = weights;
      rec.probs.reserve(grid.size());
      for (const auto& row : probs)
        rec.probs.push_back(row[static_cast<std::size_t>(i)]);
      rec.ensembled = p;
    }
    out[static_cast<std::size_t>(i)] = std::move(p);
  }
  return out;
}

}  // namespace ctsfda
