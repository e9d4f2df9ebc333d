#pragma once

#include <cmath>
#include <cstdint>

#include "ctsfda/autograd.hpp"
#include "ctsfda/datamodel.hpp"

namespace ctsfda {

// Classifier output distribution over K classes.
template <typename T>
struct ProbVector {
  std::vector<T> p;

  void validate(T tol = T(1e-6)) const {
    T sum = 0;
    for (T v : p) {
      if (v < T(0)) throw InvariantError("ProbVector: negative entry");
      sum += v;
    }
    if (std::abs(sum - T(1)) > tol)
      throw InvariantError("ProbVector: entries sum to " +
                           std::to_string(static_cast<double>(sum)));
  }
};

template <typename T>
struct AdaptConfig {
  T lambda = T(0.1);         // UR weight
  T q = T(2);                // Tsallis exponent, > 1
  T learning_rate = T(5e-3);
  int epochs = 8;
  int batch_size = 32;
  T codebook_coeff = T(1);
  T commitment_coeff = T(0.25);

  void validate() const {
    if (lambda < T(0) || learning_rate < T(0) || epochs < 1 || batch_size < 1)
      throw ConfigError("AdaptConfig: nonnegative weights and positive "
                        "epochs/batch size required");
    if (q <= T(1)) throw ConfigError("AdaptConfig: Tsallis q must exceed 1");
  }
};

// ---- graph-level losses ----

// Mean over batch of per-sample mean squared elementwise error; with every
// sample the same size this is the plain elementwise mean.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  require_same_shape(a->value, b->value, "mse");
  const T inv = T(2) / static_cast<T>(a->value.size());
  T acc = 0;
  for (std::int64_t i = 0; i < a->value.size(); ++i) {
    const T d = a->value[i] - b->value[i];
    acc += d * d;
  }
  Tensor<T> out({1});
  out[0] = acc * inv / T(2);
  auto n = make_op(std::move(out), {a, b});
  Node<T>* np = n.get();
  n->backprop = [np, a, b, inv]() {
    const T s = np->grad[0] * inv;
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i)
        g[i] += s * (a->value[i] - b->value[i]);
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i)
        g[i] += s * (b->value[i] - a->value[i]);
    }
  };
  return n;
}

// Mean negative log-softmax probability of the true class.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const LabelBatch& labels) {
  const auto& xs = logits->value.shape;
  if (xs.size() != 2 || xs[0] != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(xs) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::int64_t B = xs[0], K = xs[1];
  if (labels.k != K)
    throw ShapeError("cross_entropy: K mismatch");
  auto probs = std::make_shared<std::vector<T>>(logits->value.data.size());
  T loss = 0;
  for (std::int64_t nb = 0; nb < B; ++nb) {
    const T* lp = &logits->value[nb * K];
    T mx = lp[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    T z = 0;
    for (std::int64_t k = 0; k < K; ++k) z += std::exp(lp[k] - mx);
    const T logz = std::log(z) + mx;
    for (std::int64_t k = 0; k < K; ++k)
      (*probs)[nb * K + k] = std::exp(lp[k] - logz);
    loss -= lp[labels.labels[nb]] - logz;
  }
  Tensor<T> out({1});
  out[0] = loss / static_cast<T>(B);
  auto n = make_op(std::move(out), {logits});
  Node<T>* np = n.get();
  auto lab = labels.labels;
  n->backprop = [np, logits, probs, lab, B, K]() {
    if (!logits->requires_grad) return;
    auto& g = logits->ensure_grad();
    const T s = np->grad[0] / static_cast<T>(B);
    for (std::int64_t nb = 0; nb < B; ++nb)
      for (std::int64_t k = 0; k < K; ++k) {
        T d = (*probs)[nb * K + k];
        if (k == lab[nb]) d -= T(1);
        g[nb * K + k] += s * d;
      }
  };
  return n;
}

// Batch mean of (1/(q-1)) * (1 - sum_k p_k^q) over probability rows [B,K].
template <typename T>
Var<T> tsallis_ur(Var<T> probs, T q) {
  const auto& xs = probs->value.shape;
  if (xs.size() != 2) throw ShapeError("tsallis_ur: expected [B,K]");
  if (q <= T(1)) throw ConfigError("tsallis_ur: q must exceed 1");
  const std::int64_t B = xs[0], K = xs[1];
  T loss = 0;
  for (std::int64_t nb = 0; nb < B; ++nb) {
    T s = 0;
    for (std::int64_t k = 0; k < K; ++k)
      s += std::pow(probs->value[nb * K + k], q);
    loss += (T(1) - s) / (q - T(1));
  }
  Tensor<T> out({1});
  out[0] = loss / static_cast<T>(B);
  auto n = make_op(std::move(out), {probs});
  Node<T>* np = n.get();
  n->backprop = [np, probs, q, B, K]() {
    if (!probs->requires_grad) return;
    auto& g = probs->ensure_grad();
    const T s = np->grad[0] / static_cast<T>(B);
    const T c = -q / (q - T(1));
    for (std::int64_t i = 0; i < B * K; ++i)
      g[i] += s * c * std::pow(probs->value[i], q - T(1));
  };
  return n;
}

// ---- value-level wrappers (the spec's scalar operations) ----

template <typename T>
T mse_loss(const TimeSeriesBatch<T>& x, const TimeSeriesBatch<T>& x_hat) {
  require_same_shape(x.values, x_hat.values, "mse_loss");
  T acc = 0;
  for (std::int64_t i = 0; i < x.values.size(); ++i) {
    const T d = x.values[i] - x_hat.values[i];
    acc += d * d;
  }
  return acc / static_cast<T>(x.values.size());
}

template <typename T>
T cross_entropy_loss(const Tensor<T>& logits, const LabelBatch& labels) {
  auto v = cross_entropy(make_leaf(logits, false), labels);
  return v->value[0];
}

template <typename T>
T tsallis_ur_loss(const std::vector<ProbVector<T>>& probs, T q) {
  if (probs.empty()) throw ShapeError("tsallis_ur_loss: empty batch");
  const std::int64_t B = static_cast<std::int64_t>(probs.size());
  const std::int64_t K = static_cast<std::int64_t>(probs[0].p.size());
  Tensor<T> t({B, K});
  for (std::int64_t nb = 0; nb < B; ++nb) {
    probs[nb].validate();
    for (std::int64_t k = 0; k < K; ++k) t[nb * K + k] = probs[nb].p[k];
  }
  return tsallis_ur(make_leaf(std::move(t), false), q)->value[0];
}

// L_overall = L_MSE + lambda * L_UR (+ warp-block VQ auxiliary terms,
// added by the training loop where a warp block is present).
template <typename T>
T overall_adapt_loss(const TimeSeriesBatch<T>& x_t,
                     const TimeSeriesBatch<T>& x_hat_t,
                     const std::vector<ProbVector<T>>& probs,
                     const AdaptConfig<T>& cfg) {
  cfg.validate();
  return mse_loss(x_t, x_hat_t) + cfg.lambda * tsallis_ur_loss(probs, cfg.q);
}

}  // namespace ctsfda
