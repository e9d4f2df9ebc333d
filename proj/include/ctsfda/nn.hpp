#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <string>

#include "ctsfda/autograd.hpp"
#include "ctsfda/params.hpp"

namespace ctsfda {

// Bridges a ModelParams store with the autograd graph for one forward pass.
// Leaves copy the array contents; after backward() the optimizer reads the
// leaf gradients and writes updates back into the store.
template <typename T>
class ParamBank {
 public:
  ParamBank(ModelParams<T>& params, bool trainable)
      : params_(&params), trainable_(trainable) {}

  Var<T> get(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    bool rg = trainable_ && !params_->is_frozen(name) &&
              !params_->buffers.count(name);
    auto leaf = make_leaf(params_->at(name), rg);
    leaves_.emplace(name, leaf);
    return leaf;
  }

  ModelParams<T>& params() { return *params_; }
  const std::map<std::string, Var<T>>& leaves() const { return leaves_; }

 private:
  ModelParams<T>* params_;
  bool trainable_;
  std::map<std::string, Var<T>> leaves_;
};

// ---- 2D ops ----

// stride-1 conv, zero padding. x [B,Ci,H,W], w [Co,Ci,kh,kw], b [Co].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::int64_t pad) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw ShapeError("conv2d: bad shapes " + shape_str(xs) + " " +
                     shape_str(ws));
  const std::int64_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::int64_t Co = ws[0], kh = ws[2], kw = ws[3];
  const std::int64_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
  Tensor<T> out({B, Co, Ho, Wo});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t co = 0; co < Co; ++co) {
      T* op = &out[((n * Co + co) * Ho) * Wo];
      const T bias = b->value[co];
      for (std::int64_t i = 0; i < Ho * Wo; ++i) op[i] = bias;
      for (std::int64_t ci = 0; ci < Ci; ++ci) {
        const T* xp = &x->value[((n * Ci + ci) * H) * W];
        const T* wp = &w->value[((co * Ci + ci) * kh) * kw];
        for (std::int64_t y = 0; y < Ho; ++y)
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t iy = y + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const T wv = wp[ky * kw + kx];
              const std::int64_t x0 = std::max<std::int64_t>(0, pad - kx);
              const std::int64_t x1 =
                  std::min<std::int64_t>(Wo, W + pad - kx);
              const T* xr = xp + iy * W - pad + kx;
              T* orow = op + y * Wo;
              for (std::int64_t xo = x0; xo < x1; ++xo)
                orow[xo] += wv * xr[xo];
            }
          }
      }
    }
  auto n = make_op(std::move(out), {x, w, b});
  Node<T>* np = n.get();
  n->backprop = [np, x, w, b, pad, B, Ci, H, W, Co, kh, kw, Ho, Wo]() {
    Tensor<T>* gx = x->requires_grad ? &x->ensure_grad() : nullptr;
    Tensor<T>* gw = w->requires_grad ? &w->ensure_grad() : nullptr;
    Tensor<T>* gb = b->requires_grad ? &b->ensure_grad() : nullptr;
    for (std::int64_t nb = 0; nb < B; ++nb)
      for (std::int64_t co = 0; co < Co; ++co) {
        const T* gp = &np->grad[((nb * Co + co) * Ho) * Wo];
        if (gb)
          for (std::int64_t i = 0; i < Ho * Wo; ++i) (*gb)[co] += gp[i];
        if (!gx && !gw) continue;
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
          const T* xp = &x->value[((nb * Ci + ci) * H) * W];
          const T* wp = &w->value[((co * Ci + ci) * kh) * kw];
          T* gxp = gx ? &(*gx)[((nb * Ci + ci) * H) * W] : nullptr;
          T* gwp = gw ? &(*gw)[((co * Ci + ci) * kh) * kw] : nullptr;
          for (std::int64_t y = 0; y < Ho; ++y)
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              const std::int64_t iy = y + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const std::int64_t x0 = std::max<std::int64_t>(0, pad - kx);
                const std::int64_t x1 =
                    std::min<std::int64_t>(Wo, W + pad - kx);
                const T* grow = gp + y * Wo;
                const std::int64_t off = iy * W - pad + kx;
                if (gwp) {
                  T acc = 0;
                  const T* xr = xp + off;
                  for (std::int64_t xo = x0; xo < x1; ++xo)
                    acc += grow[xo] * xr[xo];
                  gwp[ky * kw + kx] += acc;
                }
                if (gxp) {
                  const T wv = wp[ky * kw + kx];
                  T* gxr = gxp + off;
                  for (std::int64_t xo = x0; xo < x1; ++xo)
                    gxr[xo] += wv * grow[xo];
                }
              }
            }
        }
      }
  };
  return n;
}

template <typename T>
Var<T> maxpool2d(Var<T> x, std::int64_t k) {
  const auto& xs = x->value.shape;
  if (xs.size() != 4 || xs[2] % k || xs[3] % k)
    throw ShapeError("maxpool2d: spatial dims must divide " +
                     std::to_string(k) + ", got " + shape_str(xs));
  const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::int64_t Ho = H / k, Wo = W / k;
  Tensor<T> out({B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  for (std::int64_t nc = 0; nc < B * C; ++nc) {
    const T* xp = &x->value[nc * H * W];
    T* op = &out[nc * Ho * Wo];
    std::int64_t* ap = argmax->data() + nc * Ho * Wo;
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xo = 0; xo < Wo; ++xo) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t bi = 0;
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx) {
            const std::int64_t idx = (y * k + dy) * W + xo * k + dx;
            if (xp[idx] > best) {
              best = xp[idx];
              bi = idx;
            }
          }
        op[y * Wo + xo] = best;
        ap[y * Wo + xo] = nc * H * W + bi;
      }
  }
  auto n = make_op(std::move(out), {x});
  Node<T>* np = n.get();
  n->backprop = [np, x, argmax]() {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (std::int64_t i = 0; i < np->grad.size(); ++i)
      g[(*argmax)[i]] += np->grad[i];
  };
  return n;
}

template <typename T>
Var<T> upsample2d_nearest(Var<T> x, std::int64_t k) {
  const auto& xs = x->value.shape;
  if (xs.size() != 4) throw ShapeError("upsample2d: expected 4D input");
  const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor<T> out({B, C, H * k, W * k});
  for (std::int64_t nc = 0; nc < B * C; ++nc) {
    const T* xp = &x->value[nc * H * W];
    T* op = &out[nc * H * k * W * k];
    for (std::int64_t y = 0; y < H * k; ++y)
      for (std::int64_t xo = 0; xo < W * k; ++xo)
        op[y * W * k + xo] = xp[(y / k) * W + xo / k];
  }
  auto n = make_op(std::move(out), {x});
  Node<T>* np = n.get();
  n->backprop = [np, x, k, B, C, H, W]() {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (std::int64_t nc = 0; nc < B * C; ++nc) {
      T* gp = &g[nc * H * W];
      const T* op = &np->grad[nc * H * k * W * k];
      for (std::int64_t y = 0; y < H * k; ++y)
        for (std::int64_t xo = 0; xo < W * k; ++xo)
          gp[(y / k) * W + xo / k] += op[y * W * k + xo];
    }
  };
  return n;
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const auto& as = a->value.shape;
  const auto& bs = b->value.shape;
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] ||
      as[3] != bs[3])
    throw ShapeError("concat_channels: incompatible " + shape_str(as) +
                     " vs " + shape_str(bs));
  const std::int64_t B = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
  Tensor<T> out({B, Ca + Cb, as[2], as[3]});
  for (std::int64_t nb = 0; nb < B; ++nb) {
    std::copy(&a->value[nb * Ca * HW], &a->value[(nb + 1) * Ca * HW],
              &out[nb * (Ca + Cb) * HW]);
    std::copy(&b->value[nb * Cb * HW], &b->value[(nb + 1) * Cb * HW],
              &out[nb * (Ca + Cb) * HW + Ca * HW]);
  }
  auto n = make_op(std::move(out), {a, b});
  Node<T>* np = n.get();
  n->backprop = [np, a, b, B, Ca, Cb, HW]() {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t i = 0; i < Ca * HW; ++i)
          g[nb * Ca * HW + i] += np->grad[nb * (Ca + Cb) * HW + i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t i = 0; i < Cb * HW; ++i)
          g[nb * Cb * HW + i] += np->grad[nb * (Ca + Cb) * HW + Ca * HW + i];
    }
  };
  return n;
}

// ---- 1D ops ----

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, Var<T> b, std::int64_t pad) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  if (xs.size() != 3 || ws.size() != 3 || xs[1] != ws[1])
    throw ShapeError("conv1d: bad shapes " + shape_str(xs) + " " +
                     shape_str(ws));
  const std::int64_t B = xs[0], Ci = xs[1], L = xs[2];
  const std::int64_t Co = ws[0], k = ws[2];
  const std::int64_t Lo = L + 2 * pad - k + 1;
  Tensor<T> out({B, Co, Lo});
  for (std::int64_t nb = 0; nb < B; ++nb)
    for (std::int64_t co = 0; co < Co; ++co) {
      T* op = &out[(nb * Co + co) * Lo];
      const T bias = b->value[co];
      for (std::int64_t i = 0; i < Lo; ++i) op[i] = bias;
      for (std::int64_t ci = 0; ci < Ci; ++ci) {
        const T* xp = &x->value[(nb * Ci + ci) * L];
        const T* wp = &w->value[(co * Ci + ci) * k];
        for (std::int64_t kk = 0; kk < k; ++kk) {
          const T wv = wp[kk];
          const std::int64_t t0 = std::max<std::int64_t>(0, pad - kk);
          const std::int64_t t1 = std::min<std::int64_t>(Lo, L + pad - kk);
          const T* xr = xp - pad + kk;
          for (std::int64_t t = t0; t < t1; ++t) op[t] += wv * xr[t];
        }
      }
    }
  auto n = make_op(std::move(out), {x, w, b});
  Node<T>* np = n.get();
  n->backprop = [np, x, w, b, pad, B, Ci, L, Co, k, Lo]() {
    Tensor<T>* gx = x->requires_grad ? &x->ensure_grad() : nullptr;
    Tensor<T>* gw = w->requires_grad ? &w->ensure_grad() : nullptr;
    Tensor<T>* gb = b->requires_grad ? &b->ensure_grad() : nullptr;
    for (std::int64_t nb = 0; nb < B; ++nb)
      for (std::int64_t co = 0; co < Co; ++co) {
        const T* gp = &np->grad[(nb * Co + co) * Lo];
        if (gb)
          for (std::int64_t i = 0; i < Lo; ++i) (*gb)[co] += gp[i];
        if (!gx && !gw) continue;
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
          const T* xp = &x->value[(nb * Ci + ci) * L];
          const T* wp = &w->value[(co * Ci + ci) * k];
          T* gxp = gx ? &(*gx)[(nb * Ci + ci) * L] : nullptr;
          T* gwp = gw ? &(*gw)[(co * Ci + ci) * k] : nullptr;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            const std::int64_t t0 = std::max<std::int64_t>(0, pad - kk);
            const std::int64_t t1 = std::min<std::int64_t>(Lo, L + pad - kk);
            const std::int64_t off = kk - pad;
            if (gwp) {
              T acc = 0;
              for (std::int64_t t = t0; t < t1; ++t)
                acc += gp[t] * xp[t + off];
              gwp[kk] += acc;
            }
            if (gxp) {
              const T wv = wp[kk];
              for (std::int64_t t = t0; t < t1; ++t)
                gxp[t + off] += wv * gp[t];
            }
          }
        }
      }
  };
  return n;
}

template <typename T>
Var<T> maxpool1d(Var<T> x, std::int64_t k) {
  const auto& xs = x->value.shape;
  if (xs.size() != 3 || xs[2] % k)
    throw ShapeError("maxpool1d: length must divide " + std::to_string(k));
  const std::int64_t BC = xs[0] * xs[1], L = xs[2], Lo = L / k;
  Tensor<T> out({xs[0], xs[1], Lo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  for (std::int64_t nc = 0; nc < BC; ++nc) {
    const T* xp = &x->value[nc * L];
    for (std::int64_t t = 0; t < Lo; ++t) {
      T best = xp[t * k];
      std::int64_t bi = t * k;
      for (std::int64_t d = 1; d < k; ++d)
        if (xp[t * k + d] > best) {
          best = xp[t * k + d];
          bi = t * k + d;
        }
      out[nc * Lo + t] = best;
      (*argmax)[nc * Lo + t] = nc * L + bi;
    }
  }
  auto n = make_op(std::move(out), {x});
  Node<T>* np = n.get();
  n->backprop = [np, x, argmax]() {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (std::int64_t i = 0; i < np->grad.size(); ++i)
      g[(*argmax)[i]] += np->grad[i];
  };
  return n;
}

// Adaptive average pooling to a single position: [B,C,L] -> [B,C].
template <typename T>
Var<T> global_avgpool1d(Var<T> x) {
  const auto& xs = x->value.shape;
  if (xs.size() != 3) throw ShapeError("global_avgpool1d: expected 3D input");
  const std::int64_t B = xs[0], C = xs[1], L = xs[2];
  const T inv = T(1) / static_cast<T>(L);
  Tensor<T> out({B, C});
  for (std::int64_t nc = 0; nc < B * C; ++nc) {
    T acc = 0;
    for (std::int64_t t = 0; t < L; ++t) acc += x->value[nc * L + t];
    out[nc] = acc * inv;
  }
  auto n = make_op(std::move(out), {x});
  Node<T>* np = n.get();
  n->backprop = [np, x, B, C, L, inv]() {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (std::int64_t nc = 0; nc < B * C; ++nc)
      for (std::int64_t t = 0; t < L; ++t)
        g[nc * L + t] += np->grad[nc] * inv;
  };
  return n;
}

// ---- dense / normalization ----

// x [B,F] @ w [F,O] + b [O]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
    throw ShapeError("linear: bad shapes " + shape_str(xs) + " " +
                     shape_str(ws));
  const std::int64_t B = xs[0], F = xs[1], O = ws[1];
  Tensor<T> out({B, O});
  for (std::int64_t nb = 0; nb < B; ++nb)
    for (std::int64_t o = 0; o < O; ++o) {
      T acc = b->value[o];
      for (std::int64_t f = 0; f < F; ++f)
        acc += x->value[nb * F + f] * w->value[f * O + o];
      out[nb * O + o] = acc;
    }
  auto n = make_op(std::move(out), {x, w, b});
  Node<T>* np = n.get();
  n->backprop = [np, x, w, b, B, F, O]() {
    if (x->requires_grad) {
      auto& g = x->ensure_grad();
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t f = 0; f < F; ++f) {
          T acc = 0;
          for (std::int64_t o = 0; o < O; ++o)
            acc += np->grad[nb * O + o] * w->value[f * O + o];
          g[nb * F + f] += acc;
        }
    }
    if (w->requires_grad) {
      auto& g = w->ensure_grad();
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t f = 0; f < F; ++f)
          for (std::int64_t o = 0; o < O; ++o)
            g[f * O + o] += x->value[nb * F + f] * np->grad[nb * O + o];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t o = 0; o < O; ++o) g[o] += np->grad[nb * O + o];
    }
  };
  return n;
}

// Batch norm over [B,C,L], statistics per channel. In training mode batch
// statistics are used and the running buffers in `bank` are updated; in eval
// mode the running buffers are read and nothing is mutated.
template <typename T>
Var<T> batchnorm1d(ParamBank<T>& bank, const std::string& prefix, Var<T> x,
                   bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto& xs = x->value.shape;
  if (xs.size() != 3) throw ShapeError("batchnorm1d: expected 3D input");
  const std::int64_t B = xs[0], C = xs[1], L = xs[2];
  auto gamma = bank.get(prefix + ".gamma");
  auto beta = bank.get(prefix + ".beta");
  auto& rmean = bank.params().at(prefix + ".running_mean");
  auto& rvar = bank.params().at(prefix + ".running_var");

  auto mean = std::make_shared<std::vector<T>>(C);
  auto istd = std::make_shared<std::vector<T>>(C);
  const std::int64_t NL = B * L;
  if (training) {
    for (std::int64_t c = 0; c < C; ++c) {
      T m = 0;
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t t = 0; t < L; ++t)
          m += x->value[(nb * C + c) * L + t];
      m /= static_cast<T>(NL);
      T v = 0;
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t t = 0; t < L; ++t) {
          T d = x->value[(nb * C + c) * L + t] - m;
          v += d * d;
        }
      v /= static_cast<T>(NL);
      (*mean)[c] = m;
      (*istd)[c] = T(1) / std::sqrt(v + eps);
      rmean[c] = (T(1) - momentum) * rmean[c] + momentum * m;
      rvar[c] = (T(1) - momentum) * rvar[c] + momentum * v;
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      (*mean)[c] = rmean[c];
      (*istd)[c] = T(1) / std::sqrt(rvar[c] + eps);
    }
  }

  Tensor<T> out(xs);
  auto xhat = std::make_shared<std::vector<T>>(x->value.size());
  for (std::int64_t nb = 0; nb < B; ++nb)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t t = 0; t < L; ++t) {
        const std::int64_t i = (nb * C + c) * L + t;
        const T h = (x->value[i] - (*mean)[c]) * (*istd)[c];
        (*xhat)[i] = h;
        out[i] = gamma->value[c] * h + beta->value[c];
      }
  auto n = make_op(std::move(out), {x, gamma, beta});
  Node<T>* np = n.get();
  n->backprop = [np, x, gamma, beta, xhat, istd, training, B, C, L, NL]() {
    if (gamma->requires_grad) {
      auto& g = gamma->ensure_grad();
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t t = 0; t < L; ++t) {
            const std::int64_t i = (nb * C + c) * L + t;
            g[c] += np->grad[i] * (*xhat)[i];
          }
    }
    if (beta->requires_grad) {
      auto& g = beta->ensure_grad();
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t t = 0; t < L; ++t)
            g[c] += np->grad[(nb * C + c) * L + t];
    }
    if (!x->requires_grad) return;
    auto& gx = x->ensure_grad();
    if (!training) {
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t t = 0; t < L; ++t) {
            const std::int64_t i = (nb * C + c) * L + t;
            gx[i] += np->grad[i] * gamma->value[c] * (*istd)[c];
          }
      return;
    }
    // training mode: mean/var depend on x
    for (std::int64_t c = 0; c < C; ++c) {
      T sum_g = 0, sum_gh = 0;
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t t = 0; t < L; ++t) {
          const std::int64_t i = (nb * C + c) * L + t;
          const T gy = np->grad[i] * gamma->value[c];
          sum_g += gy;
          sum_gh += gy * (*xhat)[i];
        }
      const T invNL = T(1) / static_cast<T>(NL);
      for (std::int64_t nb = 0; nb < B; ++nb)
        for (std::int64_t t = 0; t < L; ++t) {
          const std::int64_t i = (nb * C + c) * L + t;
          const T gy = np->grad[i] * gamma->value[c];
          gx[i] += (*istd)[c] *
                   (gy - invNL * sum_g - (*xhat)[i] * invNL * sum_gh);
        }
    }
  };
  return n;
}

template <typename T>
Var<T> dropout(Var<T> x, T p, bool training, std::mt19937_64& rng) {
  if (!training || p <= T(0)) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  auto mask = std::make_shared<std::vector<T>>(x->value.size());
  const T inv = T(1) / (T(1) - p);
  Tensor<T> out = x->value;
  for (std::int64_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? inv : T(0);
    out[i] *= (*mask)[i];
  }
  auto n = make_op(std::move(out), {x});
  Node<T>* np = n.get();
  n->backprop = [np, x, mask]() {
    if (!x->requires_grad) return;
    auto& g = x->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i)
      g[i] += np->grad[i] * (*mask)[i];
  };
  return n;
}

// Row-wise softmax on [B,K].
template <typename T>
Var<T> softmax(Var<T> logits) {
  const auto& xs = logits->value.shape;
  if (xs.size() != 2) throw ShapeError("softmax: expected [B,K]");
  const std::int64_t B = xs[0], K = xs[1];
  Tensor<T> out(xs);
  for (std::int64_t nb = 0; nb < B; ++nb) {
    const T* lp = &logits->value[nb * K];
    T mx = lp[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    T z = 0;
    for (std::int64_t k = 0; k < K; ++k) {
      out[nb * K + k] = std::exp(lp[k] - mx);
      z += out[nb * K + k];
    }
    for (std::int64_t k = 0; k < K; ++k) out[nb * K + k] /= z;
  }
  auto n = make_op(std::move(out), {logits});
  Node<T>* np = n.get();
  n->backprop = [np, logits, B, K]() {
    if (!logits->requires_grad) return;
    auto& g = logits->ensure_grad();
    for (std::int64_t nb = 0; nb < B; ++nb) {
      const T* p = &np->value[nb * K];
      const T* gy = &np->grad[nb * K];
      T dot = 0;
      for (std::int64_t k = 0; k < K; ++k) dot += gy[k] * p[k];
      for (std::int64_t k = 0; k < K; ++k)
        g[nb * K + k] += p[k] * (gy[k] - dot);
    }
  };
  return n;
}

// ---- vector quantization ----

// Nearest-codebook assignment per spatial position of z [B,D,H,W] against
// codebook [N,D]. Returns indices [B,H,W].
template <typename T>
std::vector<std::int64_t> nearest_codes(const Tensor<T>& z,
                                        const Tensor<T>& codebook) {
  const std::int64_t B = z.shape[0], D = z.shape[1], HW = z.shape[2] * z.shape[3];
  const std::int64_t N = codebook.shape[0];
  if (codebook.shape[1] != D)
    throw ShapeError("nearest_codes: codebook dim mismatch");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(B * HW));
  for (std::int64_t nb = 0; nb < B; ++nb)
    for (std::int64_t s = 0; s < HW; ++s) {
      T best = std::numeric_limits<T>::infinity();
      std::int64_t bi = 0;
      for (std::int64_t c = 0; c < N; ++c) {
        T dist = 0;
        for (std::int64_t d = 0; d < D; ++d) {
          const T diff = z[(nb * D + d) * HW + s] - codebook[c * D + d];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          bi = c;
        }
      }
      idx[static_cast<std::size_t>(nb * HW + s)] = bi;
    }
  return idx;
}

template <typename T>
struct QuantizeResult {
  Var<T> straight_through;  // quantized values, gradient passes to z
  Var<T> codebook_loss;     // ||sg(z) - e||^2, trains the codebook
  Var<T> commitment_loss;   // ||z - sg(e)||^2, pulls encoder toward codes
  std::vector<std::int64_t> indices;
};

template <typename T>
QuantizeResult<T> vector_quantize(Var<T> z, Var<T> codebook) {
  const auto& zs = z->value.shape;
  if (zs.size() != 4) throw ShapeError("vector_quantize: expected [B,D,H,W]");
  const std::int64_t B = zs[0], D = zs[1], HW = zs[2] * zs[3];
  auto idx = nearest_codes(z->value, codebook->value);

  // gathered code vectors, differentiable w.r.t. the codebook
  Tensor<T> q(zs);
  for (std::int64_t nb = 0; nb < B; ++nb)
    for (std::int64_t s = 0; s < HW; ++s) {
      const std::int64_t c = idx[static_cast<std::size_t>(nb * HW + s)];
      for (std::int64_t d = 0; d < D; ++d)
        q[(nb * D + d) * HW + s] = codebook->value[c * D + d];
    }

  auto idx_sh = std::make_shared<std::vector<std::int64_t>>(idx);

  // straight-through: value = q, gradient flows entirely into z
  auto st = make_op(q, {z});
  Node<T>* stp = st.get();
  st->backprop = [stp, z]() {
    if (!z->requires_grad) return;
    auto& g = z->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += stp->grad[i];
  };

  // codebook loss: mean((sg(z) - e)^2); gradient scatters into the codebook
  const T inv = T(1) / static_cast<T>(z->value.size());
  T cl = 0;
  for (std::int64_t i = 0; i < z->value.size(); ++i) {
    const T d = z->value[i] - q[i];
    cl += d * d;
  }
  Tensor<T> cl_t({1});
  cl_t[0] = cl * inv;
  auto closs = make_op(std::move(cl_t), {codebook});
  Node<T>* clp = closs.get();
  closs->backprop = [clp, z, codebook, idx_sh, inv, B, D, HW]() {
    if (!codebook->requires_grad) return;
    auto& g = codebook->ensure_grad();
    const T s0 = clp->grad[0];
    for (std::int64_t nb = 0; nb < B; ++nb)
      for (std::int64_t s = 0; s < HW; ++s) {
        const std::int64_t c = (*idx_sh)[static_cast<std::size_t>(nb * HW + s)];
        for (std::int64_t d = 0; d < D; ++d) {
          const T diff = codebook->value[c * D + d] -
                         z->value[(nb * D + d) * HW + s];
          g[c * D + d] += s0 * T(2) * inv * diff;
        }
      }
  };

  // commitment loss: mean((z - sg(e))^2)
  T cm = cl;  // same value, different gradient routing
  Tensor<T> cm_t({1});
  cm_t[0] = cm * inv;
  auto q_sh = std::make_shared<Tensor<T>>(q);
  auto mloss = make_op(std::move(cm_t), {z});
  Node<T>* mlp = mloss.get();
  mloss->backprop = [mlp, z, q_sh, inv]() {
    if (!z->requires_grad) return;
    auto& g = z->ensure_grad();
    const T s0 = mlp->grad[0];
    for (std::int64_t i = 0; i < g.size(); ++i)
      g[i] += s0 * T(2) * inv * (z->value[i] - (*q_sh)[i]);
  };

  return {st, closs, mloss, std::move(idx)};
}

// ---- initializers ----

template <typename T>
Tensor<T> kaiming_conv(Shape s, std::mt19937_64& rng) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
  const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  return randn<T>(std::move(s), rng, stddev);
}

}  // namespace ctsfda
