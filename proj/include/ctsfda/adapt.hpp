#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ctsfda/ingest.hpp"
#include "ctsfda/losses.hpp"
#include "ctsfda/models.hpp"

namespace ctsfda {

// Branch weights of the composed reconstruction. v_S stays at 1 through all
// training stages; only the instance-wise adaptation perturbs it.
template <typename T>
struct ScalingFactors {
  T v_s = T(1);
  T v_t = T(0);
};

struct StageEntry {
  double lr = 5e-3;
  int epochs = 8;
};

// Learning rate and epoch count per training stage (reconstructor, backbone,
// warp block), plus the shared batch size.
struct StageSchedule {
  StageEntry s1{5e-3, 8};
  StageEntry s2{2e-3, 20};
  StageEntry s3{5e-3, 8};
  int batch_size = 32;

  void validate() const {
    for (const auto& e : {s1, s2, s3})
      if (e.lr <= 0 || e.epochs < 1)
        throw ConfigError("StageSchedule: positive lr and epochs required");
    if (batch_size < 1) throw ConfigError("StageSchedule: batch_size >= 1");
  }
};

struct EpochLog {
  int epoch = 0;
  std::map<std::string, double> losses;
};

struct TrainLog {
  std::string stage;
  std::vector<EpochLog> epochs;
};

// Adaptive moment estimation. Skips frozen arrays and buffers.
template <typename T>
class Adam {
 public:
  explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamBank<T>& bank) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (const auto& [name, leaf] : bank.leaves()) {
      if (!leaf->requires_grad || leaf->grad.shape != leaf->value.shape)
        continue;
      auto& target = bank.params().at(name);
      auto& m = state(m_, name, target.shape);
      auto& v = state(v_, name, target.shape);
      for (std::int64_t i = 0; i < target.size(); ++i) {
        const T g = leaf->grad[i];
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g;
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g * g;
        target[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

 private:
  Tensor<T>& state(std::map<std::string, Tensor<T>>& store,
                   const std::string& name, const Shape& shape) {
    auto it = store.find(name);
    if (it == store.end())
      it = store.emplace(name, Tensor<T>::zeros(shape)).first;
    return it->second;
  }

  T lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor<T>> m_, v_;
};

// Elementwise v_T * w + v_S * u over series batches.
template <typename T>
TimeSeriesBatch<T> compose_reconstruction(const TimeSeriesBatch<T>& u,
                                          const TimeSeriesBatch<T>& w,
                                          const ScalingFactors<T>& s) {
  require_same_shape(u.values, w.values, "compose_reconstruction");
  Tensor<T> out(u.values.shape);
  for (std::int64_t i = 0; i < out.size(); ++i)
    out[i] = s.v_t * w.values[i] + s.v_s * u.values[i];
  return TimeSeriesBatch<T>(std::move(out));
}

namespace detail {

// Graph version of image_to_series: per-channel row-major flatten, dropping
// the trailing pad_len entries.
template <typename T>
Var<T> image_to_series_var(Var<T> img, const ReshapeSpec& spec) {
  const auto& s = img->value.shape;
  if (s.size() != 4 || s[1] != spec.c || s[2] != spec.h || s[3] != spec.w)
    throw ShapeError("image_to_series_var: shape mismatch " + shape_str(s));
  const std::int64_t b = s[0], hw = spec.h * spec.w;
  Tensor<T> out({b, spec.d, spec.l});
  for (std::int64_t nc = 0; nc < b * spec.c; ++nc)
    std::copy(&img->value[nc * hw], &img->value[nc * hw + spec.l],
              &out[nc * spec.l]);
  auto n = make_op(std::move(out), {img});
  Node<T>* np = n.get();
  const std::int64_t bc = b * spec.c, l = spec.l;
  n->backprop = [np, img, bc, hw, l]() {
    if (!img->requires_grad) return;
    auto& g = img->ensure_grad();
    for (std::int64_t nc = 0; nc < bc; ++nc)
      for (std::int64_t t = 0; t < l; ++t)
        g[nc * hw + t] += np->grad[nc * l + t];
  };
  return n;
}

inline std::vector<std::vector<std::int64_t>> make_batches(
    std::int64_t n, int batch_size, std::mt19937_64& rng) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::int64_t>> batches;
  for (std::int64_t s = 0; s < n; s += batch_size)
    batches.emplace_back(idx.begin() + s,
                         idx.begin() + std::min<std::int64_t>(s + batch_size, n));
  return batches;
}

template <typename T>
void check_loss_finite(T loss, const std::string& stage, int epoch) {
  if (!std::isfinite(static_cast<double>(loss)))
    throw DivergenceError(stage, epoch);
}

}  // namespace detail

// Stage 1: train the reconstructor on source with MSE, return it frozen.
template <typename T>
ModelParams<T> pretrain_reconstructor(const DomainDataset<T>& source,
                                      const ReshapeSpec& spec,
                                      const UNet<T>& model,
                                      const StageSchedule& sched,
                                      std::uint64_t seed,
                                      TrainLog* log = nullptr) {
  sched.validate();
  auto theta = model.init(seed);
  Adam<T> opt(static_cast<T>(sched.s1.lr));
  std::mt19937_64 rng(seed ^ 0x5bd1e995u);
  if (log) *log = {"pretrain_reconstructor", {}};
  for (int epoch = 0; epoch < sched.s1.epochs; ++epoch) {
    double epoch_loss = 0;
    std::int64_t seen = 0;
    for (const auto& idx : detail::make_batches(source.n(), sched.batch_size,
                                                rng)) {
      auto img = series_to_image(source.batch(idx), spec);
      auto img_leaf = make_leaf(img.values, false);
      ParamBank<T> bank(theta, true);
      auto out = model.forward(bank, img_leaf);
      auto loss = mse(out, img_leaf);
      detail::check_loss_finite(loss->value[0], "pretrain_reconstructor",
                                epoch);
      backward(loss);
      opt.step(bank);
      epoch_loss += static_cast<double>(loss->value[0]) *
                    static_cast<double>(idx.size());
      seen += static_cast<std::int64_t>(idx.size());
    }
    if (log)
      log->epochs.push_back(
          {epoch, {{"mse", epoch_loss / static_cast<double>(seen)}}});
  }
  freeze(theta);
  return theta;
}

// Reconstruct a whole dataset through the frozen reconstructor, in chunks.
template <typename T>
TimeSeriesBatch<T> replay_series(const DomainDataset<T>& ds,
                                 const ReshapeSpec& spec, const UNet<T>& model,
                                 ModelParams<T>& theta, int chunk = 64) {
  Tensor<T> out(ds.series.values.shape);
  for (std::int64_t s = 0; s < ds.n(); s += chunk) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = s; i < std::min<std::int64_t>(s + chunk, ds.n()); ++i)
      idx.push_back(i);
    auto img = series_to_image(ds.batch(idx), spec);
    auto rec = image_to_series(unet_forward(model, theta, img), spec);
    std::copy(rec.values.begin(), rec.values.end(),
              &out[s * ds.d() * ds.l()]);
  }
  return TimeSeriesBatch<T>(std::move(out));
}

// Stage 2: train the classification backbone with cross-entropy on the
// reconstructed source series, return it frozen.
template <typename T>
ModelParams<T> pretrain_backbone(const DomainDataset<T>& source,
                                 ModelParams<T>& theta, const UNet<T>& unet,
                                 const ReshapeSpec& spec,
                                 const Backbone<T>& model,
                                 const StageSchedule& sched,
                                 std::uint64_t seed,
                                 TrainLog* log = nullptr) {
  sched.validate();
  if (!theta.all_frozen() || !assert_frozen(theta))
    throw InvariantError("pretrain_backbone: reconstructor must be frozen");
  if (!source.labels)
    throw InvariantError("pretrain_backbone: source must be labeled");

  auto replay = replay_series(source, spec, unet, theta);
  auto params = model.init(seed);
  Adam<T> opt(static_cast<T>(sched.s2.lr));
  std::mt19937_64 rng(seed ^ 0xa511e9b3u);
  if (log) *log = {"pretrain_backbone", {}};
  const std::int64_t dl = source.d() * source.l();
  for (int epoch = 0; epoch < sched.s2.epochs; ++epoch) {
    double epoch_loss = 0;
    std::int64_t seen = 0;
    for (const auto& idx : detail::make_batches(source.n(), sched.batch_size,
                                                rng)) {
      Tensor<T> xb({static_cast<std::int64_t>(idx.size()), source.d(),
                    source.l()});
      for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(&replay.values[idx[i] * dl], &replay.values[(idx[i] + 1) * dl],
                  &xb[static_cast<std::int64_t>(i) * dl]);
      auto labels = source.label_batch(idx);
      ParamBank<T> bank(params, true);
      auto logits = model.logits(bank, make_leaf(std::move(xb), false), true,
                                 rng);
      auto loss = cross_entropy(logits, labels);
      detail::check_loss_finite(loss->value[0], "pretrain_backbone", epoch);
      backward(loss);
      opt.step(bank);
      epoch_loss += static_cast<double>(loss->value[0]) *
                    static_cast<double>(idx.size());
      seen += static_cast<std::int64_t>(idx.size());
    }
    if (log)
      log->epochs.push_back(
          {epoch, {{"cross_entropy", epoch_loss / static_cast<double>(seen)}}});
  }
  if (!assert_frozen(theta))
    throw InvariantError("pretrain_backbone: reconstructor changed");
  freeze(params);
  return params;
}

struct AdaptOptions {
  bool freeze_v_t = false;  // ablation: offset branch disabled (v_T == 0)
  double v_s = 1.0;         // ablation: 0 disables the source-replay branch
};

// Stage 3: group-level adaptation. Trains the warp block and v_T on the
// unlabeled target set; the reconstructor and backbone stay frozen and no
// source data is reachable from here.
template <typename T>
std::pair<ModelParams<T>, ScalingFactors<T>> adapt_group(
    const DomainDataset<T>& target, ModelParams<T>& theta, const UNet<T>& unet,
    ModelParams<T>& backbone_params, const Backbone<T>& backbone,
    const ReshapeSpec& spec, const AdaptConfig<T>& cfg,
    const StageSchedule& sched, std::uint64_t seed, TrainLog* log = nullptr,
    const AdaptOptions& opts = {}) {
  sched.validate();
  cfg.validate();
  if (!theta.all_frozen() || !assert_frozen(theta))
    throw InvariantError("adapt_group: reconstructor must be frozen");
  if (!backbone_params.all_frozen() || !assert_frozen(backbone_params))
    throw InvariantError("adapt_group: backbone must be frozen");

  WarpBlock<T> warp;
  warp.in_ch = spec.c;
  auto phi = warp.init(seed ^ 0x7f4a7c15u);
  return adapt_group_with(target, theta, unet, backbone_params, backbone,
                          warp, std::move(phi), spec, cfg, sched, seed, log,
                          opts);
}

// Same as adapt_group but with a caller-supplied warp block (used by the
// ablation runner to swap architectures).
template <typename T, typename WarpModel>
std::pair<ModelParams<T>, ScalingFactors<T>> adapt_group_with(
    const DomainDataset<T>& target, ModelParams<T>& theta, const UNet<T>& unet,
    ModelParams<T>& backbone_params, const Backbone<T>& backbone,
    const WarpModel& warp, ModelParams<T> phi, const ReshapeSpec& spec,
    const AdaptConfig<T>& cfg, const StageSchedule& sched, std::uint64_t seed,
    TrainLog* log = nullptr, const AdaptOptions& opts = {}) {
  if (!theta.all_frozen() || !assert_frozen(theta))
    throw InvariantError("adapt_group: reconstructor must be frozen");
  if (!backbone_params.all_frozen() || !assert_frozen(backbone_params))
    throw InvariantError("adapt_group: backbone must be frozen");
  const T v_s = static_cast<T>(opts.v_s);

  // The frozen reconstructor output is fixed; compute it once up front.
  Tensor<T> replay_img({target.n(), spec.c, spec.h, spec.w});
  {
    const std::int64_t chw = spec.c * spec.h * spec.w;
    for (std::int64_t s = 0; s < target.n(); s += 64) {
      std::vector<std::int64_t> idx;
      for (std::int64_t i = s; i < std::min<std::int64_t>(s + 64, target.n());
           ++i)
        idx.push_back(i);
      auto img = series_to_image(target.batch(idx), spec);
      auto rec = unet_forward(unet, theta, img);
      std::copy(rec.values.begin(), rec.values.end(), &replay_img[s * chw]);
    }
  }

  ModelParams<T> scale;
  scale.add("v_t", Tensor<T>::zeros({1}));  // start at pure source replay
  if (opts.freeze_v_t) {
    scale.frozen.insert("v_t");
    scale.frozen_fingerprint_at_freeze = scale.frozen_fingerprint();
  }

  Adam<T> opt_phi(static_cast<T>(sched.s3.lr));
  Adam<T> opt_scale(static_cast<T>(sched.s3.lr));
  std::mt19937_64 rng(seed ^ 0xc2b2ae35u);
  if (log) *log = {"adapt_group", {}};
  const std::int64_t chw = spec.c * spec.h * spec.w;
  const std::int64_t dl = spec.d * spec.l;

  for (int epoch = 0; epoch < sched.s3.epochs; ++epoch) {
    double mse_sum = 0, ur_sum = 0;
    std::int64_t seen = 0;
    for (const auto& idx : detail::make_batches(target.n(), sched.batch_size,
                                                rng)) {
      const auto b = static_cast<std::int64_t>(idx.size());
      Tensor<T> u_img({b, spec.c, spec.h, spec.w});
      for (std::int64_t i = 0; i < b; ++i)
        std::copy(&replay_img[idx[static_cast<std::size_t>(i)] * chw],
                  &replay_img[(idx[static_cast<std::size_t>(i)] + 1) * chw],
                  &u_img[i * chw]);
      auto x_leaf = make_leaf(target.batch(idx).values, false);
      auto u_leaf = make_leaf(std::move(u_img), false);

      ParamBank<T> bank_phi(phi, true);
      ParamBank<T> bank_scale(scale, true);
      ParamBank<T> bank_bb(backbone_params, false);

      auto warped = warp_graph(warp, bank_phi, u_leaf);
      auto w_series = detail::image_to_series_var(warped.reconstructed, spec);
      auto u_series = detail::image_to_series_var(u_leaf, spec);
      auto composed = add(scale_var(w_series, bank_scale.get("v_t")),
                          scale_const(u_series, v_s));

      auto mse_t = mse(x_leaf, composed);
      auto logits = backbone.logits(bank_bb, composed, false, rng);
      auto ur = tsallis_ur(softmax(logits), cfg.q);
      auto loss = add(mse_t, scale_const(ur, cfg.lambda));
      if (warped.codebook_loss)
        loss = add(loss,
                   add(scale_const(warped.codebook_loss, cfg.codebook_coeff),
                       scale_const(warped.commitment_loss,
                                   cfg.commitment_coeff)));
      detail::check_loss_finite(loss->value[0], "adapt_group", epoch);
      backward(loss);
      opt_phi.step(bank_phi);
      opt_scale.step(bank_scale);

      mse_sum += static_cast<double>(mse_t->value[0]) * static_cast<double>(b);
      ur_sum += static_cast<double>(ur->value[0]) * static_cast<double>(b);
      seen += b;
      (void)dl;
    }
    if (log)
      log->epochs.push_back(
          {epoch,
           {{"mse_t", mse_sum / static_cast<double>(seen)},
            {"ur_t", ur_sum / static_cast<double>(seen)}}});
  }

  if (!assert_frozen(theta) || !assert_frozen(backbone_params))
    throw InvariantError("adapt_group: frozen parameters changed");

  ScalingFactors<T> factors;
  factors.v_s = T(1);  // v_S stays 1 through training; opts.v_s is eval-only
  factors.v_t = scale.at("v_t")[0];
  return {std::move(phi), factors};
}

// Uniform warp-forward shim so adapt_group_with accepts either the VQ warp
// block or a U-net standing in for it.
template <typename T>
struct WarpGraphResult {
  Var<T> reconstructed;
  Var<T> codebook_loss;    // null when the warp has no quantizer
  Var<T> commitment_loss;  // null when the warp has no quantizer
};

template <typename T>
WarpGraphResult<T> warp_graph(const WarpBlock<T>& warp, ParamBank<T>& bank,
                              Var<T> img) {
  auto out = warp.forward(bank, img);
  return {out.reconstructed, out.codebook_loss, out.commitment_loss};
}

template <typename T>
WarpGraphResult<T> warp_graph(const UNet<T>& warp, ParamBank<T>& bank,
                              Var<T> img) {
  return {warp.forward(bank, img), nullptr, nullptr};
}

}  // namespace ctsfda
