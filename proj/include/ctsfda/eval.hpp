#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctsfda/config.hpp"
#include "ctsfda/tta.hpp"

namespace ctsfda {

// Unweighted mean over K classes of per-class F1; a class with a zero
// precision+recall denominator contributes 0.
inline double mf1(const std::vector<std::int64_t>& predictions,
                  const LabelBatch& labels, std::int64_t k) {
  if (predictions.size() != labels.labels.size())
    throw ShapeError("mf1: prediction/label length mismatch");
  std::vector<std::int64_t> tp(static_cast<std::size_t>(k), 0);
  std::vector<std::int64_t> fp(static_cast<std::size_t>(k), 0);
  std::vector<std::int64_t> fn(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto p = predictions[i], y = labels.labels[i];
    if (p < 0 || p >= k)
      throw InvariantError("mf1: prediction outside [0, K)");
    if (p == y)
      ++tp[static_cast<std::size_t>(p)];
    else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(y)];
    }
  }
  double sum = 0;
  for (std::int64_t c = 0; c < k; ++c) {
    const auto i = static_cast<std::size_t>(c);
    const double denom =
        static_cast<double>(2 * tp[i] + fp[i] + fn[i]);
    sum += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[i]) / denom;
  }
  return sum / static_cast<double>(k);
}

// Mean over target rows of the Euclidean distance to the closest source row.
template <typename T>
double nn_distance_stat(const Tensor<T>& target_features,
                        const Tensor<T>& source_features) {
  if (target_features.shape.size() != 2 || source_features.shape.size() != 2 ||
      target_features.shape[1] != source_features.shape[1])
    throw ShapeError("nn_distance_stat: expected [N,F] with equal F");
  const std::int64_t nt = target_features.shape[0];
  const std::int64_t ns = source_features.shape[0];
  if (nt == 0 || ns == 0) throw ShapeError("nn_distance_stat: empty input");
  const std::int64_t f = target_features.shape[1];
  double acc = 0;
  for (std::int64_t i = 0; i < nt; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < ns; ++j) {
      double d = 0;
      for (std::int64_t c = 0; c < f; ++c) {
        const double diff = static_cast<double>(target_features[i * f + c]) -
                            static_cast<double>(source_features[j * f + c]);
        d += diff * diff;
      }
      best = std::min(best, d);
    }
    acc += std::sqrt(best);
  }
  return acc / static_cast<double>(nt);
}

template <typename T>
std::vector<std::int64_t> argmax_rows(const Tensor<T>& logits) {
  const std::int64_t b = logits.shape[0], k = logits.shape[1];
  std::vector<std::int64_t> out(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < k; ++c)
      if (logits[i * k + c] > logits[i * k + best]) best = c;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

template <typename T>
std::vector<std::int64_t> argmax_probs(const std::vector<ProbVector<T>>& p) {
  std::vector<std::int64_t> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < p[i].p.size(); ++c)
      if (p[i].p[c] > p[i].p[best]) best = c;
    out[i] = static_cast<std::int64_t>(best);
  }
  return out;
}

struct ScenarioResult {
  std::string scenario_id;
  double mf1_no_adapt = 0;
  double mf1_source_replay = 0;
  double mf1_full = 0;
  double mf1_full_with_ia = 0;
  double nn_distance_no_adapt = 0;
  double nn_distance_source_replay = 0;
  double nn_distance_full = 0;

  nlohmann::json to_json() const {
    return {{"scenario_id", scenario_id},
            {"mf1_no_adapt", mf1_no_adapt},
            {"mf1_source_replay", mf1_source_replay},
            {"mf1_full", mf1_full},
            {"mf1_full_with_ia", mf1_full_with_ia},
            {"nn_distance",
             {{"no_adapt", nn_distance_no_adapt},
              {"source_replay", nn_distance_source_replay},
              {"full", nn_distance_full}}}};
  }
};

// Source-pretrained artifacts shared by every stage-3 variant.
template <typename T>
struct Pipeline {
  UNet<T> unet;
  ModelParams<T> theta;
  Backbone<T> backbone;
  ModelParams<T> backbone_params;
  ReshapeSpec spec;
  TrainLog log_s1, log_s2;
};

template <typename T>
Pipeline<T> pretrain_pipeline(const DomainDataset<T>& source,
                              const RunConfig<T>& cfg) {
  Pipeline<T> p;
  p.spec = make_reshape_spec(source.d(), source.l(), cfg.reshape_h,
                             cfg.reshape_w);
  p.unet = cfg.unet;
  p.unet.in_ch = source.d();
  p.backbone = cfg.backbone;
  p.backbone.in_ch = source.d();
  p.backbone.length = source.l();
  p.backbone.num_classes = source.k;
  p.theta = pretrain_reconstructor(source, p.spec, p.unet, cfg.sched,
                                   cfg.seed, &p.log_s1);
  p.backbone_params = pretrain_backbone(source, p.theta, p.unet, p.spec,
                                        p.backbone, cfg.sched, cfg.seed + 1,
                                        &p.log_s2);
  return p;
}

namespace detail {

template <typename T>
std::vector<std::int64_t> predict_series(Pipeline<T>& p,
                                         const TimeSeriesBatch<T>& x,
                                         int chunk = 64) {
  std::vector<std::int64_t> preds;
  const std::int64_t n = x.batch(), dl = x.channels() * x.length();
  for (std::int64_t s = 0; s < n; s += chunk) {
    const std::int64_t e = std::min<std::int64_t>(s + chunk, n);
    Tensor<T> xb({e - s, x.channels(), x.length()});
    std::copy(&x.values[s * dl], &x.values[e * dl], xb.begin());
    auto logits = backbone_forward(p.backbone, p.backbone_params,
                                   TimeSeriesBatch<T>(std::move(xb)));
    for (auto v : argmax_rows(logits)) preds.push_back(v);
  }
  return preds;
}

template <typename T>
Tensor<T> features_of(Pipeline<T>& p, const TimeSeriesBatch<T>& x,
                      int chunk = 64) {
  const std::int64_t n = x.batch(), dl = x.channels() * x.length();
  Tensor<T> out({n, p.backbone.feature_dim()});
  for (std::int64_t s = 0; s < n; s += chunk) {
    const std::int64_t e = std::min<std::int64_t>(s + chunk, n);
    Tensor<T> xb({e - s, x.channels(), x.length()});
    std::copy(&x.values[s * dl], &x.values[e * dl], xb.begin());
    auto f = backbone_features(p.backbone, p.backbone_params,
                               TimeSeriesBatch<T>(std::move(xb)));
    std::copy(f.begin(), f.end(), &out[s * p.backbone.feature_dim()]);
  }
  return out;
}

template <typename T>
ImageTensor<T> warp_value(const WarpBlock<T>& warp, ModelParams<T>& phi,
                          const ImageTensor<T>& img) {
  return warp_forward(warp, phi, img).reconstructed;
}

template <typename T>
ImageTensor<T> warp_value(const UNet<T>& warp, ModelParams<T>& phi,
                          const ImageTensor<T>& img) {
  return unet_forward(warp, phi, img);
}

// Composed reconstruction of a whole dataset with the adapted warp block.
template <typename T, typename WarpModel>
TimeSeriesBatch<T> composed_series(Pipeline<T>& p, ModelParams<T>& phi,
                                   const WarpModel& warp,
                                   const ScalingFactors<T>& factors,
                                   const DomainDataset<T>& ds,
                                   int chunk = 64) {
  Tensor<T> out(ds.series.values.shape);
  const std::int64_t dl = ds.d() * ds.l();
  for (std::int64_t s = 0; s < ds.n(); s += chunk) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = s; i < std::min<std::int64_t>(s + chunk, ds.n()); ++i)
      idx.push_back(i);
    auto img = series_to_image(ds.batch(idx), p.spec);
    auto u_img = unet_forward(p.unet, p.theta, img);
    auto w_img = warp_value(warp, phi, u_img);
    auto comp = compose_reconstruction(image_to_series(u_img, p.spec),
                                       image_to_series(w_img, p.spec),
                                       factors);
    std::copy(comp.values.begin(), comp.values.end(), &out[s * dl]);
  }
  return TimeSeriesBatch<T>(std::move(out));
}

}  // namespace detail

// Full scenario: stages 1-3 plus TTA evaluation. Post-hoc analysis; may read
// source data (adapt_group itself remains source-free).
template <typename T>
ScenarioResult run_scenario(const DomainDataset<T>& source,
                            const DomainDataset<T>& target,
                            const RunConfig<T>& cfg,
                            Pipeline<T>* pretrained = nullptr,
                            TrainLog* log_s3 = nullptr) {
  if (source.d() != target.d() || source.l() != target.l() ||
      source.k != target.k)
    throw ShapeError("run_scenario: incompatible source/target shapes");
  if (!target.labels)
    throw InvariantError("run_scenario: target labels required for MF1");

  Pipeline<T> local;
  Pipeline<T>& p = pretrained ? *pretrained : local;
  if (!pretrained) p = pretrain_pipeline(source, cfg);

  ScenarioResult r;
  r.scenario_id = source.domain_id + "->" + target.domain_id;

  // stage-3 adaptation sees only the unlabeled target
  DomainDataset<T> unlabeled = target;
  unlabeled.labels.reset();
  WarpBlock<T> warp = cfg.warp;
  warp.in_ch = source.d();
  auto [phi, factors] = adapt_group_with(
      unlabeled, p.theta, p.unet, p.backbone_params, p.backbone, warp,
      warp.init(cfg.seed ^ 0x7f4a7c15u), p.spec, cfg.adapt, cfg.sched,
      cfg.seed, log_s3);

  auto replay_src = replay_series(source, p.spec, p.unet, p.theta);
  auto replay_tgt = replay_series(target, p.spec, p.unet, p.theta);
  auto full_tgt = detail::composed_series(p, phi, warp, factors, target);

  r.mf1_no_adapt =
      mf1(detail::predict_series(p, target.series), *target.labels, target.k);
  r.mf1_source_replay =
      mf1(detail::predict_series(p, replay_tgt), *target.labels, target.k);
  r.mf1_full =
      mf1(detail::predict_series(p, full_tgt), *target.labels, target.k);

  auto src_feats = detail::features_of(p, replay_src);
  r.nn_distance_no_adapt =
      nn_distance_stat(detail::features_of(p, target.series), src_feats);
  r.nn_distance_source_replay =
      nn_distance_stat(detail::features_of(p, replay_tgt), src_feats);
  r.nn_distance_full =
      nn_distance_stat(detail::features_of(p, full_tgt), src_feats);

  freeze(phi);
  EnsembleContext<T> ctx{&p.unet,     &p.theta,  &warp,
                         &phi,        &p.backbone, &p.backbone_params,
                         p.spec,      factors,   cfg.tta,
                         cfg.weighting};
  std::vector<std::int64_t> ia_preds;
  const std::int64_t dl = target.d() * target.l();
  for (std::int64_t s = 0; s < target.n(); s += 64) {
    const std::int64_t e = std::min<std::int64_t>(s + 64, target.n());
    Tensor<T> xb({e - s, target.d(), target.l()});
    std::copy(&target.series.values[s * dl], &target.series.values[e * dl],
              xb.begin());
    for (auto v :
         argmax_probs(ensemble_predict(TimeSeriesBatch<T>(std::move(xb)), ctx)))
      ia_preds.push_back(v);
  }
  r.mf1_full_with_ia = mf1(ia_preds, *target.labels, target.k);
  return r;
}

// Persist a scenario result as JSON plus a flat CSV row
// (Algorithm / scenarios / AVG layout) and the distance-vs-stage series.
inline void write_scenario_files(const ScenarioResult& r,
                                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "scenario.json") << r.to_json().dump(2) << "\n";
  {
    std::ofstream csv(dir / "table.csv");
    csv << "Algorithm," << r.scenario_id << ",AVG\n";
    csv << "no-adapt," << r.mf1_no_adapt << "," << r.mf1_no_adapt << "\n";
    csv << "source-replay," << r.mf1_source_replay << ","
        << r.mf1_source_replay << "\n";
    csv << "full," << r.mf1_full << "," << r.mf1_full << "\n";
    csv << "full+IA," << r.mf1_full_with_ia << "," << r.mf1_full_with_ia
        << "\n";
  }
  {
    std::ofstream csv(dir / "nn_distance.csv");
    csv << "stage,distance\n";
    csv << "no-adapt," << r.nn_distance_no_adapt << "\n";
    csv << "source-replay," << r.nn_distance_source_replay << "\n";
    csv << "full," << r.nn_distance_full << "\n";
  }
}

// ---- ablation suites ----

struct AblationRow {
  std::string variant;
  double mf1 = 0;
};

template <typename T>
double run_full_mf1(const DomainDataset<T>& source,
                    const DomainDataset<T>& target, const RunConfig<T>& cfg,
                    Pipeline<T>& p, const AdaptOptions& opts,
                    const AdaptConfig<T>& adapt_cfg, bool with_ia,
                    StabilityWeighting weighting) {
  DomainDataset<T> unlabeled = target;
  unlabeled.labels.reset();
  WarpBlock<T> warp = cfg.warp;
  warp.in_ch = source.d();
  auto [phi, factors] = adapt_group_with(
      unlabeled, p.theta, p.unet, p.backbone_params, p.backbone, warp,
      warp.init(cfg.seed ^ 0x7f4a7c15u), p.spec, adapt_cfg, cfg.sched,
      cfg.seed, nullptr, opts);
  ScalingFactors<T> eval_factors{static_cast<T>(opts.v_s), factors.v_t};
  if (!with_ia) {
    auto full = detail::composed_series(p, phi, warp, eval_factors, target);
    return mf1(detail::predict_series(p, full), *target.labels, target.k);
  }
  freeze(phi);
  EnsembleContext<T> ctx{&p.unet,       &p.theta,  &warp,
                         &phi,          &p.backbone, &p.backbone_params,
                         p.spec,        eval_factors, cfg.tta,
                         weighting};
  std::vector<std::int64_t> preds;
  const std::int64_t dl = target.d() * target.l();
  for (std::int64_t s = 0; s < target.n(); s += 64) {
    const std::int64_t e = std::min<std::int64_t>(s + 64, target.n());
    Tensor<T> xb({e - s, target.d(), target.l()});
    std::copy(&target.series.values[s * dl], &target.series.values[e * dl],
              xb.begin());
    for (auto v :
         argmax_probs(ensemble_predict(TimeSeriesBatch<T>(std::move(xb)), ctx)))
      preds.push_back(v);
  }
  return mf1(preds, *target.labels, target.k);
}

// suite_id in {reconstructor-config, branch, loss, ia-weighting}.
template <typename T>
std::vector<AblationRow> run_ablation(const std::string& suite_id,
                                      const DomainDataset<T>& source,
                                      const DomainDataset<T>& target,
                                      const RunConfig<T>& cfg) {
  if (!target.labels)
    throw InvariantError("run_ablation: target labels required");
  std::vector<AblationRow> rows;

  auto adapt_with_warp = [&](Pipeline<T>& p, auto warp_model,
                             const std::string& name) {
    DomainDataset<T> unlabeled = target;
    unlabeled.labels.reset();
    auto [phi, factors] = adapt_group_with(
        unlabeled, p.theta, p.unet, p.backbone_params, p.backbone, warp_model,
        warp_model.init(cfg.seed ^ 0x7f4a7c15u), p.spec, cfg.adapt, cfg.sched,
        cfg.seed);
    auto full = detail::composed_series(p, phi, warp_model, factors, target);
    rows.push_back(
        {name,
         mf1(detail::predict_series(p, full), *target.labels, target.k)});
  };

  if (suite_id == "reconstructor-config") {
    for (bool unet_first : {false, true}) {
      RunConfig<T> c = cfg;
      c.unet.skips = unet_first;
      Pipeline<T> p = pretrain_pipeline(source, c);
      const std::string first = unet_first ? "U-net" : "AE";
      // warp slot: plain AE (the VQ warp block) vs a second U-net
      WarpBlock<T> vq = cfg.warp;
      vq.in_ch = source.d();
      adapt_with_warp(p, vq, first + "+AE");
      UNet<T> warp_unet;
      warp_unet.in_ch = source.d();
      warp_unet.base = std::max<std::int64_t>(4, cfg.unet.base / 2);
      warp_unet.depth = std::max(1, cfg.unet.depth - 1);
      adapt_with_warp(p, warp_unet, first + "+U-net");
    }
    return rows;
  }

  Pipeline<T> p = pretrain_pipeline(source, cfg);

  if (suite_id == "branch") {
    AdaptOptions wo_sr;
    wo_sr.v_s = 0.0;
    rows.push_back({"CT w/o SR-branch",
                    run_full_mf1(source, target, cfg, p, wo_sr, cfg.adapt,
                                 false, cfg.weighting)});
    AdaptOptions wo_oc;
    wo_oc.freeze_v_t = true;
    rows.push_back({"CT w/o OC-branch",
                    run_full_mf1(source, target, cfg, p, wo_oc, cfg.adapt,
                                 false, cfg.weighting)});
    rows.push_back({"Full CT",
                    run_full_mf1(source, target, cfg, p, {}, cfg.adapt, false,
                                 cfg.weighting)});
  } else if (suite_id == "loss") {
    AdaptConfig<T> mse_only = cfg.adapt;
    mse_only.lambda = T(0);
    rows.push_back({"MSE only", run_full_mf1(source, target, cfg, p, {},
                                             mse_only, false, cfg.weighting)});
    rows.push_back({"MSE+UR", run_full_mf1(source, target, cfg, p, {},
                                           cfg.adapt, false, cfg.weighting)});
  } else if (suite_id == "ia-weighting") {
    rows.push_back({"CT w/o IA",
                    run_full_mf1(source, target, cfg, p, {}, cfg.adapt, false,
                                 cfg.weighting)});
    rows.push_back({"IA by Entropy",
                    run_full_mf1(source, target, cfg, p, {}, cfg.adapt, true,
                                 StabilityWeighting::kEntropy)});
    rows.push_back({"IA by CosSim",
                    run_full_mf1(source, target, cfg, p, {}, cfg.adapt, true,
                                 StabilityWeighting::kCosine)});
  } else {
    throw ConfigError("unknown ablation suite: " + suite_id);
  }
  return rows;
}

inline void write_ablation_files(const std::string& suite_id,
                                 const std::vector<AblationRow>& rows,
                                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["suite"] = suite_id;
  j["rows"] = nlohmann::json::array();
  std::ofstream csv(dir / "table.csv");
  csv << "Variant,MF1\n";
  for (const auto& r : rows) {
    j["rows"].push_back({{"variant", r.variant}, {"mf1", r.mf1}});
    csv << r.variant << "," << r.mf1 << "\n";
  }
  std::ofstream(dir / "ablation.json") << j.dump(2) << "\n";
}

}  // namespace ctsfda
