#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctsfda/datamodel.hpp"

namespace ctsfda {

// Per-process record of dataset directories opened by load_dataset; the CLI
// uses it to audit that the adapt command never touches the source path.
inline std::vector<std::string>& opened_dataset_paths() {
  static std::vector<std::string> paths;
  return paths;
}

template <typename T>
struct DomainDataset {
  TimeSeriesBatch<T> series;           // [N, d, L]
  std::optional<LabelBatch> labels;    // absent for unlabeled target
  std::string domain_id;
  std::int64_t k = 0;

  // Invoked whenever the data is read through batch()/label_batch(); the
  // source-free contract tests install a trap here.
  std::function<void()> access_audit;

  std::int64_t n() const { return series.batch(); }
  std::int64_t d() const { return series.channels(); }
  std::int64_t l() const { return series.length(); }

  TimeSeriesBatch<T> batch(const std::vector<std::int64_t>& idx) const {
    if (access_audit) access_audit();
    const std::int64_t dd = d(), ll = l();
    Tensor<T> out({static_cast<std::int64_t>(idx.size()), dd, ll});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(&series.values[idx[i] * dd * ll],
                &series.values[(idx[i] + 1) * dd * ll],
                &out[static_cast<std::int64_t>(i) * dd * ll]);
    return TimeSeriesBatch<T>(std::move(out));
  }

  LabelBatch label_batch(const std::vector<std::int64_t>& idx) const {
    if (access_audit) access_audit();
    if (!labels) throw InvariantError("dataset " + domain_id + " is unlabeled");
    std::vector<std::int64_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels->labels[i]);
    return LabelBatch(std::move(out), k);
  }
};

// ---- container format ----
// Directory with manifest.json plus series.bin (f32le, row-major [N,d,L])
// and optional labels.bin (i64le [N]).

template <typename T>
void save_dataset(const DomainDataset<T>& ds,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["n"] = ds.n();
  manifest["d"] = ds.d();
  manifest["l"] = ds.l();
  manifest["k"] = ds.k;
  manifest["dtype"] = "f32le";
  manifest["has_labels"] = ds.labels.has_value();
  manifest["domain_id"] = ds.domain_id;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";

  std::vector<float> f32(ds.series.values.data.begin(),
                         ds.series.values.data.end());
  std::ofstream series(dir / "series.bin", std::ios::binary);
  series.write(reinterpret_cast<const char*>(f32.data()),
               static_cast<std::streamsize>(f32.size() * sizeof(float)));
  if (ds.labels) {
    std::ofstream labels(dir / "labels.bin", std::ios::binary);
    labels.write(
        reinterpret_cast<const char*>(ds.labels->labels.data()),
        static_cast<std::streamsize>(ds.labels->labels.size() *
                                     sizeof(std::int64_t)));
  }
}

template <typename T>
DomainDataset<T> load_dataset(const std::filesystem::path& dir) {
  opened_dataset_paths().push_back(dir.string());
  std::ifstream in(dir / "manifest.json");
  if (!in)
    throw ConfigError("missing dataset manifest: " +
                      (dir / "manifest.json").string());
  nlohmann::json manifest;
  in >> manifest;
  if (manifest.value("dtype", "") != std::string("f32le"))
    throw ConfigError("unsupported dtype in " + dir.string());
  const std::int64_t n = manifest["n"], d = manifest["d"], l = manifest["l"];
  const std::int64_t k = manifest["k"];
  if (n < 1 || d < 1 || l < 1 || k < 1)
    throw ConfigError("degenerate manifest in " + dir.string());

  std::ifstream series(dir / "series.bin", std::ios::binary);
  if (!series) throw ConfigError("missing series.bin in " + dir.string());
  std::vector<float> f32(static_cast<std::size_t>(n * d * l));
  series.read(reinterpret_cast<char*>(f32.data()),
              static_cast<std::streamsize>(f32.size() * sizeof(float)));
  if (!series || series.peek() != EOF)
    throw ConfigError("series.bin size does not match manifest [" +
                      std::to_string(n) + "," + std::to_string(d) + "," +
                      std::to_string(l) + "]");

  DomainDataset<T> ds;
  ds.series = TimeSeriesBatch<T>(
      Tensor<T>({n, d, l}, std::vector<T>(f32.begin(), f32.end())));
  ds.series.check_finite();
  ds.k = k;
  ds.domain_id = manifest.value("domain_id", dir.filename().string());

  if (manifest.value("has_labels", false)) {
    std::ifstream labels(dir / "labels.bin", std::ios::binary);
    if (!labels) throw ConfigError("missing labels.bin in " + dir.string());
    std::vector<std::int64_t> lab(static_cast<std::size_t>(n));
    labels.read(reinterpret_cast<char*>(lab.data()),
                static_cast<std::streamsize>(lab.size() *
                                             sizeof(std::int64_t)));
    if (!labels || labels.peek() != EOF)
      throw ConfigError("labels.bin size does not match manifest");
    ds.labels = LabelBatch(std::move(lab), k);  // throws on label >= k
  }
  return ds;
}

// ---- synthetic domain-shift generator ----

struct ShiftConfig {
  double amplitude_scale = 1.6;
  double time_warp_strength = 0.2;
  double noise_sigma = 0.1;
  double channel_offset = 0.4;
  std::uint64_t seed = 1;
};

namespace detail {

// Per-class waveform: sine / sawtooth / chirp templates with a
// class-specific base frequency.
inline double class_waveform(std::int64_t cls, double freq, double t,
                             double phase) {
  const double two_pi = 6.283185307179586;
  switch (cls % 3) {
    case 0:
      return std::sin(two_pi * freq * t + phase);
    case 1: {
      double u = freq * t + phase / two_pi;
      return 2.0 * (u - std::floor(u)) - 1.0;
    }
    default:
      return std::sin(two_pi * (freq * t * (1.0 + 0.5 * t)) + phase);
  }
}

// Random smooth monotone map of [0,1]: exponentiated Gaussian increments at
// a few knots, piecewise-linear in between.
inline std::vector<double> monotone_warp_knots(double strength,
                                               std::mt19937_64& rng,
                                               int segments = 8) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> knots(segments + 1, 0.0);
  for (int j = 1; j <= segments; ++j)
    knots[j] = knots[j - 1] + std::exp(strength * gauss(rng));
  for (auto& v : knots) v /= knots.back();
  return knots;
}

inline double eval_warp(const std::vector<double>& knots, double t) {
  const int segs = static_cast<int>(knots.size()) - 1;
  const double x = t * segs;
  const int j = std::min(static_cast<int>(x), segs - 1);
  const double frac = x - j;
  return knots[j] + frac * (knots[j + 1] - knots[j]);
}

}  // namespace detail

// Class-conditional source signals plus a feature-shifted target copy with
// the same labels. The identity ShiftConfig (scale 1, warp 0, noise 0,
// offset 0) yields a target bit-identical to the source.
template <typename T>
std::pair<DomainDataset<T>, DomainDataset<T>> generate_synthetic_pair(
    std::int64_t base_classes, std::int64_t n_per_class, std::int64_t d,
    std::int64_t l, const ShiftConfig& shift) {
  if (base_classes < 2)
    throw ConfigError("generate_synthetic_pair: need at least 2 classes");
  if (l < 16) throw ConfigError("generate_synthetic_pair: L must be >= 16");
  if (n_per_class < 1)
    throw ConfigError("generate_synthetic_pair: n_per_class must be >= 1");
  if (shift.amplitude_scale <= 0 || shift.time_warp_strength < 0 ||
      shift.noise_sigma < 0)
    throw ConfigError("generate_synthetic_pair: invalid ShiftConfig");

  const std::int64_t n = base_classes * n_per_class;
  std::mt19937_64 src_rng(shift.seed);
  std::mt19937_64 tgt_rng(shift.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> phase_dist(0.0, 6.283185307179586);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double intrinsic_noise = 0.05;

  Tensor<T> src({n, d, l});
  std::vector<std::int64_t> labels(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t cls = i / n_per_class;
    labels[static_cast<std::size_t>(i)] = cls;
    const double freq = 4.0 + 3.0 * static_cast<double>(cls);
    const double phase = phase_dist(src_rng);
    for (std::int64_t ch = 0; ch < d; ++ch) {
      const double ch_phase = phase + 0.7 * static_cast<double>(ch);
      for (std::int64_t t = 0; t < l; ++t) {
        const double u = static_cast<double>(t) / static_cast<double>(l);
        src[(i * d + ch) * l + t] = static_cast<T>(
            detail::class_waveform(cls, freq, u, ch_phase) +
            intrinsic_noise * gauss(src_rng));
      }
    }
  }

  Tensor<T> tgt = src;
  const bool warp_on = shift.time_warp_strength > 0;
  const bool noise_on = shift.noise_sigma > 0;
  const bool scale_on = shift.amplitude_scale != 1.0;
  const bool offset_on = shift.channel_offset != 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> knots;
    if (warp_on)
      knots = detail::monotone_warp_knots(shift.time_warp_strength, tgt_rng);
    for (std::int64_t ch = 0; ch < d; ++ch) {
      T* row = &tgt[(i * d + ch) * l];
      const T* base = &src[(i * d + ch) * l];
      if (warp_on) {
        for (std::int64_t t = 0; t < l; ++t) {
          const double pos =
              detail::eval_warp(knots,
                                static_cast<double>(t) /
                                    static_cast<double>(l - 1)) *
              static_cast<double>(l - 1);
          const std::int64_t lo =
              std::min<std::int64_t>(static_cast<std::int64_t>(pos), l - 2);
          const double frac = pos - static_cast<double>(lo);
          row[t] = static_cast<T>((1.0 - frac) *
                                      static_cast<double>(base[lo]) +
                                  frac * static_cast<double>(base[lo + 1]));
        }
      }
      for (std::int64_t t = 0; t < l; ++t) {
        double v = static_cast<double>(row[t]);
        if (scale_on) v *= shift.amplitude_scale;
        if (offset_on) v += shift.channel_offset;
        if (noise_on) v += shift.noise_sigma * gauss(tgt_rng);
        if (scale_on || offset_on || noise_on) row[t] = static_cast<T>(v);
      }
    }
  }

  DomainDataset<T> source;
  source.series = TimeSeriesBatch<T>(std::move(src));
  source.labels = LabelBatch(labels, base_classes);
  source.k = base_classes;
  source.domain_id = "synthetic-source";

  DomainDataset<T> target;
  target.series = TimeSeriesBatch<T>(std::move(tgt));
  target.labels = LabelBatch(labels, base_classes);
  target.k = base_classes;
  target.domain_id = "synthetic-target";
  return {std::move(source), std::move(target)};
}

// Deterministic shuffled split into train/held-out parts.
template <typename T>
std::pair<DomainDataset<T>, DomainDataset<T>> split_dataset(
    const DomainDataset<T>& ds, double train_fraction, std::uint64_t seed) {
  if (train_fraction <= 0 || train_fraction >= 1)
    throw ConfigError("split_dataset: fraction must be in (0,1)");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(ds.n()));
  for (std::int64_t i = 0; i < ds.n(); ++i)
    idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto cut = static_cast<std::size_t>(
      static_cast<double>(ds.n()) * train_fraction);
  std::vector<std::int64_t> a(idx.begin(), idx.begin() + cut);
  std::vector<std::int64_t> b(idx.begin() + cut, idx.end());
  auto make = [&](const std::vector<std::int64_t>& part,
                  const std::string& suffix) {
    DomainDataset<T> out;
    out.series = ds.batch(part);
    if (ds.labels) out.labels = ds.label_batch(part);
    out.k = ds.k;
    out.domain_id = ds.domain_id + suffix;
    return out;
  };
  return {make(a, "-train"), make(b, "-heldout")};
}

}  // namespace ctsfda
