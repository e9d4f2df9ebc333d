#pragma once

#include <cstdint>
#include <vector>

#include "ctsfda/errors.hpp"
#include "ctsfda/tensor.hpp"

namespace ctsfda {

// Batched multichannel series [B, d, L], the universal signal carrier.
template <typename T>
struct TimeSeriesBatch {
  Tensor<T> values;  // [B, d, L]

  TimeSeriesBatch() = default;
  explicit TimeSeriesBatch(Tensor<T> v) : values(std::move(v)) {
    if (values.shape.size() != 3)
      throw ShapeError("TimeSeriesBatch expects [B, d, L], got " +
                       shape_str(values.shape));
    if (values.dim(0) < 1 || values.dim(1) < 1 || values.dim(2) < 1)
      throw ShapeError("TimeSeriesBatch: degenerate shape " +
                       shape_str(values.shape));
  }

  std::int64_t batch() const { return values.dim(0); }
  std::int64_t channels() const { return values.dim(1); }
  std::int64_t length() const { return values.dim(2); }

  void check_finite() const {
    if (!values.all_finite())
      throw InvariantError("TimeSeriesBatch contains non-finite entries");
  }
};

struct LabelBatch {
  std::vector<std::int64_t> labels;  // each in [0, K)
  std::int64_t k = 0;

  LabelBatch() = default;
  LabelBatch(std::vector<std::int64_t> l, std::int64_t k_)
      : labels(std::move(l)), k(k_) {
    for (auto y : labels)
      if (y < 0 || y >= k)
        throw InvariantError("label " + std::to_string(y) +
                             " outside [0, " + std::to_string(k) + ")");
  }

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

// Image-like tensor [B, c, H, W] fed to the 2D reconstructors.
template <typename T>
struct ImageTensor {
  Tensor<T> values;

  ImageTensor() = default;
  explicit ImageTensor(Tensor<T> v) : values(std::move(v)) {
    if (values.shape.size() != 4)
      throw ShapeError("ImageTensor expects [B, c, H, W], got " +
                       shape_str(values.shape));
  }

  std::int64_t batch() const { return values.dim(0); }
  std::int64_t channels() const { return values.dim(1); }
  std::int64_t height() const { return values.dim(2); }
  std::int64_t width() const { return values.dim(3); }
};

// Bijective (with zero padding) mapping between [d, L] series and
// [c, H, W] images, c == d, H*W == L + pad_len.
struct ReshapeSpec {
  std::int64_t d = 0, l = 0;
  std::int64_t c = 0, h = 0, w = 0;
  std::int64_t pad_len = 0;
};

inline ReshapeSpec make_reshape_spec(std::int64_t d, std::int64_t l,
                                     std::int64_t h, std::int64_t w) {
  if (d < 1 || l < 1 || h < 1 || w < 1)
    throw ConfigError("make_reshape_spec: dimensions must be positive");
  if (h * w < l)
    throw ConfigError("make_reshape_spec: image " + std::to_string(h) + "x" +
                      std::to_string(w) + " cannot hold series of length " +
                      std::to_string(l) + " without truncation");
  ReshapeSpec s;
  s.d = d;
  s.l = l;
  s.c = d;
  s.h = h;
  s.w = w;
  s.pad_len = h * w - l;
  return s;
}

// Per channel, the L samples followed by pad_len zeros, laid out row-major
// into H x W.
template <typename T>
ImageTensor<T> series_to_image(const TimeSeriesBatch<T>& x,
                               const ReshapeSpec& spec) {
  if (x.channels() != spec.d || x.length() != spec.l)
    throw ShapeError("series_to_image: input " + shape_str(x.values.shape) +
                     " does not match spec (d=" + std::to_string(spec.d) +
                     ", L=" + std::to_string(spec.l) + ")");
  const std::int64_t b = x.batch(), hw = spec.h * spec.w;
  Tensor<T> out({b, spec.c, spec.h, spec.w});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t ch = 0; ch < spec.c; ++ch) {
      const T* src = &x.values[(i * spec.d + ch) * spec.l];
      T* dst = &out[(i * spec.c + ch) * hw];
      std::copy(src, src + spec.l, dst);
      // remaining pad_len entries stay zero
    }
  return ImageTensor<T>(std::move(out));
}

// Row-major flatten per channel, dropping the trailing pad_len entries.
template <typename T>
TimeSeriesBatch<T> image_to_series(const ImageTensor<T>& img,
                                   const ReshapeSpec& spec) {
  if (img.channels() != spec.c || img.height() != spec.h ||
      img.width() != spec.w)
    throw ShapeError("image_to_series: input " + shape_str(img.values.shape) +
                     " does not match spec (c=" + std::to_string(spec.c) +
                     ", H=" + std::to_string(spec.h) +
                     ", W=" + std::to_string(spec.w) + ")");
  const std::int64_t b = img.batch(), hw = spec.h * spec.w;
  Tensor<T> out({b, spec.d, spec.l});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t ch = 0; ch < spec.d; ++ch) {
      const T* src = &img.values[(i * spec.c + ch) * hw];
      T* dst = &out[(i * spec.d + ch) * spec.l];
      std::copy(src, src + spec.l, dst);
    }
  return TimeSeriesBatch<T>(std::move(out));
}

}  // namespace ctsfda
