#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctsfda/datamodel.hpp"
#include "ctsfda/nn.hpp"

namespace ctsfda {

template <typename T>
struct VQOutput {
  ImageTensor<T> reconstructed;
  T codebook_loss = 0;
  T commitment_loss = 0;
  std::vector<std::int64_t> code_indices;
};

namespace detail {

template <typename T>
Var<T> double_conv(ParamBank<T>& bank, const std::string& prefix, Var<T> x) {
  x = relu(conv2d(x, bank.get(prefix + ".c1.w"), bank.get(prefix + ".c1.b"),
                  std::int64_t(1)));
  return relu(conv2d(x, bank.get(prefix + ".c2.w"), bank.get(prefix + ".c2.b"),
                     std::int64_t(1)));
}

template <typename T>
void init_conv(ModelParams<T>& p, const std::string& prefix, std::int64_t ci,
               std::int64_t co, std::int64_t k, std::mt19937_64& rng) {
  p.add(prefix + ".w", kaiming_conv<T>({co, ci, k, k}, rng));
  p.add(prefix + ".b", Tensor<T>::zeros({co}));
}

template <typename T>
void init_double_conv(ModelParams<T>& p, const std::string& prefix,
                      std::int64_t ci, std::int64_t co, std::mt19937_64& rng) {
  init_conv(p, prefix + ".c1", ci, co, 3, rng);
  init_conv(p, prefix + ".c2", co, co, 3, rng);
}

}  // namespace detail

// Encoder-decoder reconstructor on image-like tensors. With skips enabled
// this is a U-net (2x pooling, nearest up-sampling, skip concatenation,
// final 1x1 conv); with skips disabled it degrades to a plain convolutional
// autoencoder used by the reconstructor-config ablation.
template <typename T>
struct UNet {
  std::int64_t in_ch = 1;
  std::int64_t base = 16;
  int depth = 3;
  bool skips = true;

  std::int64_t ch(int level) const { return base << level; }

  ModelParams<T> init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ModelParams<T> p;
    for (int i = 0; i < depth; ++i)
      detail::init_double_conv(p, "enc" + std::to_string(i),
                               i == 0 ? in_ch : ch(i - 1), ch(i), rng);
    detail::init_double_conv(p, "bott", ch(depth - 1), ch(depth), rng);
    for (int i = depth - 1; i >= 0; --i) {
      const std::int64_t below = ch(i + 1);
      const std::int64_t cin = skips ? below + ch(i) : below;
      detail::init_double_conv(p, "dec" + std::to_string(i), cin, ch(i), rng);
    }
    detail::init_conv(p, "final", ch(0), in_ch, 1, rng);
    return p;
  }

  Var<T> forward(ParamBank<T>& bank, Var<T> img) const {
    const auto& s = img->value.shape;
    const std::int64_t div = std::int64_t(1) << depth;
    if (s[2] % div || s[3] % div)
      throw ShapeError("reconstructor: spatial dims " + shape_str(s) +
                       " not divisible by " + std::to_string(div));
    std::vector<Var<T>> skip_feats;
    Var<T> x = img;
    for (int i = 0; i < depth; ++i) {
      x = detail::double_conv(bank, "enc" + std::to_string(i), x);
      skip_feats.push_back(x);
      x = maxpool2d(x, std::int64_t(2));
    }
    x = detail::double_conv(bank, "bott", x);
    for (int i = depth - 1; i >= 0; --i) {
      x = upsample2d_nearest(x, std::int64_t(2));
      if (skips) x = concat_channels(skip_feats[i], x);
      x = detail::double_conv(bank, "dec" + std::to_string(i), x);
    }
    return conv2d(x, bank.get("final.w"), bank.get("final.b"),
                  std::int64_t(0));
  }
};

// Warp block: convolutional encoder, vector quantizer with straight-through
// gradient, convolutional decoder.
template <typename T>
struct WarpBlock {
  std::int64_t in_ch = 1;
  std::int64_t hidden = 16;
  std::int64_t code_dim = 8;
  std::int64_t codebook_size = 32;

  ModelParams<T> init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ModelParams<T> p;
    detail::init_conv(p, "enc.c1", in_ch, hidden, 3, rng);
    detail::init_conv(p, "enc.c2", hidden, code_dim, 3, rng);
    const T lim = T(1) / static_cast<T>(codebook_size);
    p.add("codebook",
          uniform<T>({codebook_size, code_dim}, rng, -lim, lim));
    detail::init_conv(p, "dec.c1", code_dim, hidden, 3, rng);
    detail::init_conv(p, "dec.c2", hidden, in_ch, 3, rng);
    return p;
  }

  struct GraphOutput {
    Var<T> reconstructed;
    Var<T> codebook_loss;
    Var<T> commitment_loss;
    std::vector<std::int64_t> code_indices;
  };

  GraphOutput forward(ParamBank<T>& bank, Var<T> img) const {
    auto z = relu(conv2d(img, bank.get("enc.c1.w"), bank.get("enc.c1.b"),
                         std::int64_t(1)));
    z = conv2d(z, bank.get("enc.c2.w"), bank.get("enc.c2.b"),
               std::int64_t(1));
    auto q = vector_quantize(z, bank.get("codebook"));
    auto y = relu(conv2d(q.straight_through, bank.get("dec.c1.w"),
                         bank.get("dec.c1.b"), std::int64_t(1)));
    y = conv2d(y, bank.get("dec.c2.w"), bank.get("dec.c2.b"),
               std::int64_t(1));
    return {y, q.codebook_loss, q.commitment_loss, std::move(q.indices)};
  }
};

// 1D-CNN classification backbone: three conv blocks
// (conv -> batch norm -> ReLU -> max pool -> dropout), adaptive average
// pooling, linear classifier.
template <typename T>
struct Backbone {
  std::int64_t in_ch = 1;
  std::int64_t length = 0;
  std::int64_t num_classes = 2;
  std::vector<std::int64_t> widths{64, 128, 128};
  std::vector<std::int64_t> kernels{9, 5, 3};
  T dropout_p = T(0.2);

  std::int64_t feature_dim() const { return widths.back(); }

  ModelParams<T> init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ModelParams<T> p;
    std::int64_t ci = in_ch;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string b = "blk" + std::to_string(i);
      p.add(b + ".conv.w",
            kaiming_conv<T>({widths[i], ci, kernels[i]}, rng));
      p.add(b + ".conv.b", Tensor<T>::zeros({widths[i]}));
      p.add(b + ".bn.gamma", Tensor<T>::ones({widths[i]}));
      p.add(b + ".bn.beta", Tensor<T>::zeros({widths[i]}));
      p.add(b + ".bn.running_mean", Tensor<T>::zeros({widths[i]}), true);
      p.add(b + ".bn.running_var", Tensor<T>::ones({widths[i]}), true);
      ci = widths[i];
    }
    const T lim = static_cast<T>(std::sqrt(1.0 / static_cast<double>(ci)));
    p.add("fc.w", uniform<T>({ci, num_classes}, rng, -lim, lim));
    p.add("fc.b", Tensor<T>::zeros({num_classes}));
    return p;
  }

  // Encoder output after pooling, [B, feature_dim]; used both as the
  // classifier input and as the feature map for the NN-distance diagnostic.
  Var<T> features(ParamBank<T>& bank, Var<T> x, bool training,
                  std::mt19937_64& rng) const {
    const auto& s = x->value.shape;
    if (s.size() != 3 || s[1] != in_ch || s[2] != length)
      throw ShapeError("backbone: input " + shape_str(s) + " does not match "
                       "configured (d=" + std::to_string(in_ch) +
                       ", L=" + std::to_string(length) + ")");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string b = "blk" + std::to_string(i);
      x = conv1d(x, bank.get(b + ".conv.w"), bank.get(b + ".conv.b"),
                 kernels[i] / 2);
      x = batchnorm1d(bank, b + ".bn", x, training);
      x = relu(x);
      x = maxpool1d(x, std::int64_t(2));
      x = dropout(x, dropout_p, training, rng);
    }
    return global_avgpool1d(x);
  }

  Var<T> logits(ParamBank<T>& bank, Var<T> x, bool training,
                std::mt19937_64& rng) const {
    return linear(features(bank, x, training, rng), bank.get("fc.w"),
                  bank.get("fc.b"));
  }
};

// ---- value-level forwards (no gradients, eval mode) ----

template <typename T>
ImageTensor<T> unet_forward(const UNet<T>& model, ModelParams<T>& theta,
                            const ImageTensor<T>& img) {
  ParamBank<T> bank(theta, false);
  auto out = model.forward(bank, make_leaf(img.values, false));
  return ImageTensor<T>(out->value);
}

template <typename T>
VQOutput<T> warp_forward(const WarpBlock<T>& model, ModelParams<T>& phi,
                         const ImageTensor<T>& img) {
  ParamBank<T> bank(phi, false);
  auto out = model.forward(bank, make_leaf(img.values, false));
  return {ImageTensor<T>(out.reconstructed->value),
          out.codebook_loss->value[0], out.commitment_loss->value[0],
          std::move(out.code_indices)};
}

template <typename T>
Tensor<T> backbone_forward(const Backbone<T>& model, ModelParams<T>& params,
                           const TimeSeriesBatch<T>& x) {
  ParamBank<T> bank(params, false);
  std::mt19937_64 rng(0);  // unused in eval mode
  auto out = model.logits(bank, make_leaf(x.values, false), false, rng);
  return out->value;
}

template <typename T>
Tensor<T> backbone_features(const Backbone<T>& model, ModelParams<T>& params,
                            const TimeSeriesBatch<T>& x) {
  ParamBank<T> bank(params, false);
  std::mt19937_64 rng(0);
  auto out = model.features(bank, make_leaf(x.values, false), false, rng);
  return out->value;
}

}  // namespace ctsfda
