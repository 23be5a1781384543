#pragma once

// Generator (encoder with backbone-feature injection, colour encoder,
// colour transformer, decoder), PatchGAN critic, and the frozen perceptual
// backbone.

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "colorgan/ops.hpp"
#include "colorgan/params.hpp"
#include "colorgan/swin.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan {

enum class Ablation { full, unet, no_color_encoder, no_color_transformer };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::unet: return "unet";
    case Ablation::no_color_encoder: return "no_color_encoder";
    case Ablation::no_color_transformer: return "no_color_transformer";
  }
  return "full";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "unet" || s == "A") return Ablation::unet;
  if (s == "no_color_encoder" || s == "B") return Ablation::no_color_encoder;
  if (s == "no_color_transformer" || s == "C") return Ablation::no_color_transformer;
  throw std::invalid_argument("unknown ablation '" + s +
                              "' (expected full, unet, no_color_encoder, no_color_transformer)");
}

inline constexpr std::size_t kStages = 4;

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t base_width = 32;           // encoder widths w, 2w, 4w, 8w
  std::size_t backbone_width = 16;       // backbone stage widths b, 2b, 4b, 8b
  std::size_t critic_width = 32;
  std::size_t noise_channels = 64;
  double noise_sigma = 0.1;              // standard deviation of the colour-encoder noise
  std::size_t window = 8;
  std::size_t heads = 8;
  std::size_t mlp_ratio = 4;
  std::size_t perceptual_tap = 3;        // 1-based backbone stage used by the perceptual loss
  std::array<bool, kStages> inject{true, true, true, true};
  Ablation ablation = Ablation::full;
  std::uint64_t backbone_seed = 20240917;

  bool has_color_encoder() const {
    return ablation == Ablation::full || ablation == Ablation::no_color_transformer;
  }
  bool has_color_transformer() const {
    return ablation == Ablation::full || ablation == Ablation::no_color_encoder;
  }
  bool has_fusion() const { return ablation != Ablation::unet; }

  std::size_t encoder_width(std::size_t stage) const { return base_width << stage; }
  std::size_t backbone_stage_width(std::size_t stage) const { return backbone_width << stage; }
  std::size_t adapter_width(std::size_t stage) const {
    return inject[stage] ? std::max<std::size_t>(1, encoder_width(stage) / 4) : 0;
  }
  std::size_t skip_width(std::size_t stage) const {
    return encoder_width(stage) + adapter_width(stage);
  }
  std::size_t bottleneck_width() const { return encoder_width(kStages - 1); }
  std::size_t global_feature_channels() const { return backbone_stage_width(kStages - 1); }
  std::size_t decoder_width(std::size_t stage) const {
    // stage 0 is the first (coarsest) decoder stage
    return stage + 1 < kStages ? base_width << (kStages - 2 - stage) : base_width;
  }

  /// Largest window <= `window` that tiles the bottleneck grid.
  std::size_t swin_window() const {
    const std::size_t grid = image_size / 16;
    std::size_t m = std::min(window, grid);
    while (m > 1 && grid % m != 0) --m;
    return std::max<std::size_t>(m, 1);
  }

  void validate() const {
    if (image_size == 0 || image_size % 16 != 0)
      throw std::invalid_argument("image_size must be a positive multiple of 16, got " +
                                  std::to_string(image_size));
    if (base_width == 0 || backbone_width == 0 || critic_width == 0 || noise_channels == 0)
      throw std::invalid_argument("network widths must be positive");
    if (perceptual_tap < 1 || perceptual_tap > kStages)
      throw std::invalid_argument("perceptual_tap must be in [1,4]");
    if (noise_sigma < 0) throw std::invalid_argument("noise_sigma must be >= 0");
    if (has_color_transformer() && (heads == 0 || bottleneck_width() % heads != 0))
      throw std::invalid_argument("heads must divide the bottleneck width " +
                                  std::to_string(bottleneck_width()));
  }
};

/// Gaussian noise fed to the colour encoder: N(mean, sigma^2) with shape
/// (N, channels, H/16, W/16).
struct NoiseSpec {
  double mean = 0.0;
  double sigma = 0.1;
  std::size_t channels = 64;

  Shape shape(std::size_t n, std::size_t h, std::size_t w) const {
    return {n, channels, h / 16, w / 16};
  }
  template <typename T>
  Tensor<T> sample(std::size_t n, std::size_t h, std::size_t w, Rng& rng) const {
    return normal_tensor<T>(shape(n, h, w), mean, sigma, rng);
  }
};

inline NoiseSpec noise_spec(const ModelConfig& c) { return NoiseSpec{0.0, c.noise_sigma, c.noise_channels}; }

// ------------------------------------------------------------------ backbone

/// Frozen feature extractor: four stride-2 conv+ReLU stages. The default
/// instance is a fixed-seed surrogate; weights can also be imported.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  static Backbone surrogate(std::size_t base_width, std::uint64_t seed) {
    Backbone b;
    Rng rng(seed);
    std::size_t cin = 3;
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::size_t cout = base_width << s;
      b.stages_.push_back(make_conv(b.params_, "backbone.stage" + std::to_string(s + 1), cin, cout,
                                    4, 2, 1, rng, std::sqrt(1.04)));
      cin = cout;
    }
    b.params_.set_requires_grad(false);
    return b;
  }

  /// Builds from externally supplied weights named backbone.stage{1..4}.{weight,bias}.
  static Backbone from_params(const ParamSet<T>& src) {
    Backbone b;
    std::size_t cin = 3;
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::string name = "backbone.stage" + std::to_string(s + 1);
      const auto& w = src.at(name + ".weight");
      const auto& bias = src.at(name + ".bias");
      if (w.rank() != 4 || w.dim(1) != cin || w.dim(2) != 4 || w.dim(3) != 4)
        throw ShapeError("backbone import: " + name + ".weight has shape " + shape_str(w.shape()));
      Conv2dLayer<T> c;
      c.weight = b.params_.add(name + ".weight", w.detach());
      c.bias = b.params_.add(name + ".bias", bias.detach());
      c.stride = 2;
      c.pad = 1;
      b.stages_.push_back(c);
      cin = w.dim(0);
    }
    return b;
  }

  std::size_t tap_channels(std::size_t k) const { return stages_.at(k - 1).out_channels(); }
  const ParamSet<T>& params() const { return params_; }

  /// Outputs of all four stages for an input in [-1,1] (taps 1..4).
  std::vector<Tensor<T>> features(const Tensor<T>& rgb_norm) const {
    detail::require_rank(rgb_norm, 4, "backbone", "input");
    if (rgb_norm.dim(1) != 3) throw ShapeError("backbone: input must have 3 channels");
    std::vector<Tensor<T>> taps;
    Tensor<T> h = rgb_norm;
    for (const auto& s : stages_) {
      h = relu(s(h));
      taps.push_back(h);
    }
    return taps;
  }

  /// Features of stage k (1-based). Gradients flow to the input only.
  Tensor<T> tap(const Tensor<T>& rgb_norm, std::size_t k) const {
    if (k < 1 || k > stages_.size())
      throw std::out_of_range("backbone: invalid tap " + std::to_string(k));
    Tensor<T> h = rgb_norm;
    for (std::size_t s = 0; s < k; ++s) h = relu(stages_[s](h));
    return h;
  }

  /// FNV-1a over the raw weight bytes.
  std::uint64_t weight_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : params_.tensors()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.values().data());
      for (std::size_t i = 0; i < t.numel() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

 private:
  ParamSet<T> params_;
  std::vector<Conv2dLayer<T>> stages_;
};

/// Maps gamma-encoded RGB in [0,1] to the backbone's [-1,1] input range.
template <typename T>
Tensor<T> backbone_input(const Tensor<T>& rgb01) {
  return add_scalar(scale(rgb01, T(2)), T(-1));
}

// ------------------------------------------------------------------ generator

/// Named intermediates of the colour transformer (all NCHW).
template <typename T>
struct BottleneckTrace {
  Tensor<T> x_e, x_ce, x_i, x_c, x_st1, x_st2, y;
};

template <typename T>
struct EncoderOutput {
  std::vector<Tensor<T>> skips;  // finest first: H/2, H/4, H/8, H/16
  Tensor<T> x_e;
};

template <typename T>
struct GeneratorOutput {
  Tensor<T> abn;
  BottleneckTrace<T> trace;
};

template <typename T>
class Generator {
 public:
  Generator(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t cin = 1;
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::string stage = "encoder.stage" + std::to_string(s + 1);
      encoder_.push_back(make_conv(params_, stage, cin, cfg_.encoder_width(s), 4, 2, 1, rng));
      if (cfg_.inject[s]) {
        adapters_.push_back(make_conv(params_, "inject.level" + std::to_string(s + 1),
                                      cfg_.backbone_stage_width(s), cfg_.adapter_width(s), 1, 1, 0,
                                      rng, 0.5));
      } else {
        adapters_.emplace_back();
      }
      cin = cfg_.skip_width(s);
    }
    const std::size_t xe_ch = cfg_.skip_width(kStages - 1);
    if (cfg_.has_color_encoder()) {
      const std::size_t gc = cfg_.global_feature_channels();
      color_encoder_.push_back(make_conv(params_, "color_encoder.conv1", cfg_.noise_channels, gc, 3, 1, 1, rng));
      color_encoder_.push_back(make_conv(params_, "color_encoder.conv2", gc, gc, 3, 1, 1, rng));
      color_encoder_.push_back(make_conv(params_, "color_encoder.conv3", gc, gc, 3, 1, 1, rng));
    }
    std::size_t y_ch = xe_ch;
    if (cfg_.has_fusion()) {
      const std::size_t xi_ch = xe_ch + (cfg_.has_color_encoder() ? cfg_.global_feature_channels() : 0);
      fuse_ = make_conv(params_, "bottleneck.fuse", xi_ch, cfg_.bottleneck_width(), 3, 1, 1, rng);
      y_ch = cfg_.bottleneck_width();
    }
    if (cfg_.has_color_transformer()) {
      SwinConfig sc;
      sc.dim = cfg_.bottleneck_width();
      sc.heads = cfg_.heads;
      sc.window = cfg_.swin_window();
      sc.mlp_ratio = cfg_.mlp_ratio;
      sc.shift = 0;
      swin_.push_back(make_swin_block(params_, "color_transformer.swin1", sc, rng));
      sc.shift = sc.window / 2;
      swin_.push_back(make_swin_block(params_, "color_transformer.swin2", sc, rng));
    }
    std::size_t cur = y_ch;
    for (std::size_t d = 0; d < kStages; ++d) {
      const std::size_t skip = cfg_.skip_width(kStages - 1 - d);
      decoder_.push_back(make_conv(params_, "decoder.stage" + std::to_string(d + 1), cur + skip,
                                   cfg_.decoder_width(d), 3, 1, 1, rng));
      cur = cfg_.decoder_width(d);
    }
    head_ = make_conv(params_, "head", cur, 2, 1, 1, 0, rng, 0.5);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  NoiseSpec noise() const { return noise_spec(cfg_); }
  const std::vector<SwinBlock<T>>& swin_blocks() const { return swin_; }
  const Conv2dLayer<T>& fuse_layer() const { return fuse_; }

  /// Four stride-2 stages; backbone taps are resized to each stage's grid,
  /// passed through a 1x1 adapter and appended as extra channels.
  EncoderOutput<T> encode(const Tensor<T>& Ln, const std::vector<Tensor<T>>& global_feats) const {
    detail::require_rank(Ln, 4, "encode", "L");
    if (Ln.dim(1) != 1) throw ShapeError("encode: L input must have one channel");
    if (Ln.dim(2) % 16 != 0 || Ln.dim(3) % 16 != 0)
      throw ShapeError("encode: spatial size " + std::to_string(Ln.dim(2)) + "x" +
                       std::to_string(Ln.dim(3)) + " not divisible by 16");
    EncoderOutput<T> out;
    Tensor<T> h = Ln;
    for (std::size_t s = 0; s < kStages; ++s) {
      h = leaky_relu(encoder_[s](h));
      if (cfg_.inject[s]) {
        if (global_feats.size() <= s)
          throw ShapeError("encode: missing backbone feature for level " + std::to_string(s + 1));
        auto f = resize_nearest(global_feats[s], h.dim(2), h.dim(3));
        h = concat_channels(h, adapters_[s](f));
      }
      out.skips.push_back(h);
    }
    out.x_e = h;
    return out;
  }

  /// Gf: noise -> feature map shaped like the backbone's global features.
  Tensor<T> color_encode(const Tensor<T>& noise) const {
    if (!cfg_.has_color_encoder()) throw std::logic_error("color_encode: model has no colour encoder");
    detail::require_rank(noise, 4, "color_encode", "noise");
    if (noise.dim(1) != cfg_.noise_channels)
      throw ShapeError("color_encode: noise has " + std::to_string(noise.dim(1)) +
                       " channels, expected " + std::to_string(cfg_.noise_channels));
    auto h = leaky_relu(color_encoder_[0](noise));
    h = leaky_relu(color_encoder_[1](h));
    return color_encoder_[2](h);
  }

  /// x_i = concat(x_e, x_ce); x_c = conv(x_i); two Swin blocks; y = x_c + x_st2.
  BottleneckTrace<T> color_transform(const Tensor<T>& x_e, const Tensor<T>& x_ce) const {
    BottleneckTrace<T> tr;
    tr.x_e = x_e;
    tr.x_ce = x_ce;
    if (!cfg_.has_fusion()) {
      tr.x_i = tr.x_c = tr.y = x_e;
      return tr;
    }
    if (cfg_.has_color_encoder()) {
      if (!x_ce.defined()) throw ShapeError("color_transform: colour features required");
      Tensor<T> ce = x_ce;
      if (ce.dim(2) != x_e.dim(2) || ce.dim(3) != x_e.dim(3)) ce = resize_nearest(ce, x_e.dim(2), x_e.dim(3));
      tr.x_i = concat_channels(x_e, ce);
    } else {
      tr.x_i = x_e;
    }
    tr.x_c = fuse_(tr.x_i);
    if (!cfg_.has_color_transformer()) {
      tr.y = tr.x_c;
      return tr;
    }
    auto t1 = swin_block(nchw_to_nhwc(tr.x_c), swin_[0]);
    auto t2 = swin_block(t1, swin_[1]);
    tr.x_st1 = nhwc_to_nchw(t1);
    tr.x_st2 = nhwc_to_nchw(t2);
    tr.y = add(tr.x_c, tr.x_st2);
    return tr;
  }

  /// Four (concat skip, upsample x2, conv) stages, then 1x1 conv + tanh to ab.
  Tensor<T> decode(const Tensor<T>& y, const std::vector<Tensor<T>>& skips) const {
    if (skips.size() != kStages) throw ShapeError("decode: expected 4 skip tensors");
    Tensor<T> h = y;
    for (std::size_t d = 0; d < kStages; ++d) {
      const auto& skip = skips[kStages - 1 - d];
      if (skip.dim(2) != h.dim(2) || skip.dim(3) != h.dim(3))
        throw ShapeError("decode: skip " + shape_str(skip.shape()) + " does not match " +
                         shape_str(h.shape()) + " at decoder stage " + std::to_string(d + 1));
      h = leaky_relu(decoder_[d](upsample2x(concat_channels(h, skip))));
    }
    return tanh(head_(h));
  }

  GeneratorOutput<T> forward(const Tensor<T>& Ln, const Tensor<T>& noise, const Backbone<T>& bb) const {
    std::vector<Tensor<T>> feats;
    {
      Tensor<T> zero_ab({Ln.dim(0), 2, Ln.dim(2), Ln.dim(3)}, T(0));
      feats = bb.features(backbone_input(lab_to_rgb(Ln, zero_ab)));
    }
    auto enc = encode(Ln, feats);
    Tensor<T> x_ce;
    if (cfg_.has_color_encoder()) x_ce = color_encode(noise);
    auto trace = color_transform(enc.x_e, x_ce);
    auto abn = decode(trace.y, enc.skips);
    return {abn, std::move(trace)};
  }

 private:
  ModelConfig cfg_;
  ParamSet<T> params_;
  std::vector<Conv2dLayer<T>> encoder_, adapters_, color_encoder_, decoder_;
  Conv2dLayer<T> fuse_, head_;
  std::vector<SwinBlock<T>> swin_;
};

// ------------------------------------------------------------------ critic

/// PatchGAN critic on the 3-plane (Ln, abn) stack: three stride-2 stages, one
/// stride-1 stage, and a stride-1 scoring conv. No normalisation layers and no
/// output sigmoid.
template <typename T>
class Critic {
 public:
  Critic(std::size_t width, Rng& rng) {
    const std::array<std::size_t, 5> outs{width, 2 * width, 4 * width, 8 * width, 1};
    const std::array<std::size_t, 5> strides{2, 2, 2, 1, 1};
    std::size_t cin = 3;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      Conv2dLayer<T> c;
      const std::string name = "critic.conv" + std::to_string(i + 1);
      c.weight = params_.add(name + ".weight", normal_tensor<T>({outs[i], cin, 4, 4}, 0.0, 0.02, rng));
      c.bias = params_.add(name + ".bias", Tensor<T>({outs[i]}, T(0)));
      c.weight.set_requires_grad(true);
      c.bias.set_requires_grad(true);
      c.stride = strides[i];
      c.pad = 1;
      layers_.push_back(c);
      cin = outs[i];
    }
  }

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const std::vector<Conv2dLayer<T>>& layers() const { return layers_; }

  Tensor<T> operator()(const Tensor<T>& Ln, const Tensor<T>& abn) const { return forward(Ln, abn, nullptr, nullptr); }

  /// Per-unit leaky ReLU slopes (1 or 0.2) of one forward pass, one tensor per
  /// hidden layer. With a frozen pattern the critic is affine in its input.
  using Pattern = std::vector<Tensor<T>>;

  /// Forward that optionally records the activation pattern, or replays a
  /// recorded one in place of the leaky ReLUs.
  Tensor<T> forward(const Tensor<T>& Ln, const Tensor<T>& abn, Pattern* record, const Pattern* frozen) const {
    detail::require_rank(Ln, 4, "discriminate", "L");
    detail::require_rank(abn, 4, "discriminate", "ab");
    if (Ln.dim(0) != abn.dim(0) || Ln.dim(2) != abn.dim(2) || Ln.dim(3) != abn.dim(3))
      throw ShapeError("discriminate: L " + shape_str(Ln.shape()) + " and ab " +
                       shape_str(abn.shape()) + " are not aligned");
    Tensor<T> h = concat_channels(Ln, abn);
    if (record) record->clear();
    if (frozen && frozen->size() + 1 != layers_.size())
      throw ShapeError("discriminate: frozen pattern has " + std::to_string(frozen->size()) + " layers");
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
      const auto z = layers_[i](h);
      if (frozen) {
        if ((*frozen)[i].shape() != z.shape()) throw ShapeError("discriminate: frozen pattern shape mismatch");
        h = mul(z, (*frozen)[i]);
        continue;
      }
      if (record) {
        Buffer<T> slope(z.numel());
        for (std::size_t k = 0; k < slope.size(); ++k) slope[k] = z[k] > 0 ? T(1) : T(0.2);
        record->emplace_back(z.shape(), std::move(slope));
      }
      h = leaky_relu(z);
    }
    return layers_.back()(h);
  }

 private:
  ParamSet<T> params_;
  std::vector<Conv2dLayer<T>> layers_;
};

}  // namespace colorgan
