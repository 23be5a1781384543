#pragma once

// Fast invariant suite behind `colorgan selftest`. Each suite records the
// first property that fails; the run fails if any suite does.

#include <chrono>
#include <cstring>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "colorgan/checkpoint.hpp"
#include "colorgan/colorspace.hpp"
#include "colorgan/config.hpp"
#include "colorgan/losses.hpp"
#include "colorgan/metrics.hpp"
#include "colorgan/netmodel.hpp"
#include "colorgan/ops.hpp"
#include "colorgan/pipeline.hpp"
#include "colorgan/reference.hpp"
#include "colorgan/swin.hpp"

namespace colorgan::selftest {

namespace ref = colorgan::reference;

inline constexpr double kGradTolerance = 1e-3;

class Checker {
 public:
  /// Records `property` as failed unless `ok`. Returns ok.
  bool check(bool ok, const std::string& property) {
    ++count_;
    if (!ok && failure_.empty()) failure_ = property;
    return ok;
  }
  bool check_close(double got, double want, double tol, const std::string& property) {
    std::ostringstream os;
    os << property << " (got " << std::setprecision(10) << got << ", want " << want << " +/- " << tol << ")";
    return check(std::abs(got - want) <= tol, os.str());
  }
  bool check_below(double got, double bound, const std::string& property) {
    std::ostringstream os;
    os << property << " (" << std::setprecision(6) << got << " > " << bound << ")";
    return check(got <= bound, os.str());
  }
  bool passed() const { return failure_.empty(); }
  const std::string& failure() const { return failure_; }
  std::size_t count() const { return count_; }

 private:
  std::string failure_;
  std::size_t count_ = 0;
};

/// Smallest configuration that exercises every generator component.
inline TrainConfig tiny_config(Ablation a = Ablation::full) {
  TrainConfig c;
  c.image_size = 32;
  c.batch_size = 2;
  c.base_width = 4;
  c.backbone_width = 4;
  c.critic_width = 4;
  c.noise_channels = 4;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.ablation = a;
  return c;
}

template <typename T>
Tensor<T> constant_like(const Tensor<T>& t, std::uint64_t seed) {
  auto r = ref::uniform_tensor<T>(t.shape(), seed);
  r.set_requires_grad(false);
  return r;
}

/// Scalar probe sum(y * r) with a fixed random r, so every output element
/// contributes a distinct weight.
template <typename T>
Tensor<T> probe(const Tensor<T>& y, std::uint64_t seed = 99) {
  return sum(mul(y, constant_like(y, seed)));
}

/// Random values bounded away from zero, for ops with a kink there.
template <typename T>
Tensor<T> away_from_zero(Shape shape, std::uint64_t seed) {
  auto t = ref::uniform_tensor<T>(std::move(shape), seed);
  for (auto& v : t.values()) v = static_cast<T>((v < 0 ? -1 : 1) * (0.2 + 0.8 * std::abs(double(v))));
  return t;
}

/// Full generator objective (all four terms) on a tiny model in double
/// precision, checked per parameter tensor along its own gradient direction.
inline ref::GradCheck generator_gradient_check(Ablation a, std::string* worst_name = nullptr) {
  const auto cfg = tiny_config(a);
  Rng init(3);
  Generator<double> G(cfg.model(), init);
  Critic<double> D(cfg.critic_width, init);
  const auto bb = Backbone<double>::surrogate(cfg.backbone_width, 11);
  const std::size_t B = 2, S = cfg.image_size;
  auto Ln = ref::uniform_tensor<double>({B, 1, S, S}, 20, -0.8, 0.8);
  auto abn = ref::uniform_tensor<double>({B, 2, S, S}, 21, -0.3, 0.3);
  Ln.set_requires_grad(false);
  abn.set_requires_grad(false);
  Rng rng(5);
  const auto noise = G.noise().sample<double>(B, S, S, rng);
  const auto w = cfg.weights();
  const std::function<Tensord()> f = [&] {
    auto out = G.forward(Ln, noise, bb);
    LossTerms<double> t;
    t.Lg = scale(mean(D(Ln, out.abn)), -1.0);
    const auto gt = lab_to_rgb(Ln, abn);
    t.Lp = perceptual_loss(gt, lab_to_rgb(Ln, out.abn), bb, cfg.perceptual_tap);
    t.L1 = l1_loss(out.abn, abn);
    if (G.config().has_color_encoder()) t.Lc = color_loss(out.trace.x_ce, bb.tap(backbone_input(gt), kStages));
    return total_loss(t, w);
  };
  auto res = ref::check_directional<double>(f, G.params().tensors(), 1e-6);
  if (worst_name) *worst_name = G.params().names()[res.worst_input];
  return res;
}

// ------------------------------------------------------------------ suites

inline void suite_gradients(Checker& ck) {
  using Tf = Tensorf;
  const double h = 1e-2;
  auto op = [&](const std::string& name, const std::function<Tf()>& f, std::vector<Tf> in) {
    const auto r = ref::check_gradients<float>(f, std::move(in), h);
    ck.check_below(r.joint_error, kGradTolerance, name + " gradient check (float)");
  };
  {
    auto x = ref::uniform_tensor<float>({2, 3, 7, 7}, 1), w = ref::uniform_tensor<float>({4, 3, 3, 3}, 2),
         b = ref::uniform_tensor<float>({4}, 3);
    op("conv2d k3 s2 p1", [&] { return probe(conv2d(x, w, b, 2, 1)); }, {x, w, b});
    auto x4 = ref::uniform_tensor<float>({1, 2, 8, 8}, 4), w4 = ref::uniform_tensor<float>({3, 2, 4, 4}, 5),
         b4 = ref::uniform_tensor<float>({3}, 6);
    op("conv2d k4 s2 p1", [&] { return probe(conv2d(x4, w4, b4, 2, 1)); }, {x4, w4, b4});
  }
  {
    auto a = ref::uniform_tensor<float>({3, 4}, 7), b = ref::uniform_tensor<float>({3, 4}, 8);
    op("add/sub/mul/scale", [&] { return probe(mul(add(a, scale(b, 2.0f)), add_scalar(sub(a, b), 0.5f))); },
       {a, b});
    auto c = away_from_zero<float>({3, 4}, 9);
    op("mean_abs_diff", [&] { return mean_abs_diff(c, constant_like(c, 1) ); }, {c});
    op("mean_sq_diff", [&] { return mean_sq_diff(a, b); }, {a, b});
    op("mean", [&] { return mean(mul(a, a)); }, {a});
  }
  {
    auto x = away_from_zero<float>({4, 5}, 10);
    op("leaky_relu", [&] { return probe(leaky_relu(x)); }, {x});
    op("relu", [&] { return probe(relu(x)); }, {x});
    op("gelu", [&] { return probe(gelu(x)); }, {x});
    op("tanh", [&] { return probe(tanh(x)); }, {x});
  }
  {
    auto x = ref::uniform_tensor<float>({1, 2, 3, 3}, 11), y = ref::uniform_tensor<float>({1, 1, 3, 3}, 12);
    op("upsample2x", [&] { return probe(upsample2x(x)); }, {x});
    op("resize_nearest", [&] { return probe(resize_nearest(x, 5, 2)); }, {x});
    op("concat/narrow", [&] { return probe(narrow(concat_channels(x, y), 1, 1, 2)); }, {x, y});
    op("permute/reshape", [&] { return probe(reshape(permute(x, {0, 2, 3, 1}), {9, 2})); }, {x});
  }
  {
    auto x = ref::uniform_tensor<float>({5, 6}, 13), w = ref::uniform_tensor<float>({3, 6}, 14),
         b = ref::uniform_tensor<float>({3}, 15);
    op("linear", [&] { return probe(linear(x, w, b)); }, {x, w, b});
    auto g = ref::uniform_tensor<float>({6}, 16), be = ref::uniform_tensor<float>({6}, 17);
    op("layer_norm", [&] { return probe(layer_norm(x, g, be, 1e-5f)); }, {x, g, be});
    op("softmax", [&] { return probe(softmax(x)); }, {x});
    auto p = ref::uniform_tensor<float>({2, 3, 4}, 18), q = ref::uniform_tensor<float>({2, 4, 5}, 19),
         r = ref::uniform_tensor<float>({2, 5, 4}, 20);
    op("bmm", [&] { return probe(bmm(p, q)); }, {p, q});
    op("bmm transposed", [&] { return probe(bmm(p, r, true)); }, {p, r});
    auto attn = ref::uniform_tensor<float>({4, 2, 4, 4}, 21), bias = ref::uniform_tensor<float>({2, 4, 4}, 22);
    auto mask = build_attention_mask<float>(4, 4, 2, 1);
    op("attention bias + mask",
       [&] { return probe(softmax(add_attention_bias(attn, bias, mask.values, mask.windows))); }, {attn, bias});
  }
  {
    auto L = ref::uniform_tensor<float>({1, 1, 4, 4}, 23, -0.6, 0.6);
    auto ab = ref::uniform_tensor<float>({1, 2, 4, 4}, 24, -0.15, 0.15);
    op("lab_to_rgb", [&] { return probe(lab_to_rgb(L, ab)); }, {L, ab});
  }
  for (std::size_t shift : {0, 1}) {
    Rng rng(7);
    ParamSet<double> ps;
    SwinConfig sc;
    sc.dim = 8;
    sc.heads = 2;
    sc.window = 2;
    sc.shift = shift;
    sc.mlp_ratio = 2;
    auto blk = make_swin_block(ps, "swin", sc, rng);
    auto x = ref::uniform_tensor<double>({1, 4, 4, 8}, 25);
    std::vector<Tensord> in{x};
    for (auto& t : ps.tensors()) in.push_back(t);
    const auto r = ref::check_gradients<double>([&] { return probe(swin_block(x, blk)); }, in, 1e-6);
    ck.check_below(r.rel_error, kGradTolerance,
                   "swin block (shift " + std::to_string(shift) + ") gradient check, every input");
  }
  std::string worst;
  const auto g = generator_gradient_check(Ablation::full, &worst);
  ck.check_below(g.rel_error, kGradTolerance, "full generator loss gradient check (worst: " + worst + ")");
}

inline void suite_colorspace(Checker& ck) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> u(0, 255);
  int worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::uint8_t r = u(rng), g = u(rng), b = u(rng);
    const auto lab = srgb_to_lab_pixel(r, g, b);
    const auto back = lab_to_srgb_pixel(lab[0], lab[1], lab[2]);
    worst = std::max({worst, std::abs(back[0] - r), std::abs(back[1] - g), std::abs(back[2] - b)});
  }
  ck.check(worst <= 1, "sRGB->Lab->sRGB round trip within +/-1 on 1000 random pixels (worst " +
                           std::to_string(worst) + ")");
  const auto white = srgb_to_lab_pixel(255, 255, 255);
  ck.check_close(white[0], 100.0, 1e-3, "D65 white L");
  ck.check_close(white[1], 0.0, 1e-3, "D65 white a");
  ck.check_close(white[2], 0.0, 1e-3, "D65 white b");
  const auto red = srgb_to_lab_pixel(255, 0, 0);
  const auto red_ref = ref::srgb_to_lab(255, 0, 0);
  const double want[3] = {53.24, 80.09, 67.20};
  const char* ch[3] = {"L", "a", "b"};
  for (int c = 0; c < 3; ++c) {
    ck.check_close(red_ref[c], want[c], 0.05, std::string("reference-formula red ") + ch[c]);
    ck.check_close(red[c], red_ref[c], 0.05, std::string("sRGB red ") + ch[c] + " vs reference formula");
  }
  for (int v : {0, 1, 17, 128, 254}) {
    const auto lab = srgb_to_lab_pixel(v, v, v);
    ck.check(std::abs(lab[1]) < 1e-9 && std::abs(lab[2]) < 1e-9, "gray " + std::to_string(v) + " has zero chroma");
  }
  RgbImage img(16, 9);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(u(rng));
  const auto lab = srgb_to_lab(img);
  const auto back = denormalize_lab(normalize_lab(lab));
  ck.check(back.L == lab.L && back.a == lab.a && back.b == lab.b, "normalize/denormalize round trip is exact");
}

inline void suite_swin(Checker& ck) {
  auto x = ref::uniform_tensor<float>({2, 8, 8, 3}, 30);
  for (std::size_t M : {2, 4, 8}) {
    const auto back = window_reverse(window_partition(x, M), M, 8, 8);
    ck.check(back.vec() == x.vec(), "window partition/reverse inverse (M=" + std::to_string(M) + ")");
  }
  for (std::ptrdiff_t s : {1, 2, 3}) {
    ck.check(cyclic_shift(cyclic_shift(x, s), -s).vec() == x.vec(),
             "cyclic shift/unshift inverse (s=" + std::to_string(s) + ")");
    const auto y = cyclic_shift(x, s);
    bool ok = true;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t hh = 0; hh < 8; ++hh)
        for (std::size_t ww = 0; ww < 8; ++ww)
          for (std::size_t c = 0; c < 3; ++c)
            ok = ok && y[((n * 8 + hh) * 8 + ww) * 3 + c] ==
                           x[((n * 8 + (hh + s) % 8) * 8 + (ww + s) % 8) * 3 + c];
    ck.check(ok, "cyclic shift moves content by -s (s=" + std::to_string(s) + ")");
  }

  // Region ids against the slice-by-slice labelling of the shifted image,
  // then window partition of that label map.
  for (auto [H, W, M, s] : {std::array<std::size_t, 4>{8, 8, 4, 2}, std::array<std::size_t, 4>{16, 16, 8, 4}}) {
    std::vector<int> label(H * W);
    int cnt = 0;
    const std::size_t hs[4] = {0, H - M, H - s, H}, wsl[4] = {0, W - M, W - s, W};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        for (std::size_t yy = hs[a]; yy < hs[a + 1]; ++yy)
          for (std::size_t xx = wsl[b]; xx < wsl[b + 1]; ++xx) label[yy * W + xx] = cnt;
        ++cnt;
      }
    const auto mask = build_attention_mask<float>(H, W, M, s);
    bool ids = true, vals = true;
    const std::size_t nw = W / M, TT = M * M;
    for (std::size_t w = 0; w < mask.windows; ++w)
      for (std::size_t i = 0; i < TT; ++i) {
        const std::size_t yy = (w / nw) * M + i / M, xx = (w % nw) * M + i % M;
        ids = ids && mask.region_ids[w * TT + i] == label[yy * W + xx];
        for (std::size_t j = 0; j < TT; ++j) {
          const std::size_t y2 = (w / nw) * M + j / M, x2 = (w % nw) * M + j % M;
          // tokens whose pre-shift positions wrapped differently must not attend
          const bool wrap_differs = ((yy + s >= H) != (y2 + s >= H)) || ((xx + s >= W) != (x2 + s >= W));
          vals = vals && (mask.at(w, i, j) == (wrap_differs ? float(kMaskedLogit) : 0.0f));
        }
      }
    const std::string tag = "(" + std::to_string(H) + "," + std::to_string(W) + "," + std::to_string(M) + "," +
                            std::to_string(s) + ")";
    ck.check(ids, "mask region ids match brute-force enumeration " + tag);
    ck.check(vals, "mask values match wrap-around enumeration " + tag);
  }

  // shift = 0: perturbing one window leaves every other window's output
  // bit-identical.
  Rng rng(8);
  ParamSet<float> ps;
  SwinConfig sc;
  sc.dim = 8;
  sc.heads = 2;
  sc.window = 2;
  sc.shift = 0;
  sc.mlp_ratio = 2;
  auto blk = make_swin_block(ps, "swin", sc, rng);
  auto a = ref::uniform_tensor<float>({1, 4, 4, 8}, 31);
  auto b = a.detach();
  for (std::size_t hh = 0; hh < 2; ++hh)
    for (std::size_t ww = 0; ww < 2; ++ww)
      for (std::size_t c = 0; c < 8; ++c) b[(hh * 4 + ww) * 8 + c] += 0.5f;
  NoGradGuard ng;
  const auto ya = swin_block(a, blk), yb = swin_block(b, blk);
  bool outside_same = true, inside_changed = false;
  for (std::size_t hh = 0; hh < 4; ++hh)
    for (std::size_t ww = 0; ww < 4; ++ww)
      for (std::size_t c = 0; c < 8; ++c) {
        const std::size_t i = (hh * 4 + ww) * 8 + c;
        if (hh < 2 && ww < 2) inside_changed = inside_changed || ya[i] != yb[i];
        else outside_same = outside_same && ya[i] == yb[i];
      }
  ck.check(outside_same, "unshifted attention has no cross-window influence");
  ck.check(inside_changed, "perturbed window output changes");
}

/// Zeroes the residual-branch outputs so each Swin block is the identity.
template <typename T>
void make_swin_identity(Generator<T>& g) {
  for (const auto& blk : g.swin_blocks())
    for (auto t : {blk.proj.weight, blk.proj.bias, blk.fc2.weight, blk.fc2.bias}) fill(t, T(0));
}

inline void suite_bottleneck(Checker& ck) {
  const auto cfg = tiny_config();
  Rng rng(4);
  Generator<float> G(cfg.model(), rng);
  const auto m = cfg.model();
  const std::size_t g = cfg.image_size / 16;
  auto x_e = ref::uniform_tensor<float>({2, m.skip_width(kStages - 1), g, g}, 40);
  auto x_ce = ref::uniform_tensor<float>({2, m.global_feature_channels(), g, g}, 41);
  NoGradGuard ng;
  const auto tr = G.color_transform(x_e, x_ce);
  ck.check(tr.x_i.dim(1) == x_e.dim(1) + x_ce.dim(1), "x_i channels = x_e channels + x_ce channels");
  ck.check(tr.x_c.dim(1) == m.bottleneck_width(), "x_c has the bottleneck width");
  bool sum_ok = tr.y.numel() == tr.x_c.numel();
  for (std::size_t i = 0; sum_ok && i < tr.y.numel(); ++i) sum_ok = tr.y[i] == tr.x_c[i] + tr.x_st2[i];
  ck.check(sum_ok, "y = x_c + x_st2 exactly");

  // five-step composition
  const auto x_i = concat_channels(x_e, x_ce);
  const auto x_c = G.fuse_layer()(x_i);
  const auto st1 = nhwc_to_nchw(swin_block(nchw_to_nhwc(x_c), G.swin_blocks()[0]));
  const auto st2 = nhwc_to_nchw(swin_block(nchw_to_nhwc(st1), G.swin_blocks()[1]));
  const auto y = add(x_c, st2);
  ck.check(x_i.vec() == tr.x_i.vec() && x_c.vec() == tr.x_c.vec() && st1.vec() == tr.x_st1.vec() &&
               st2.vec() == tr.x_st2.vec() && y.vec() == tr.y.vec(),
           "color_transform equals the five-step composition bit-exactly");

  Rng rng2(4);
  Generator<float> Gi(cfg.model(), rng2);
  make_swin_identity(Gi);
  const auto ti = Gi.color_transform(x_e, x_ce);
  bool twice = true;
  for (std::size_t i = 0; i < ti.y.numel(); ++i) twice = twice && ti.y[i] == 2.0f * ti.x_c[i];
  ck.check(twice, "identity Swin blocks give y = 2 x_c");

  for (auto a : {Ablation::unet, Ablation::no_color_encoder, Ablation::no_color_transformer}) {
    const auto ca = tiny_config(a);
    Rng r(4);
    Generator<float> Ga(ca.model(), r);
    const auto ta = Ga.color_transform(x_e, ca.model().has_color_encoder() ? x_ce : Tensorf{});
    const std::string tag = " (" + to_string(a) + ")";
    if (a == Ablation::unet) ck.check(ta.y.vec() == x_e.vec(), "y = x_e" + tag);
    if (a == Ablation::no_color_encoder) ck.check(ta.x_i.vec() == x_e.vec(), "x_i = x_e" + tag);
    if (a == Ablation::no_color_transformer) ck.check(ta.y.vec() == ta.x_c.vec(), "y = x_c" + tag);
  }
}

inline void suite_losses(Checker& ck) {
  LossTerms<double> t{Tensord::scalar(1), Tensord::scalar(1), Tensord::scalar(1), Tensord::scalar(1)};
  ck.check(total_loss(t, LossWeights{}).item() == 111.1, "weights {0.1,100,10,1} on unit components total 111.1");
  LossTerms<double> z{Tensord::scalar(0), Tensord::scalar(0), Tensord::scalar(0), Tensord::scalar(0)};
  ck.check(total_loss(z, LossWeights{}).item() == 0.0, "zero components total 0");
  LossTerms<double> v{Tensord::scalar(0.3), Tensord::scalar(1.7), Tensord::scalar(2.9), Tensord::scalar(4.1)};
  ck.check(total_loss(v, LossWeights{0, 0, 0, 1}).item() == 4.1, "zero weights isolate one term");

  auto abn = ref::uniform_tensor<float>({2, 2, 16, 16}, 50, -0.3, 0.3);
  auto Ln = ref::uniform_tensor<float>({2, 1, 16, 16}, 51, -0.8, 0.8);
  const auto bb = Backbone<float>::surrogate(4, 3);
  const auto rgb = lab_to_rgb(Ln, abn);
  ck.check(l1_loss(abn, abn).item() == 0.0f, "L1 is 0 when output equals GT");
  ck.check(perceptual_loss(rgb, rgb, bb, 3).item() == 0.0f, "Lp is 0 when output equals GT");

  Tensorf fa({1, 2}, std::vector<float>{3, 4}), fb({1, 2}, std::vector<float>{0, 0});
  ck.check(feature_mse(fb, fa).item() == 12.5f, "feature difference (3,4) gives 12.5");
  Tensorf ce({2, 1, 1, 1}, std::vector<float>{0.2f, 0.4f}), gf({2, 1, 1, 1}, 0.0f);
  ck.check_close(color_loss(ce, gf).item(), 0.3, 1e-7, "per-sample colour losses {0.2,0.4} average to 0.3");

  for (std::uint64_t s = 0; s < 20; ++s) {
    auto real = ref::uniform_tensor<float>({2, 1, 6, 6}, 60 + s, -3, 3), fake = ref::uniform_tensor<float>({2, 1, 6, 6}, 80 + s, -3, 3);
    const auto w = wgan_losses(real, fake);
    const double mr = mean(real).item();
    ck.check_close(w.d_loss.item() + w.g_loss.item(), -mr, 4e-7 * std::max(1.0, std::abs(mr)) + 1e-7,
                   "d_loss + g_loss = -mean(real)");
  }
  Rng rng(6);
  Critic<float> D(4, rng);
  for (auto& t : D.params().tensors()) t[0] = 0.05f;
  clip_critic(D.params(), 0.01);
  ck.check(max_abs_weight(D.params()) <= 0.01f, "clipped critic weights within c");
}

inline RgbImage random_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  RgbImage img(w, h);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(u(rng));
  return img;
}

inline RgbImage perturbed(const RgbImage& img, int amplitude, std::uint64_t seed) {
  RgbImage out = img;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(-amplitude, amplitude);
  for (auto& v : out.data) v = static_cast<std::uint8_t>(std::clamp(int(v) + u(rng), 0, 255));
  return out;
}

inline void suite_metrics(Checker& ck) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = random_image(32, 32, 100 + s);
    const auto b = perturbed(a, 40, 200 + s);
    const std::string tag = " on random pair " + std::to_string(s);
    ck.check_close(psnr(a, b), ref::psnr(a, b), 1e-6, "PSNR vs direct formula" + tag);
    ck.check_close(ssim(a, b), ref::ssim(a, b), 1e-6, "SSIM vs direct formula" + tag);
    ck.check_close(colorfulness(a), ref::colorfulness(srgb_to_lab(a)), 1e-9, "colorfulness vs direct formula" + tag);
  }
  RgbImage a(16, 16, 100), b(16, 16, 110);
  ck.check_close(psnr(a, b), 28.13, 0.01, "constant offset 10 PSNR");
  ck.check(psnr(a, a) == kPsnrCap, "identical images report the PSNR cap");
  const auto r = random_image(24, 24, 7);
  ck.check_close(ssim(r, r), 1.0, 1e-9, "SSIM of identical images");
  RgbImage gray(20, 20);
  for (std::size_t i = 0; i < gray.pixels(); ++i)
    gray.data[3 * i] = gray.data[3 * i + 1] = gray.data[3 * i + 2] = static_cast<std::uint8_t>(i % 256);
  ck.check_below(colorfulness(gray), 0.01, "gray image colorfulness");
  LabImage half(2, 2);
  half.a = {10, 10, -10, -10};
  ck.check_close(colorfulness(half), 10.0, 1e-12, "a = +/-10 halves give colorfulness 10");
  ck.check(delta_colorfulness(r, r) == 0.0, "delta colorfulness of an image with itself");
}

inline void suite_checkpoint(Checker& ck) {
  for (auto a : {Ablation::full, Ablation::unet}) {
    const auto cfg = tiny_config(a);
    auto st = make_train_state(cfg);
    Rng rng(9);
    auto Ln = ref::uniform_tensor<float>({1, 1, 32, 32}, 70, -0.8, 0.8);
    Ln.set_requires_grad(false);
    const auto noise = st.gen->noise().sample<float>(1, 32, 32, rng);
    NoGradGuard ng;
    const auto before = st.gen->forward(Ln, noise, st.backbone).abn;
    std::stringstream buf;
    write_checkpoint(buf, state_to_checkpoint(st, cfg));
    const auto loaded = read_checkpoint(buf);
    auto st2 = state_from_checkpoint(loaded, cfg);
    const auto after = st2.gen->forward(Ln, noise, st2.backbone).abn;
    const std::string tag = " (" + to_string(a) + ")";
    ck.check(before.vec() == after.vec(), "save -> load -> forward is bit-exact" + tag);
    bool has_ce = false, has_ct = false;
    for (const auto& e : loaded.entries) {
      has_ce = has_ce || e.name.find("color_encoder") != std::string::npos;
      has_ct = has_ct || e.name.find("color_transformer") != std::string::npos;
    }
    const bool expect = a == Ablation::full;
    ck.check(has_ce == expect && has_ct == expect, "manifest colour-module census" + tag);
  }
}

struct Suite {
  std::string name;
  std::function<void(Checker&)> run;
};

inline std::vector<Suite> suites() {
  return {{"gradients", suite_gradients}, {"colorspace", suite_colorspace}, {"swin", suite_swin},
          {"bottleneck", suite_bottleneck}, {"losses", suite_losses},     {"metrics", suite_metrics},
          {"checkpoint", suite_checkpoint}};
}

/// Runs every suite, printing one line each. Returns 0 when all pass, 1
/// otherwise (naming the first failing property).
inline int run(std::ostream& out) {
  std::string first;
  for (const auto& s : suites()) {
    Checker ck;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      s.run(ck);
    } catch (const std::exception& e) {
      ck.check(false, std::string("unexpected exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (ck.passed()) {
      out << "PASS " << s.name << " (" << ck.count() << " checks, " << std::fixed << std::setprecision(2) << secs
          << " s)\n";
    } else {
      out << "FAIL " << s.name << ": " << ck.failure() << "\n";
      if (first.empty()) first = s.name + ": " + ck.failure();
    }
    out.unsetf(std::ios::fixed);
  }
  if (!first.empty()) {
    out << "selftest failed; first failure: " << first << "\n";
    return 1;
  }
  out << "selftest passed\n";
  return 0;
}

}  // namespace colorgan::selftest
