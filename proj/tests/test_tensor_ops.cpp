#include <gtest/gtest.h>

#include "colorgan/ops.hpp"
#include "colorgan/optim.hpp"
#include "colorgan/reference.hpp"
#include "colorgan/selftest.hpp"
#include "colorgan/swin.hpp"

using namespace colorgan;
namespace ref = colorgan::reference;
using colorgan::selftest::away_from_zero;
using colorgan::selftest::constant_like;
using colorgan::selftest::probe;

namespace {

constexpr double kTol = 1e-3;

// Per-input check in double; each input must pass on its own.
void expect_grad(const std::function<Tensord()>& f, std::vector<Tensord> in) {
  const auto r = ref::check_gradients<double>(f, std::move(in), 1e-6);
  EXPECT_LT(r.rel_error, kTol) << "worst input " << r.worst_input;
}

double naive_conv(const Tensord& x, const Tensord& w, const Tensord& b, std::size_t s, std::size_t p, std::size_t n,
                  std::size_t co, std::size_t oy, std::size_t ox) {
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3), K = w.dim(2);
  double acc = b[co];
  for (std::size_t ci = 0; ci < C; ++ci)
    for (std::size_t ky = 0; ky < K; ++ky)
      for (std::size_t kx = 0; kx < K; ++kx) {
        const long iy = long(oy * s + ky) - long(p), ix = long(ox * s + kx) - long(p);
        if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
        acc += w[((co * C + ci) * K + ky) * K + kx] * x[((n * C + ci) * H + iy) * W + ix];
      }
  return acc;
}

}  // namespace

TEST(Tensor, ConstructionChecksSize) {
  EXPECT_THROW(Tensord({2, 3}, std::vector<double>(5)), ShapeError);
  Tensord t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_EQ(Tensord::scalar(4).item(), 4.0);
}

TEST(Tensor, StorageIsCacheLineAligned) {
  for (std::size_t n : {1u, 3u, 17u, 1000u}) {
    Tensorf t({n}, 0.0f);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.values().data()) % 64, 0u);
    t.set_requires_grad(true);
    sum(t).backward();
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.grad().data()) % 64, 0u);
  }
}

TEST(Autograd, LeafGradientsAccumulateAcrossBackwardCalls) {
  auto x = ref::uniform_tensor<double>({4}, 1);
  sum(mul(x, x)).backward();
  const std::vector<double> g1(x.grad().begin(), x.grad().end());
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(g1[i], 2 * x[i]);
    EXPECT_DOUBLE_EQ(x.grad()[i], 4 * x[i]);
  }
  x.zero_grad();
  for (auto g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autograd, SharedSubexpressionGetsBothContributions) {
  auto x = ref::uniform_tensor<double>({3}, 2);
  auto y = add(x, x);
  sum(mul(y, y)).backward();  // d/dx sum (2x)^2 = 8x
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x.grad()[i], 8 * x[i], 1e-12);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = ref::uniform_tensor<double>({3}, 3);
  {
    NoGradGuard ng;
    auto y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
  }
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(Autograd, DetachCutsHistory) {
  auto x = ref::uniform_tensor<double>({3}, 4);
  auto d = mul(x, x).detach();
  EXPECT_FALSE(d.requires_grad());
  EXPECT_EQ(d.vec(), mul(x, x).vec());
}

// ------------------------------------------------------------------ forward oracles

TEST(Conv2d, MatchesDirectSummation) {
  for (auto [s, p, K] : {std::array<std::size_t, 3>{1, 1, 3}, {2, 1, 4}, {2, 1, 3}, {1, 0, 1}}) {
    const std::size_t H = s == 2 && K == 3 ? 7 : 8;
    auto x = ref::uniform_tensor<double>({2, 3, H, H}, 10), w = ref::uniform_tensor<double>({4, 3, K, K}, 11),
         b = ref::uniform_tensor<double>({4}, 12);
    const auto y = conv2d(x, w, b, s, p);
    const std::size_t Ho = (H + 2 * p - K) / s + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 4, Ho, Ho}));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t co = 0; co < 4; ++co)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Ho; ++ox)
            EXPECT_NEAR(y[((n * 4 + co) * Ho + oy) * Ho + ox], naive_conv(x, w, b, s, p, n, co, oy, ox), 1e-12);
  }
}

TEST(Conv2d, RejectsNonIntegralGeometryAndChannelMismatch) {
  auto x = ref::uniform_tensor<double>({1, 3, 6, 6}, 1);
  EXPECT_THROW(conv2d(x, ref::uniform_tensor<double>({2, 3, 3, 3}, 2), ref::uniform_tensor<double>({2}, 3), 2, 1),
               ShapeError);
  EXPECT_THROW(conv2d(x, ref::uniform_tensor<double>({2, 4, 3, 3}, 2), ref::uniform_tensor<double>({2}, 3), 1, 1),
               ShapeError);
}

TEST(Linear, MatchesNaiveProduct) {
  auto x = ref::uniform_tensor<double>({5, 6}, 1), w = ref::uniform_tensor<double>({3, 6}, 2),
       b = ref::uniform_tensor<double>({3}, 3);
  const auto y = linear(x, w, b);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 6; ++i) acc += x[r * 6 + i] * w[o * 6 + i];
      EXPECT_NEAR(y[r * 3 + o], acc, 1e-12);
    }
}

TEST(Bmm, MatchesNaiveProductWithAndWithoutTranspose) {
  auto a = ref::uniform_tensor<double>({2, 3, 4}, 1), b = ref::uniform_tensor<double>({2, 4, 5}, 2),
       bt = ref::uniform_tensor<double>({2, 5, 4}, 3);
  const auto c = bmm(a, b), ct = bmm(a, bt, true);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0, st = 0;
        for (std::size_t k = 0; k < 4; ++k) {
          s += a[(n * 3 + i) * 4 + k] * b[(n * 4 + k) * 5 + j];
          st += a[(n * 3 + i) * 4 + k] * bt[(n * 5 + j) * 4 + k];
        }
        EXPECT_NEAR(c[(n * 3 + i) * 5 + j], s, 1e-12);
        EXPECT_NEAR(ct[(n * 3 + i) * 5 + j], st, 1e-12);
      }
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  auto x = ref::uniform_tensor<double>({4, 7}, 5, -20, 20);
  const auto y = softmax(x);
  const auto ys = softmax(add_scalar(x, 123.0));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      s += y[r * 7 + c];
      EXPECT_GT(y[r * 7 + c], 0.0);
      EXPECT_NEAR(y[r * 7 + c], ys[r * 7 + c], 1e-12);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, NormalisesEachRow) {
  auto x = ref::uniform_tensor<double>({3, 16}, 6, -5, 9);
  const auto y = layer_norm(x, Tensord({16}, 1.0), Tensord({16}, 0.0), 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c] / 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m) / 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(Shape, PermuteReshapeConcatNarrowRoundTrips) {
  auto x = ref::uniform_tensor<double>({2, 3, 4, 5}, 7);
  EXPECT_EQ(nhwc_to_nchw(nchw_to_nhwc(x)).vec(), x.vec());
  EXPECT_EQ(reshape(reshape(x, {6, 20}), x.shape()).vec(), x.vec());
  auto y = ref::uniform_tensor<double>({2, 2, 4, 5}, 8);
  const auto c = concat_channels(x, y);
  EXPECT_EQ(slice_channels(c, 0, 3).vec(), x.vec());
  EXPECT_EQ(slice_channels(c, 3, 5).vec(), y.vec());
  EXPECT_THROW(reshape(x, {7, 7}), ShapeError);
}

TEST(Upsample, NearestDoubling) {
  auto x = ref::uniform_tensor<double>({1, 1, 2, 3}, 9);
  const auto y = upsample2x(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 6}));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(y[r * 6 + c], x[(r / 2) * 3 + c / 2]);
}

TEST(LabToRgb, MatchesScalarConversion) {
  auto L = ref::uniform_tensor<double>({1, 1, 3, 3}, 1, -0.9, 0.9);
  auto ab = ref::uniform_tensor<double>({1, 2, 3, 3}, 2, -0.3, 0.3);
  const auto rgb = lab_to_rgb(L, ab);
  for (std::size_t i = 0; i < 9; ++i) {
    const auto want = lab_to_srgb_unit((L[i] + 1) * 50, ab[i] * 128, ab[9 + i] * 128);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(rgb[c * 9 + i], want[c], 1e-12);
  }
}

// ------------------------------------------------------------------ gradients (double, per input)

TEST(Gradients, Conv2d) {
  auto x = ref::uniform_tensor<double>({2, 3, 7, 7}, 1), w = ref::uniform_tensor<double>({4, 3, 3, 3}, 2),
       b = ref::uniform_tensor<double>({4}, 3);
  expect_grad([&] { return probe(conv2d(x, w, b, 2, 1)); }, {x, w, b});
  auto x4 = ref::uniform_tensor<double>({1, 2, 8, 8}, 4), w4 = ref::uniform_tensor<double>({3, 2, 4, 4}, 5),
       b4 = ref::uniform_tensor<double>({3}, 6);
  expect_grad([&] { return probe(conv2d(x4, w4, b4, 2, 1)); }, {x4, w4, b4});
  expect_grad([&] { return probe(conv2d(x4, w4, b4, 1, 1)); }, {x4, w4, b4});
}

TEST(Gradients, Elementwise) {
  auto a = ref::uniform_tensor<double>({3, 4}, 7), b = ref::uniform_tensor<double>({3, 4}, 8);
  expect_grad([&] { return probe(mul(add(a, scale(b, 2.0)), add_scalar(sub(a, b), 0.5))); }, {a, b});
  auto c = away_from_zero<double>({3, 4}, 9);
  expect_grad([&] { return mean_abs_diff(c, constant_like(c, 1)); }, {c});
  expect_grad([&] { return mean_sq_diff(a, b); }, {a, b});
  expect_grad([&] { return mean(mul(a, a)); }, {a});
  expect_grad([&] { return sum(mul(a, b)); }, {a, b});
}

TEST(Gradients, Activations) {
  auto x = away_from_zero<double>({4, 5}, 10);
  expect_grad([&] { return probe(leaky_relu(x)); }, {x});
  expect_grad([&] { return probe(relu(x)); }, {x});
  expect_grad([&] { return probe(gelu(x)); }, {x});
  expect_grad([&] { return probe(tanh(x)); }, {x});
}

TEST(Gradients, ShapeOps) {
  auto x = ref::uniform_tensor<double>({1, 2, 3, 3}, 11), y = ref::uniform_tensor<double>({1, 1, 3, 3}, 12);
  expect_grad([&] { return probe(upsample2x(x)); }, {x});
  expect_grad([&] { return probe(resize_nearest(x, 5, 2)); }, {x});
  expect_grad([&] { return probe(narrow(concat_channels(x, y), 1, 1, 2)); }, {x, y});
  expect_grad([&] { return probe(concat(x, y, 1)); }, {x, y});
  expect_grad([&] { return probe(reshape(permute(x, {0, 2, 3, 1}), {9, 2})); }, {x});
}

TEST(Gradients, LinearNormSoftmaxBmm) {
  auto x = ref::uniform_tensor<double>({5, 6}, 13), w = ref::uniform_tensor<double>({3, 6}, 14),
       b = ref::uniform_tensor<double>({3}, 15);
  expect_grad([&] { return probe(linear(x, w, b)); }, {x, w, b});
  auto g = ref::uniform_tensor<double>({6}, 16), be = ref::uniform_tensor<double>({6}, 17);
  expect_grad([&] { return probe(layer_norm(x, g, be, 1e-5)); }, {x, g, be});
  expect_grad([&] { return probe(softmax(x)); }, {x});
  auto p = ref::uniform_tensor<double>({2, 3, 4}, 18), q = ref::uniform_tensor<double>({2, 4, 5}, 19),
       r = ref::uniform_tensor<double>({2, 5, 4}, 20);
  expect_grad([&] { return probe(bmm(p, q)); }, {p, q});
  expect_grad([&] { return probe(bmm(p, r, true)); }, {p, r});
}

TEST(Gradients, AttentionBiasWithMask) {
  auto attn = ref::uniform_tensor<double>({4, 2, 4, 4}, 21), bias = ref::uniform_tensor<double>({2, 4, 4}, 22);
  auto mask = build_attention_mask<double>(4, 4, 2, 1);
  expect_grad([&] { return probe(softmax(add_attention_bias(attn, bias, mask.values, mask.windows))); },
              {attn, bias});
}

TEST(Gradients, LabToRgb) {
  auto L = ref::uniform_tensor<double>({1, 1, 4, 4}, 23, -0.6, 0.6);
  auto ab = ref::uniform_tensor<double>({1, 2, 4, 4}, 24, -0.15, 0.15);
  expect_grad([&] { return probe(lab_to_rgb(L, ab)); }, {L, ab});
}

TEST(Gradients, FloatJointErrorWithinTolerance) {
  auto x = ref::uniform_tensor<float>({2, 3, 7, 7}, 1), w = ref::uniform_tensor<float>({4, 3, 3, 3}, 2),
       b = ref::uniform_tensor<float>({4}, 3);
  const auto r = ref::check_gradients<float>([&] { return probe(conv2d(x, w, b, 2, 1)); }, {x, w, b}, 1e-2);
  EXPECT_LT(r.joint_error, kTol);
}

TEST(Gradients, CorruptedConvBackwardIsDetected) {
  auto x = ref::uniform_tensor<double>({1, 2, 6, 6}, 1), w = ref::uniform_tensor<double>({2, 2, 3, 3}, 2),
       b = ref::uniform_tensor<double>({2}, 3);
  fault_corrupt_conv_backward() = true;
  const auto r = ref::check_gradients<double>([&] { return probe(conv2d(x, w, b, 1, 1)); }, {x, w, b}, 1e-6);
  fault_corrupt_conv_backward() = false;
  EXPECT_GT(r.rel_error, kTol);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // Oracle self-test: a function whose recorded graph differs from its value.
  auto x = ref::uniform_tensor<double>({3}, 4);
  const auto r = ref::check_gradients<double>(
      [&] {
        if (grad_enabled()) return sum(scale(x, 2.0));
        return sum(scale(x, 3.0));
      },
      {x}, 1e-6);
  EXPECT_GT(r.rel_error, 0.3);
}

// ------------------------------------------------------------------ optimiser

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  Tensord p({3}, std::vector<double>{1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  sum(mul(p, Tensord({3}, std::vector<double>{2.0, -3.0, 0.0}))).backward();
  std::vector<Tensord> ps{p};
  auto st = make_adam_state<double>(ps);
  AdamHyper h{0.1, 0.5, 0.999, 1e-8};
  adam_step<double>(ps, st, h);
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], -2.0 + 0.1 * 3.0 / (3.0 + 1e-8), 1e-12);
  EXPECT_DOUBLE_EQ(p[2], 0.5);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, MatchesHandWrittenRecurrence) {
  Tensord p({2}, std::vector<double>{0.3, -0.7});
  p.set_requires_grad(true);
  std::vector<Tensord> ps{p};
  auto st = make_adam_state<double>(ps);
  AdamHyper h{0.01, 0.9, 0.99, 1e-8};
  double q[2] = {0.3, -0.7}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 5; ++t) {
    p.zero_grad();
    sum(mul(mul(p, p), p)).backward();  // grad 3 p^2
    adam_step<double>(ps, st, h);
    for (int i = 0; i < 2; ++i) {
      const double g = 3 * q[i] * q[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.99 * v[i] + 0.01 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.99, t));
      q[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p[i], q[i], 1e-12);
    }
  }
}
