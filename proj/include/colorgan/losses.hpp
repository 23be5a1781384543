#pragma once

// Objective terms: WGAN adversarial pair, perceptual, L1, colour loss, and
// their weighted total. All reductions are means.

#include <cmath>
#include <stdexcept>
#include <string>

#include "colorgan/netmodel.hpp"
#include "colorgan/ops.hpp"
#include "colorgan/params.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double g = 0.1;
  double p = 100.0;
  double l1 = 10.0;
  double c = 1.0;

  void validate() const {
    if (g < 0 || p < 0 || l1 < 0 || c < 0) throw std::invalid_argument("loss weights must be >= 0");
  }
};

/// Scalar values of one generator/critic update, for logging.
struct LossBundle {
  double Lg = 0, Lp = 0, L1 = 0, Lc = 0, total = 0, d_loss = 0;
};

template <typename T>
struct WganLosses {
  Tensor<T> g_loss;  // -mean(fake)
  Tensor<T> d_loss;  // mean(fake) - mean(real)
};

namespace detail {
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  for (auto v : t.values())
    if (!std::isfinite(static_cast<double>(v))) throw NonFiniteLoss(what + " is not finite");
}
}  // namespace detail

template <typename T>
WganLosses<T> wgan_losses(const Tensor<T>& scores_real, const Tensor<T>& scores_fake) {
  detail::require_finite(scores_real, "real critic scores");
  detail::require_finite(scores_fake, "fake critic scores");
  auto mf = mean(scores_fake);
  return {scale(mf, T(-1)), sub(mf, mean(scores_real))};
}

/// Clamps every critic weight to [-c, c].
template <typename T>
void clip_critic(ParamSet<T>& params, double c) {
  if (!(c > 0)) throw std::invalid_argument("clip_critic: c must be positive");
  const T lo = static_cast<T>(-c), hi = static_cast<T>(c);
  for (auto& t : params.tensors())
    for (auto& v : t.values()) v = std::clamp(v, lo, hi);
}

template <typename T>
T max_abs_weight(const ParamSet<T>& params) {
  T m = 0;
  for (const auto& t : params.tensors())
    for (auto v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

/// mean((phi_k(y) - phi_k(y_hat))^2) on precomputed features.
template <typename T>
Tensor<T> feature_mse(const Tensor<T>& feats_gt, const Tensor<T>& feats_pred) {
  if (feats_gt.shape() != feats_pred.shape())
    throw ShapeError("perceptual_loss: feature shapes " + shape_str(feats_gt.shape()) + " and " +
                     shape_str(feats_pred.shape()) + " differ");
  return mean_sq_diff(feats_pred, feats_gt);
}

/// Perceptual loss between two RGB images in [0,1], through backbone tap k.
template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& y_rgb, const Tensor<T>& y_hat_rgb,
                          const Backbone<T>& backbone, std::size_t k) {
  if (y_rgb.shape() != y_hat_rgb.shape())
    throw ShapeError("perceptual_loss: image shapes " + shape_str(y_rgb.shape()) + " and " +
                     shape_str(y_hat_rgb.shape()) + " differ");
  return feature_mse(backbone.tap(backbone_input(y_rgb), k), backbone.tap(backbone_input(y_hat_rgb), k));
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& abn_pred, const Tensor<T>& abn_gt) {
  if (abn_pred.shape() != abn_gt.shape())
    throw ShapeError("l1_loss: shapes " + shape_str(abn_pred.shape()) + " and " +
                     shape_str(abn_gt.shape()) + " differ");
  return mean_abs_diff(abn_pred, abn_gt);
}

/// Batch mean of per-sample L1 between colour-encoder output and backbone
/// global features of the ground truth. Equal per-sample sizes make this the
/// flat mean.
template <typename T>
Tensor<T> color_loss(const Tensor<T>& x_ce, const Tensor<T>& gt_global_feats) {
  if (x_ce.shape() != gt_global_feats.shape())
    throw ShapeError("color_loss: colour features " + shape_str(x_ce.shape()) +
                     " vs backbone features " + shape_str(gt_global_feats.shape()));
  return mean_abs_diff(x_ce, gt_global_feats);
}

/// Loss terms as graph tensors. Absent terms (e.g. Lc without a colour
/// encoder) are left undefined and contribute nothing.
template <typename T>
struct LossTerms {
  Tensor<T> Lg, Lp, L1, Lc;
};

/// lambda_g*Lg + lambda_p*Lp + lambda_L1*L1 + lambda_c*Lc. Rejects non-finite
/// components, naming the first offender.
template <typename T>
Tensor<T> total_loss(const LossTerms<T>& terms, const LossWeights& w) {
  w.validate();
  const std::pair<const Tensor<T>*, std::pair<const char*, double>> parts[] = {
      {&terms.Lg, {"Lg", w.g}}, {&terms.Lp, {"Lp", w.p}}, {&terms.L1, {"L1", w.l1}}, {&terms.Lc, {"Lc", w.c}}};
  Tensor<T> total;
  for (const auto& [t, meta] : parts) {
    if (!t->defined()) continue;
    if (t->numel() != 1) throw ShapeError(std::string("total_loss: ") + meta.first + " is not scalar");
    detail::require_finite(*t, meta.first);
    auto term = scale(*t, static_cast<T>(meta.second));
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) total = Tensor<T>::scalar(T(0));
  return total;
}

}  // namespace colorgan
