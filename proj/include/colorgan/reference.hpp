#pragma once

// Direct-formula reference implementations and finite-difference gradient
// checks. Nothing here calls the code under test: the formulas are written
// out naively in double precision so they can serve as oracles.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "colorgan/colorspace.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan::reference {

/// Textbook sRGB (8-bit) -> CIELAB with the tabulated D65 white
/// (0.95047, 1.0, 1.08883).
inline std::array<double, 3> srgb_to_lab(double r8, double g8, double b8) {
  auto lin = [](double v) {
    v /= 255.0;
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
  };
  const double r = lin(r8), g = lin(g8), b = lin(b8);
  const double X = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double Y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double Z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  auto f = [](double t) {
    const double e = 216.0 / 24389.0, k = 24389.0 / 27.0;
    return t > e ? std::cbrt(t) : (k * t + 16.0) / 116.0;
  };
  const double fx = f(X / 0.95047), fy = f(Y / 1.0), fz = f(Z / 1.08883);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline double psnr(const RgbImage& a, const RgbImage& b) {
  double se = 0;
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x = 0; x < a.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double d = double(a.at(x, y, c)) - double(b.at(x, y, c));
        se += d * d;
      }
  const double mse = se / double(3 * a.width * a.height);
  return mse == 0 ? 99.0 : 10.0 * std::log10(255.0 * 255.0 / mse);
}

/// SSIM from the definition: for every valid 11x11 placement, Gaussian
/// weighted means, variances and covariance of the BT.601 luma.
inline double ssim(const RgbImage& a, const RgbImage& b) {
  const int R = 5;
  double wsum = 0;
  double w[11][11];
  for (int dy = -R; dy <= R; ++dy)
    for (int dx = -R; dx <= R; ++dx) {
      w[dy + R][dx + R] = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
      wsum += w[dy + R][dx + R];
    }
  auto Y = [](const RgbImage& im, std::size_t x, std::size_t y) {
    return 0.299 * im.at(x, y, 0) + 0.587 * im.at(x, y, 1) + 0.114 * im.at(x, y, 2);
  };
  const double C1 = 6.5025, C2 = 58.5225;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t cy = R; cy + R < a.height; ++cy)
    for (std::size_t cx = R; cx + R < a.width; ++cx) {
      double ma = 0, mb = 0;
      for (int dy = -R; dy <= R; ++dy)
        for (int dx = -R; dx <= R; ++dx) {
          const double k = w[dy + R][dx + R] / wsum;
          ma += k * Y(a, cx + dx, cy + dy);
          mb += k * Y(b, cx + dx, cy + dy);
        }
      double va = 0, vb = 0, cov = 0;
      for (int dy = -R; dy <= R; ++dy)
        for (int dx = -R; dx <= R; ++dx) {
          const double k = w[dy + R][dx + R] / wsum;
          const double ea = Y(a, cx + dx, cy + dy) - ma, eb = Y(b, cx + dx, cy + dy) - mb;
          va += k * ea * ea;
          vb += k * eb * eb;
          cov += k * ea * eb;
        }
      total += (2 * ma * mb + C1) * (2 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
      ++count;
    }
  return total / double(count);
}

/// Population variance via the pairwise identity
/// var = sum_{i,j} (x_i - x_j)^2 / (2 n^2).
inline double pairwise_variance(const std::vector<double>& x) {
  const double n = double(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double row = 0;
    for (std::size_t j = 0; j < x.size(); ++j) row += (x[i] - x[j]) * (x[i] - x[j]);
    s += row;
  }
  return s / (2 * n * n);
}

inline double colorfulness(const LabImage& lab) {
  std::vector<double> a(lab.a.begin(), lab.a.end()), b(lab.b.begin(), lab.b.end());
  return std::sqrt(pairwise_variance(a) + pairwise_variance(b));
}

// ------------------------------------------------------------------ gradients

struct GradCheck {
  double rel_error = 0;    // max over inputs of ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double joint_error = 0;  // same ratio over all inputs' gradients concatenated
  std::size_t worst_input = 0;
};

/// Element-wise central differences for every element of every input. `f`
/// must rebuild the graph from the inputs' current values on each call.
template <typename T>
GradCheck check_gradients(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs, double h) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  GradCheck res;
  double jd = 0, ja = 0, jn = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad())
      for (std::size_t i = 0; i < x.numel(); ++i) analytic[i] = x.grad()[i];
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const T orig = x[i];
      double fp, fm;
      {
        NoGradGuard ng;
        x[i] = static_cast<T>(orig + h);
        fp = f().item();
        x[i] = static_cast<T>(orig - h);
        fm = f().item();
      }
      x[i] = orig;
      const double num = (fp - fm) / (2 * h);
      diff2 += (num - analytic[i]) * (num - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    const double rel = std::sqrt(diff2) / denom;
    if (rel > res.rel_error) {
      res.rel_error = rel;
      res.worst_input = k;
    }
    jd += diff2;
    ja += a2;
    jn += n2;
  }
  res.joint_error = std::sqrt(jd) / std::max({std::sqrt(ja), std::sqrt(jn), 1e-12});
  return res;
}

/// Directional check per input: compares the analytic slope ||g|| along the
/// unit direction g/||g|| with a central difference of step h along it.
/// Inputs with zero gradient are probed along a fixed +/- pattern instead;
/// there the error is |numeric slope| / 1e-3, so slopes below 1e-6 pass a
/// 1e-3 tolerance.
template <typename T>
GradCheck check_directional(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs, double h) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  GradCheck res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    std::vector<double> dir(x.numel(), 0.0);
    double gn = 0;
    if (x.has_grad())
      for (std::size_t i = 0; i < x.numel(); ++i) {
        dir[i] = x.grad()[i];
        gn += dir[i] * dir[i];
      }
    gn = std::sqrt(gn);
    if (gn > 0) {
      for (auto& d : dir) d /= gn;
    } else {
      for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = (i % 2 ? 1.0 : -1.0) / std::sqrt(double(dir.size()));
    }
    const std::vector<T> orig(x.values().begin(), x.values().end());
    auto eval_at = [&](double s) {
      for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<T>(orig[i] + s * dir[i]);
      NoGradGuard ng;
      return static_cast<double>(f().item());
    };
    const double fp = eval_at(h), fm = eval_at(-h);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = orig[i];
    const double num = (fp - fm) / (2 * h);
    const double rel = gn > 0 ? std::abs(num - gn) / std::max(gn, std::abs(num)) : std::abs(num) / 1e-3;
    if (rel > res.rel_error) {
      res.rel_error = rel;
      res.worst_input = k;
    }
  }
  return res;
}

/// Deterministic pseudo-random values in [-1,1] for test inputs.
inline std::vector<double> uniform_values(std::size_t n, std::uint64_t seed) {
  std::vector<double> v(n);
  std::uint64_t s = seed;
  for (auto& x : v) {  // splitmix64
    std::uint64_t z = (s += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    x = double(z >> 11) / double(1ULL << 53) * 2.0 - 1.0;
  }
  return v;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  const auto u = uniform_values(shape_numel(shape), seed);
  std::vector<T> v(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) v[i] = static_cast<T>(lo + (u[i] + 1) / 2 * (hi - lo));
  Tensor<T> t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

}  // namespace colorgan::reference
