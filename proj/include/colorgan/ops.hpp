#pragma once

// Differentiable operations over Tensor<T>. Every op checks its shape contract
// and throws ShapeError naming the offending dimension.

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "colorgan/colorspace.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op, const char* what) {
  if (a.rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(a.shape()));
}

}  // namespace detail

/// Test hook: when set, conv2d's weight gradient is deliberately wrong.
inline std::atomic<bool>& fault_corrupt_conv_backward() {
  static std::atomic<bool> flag{false};
  return flag;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return Tensor<T>::from_op(a.shape(), std::move(v), {a, b}, [a, b](detail::Node<T>& out) {
    for (auto t : {a, b})
      if (t.requires_grad()) {
        auto& g = t.node()->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
      }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return Tensor<T>::from_op(a.shape(), std::move(v), {a, b}, [a, b](detail::Node<T>& out) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return Tensor<T>::from_op(a.shape(), std::move(v), {a, b}, [a, b](detail::Node<T>& out) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * b[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * a[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
  return Tensor<T>::from_op(a.shape(), std::move(v), {a}, [a, s](detail::Node<T>& out) {
    auto& g = a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Buffer<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + s;
  return Tensor<T>::from_op(a.shape(), std::move(v), {a}, [a](detail::Node<T>& out) {
    auto& g = a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (auto v : a.values()) acc += v;
  return Tensor<T>::from_op(Shape{1}, {static_cast<T>(acc)}, {a}, [a](detail::Node<T>& out) {
    auto& g = a.node()->ensure_grad();
    for (auto& gi : g) gi += out.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0;
  for (auto v : a.values()) acc += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return Tensor<T>::from_op(Shape{1}, {static_cast<T>(acc / a.numel())}, {a},
                            [a, inv](detail::Node<T>& out) {
                              auto& g = a.node()->ensure_grad();
                              for (auto& gi : g) gi += out.grad[0] * inv;
                            });
}

/// mean(|a - b|)
template <typename T>
Tensor<T> mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mean_abs_diff");
  double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
  const T inv = T(1) / static_cast<T>(a.numel());
  return Tensor<T>::from_op(Shape{1}, {static_cast<T>(acc / a.numel())}, {a, b},
                            [a, b, inv](detail::Node<T>& out) {
                              const T go = out.grad[0] * inv;
                              for (int side = 0; side < 2; ++side) {
                                const auto& t = side == 0 ? a : b;
                                if (!t.requires_grad()) continue;
                                auto& g = t.node()->ensure_grad();
                                const T sgn = side == 0 ? T(1) : T(-1);
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  const T d = a[i] - b[i];
                                  g[i] += sgn * go * (d > 0 ? T(1) : (d < 0 ? T(-1) : T(0)));
                                }
                              }
                            });
}

/// mean((a - b)^2)
template <typename T>
Tensor<T> mean_sq_diff(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mean_sq_diff");
  double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(a.numel());
  return Tensor<T>::from_op(Shape{1}, {static_cast<T>(acc / a.numel())}, {a, b},
                            [a, b, inv](detail::Node<T>& out) {
                              const T go = T(2) * out.grad[0] * inv;
                              if (a.requires_grad()) {
                                auto& g = a.node()->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (a[i] - b[i]);
                              }
                              if (b.requires_grad()) {
                                auto& g = b.node()->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go * (a[i] - b[i]);
                              }
                            });
}

// ---------------------------------------------------------------- activations

enum class Activation { leaky_relu, relu, gelu, tanh };

namespace detail {
inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace detail

/// leaky_relu uses `slope` for x < 0 (0.2 by convention).
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, T slope = T(0.2)) {
  Buffer<T> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const T a = x[i];
    switch (kind) {
      case Activation::leaky_relu: v[i] = a > 0 ? a : slope * a; break;
      case Activation::relu: v[i] = a > 0 ? a : T(0); break;
      case Activation::gelu:
        v[i] = static_cast<T>(0.5 * a * (1.0 + std::erf(a * detail::kInvSqrt2)));
        break;
      case Activation::tanh: v[i] = std::tanh(a); break;
    }
  }
  return Tensor<T>::from_op(x.shape(), std::move(v), {x}, [x, kind, slope](detail::Node<T>& out) {
    auto& g = x.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T a = x[i];
      T d{};
      switch (kind) {
        case Activation::leaky_relu: d = a > 0 ? T(1) : slope; break;
        case Activation::relu: d = a > 0 ? T(1) : T(0); break;
        case Activation::gelu: {
          const double ad = a;
          d = static_cast<T>(0.5 * (1.0 + std::erf(ad * detail::kInvSqrt2)) +
                             ad * detail::kInvSqrt2Pi * std::exp(-0.5 * ad * ad));
          break;
        }
        case Activation::tanh: d = T(1) - out.value[i] * out.value[i]; break;
      }
      g[i] += out.grad[i] * d;
    }
  });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
  return activation(x, Activation::leaky_relu, slope);
}
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::gelu); }
template <typename T>
Tensor<T> tanh(const Tensor<T>& x) { return activation(x, Activation::tanh); }
template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu); }

// ---------------------------------------------------------------- conv2d

namespace detail {

struct ConvGeom {
  std::size_t N, Cin, H, W, Cout, k, stride, pad, Ho, Wo;
  std::size_t K() const { return Cin * k * k; }
  std::size_t P() const { return N * Ho * Wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = g.P(), HoWo = g.Ho * g.Wo;
  for (std::size_t ci = 0; ci < g.Cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * P;
        for (std::size_t n = 0; n < g.N; ++n) {
          const T* plane = x + (n * g.Cin + ci) * g.H * g.W;
          T* dst = row + n * HoWo;
          for (std::size_t oy = 0; oy < g.Ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            T* drow = dst + oy * g.Wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) {
              std::fill(drow, drow + g.Wo, T(0));
              continue;
            }
            const T* srow = plane + iy * g.W;
            for (std::size_t ox = 0; ox < g.Wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.W)) ? T(0) : srow[ix];
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  const std::size_t P = g.P(), HoWo = g.Ho * g.Wo;
  for (std::size_t ci = 0; ci < g.Cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * P;
        for (std::size_t n = 0; n < g.N; ++n) {
          T* plane = x + (n * g.Cin + ci) * g.H * g.W;
          const T* src = row + n * HoWo;
          for (std::size_t oy = 0; oy < g.Ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) continue;
            T* drow = plane + iy * g.W;
            const T* srow = src + oy * g.Wo;
            for (std::size_t ox = 0; ox < g.Wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.W)) drow[ix] += srow[ox];
            }
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,k,k] plus bias[Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "weight");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " != weight in-channels " + std::to_string(w.dim(1)));
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(w.shape()));
  if (bias.numel() != w.dim(0))
    throw ShapeError("conv2d: bias length " + std::to_string(bias.numel()) + " != out-channels " +
                     std::to_string(w.dim(0)));
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  for (auto [extent, name] : {std::pair{g.H, "height"}, std::pair{g.W, "width"}}) {
    if (extent + 2 * pad < g.k)
      throw ShapeError(std::string("conv2d: kernel larger than padded ") + name);
    if ((extent + 2 * pad - g.k) % stride != 0)
      throw ShapeError(std::string("conv2d: padded ") + name + " " + std::to_string(extent) +
                       " not compatible with kernel " + std::to_string(g.k) + " / stride " +
                       std::to_string(stride));
  }
  g.Ho = (g.H + 2 * pad - g.k) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.k) / stride + 1;
  const std::size_t K = g.K(), P = g.P(), HoWo = g.Ho * g.Wo;

  Buffer<T> col(K * P);
  detail::im2col(x.values().data(), g, col.data());
  Buffer<T> om(g.Cout * P);
  detail::MatMap<T>(om.data(), g.Cout, P).noalias() =
      detail::ConstMatMap<T>(w.values().data(), g.Cout, K) *
      detail::ConstMatMap<T>(col.data(), K, P);
  Buffer<T> out(g.N * g.Cout * HoWo);
  for (std::size_t n = 0; n < g.N; ++n)
    for (std::size_t co = 0; co < g.Cout; ++co) {
      const T* src = om.data() + co * P + n * HoWo;
      T* dst = out.data() + (n * g.Cout + co) * HoWo;
      const T bv = bias[co];
      for (std::size_t p = 0; p < HoWo; ++p) dst[p] = src[p] + bv;
    }

  return Tensor<T>::from_op(
      Shape{g.N, g.Cout, g.Ho, g.Wo}, std::move(out), {x, w, bias},
      [x, w, bias, g](detail::Node<T>& node) {
        const std::size_t K = g.K(), P = g.P(), HoWo = g.Ho * g.Wo;
        Buffer<T> gm(g.Cout * P);
        for (std::size_t n = 0; n < g.N; ++n)
          for (std::size_t co = 0; co < g.Cout; ++co)
            std::copy_n(node.grad.data() + (n * g.Cout + co) * HoWo, HoWo,
                        gm.data() + co * P + n * HoWo);
        detail::ConstMatMap<T> G(gm.data(), g.Cout, P);
        if (bias.requires_grad()) {
          auto& gb = bias.node()->ensure_grad();
          for (std::size_t co = 0; co < g.Cout; ++co) gb[co] += G.row(co).sum();
        }
        const bool need_col = w.requires_grad();
        Buffer<T> col;
        if (need_col) {
          col.resize(K * P);
          detail::im2col(x.values().data(), g, col.data());
          auto& gw = w.node()->ensure_grad();
          detail::MatMap<T> GW(gw.data(), g.Cout, K);
          if (fault_corrupt_conv_backward().load())
            GW.noalias() += T(1.1) * (G * detail::ConstMatMap<T>(col.data(), K, P).transpose());
          else
            GW.noalias() += G * detail::ConstMatMap<T>(col.data(), K, P).transpose();
        }
        if (x.requires_grad()) {
          col.resize(K * P);
          detail::MatMap<T>(col.data(), K, P).noalias() =
              detail::ConstMatMap<T>(w.values().data(), g.Cout, K).transpose() * G;
          detail::col2im_add(col.data(), g, x.node()->ensure_grad().data());
        }
      });
}

// ---------------------------------------------------------------- resampling

/// Nearest-neighbour x2: each pixel becomes a 2x2 block.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  detail::require_rank(x, 4, "upsample2x", "input");
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Buffer<T> v(planes * 4 * H * W);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx)
        v[(p * 2 * H + y) * 2 * W + xx] = x[(p * H + y / 2) * W + xx / 2];
  return Tensor<T>::from_op(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(v), {x},
                            [x, planes, H, W](detail::Node<T>& out) {
                              auto& g = x.node()->ensure_grad();
                              for (std::size_t p = 0; p < planes; ++p)
                                for (std::size_t y = 0; y < 2 * H; ++y)
                                  for (std::size_t xx = 0; xx < 2 * W; ++xx)
                                    g[(p * H + y / 2) * W + xx / 2] +=
                                        out.grad[(p * 2 * H + y) * 2 * W + xx];
                            });
}

/// out[i] = x[index[i]]; backward scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape,
                 std::shared_ptr<const std::vector<std::uint32_t>> index) {
  if (index->size() != shape_numel(out_shape))
    throw ShapeError("gather: index length does not match output shape " + shape_str(out_shape));
  Buffer<T> v(index->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[(*index)[i]];
  return Tensor<T>::from_op(std::move(out_shape), std::move(v), {x},
                            [x, index](detail::Node<T>& out) {
                              auto& g = x.node()->ensure_grad();
                              for (std::size_t i = 0; i < index->size(); ++i)
                                g[(*index)[i]] += out.grad[i];
                            });
}

/// Nearest resize of x[N,C,H,W] to (Ho,Wo) using src = floor(dst * H / Ho).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, std::size_t Ho, std::size_t Wo) {
  detail::require_rank(x, 4, "resize_nearest", "input");
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (Ho == H && Wo == W) return x;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(planes * Ho * Wo);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx)
        (*idx)[(p * Ho + y) * Wo + xx] =
            static_cast<std::uint32_t>((p * H + y * H / Ho) * W + xx * W / Wo);
  return gather(x, Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(idx));
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return Tensor<T>::from_op(std::move(shape), x.vec(), {x}, [x](detail::Node<T>& out) {
    auto& g = x.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm.at(i));
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * x.dim(i);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(x.numel());
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t o = 0; o < x.numel(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += counter[i] * in_stride[perm[i]];
    (*idx)[o] = static_cast<std::uint32_t>(src);
    for (std::size_t i = r; i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  return gather(x, std::move(out_shape), std::move(idx));
}

/// Concatenate along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank())
    throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw ShapeError("concat: dimension " + std::to_string(i) + " differs (" +
                       std::to_string(a.dim(i)) + " vs " + std::to_string(b.dim(i)) + ")");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t ca = a.dim(axis) * inner, cb = b.dim(axis) * inner;
  Shape s = a.shape();
  s[axis] += b.dim(axis);
  Buffer<T> v(outer * (ca + cb));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.values().data() + o * ca, ca, v.data() + o * (ca + cb));
    std::copy_n(b.values().data() + o * cb, cb, v.data() + o * (ca + cb) + ca);
  }
  return Tensor<T>::from_op(std::move(s), std::move(v), {a, b},
                            [a, b, outer, ca, cb](detail::Node<T>& out) {
                              if (a.requires_grad()) {
                                auto& g = a.node()->ensure_grad();
                                for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t i = 0; i < ca; ++i)
                                    g[o * ca + i] += out.grad[o * (ca + cb) + i];
                              }
                              if (b.requires_grad()) {
                                auto& g = b.node()->ensure_grad();
                                for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t i = 0; i < cb; ++i)
                                    g[o * cb + i] += out.grad[o * (ca + cb) + ca + i];
                              }
                            });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 4, "concat_channels", "first input");
  detail::require_rank(b, 4, "concat_channels", "second input");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return concat(a, b, 1);
}

/// Sub-range [start, start+len) along `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis))
    throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis) * inner, part = len * inner, off = start * inner;
  Shape s = x.shape();
  s[axis] = len;
  Buffer<T> v(outer * part);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.values().data() + o * full + off, part, v.data() + o * part);
  return Tensor<T>::from_op(std::move(s), std::move(v), {x},
                            [x, outer, full, part, off](detail::Node<T>& out) {
                              auto& g = x.node()->ensure_grad();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < part; ++i)
                                  g[o * full + off + i] += out.grad[o * part + i];
                            });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  detail::require_rank(x, 4, "slice_channels", "input");
  if (c1 < c0) throw ShapeError("slice_channels: empty range");
  return narrow(x, 1, c0, c1 - c0);
}

/// NCHW -> NHWC and back.
template <typename T>
Tensor<T> nchw_to_nhwc(const Tensor<T>& x) { return permute(x, {0, 2, 3, 1}); }
template <typename T>
Tensor<T> nhwc_to_nchw(const Tensor<T>& x) { return permute(x, {0, 3, 1, 2}); }

// ---------------------------------------------------------------- dense

/// Affine map over the trailing dimension: x[..., Din] * w[Dout,Din]^T + b.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(w, 2, "linear", "weight");
  if (x.rank() == 0 || x.shape().back() != w.dim(1))
    throw ShapeError("linear: trailing dimension " + std::to_string(x.shape().back()) +
                     " != Din " + std::to_string(w.dim(1)));
  if (b.numel() != w.dim(0)) throw ShapeError("linear: bias length != Dout");
  const std::size_t Din = w.dim(1), Dout = w.dim(0), R = x.numel() / Din;
  Shape s = x.shape();
  s.back() = Dout;
  Buffer<T> v(R * Dout);
  detail::MatMap<T> Y(v.data(), R, Dout);
  Y.noalias() = detail::ConstMatMap<T>(x.values().data(), R, Din) *
                detail::ConstMatMap<T>(w.values().data(), Dout, Din).transpose();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t o = 0; o < Dout; ++o) v[r * Dout + o] += b[o];
  return Tensor<T>::from_op(std::move(s), std::move(v), {x, w, b},
                            [x, w, b, R, Din, Dout](detail::Node<T>& out) {
                              detail::ConstMatMap<T> G(out.grad.data(), R, Dout);
                              if (x.requires_grad()) {
                                detail::MatMap<T>(x.node()->ensure_grad().data(), R, Din).noalias() +=
                                    G * detail::ConstMatMap<T>(w.values().data(), Dout, Din);
                              }
                              if (w.requires_grad()) {
                                detail::MatMap<T>(w.node()->ensure_grad().data(), Dout, Din).noalias() +=
                                    G.transpose() * detail::ConstMatMap<T>(x.values().data(), R, Din);
                              }
                              if (b.requires_grad()) {
                                auto& gb = b.node()->ensure_grad();
                                for (std::size_t o = 0; o < Dout; ++o) gb[o] += G.col(o).sum();
                              }
                            });
}

/// Batched matmul: a[B,M,K] * b[B,K,N], or a * b^T when b is [B,N,K] and transpose_b.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::require_rank(a, 3, "bmm", "lhs");
  detail::require_rank(b, 3, "bmm", "rhs");
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::size_t N = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t Kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != B || Kb != K)
    throw ShapeError("bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Buffer<T> v(B * M * N);
  for (std::size_t i = 0; i < B; ++i) {
    detail::ConstMatMap<T> A(a.values().data() + i * M * K, M, K);
    detail::MatMap<T> C(v.data() + i * M * N, M, N);
    if (transpose_b)
      C.noalias() = A * detail::ConstMatMap<T>(b.values().data() + i * N * K, N, K).transpose();
    else
      C.noalias() = A * detail::ConstMatMap<T>(b.values().data() + i * K * N, K, N);
  }
  return Tensor<T>::from_op(
      Shape{B, M, N}, std::move(v), {a, b}, [a, b, B, M, K, N, transpose_b](detail::Node<T>& out) {
        for (std::size_t i = 0; i < B; ++i) {
          detail::ConstMatMap<T> G(out.grad.data() + i * M * N, M, N);
          if (a.requires_grad()) {
            detail::MatMap<T> GA(a.node()->ensure_grad().data() + i * M * K, M, K);
            if (transpose_b)
              GA.noalias() += G * detail::ConstMatMap<T>(b.values().data() + i * N * K, N, K);
            else
              GA.noalias() +=
                  G * detail::ConstMatMap<T>(b.values().data() + i * K * N, K, N).transpose();
          }
          if (b.requires_grad()) {
            detail::ConstMatMap<T> A(a.values().data() + i * M * K, M, K);
            if (transpose_b)
              detail::MatMap<T>(b.node()->ensure_grad().data() + i * N * K, N, K).noalias() +=
                  G.transpose() * A;
            else
              detail::MatMap<T>(b.node()->ensure_grad().data() + i * K * N, K, N).noalias() +=
                  A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------- normalisation

/// Per-position standardisation over the trailing dimension, then gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("layer_norm: empty trailing dim");
  const std::size_t D = x.shape().back(), R = x.numel() / D;
  if (gamma.numel() != D || beta.numel() != D)
    throw ShapeError("layer_norm: gamma/beta length != " + std::to_string(D));
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(R);
  Buffer<T> v(x.numel());
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = x.values().data() + r * D;
    double mu = 0;
    for (std::size_t d = 0; d < D; ++d) mu += row[d];
    mu /= D;
    double var = 0;
    for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
    var /= D;
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<T>(rs);
    for (std::size_t d = 0; d < D; ++d) {
      const T xh = static_cast<T>((row[d] - mu) * rs);
      (*xhat)[r * D + d] = xh;
      v[r * D + d] = xh * gamma[d] + beta[d];
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(v), {x, gamma, beta},
      [x, gamma, beta, xhat, rstd, R, D](detail::Node<T>& out) {
        const auto& gy = out.grad;
        if (gamma.requires_grad() || beta.requires_grad()) {
          auto* gg = gamma.requires_grad() ? gamma.node()->ensure_grad().data() : nullptr;
          auto* gb = beta.requires_grad() ? beta.node()->ensure_grad().data() : nullptr;
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t d = 0; d < D; ++d) {
              if (gg) gg[d] += gy[r * D + d] * (*xhat)[r * D + d];
              if (gb) gb[d] += gy[r * D + d];
            }
        }
        if (x.requires_grad()) {
          auto& gx = x.node()->ensure_grad();
          for (std::size_t r = 0; r < R; ++r) {
            double m1 = 0, m2 = 0;
            for (std::size_t d = 0; d < D; ++d) {
              const double dxh = static_cast<double>(gy[r * D + d]) * gamma[d];
              m1 += dxh;
              m2 += dxh * (*xhat)[r * D + d];
            }
            m1 /= D;
            m2 /= D;
            for (std::size_t d = 0; d < D; ++d) {
              const double dxh = static_cast<double>(gy[r * D + d]) * gamma[d];
              gx[r * D + d] += static_cast<T>((*rstd)[r] * (dxh - m1 - (*xhat)[r * D + d] * m2));
            }
          }
        }
      });
}

/// Softmax over the trailing dimension with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t D = x.shape().back(), R = x.numel() / D;
  Buffer<T> v(x.numel());
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = x.values().data() + r * D;
    const T mx = *std::max_element(row, row + D);
    double s = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const double e = std::exp(static_cast<double>(row[d]) - mx);
      v[r * D + d] = static_cast<T>(e);
      s += e;
    }
    for (std::size_t d = 0; d < D; ++d) v[r * D + d] = static_cast<T>(v[r * D + d] / s);
  }
  return Tensor<T>::from_op(x.shape(), std::move(v), {x}, [x, R, D](detail::Node<T>& out) {
    auto& gx = x.node()->ensure_grad();
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0;
      for (std::size_t d = 0; d < D; ++d) dot += out.grad[r * D + d] * out.value[r * D + d];
      for (std::size_t d = 0; d < D; ++d)
        gx[r * D + d] += static_cast<T>(out.value[r * D + d] * (out.grad[r * D + d] - dot));
    }
  });
}

/// attn[B', heads, T, T] + bias[heads, T, T] + mask[B' mod nW, T, T].
/// The mask is a constant; pass nullptr for no mask.
template <typename T>
Tensor<T> add_attention_bias(const Tensor<T>& attn, const Tensor<T>& bias,
                             std::shared_ptr<const std::vector<T>> mask, std::size_t mask_windows) {
  detail::require_rank(attn, 4, "add_attention_bias", "scores");
  const std::size_t B = attn.dim(0), Hh = attn.dim(1), Tn = attn.dim(2);
  if (attn.dim(3) != Tn || bias.shape() != Shape{Hh, Tn, Tn})
    throw ShapeError("add_attention_bias: bias shape " + shape_str(bias.shape()) +
                     " incompatible with scores " + shape_str(attn.shape()));
  const std::size_t TT = Tn * Tn;
  if (mask && (mask_windows == 0 || mask->size() != mask_windows * TT || B % mask_windows != 0))
    throw ShapeError("add_attention_bias: mask does not tile the window batch");
  Buffer<T> v(attn.numel());
  for (std::size_t w = 0; w < B; ++w)
    for (std::size_t h = 0; h < Hh; ++h) {
      const T* a = attn.values().data() + (w * Hh + h) * TT;
      const T* bb = bias.values().data() + h * TT;
      const T* m = mask ? mask->data() + (w % mask_windows) * TT : nullptr;
      T* o = v.data() + (w * Hh + h) * TT;
      for (std::size_t i = 0; i < TT; ++i) o[i] = a[i] + bb[i] + (m ? m[i] : T(0));
    }
  return Tensor<T>::from_op(attn.shape(), std::move(v), {attn, bias},
                            [attn, bias, B, Hh, TT](detail::Node<T>& out) {
                              if (attn.requires_grad()) {
                                auto& g = attn.node()->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                              }
                              if (bias.requires_grad()) {
                                auto& g = bias.node()->ensure_grad();
                                for (std::size_t w = 0; w < B; ++w)
                                  for (std::size_t h = 0; h < Hh; ++h)
                                    for (std::size_t i = 0; i < TT; ++i)
                                      g[h * TT + i] += out.grad[(w * Hh + h) * TT + i];
                              }
                            });
}

// ---------------------------------------------------------------- colour

namespace detail {

// d/dX of sRGB encode on [0,1].
inline double srgb_encode_deriv(double v) {
  return v <= 0.0031308 ? 12.92 : (1.055 / 2.4) * std::pow(v, 1.0 / 2.4 - 1.0);
}
inline double lab_f_inv_deriv(double f) {
  return f * f * f > kEpsilon ? 3.0 * f * f : 116.0 / kKappa;
}

}  // namespace detail

/// Differentiable (Ln[N,1,H,W], abn[N,2,H,W]) -> gamma-encoded RGB[N,3,H,W] in [0,1].
/// Same formulas as lab_to_srgb_unit; linear RGB outside the gamut is clamped
/// and receives zero gradient.
template <typename T>
Tensor<T> lab_to_rgb(const Tensor<T>& Ln, const Tensor<T>& abn) {
  detail::require_rank(Ln, 4, "lab_to_rgb", "L");
  detail::require_rank(abn, 4, "lab_to_rgb", "ab");
  if (Ln.dim(1) != 1 || abn.dim(1) != 2 || Ln.dim(0) != abn.dim(0) || Ln.dim(2) != abn.dim(2) ||
      Ln.dim(3) != abn.dim(3))
    throw ShapeError("lab_to_rgb: expected [N,1,H,W] and [N,2,H,W], got " + shape_str(Ln.shape()) +
                     " and " + shape_str(abn.shape()));
  const std::size_t N = Ln.dim(0), HW = Ln.dim(2) * Ln.dim(3);
  Buffer<T> v(N * 3 * HW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const double L = (static_cast<double>(Ln[n * HW + p]) + 1.0) * 50.0;
      const double A = static_cast<double>(abn[(n * 2) * HW + p]) * 128.0;
      const double B = static_cast<double>(abn[(n * 2 + 1) * HW + p]) * 128.0;
      const auto rgb = lab_to_srgb_unit(L, A, B);
      for (int c = 0; c < 3; ++c) v[(n * 3 + c) * HW + p] = static_cast<T>(rgb[c]);
    }
  return Tensor<T>::from_op(
      Shape{N, 3, Ln.dim(2), Ln.dim(3)}, std::move(v), {Ln, abn},
      [Ln, abn, N, HW](detail::Node<T>& out) {
        const auto& Minv = detail::xyz_to_rgb_matrix().m;
        T* gL = Ln.requires_grad() ? Ln.node()->ensure_grad().data() : nullptr;
        T* gab = abn.requires_grad() ? abn.node()->ensure_grad().data() : nullptr;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t p = 0; p < HW; ++p) {
            const double L = (static_cast<double>(Ln[n * HW + p]) + 1.0) * 50.0;
            const double A = static_cast<double>(abn[(n * 2) * HW + p]) * 128.0;
            const double B = static_cast<double>(abn[(n * 2 + 1) * HW + p]) * 128.0;
            const double fy = (L + 16.0) / 116.0, fx = fy + A / 500.0, fz = fy - B / 200.0;
            const double X = detail::kWhite[0] * detail::lab_f_inv(fx);
            const double Y = detail::kWhite[1] * detail::lab_f_inv(fy);
            const double Z = detail::kWhite[2] * detail::lab_f_inv(fz);
            const auto lin = detail::xyz_to_rgb_matrix().apply(X, Y, Z);
            // upstream gradient on linear RGB
            double glin[3];
            for (int c = 0; c < 3; ++c) {
              const double go = out.grad[(n * 3 + c) * HW + p];
              glin[c] = (lin[c] > 0.0 && lin[c] < 1.0) ? go * detail::srgb_encode_deriv(lin[c]) : 0.0;
            }
            const double gX = Minv[0] * glin[0] + Minv[3] * glin[1] + Minv[6] * glin[2];
            const double gY = Minv[1] * glin[0] + Minv[4] * glin[1] + Minv[7] * glin[2];
            const double gZ = Minv[2] * glin[0] + Minv[5] * glin[1] + Minv[8] * glin[2];
            const double gfx = gX * detail::kWhite[0] * detail::lab_f_inv_deriv(fx);
            const double gfy = gY * detail::kWhite[1] * detail::lab_f_inv_deriv(fy);
            const double gfz = gZ * detail::kWhite[2] * detail::lab_f_inv_deriv(fz);
            if (gL) gL[n * HW + p] += static_cast<T>((gfx + gfy + gfz) / 116.0 * 50.0);
            if (gab) {
              gab[(n * 2) * HW + p] += static_cast<T>(gfx / 500.0 * 128.0);
              gab[(n * 2 + 1) * HW + p] += static_cast<T>(-gfz / 200.0 * 128.0);
            }
          }
      });
}

}  // namespace colorgan
