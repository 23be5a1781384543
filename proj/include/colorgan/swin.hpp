#pragma once

// Swin transformer block: window partitioning, cyclic shift, windowed
// multi-head self-attention with relative position bias and shift mask, MLP.
// Feature maps are channels-last here: [N, H, W, C].

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "colorgan/ops.hpp"
#include "colorgan/params.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan {

struct SwinConfig {
  std::size_t dim = 256;
  std::size_t heads = 8;
  std::size_t window = 8;
  std::size_t shift = 0;  // 0 or window/2
  std::size_t mlp_ratio = 4;

  void validate() const {
    if (heads == 0 || dim % heads != 0)
      throw ShapeError("swin: dim " + std::to_string(dim) + " not divisible by heads " +
                       std::to_string(heads));
    if (window == 0) throw ShapeError("swin: window must be positive");
    if (shift != 0 && shift != window / 2)
      throw ShapeError("swin: shift must be 0 or window/2, got " + std::to_string(shift));
  }
};

/// Additive masking value for pairs that must not attend to each other.
inline constexpr double kMaskedLogit = -1e4;

template <typename T>
struct AttentionMask {
  std::size_t windows = 0;  // per image
  std::size_t tokens = 0;   // M*M
  std::shared_ptr<const std::vector<T>> values;  // [windows, tokens, tokens], 0 or kMaskedLogit
  std::vector<int> region_ids;                   // [windows, tokens]

  T at(std::size_t w, std::size_t i, std::size_t j) const {
    return (*values)[(w * tokens + i) * tokens + j];
  }
};

namespace detail {
inline void require_window_fit(std::size_t H, std::size_t W, std::size_t M, const char* op) {
  if (M == 0 || H % M != 0 || W % M != 0)
    throw ShapeError(std::string(op) + ": window " + std::to_string(M) + " does not divide " +
                     std::to_string(H) + "x" + std::to_string(W));
}
}  // namespace detail

/// [N,H,W,C] -> [N*(H/M)*(W/M), M*M, C]
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t M) {
  detail::require_rank(x, 4, "window_partition", "input");
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  detail::require_window_fit(H, W, M, "window_partition");
  const std::size_t nh = H / M, nw = W / M;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(x.numel());
  std::size_t o = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t wy = 0; wy < nh; ++wy)
      for (std::size_t wx = 0; wx < nw; ++wx)
        for (std::size_t iy = 0; iy < M; ++iy)
          for (std::size_t ix = 0; ix < M; ++ix)
            for (std::size_t c = 0; c < C; ++c)
              (*idx)[o++] = static_cast<std::uint32_t>(
                  ((n * H + wy * M + iy) * W + wx * M + ix) * C + c);
  return gather(x, Shape{N * nh * nw, M * M, C}, std::move(idx));
}

/// Inverse of window_partition.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t M, std::size_t H, std::size_t W) {
  detail::require_rank(windows, 3, "window_reverse", "windows");
  detail::require_window_fit(H, W, M, "window_reverse");
  const std::size_t nh = H / M, nw = W / M;
  if (windows.dim(1) != M * M || windows.dim(0) % (nh * nw) != 0)
    throw ShapeError("window_reverse: " + shape_str(windows.shape()) + " inconsistent with " +
                     std::to_string(H) + "x" + std::to_string(W) + " and window " +
                     std::to_string(M));
  const std::size_t N = windows.dim(0) / (nh * nw), C = windows.dim(2);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(windows.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t w = (n * nh + y / M) * nw + xx / M;
          const std::size_t t = (y % M) * M + xx % M;
          (*idx)[((n * H + y) * W + xx) * C + c] = static_cast<std::uint32_t>((w * M * M + t) * C + c);
        }
  return gather(windows, Shape{N, H, W, C}, std::move(idx));
}

/// Toroidal roll by (-offset, -offset): out[h][w] = x[(h+offset) mod H][(w+offset) mod W].
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, std::ptrdiff_t offset) {
  detail::require_rank(x, 4, "cyclic_shift", "input");
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (offset == 0) return x;
  if (static_cast<std::size_t>(std::abs(offset)) >= std::min(H, W))
    throw ShapeError("cyclic_shift: |offset| must be < min(H, W)");
  const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::ptrdiff_t y = 0; y < Hs; ++y)
      for (std::ptrdiff_t xx = 0; xx < Ws; ++xx) {
        const std::size_t sy = static_cast<std::size_t>(((y + offset) % Hs + Hs) % Hs);
        const std::size_t sx = static_cast<std::size_t>(((xx + offset) % Ws + Ws) % Ws);
        for (std::size_t c = 0; c < C; ++c)
          (*idx)[((n * H + y) * W + xx) * C + c] =
              static_cast<std::uint32_t>(((n * H + sy) * W + sx) * C + c);
      }
  return gather(x, x.shape(), std::move(idx));
}

/// Mask for shifted-window attention. Cells of the shifted grid are labelled
/// by which of the three bands [0,H-M), [H-M,H-s), [H-s,H) they fall in per
/// axis; pairs with different labels are masked.
template <typename T>
AttentionMask<T> build_attention_mask(std::size_t H, std::size_t W, std::size_t M,
                                      std::size_t shift) {
  detail::require_window_fit(H, W, M, "build_attention_mask");
  if (shift != 0 && shift != M / 2)
    throw ShapeError("build_attention_mask: shift must be 0 or M/2");
  const std::size_t nh = H / M, nw = W / M, TT = M * M;
  AttentionMask<T> mask;
  mask.windows = nh * nw;
  mask.tokens = TT;
  auto band = [&](std::size_t v, std::size_t extent) -> int {
    if (shift == 0) return 0;
    if (v < extent - M) return 0;
    return v < extent - shift ? 1 : 2;
  };
  mask.region_ids.resize(mask.windows * TT);
  for (std::size_t wy = 0; wy < nh; ++wy)
    for (std::size_t wx = 0; wx < nw; ++wx)
      for (std::size_t iy = 0; iy < M; ++iy)
        for (std::size_t ix = 0; ix < M; ++ix)
          mask.region_ids[(wy * nw + wx) * TT + iy * M + ix] =
              band(wy * M + iy, H) * 3 + band(wx * M + ix, W);
  auto values = std::make_shared<std::vector<T>>(mask.windows * TT * TT, T(0));
  for (std::size_t w = 0; w < mask.windows; ++w)
    for (std::size_t i = 0; i < TT; ++i)
      for (std::size_t j = 0; j < TT; ++j)
        if (mask.region_ids[w * TT + i] != mask.region_ids[w * TT + j])
          (*values)[(w * TT + i) * TT + j] = static_cast<T>(kMaskedLogit);
  mask.values = std::move(values);
  return mask;
}

/// Flat index into the (2M-1)^2 relative offset table for every token pair.
inline std::vector<std::uint32_t> relative_position_index(std::size_t M) {
  const std::size_t TT = M * M, span = 2 * M - 1;
  std::vector<std::uint32_t> idx(TT * TT);
  for (std::size_t i = 0; i < TT; ++i)
    for (std::size_t j = 0; j < TT; ++j) {
      const std::size_t dy = i / M + M - 1 - j / M;
      const std::size_t dx = i % M + M - 1 - j % M;
      idx[i * TT + j] = static_cast<std::uint32_t>(dy * span + dx);
    }
  return idx;
}

template <typename T>
struct SwinBlock {
  SwinConfig cfg;
  LayerNormParams<T> norm1, norm2;
  LinearLayer<T> qkv, proj, fc1, fc2;
  Tensor<T> relative_bias_table;  // [(2M-1)^2, heads]
};

template <typename T>
SwinBlock<T> make_swin_block(ParamSet<T>& ps, const std::string& prefix, const SwinConfig& cfg,
                             Rng& rng) {
  cfg.validate();
  SwinBlock<T> b;
  b.cfg = cfg;
  b.norm1 = make_layer_norm(ps, prefix + ".norm1", cfg.dim);
  b.qkv = make_linear(ps, prefix + ".attn.qkv", cfg.dim, 3 * cfg.dim, rng);
  const std::size_t span = 2 * cfg.window - 1;
  b.relative_bias_table = ps.add(prefix + ".attn.relative_bias_table",
                                 normal_tensor<T>({span * span, cfg.heads}, 0.0, 0.02, rng));
  b.relative_bias_table.set_requires_grad(true);
  b.proj = make_linear(ps, prefix + ".attn.proj", cfg.dim, cfg.dim, rng);
  b.norm2 = make_layer_norm(ps, prefix + ".norm2", cfg.dim);
  b.fc1 = make_linear(ps, prefix + ".mlp.fc1", cfg.dim, cfg.mlp_ratio * cfg.dim, rng);
  b.fc2 = make_linear(ps, prefix + ".mlp.fc2", cfg.mlp_ratio * cfg.dim, cfg.dim, rng);
  return b;
}

/// Expands the bias table to [heads, T, T].
template <typename T>
Tensor<T> relative_bias(const SwinBlock<T>& b) {
  const std::size_t M = b.cfg.window, TT = M * M, heads = b.cfg.heads;
  const auto rel = relative_position_index(M);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(heads * TT * TT);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t p = 0; p < TT * TT; ++p)
      (*idx)[h * TT * TT + p] = static_cast<std::uint32_t>(rel[p] * heads + h);
  return gather(b.relative_bias_table, Shape{heads, TT, TT}, std::move(idx));
}

/// Multi-head self-attention within each window of tokens[B', M*M, C]:
/// softmax(QK^T/sqrt(d) + relative bias + mask) V, then output projection.
/// When `weights_out` is given it receives the attention weights [B', heads, T, T].
template <typename T>
Tensor<T> window_attention(const Tensor<T>& tokens, const SwinBlock<T>& b,
                           const AttentionMask<T>* mask = nullptr,
                           Tensor<T>* weights_out = nullptr) {
  detail::require_rank(tokens, 3, "window_attention", "tokens");
  const std::size_t Bw = tokens.dim(0), TT = tokens.dim(1), C = tokens.dim(2);
  const std::size_t heads = b.cfg.heads, d = C / heads;
  if (C != b.cfg.dim)
    throw ShapeError("window_attention: token dim " + std::to_string(C) + " != block dim " +
                     std::to_string(b.cfg.dim));
  if (TT != b.cfg.window * b.cfg.window)
    throw ShapeError("window_attention: window holds " + std::to_string(TT) + " tokens, expected " +
                     std::to_string(b.cfg.window * b.cfg.window));
  auto qkv = b.qkv(tokens);                                    // [B', T, 3C]
  qkv = permute(reshape(qkv, {Bw, TT, 3, heads, d}), {2, 0, 3, 1, 4});  // [3, B', h, T, d]
  auto q = reshape(narrow(qkv, 0, 0, 1), {Bw * heads, TT, d});
  auto k = reshape(narrow(qkv, 0, 1, 1), {Bw * heads, TT, d});
  auto v = reshape(narrow(qkv, 0, 2, 1), {Bw * heads, TT, d});
  q = scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto attn = reshape(bmm(q, k, /*transpose_b=*/true), {Bw, heads, TT, TT});
  std::shared_ptr<const std::vector<T>> mvals;
  std::size_t mwin = 0;
  if (mask && mask->values) {
    if (mask->tokens != TT) throw ShapeError("window_attention: mask token count mismatch");
    mvals = mask->values;
    mwin = mask->windows;
  }
  attn = softmax(add_attention_bias(attn, relative_bias(b), mvals, mwin));
  if (weights_out) *weights_out = attn;
  auto out = bmm(reshape(attn, {Bw * heads, TT, TT}), v);  // [B'h, T, d]
  out = reshape(permute(reshape(out, {Bw, heads, TT, d}), {0, 2, 1, 3}), {Bw, TT, C});
  return b.proj(out);
}

/// x + attn(LN(x)) followed by x + MLP(LN(x)); shape preserving.
template <typename T>
Tensor<T> swin_block(const Tensor<T>& x, const SwinBlock<T>& b) {
  detail::require_rank(x, 4, "swin_block", "input");
  const std::size_t H = x.dim(1), W = x.dim(2), M = b.cfg.window, s = b.cfg.shift;
  detail::require_window_fit(H, W, M, "swin_block");
  auto h = b.norm1(x);
  std::optional<AttentionMask<T>> mask;
  if (s > 0) {
    h = cyclic_shift(h, static_cast<std::ptrdiff_t>(s));
    mask = build_attention_mask<T>(H, W, M, s);
  }
  auto windows = window_partition(h, M);
  auto attended = window_attention(windows, b, mask ? &*mask : nullptr);
  h = window_reverse(attended, M, H, W);
  if (s > 0) h = cyclic_shift(h, -static_cast<std::ptrdiff_t>(s));
  auto y = add(x, h);
  auto mlp = b.fc2(gelu(b.fc1(b.norm2(y))));
  return add(y, mlp);
}

}  // namespace colorgan
