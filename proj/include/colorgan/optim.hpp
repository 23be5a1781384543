#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "colorgan/tensor.hpp"

namespace colorgan {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per parameter plus the shared step count.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(std::span<const Tensor<T>> params) {
  AdamState<T> s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), T(0));
    s.v.emplace_back(p.numel(), T(0));
  }
  return s;
}

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamHyper& h) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                     " moment buffers for " + std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel())
      throw ShapeError("adam_step: moment buffer " + std::to_string(i) + " has wrong size");
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) {
      // zero gradient: moments decay, parameter moves only by residual momentum
      auto& m = state.m[i];
      auto& v = state.v[i];
      for (std::size_t j = 0; j < p.numel(); ++j) {
        m[j] = static_cast<T>(h.beta1 * m[j]);
        v[j] = static_cast<T>(h.beta2 * v[j]);
        const double mhat = m[j] / bc1, vhat = v[j] / bc2;
        p[j] = static_cast<T>(p[j] - h.lr * mhat / (std::sqrt(vhat) + h.eps));
      }
      continue;
    }
    const auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = g[j];
      const double mj = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
      const double vj = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - h.lr * (mj / bc1) / (std::sqrt(vj / bc2) + h.eps));
    }
  }
}

}  // namespace colorgan
