#pragma once

// Named parameter registry and the small layer structs the networks share.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "colorgan/ops.hpp"
#include "colorgan/tensor.hpp"

namespace colorgan {

/// Ordered, uniquely named set of parameter tensors. Handles share storage
/// with the layers that registered them.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return tensors_[it->second];
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamSet&>(*this).at(name));
  }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& t : tensors_) t.set_requires_grad(on);
  }

  /// Copies values from another set with identical names and shapes.
  template <typename U>
  void copy_values_from(const ParamSet<U>& other) {
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& src = other.at(names_[i]);
      if (src.shape() != tensors_[i].shape())
        throw ShapeError("copy_values_from: shape mismatch for " + names_[i]);
      for (std::size_t j = 0; j < src.numel(); ++j) tensors_[i][j] = static_cast<T>(src[j]);
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> normal_tensor(Shape shape, double mean, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  Buffer<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
};

/// He-normal weights (gain for leaky ReLU 0.2), zero bias.
template <typename T>
Conv2dLayer<T> make_conv(ParamSet<T>& ps, const std::string& name, std::size_t cin,
                         std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                         Rng& rng, double gain = 1.0) {
  const double fan_in = static_cast<double>(cin * k * k);
  const double std = gain * std::sqrt(2.0 / ((1.0 + 0.04) * fan_in));
  Conv2dLayer<T> c;
  c.weight = ps.add(name + ".weight", normal_tensor<T>({cout, cin, k, k}, 0.0, std, rng));
  c.bias = ps.add(name + ".bias", Tensor<T>({cout}, T(0)));
  c.weight.set_requires_grad(true);
  c.bias.set_requires_grad(true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

template <typename T>
struct LinearLayer {
  Tensor<T> weight, bias;
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

/// Truncation-free normal(0, 0.02) weights, zero bias (transformer convention).
template <typename T>
LinearLayer<T> make_linear(ParamSet<T>& ps, const std::string& name, std::size_t din,
                           std::size_t dout, Rng& rng, double stddev = 0.02) {
  LinearLayer<T> l;
  l.weight = ps.add(name + ".weight", normal_tensor<T>({dout, din}, 0.0, stddev, rng));
  l.bias = ps.add(name + ".bias", Tensor<T>({dout}, T(0)));
  l.weight.set_requires_grad(true);
  l.bias.set_requires_grad(true);
  return l;
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, T(1e-5)); }
};

template <typename T>
LayerNormParams<T> make_layer_norm(ParamSet<T>& ps, const std::string& name, std::size_t dim) {
  LayerNormParams<T> n;
  n.gamma = ps.add(name + ".weight", Tensor<T>({dim}, T(1)));
  n.beta = ps.add(name + ".bias", Tensor<T>({dim}, T(0)));
  n.gamma.set_requires_grad(true);
  n.beta.set_requires_grad(true);
  return n;
}

/// Fills every value of the tensor in place.
template <typename T>
void fill(Tensor<T>& t, T v) {
  for (auto& x : t.values()) x = v;
}

}  // namespace colorgan
