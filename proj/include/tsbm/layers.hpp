// Copyright 2026 The tsbm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tsbm/tensor.hpp"

namespace tsbm {

// Every parameter struct exposes visit(prefix, fn) calling fn(name, tensor)
// in a fixed order. Serialization, optimizers and gradient checks rely on
// two structs of the same type visiting in lockstep.

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T, typename P>
NamedTensors<T> named_tensors(P& params, const std::string& prefix = "") {
  NamedTensors<T> out;
  params.visit(prefix, [&](const std::string& name, Tensor<T>& t) {
    out.emplace_back(name, &t);
  });
  return out;
}

template <typename P>
P zeros_like(const P& params) {
  P out = params;
  out.visit("", [](const std::string&, auto& t) { t.zero(); });
  return out;
}

template <typename T, typename P>
std::size_t scalar_count(P& params) {
  std::size_t n = 0;
  params.visit("", [&](const std::string&, Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out] or empty

  static Linear make(std::size_t out, std::size_t in, bool with_bias = true) {
    Linear l;
    l.weight = Tensor<T>({out, in});
    if (with_bias) l.bias = Tensor<T>({out});
    return l;
  }

  std::size_t in() const { return weight.dim(1); }
  std::size_t out() const { return weight.dim(0); }

  // Uniform in +-1/sqrt(fan_in) for weight and bias.
  void init(Rng& rng) {
    const T bound = T(1) / std::sqrt(T(in()));
    fill_uniform(weight, bound, rng);
    if (!bias.empty()) fill_uniform(bias, bound, rng);
  }

  void forward(const T* x, std::size_t rows, T* y) const {
    detail::affine(x, rows, in(), weight.data(),
                   bias.empty() ? nullptr : bias.data(), out(), y);
  }

  // Accumulates into grad and (if non-null) into dx.
  void backward(const T* x, const T* dy, std::size_t rows, Linear& grad,
                T* dx) const {
    detail::affine_backward(x, dy, rows, in(), weight.data(), out(),
                            grad.weight.data(),
                            bias.empty() ? nullptr : grad.bias.data(), dx);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (!bias.empty()) f(prefix + ".bias", bias);
  }
};

/// Single-group normalization over the feature axis with learned gain/bias.
template <typename T>
struct FeatureNorm {
  static constexpr double kEps = 1e-5;

  Tensor<T> gain;
  Tensor<T> bias;

  static FeatureNorm make(std::size_t width) {
    return {Tensor<T>({width}, T(1)), Tensor<T>({width}, T(0))};
  }

  std::size_t width() const { return gain.size(); }

  void forward(const T* x, std::size_t rows, T* y, T* xhat, T* rstd) const {
    detail::feature_norm(x, rows, width(), gain.data(), bias.data(), T(kEps),
                         y, xhat, rstd);
  }

  void backward(const T* xhat, const T* rstd, const T* dy, std::size_t rows,
                FeatureNorm& grad, T* dx) const {
    detail::feature_norm_backward(xhat, rstd, dy, rows, width(), gain.data(),
                                  grad.gain.data(), grad.bias.data(), dx);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

/// Cached activations of one FeatureNorm application.
template <typename T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<T> rstd;

  void resize(std::size_t rows, std::size_t width) {
    xhat.resize(rows * width);
    rstd.resize(rows);
  }
};

}  // namespace tsbm
