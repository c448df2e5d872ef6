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

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsbm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// Dense row-major array with an owned buffer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, T fill = T{0})
      : shape_(std::move(shape)), values_(count(shape_), fill) {}

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }
  void zero() { fill(T{0}); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> values_;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<std::size_t>& s,
                   const char* what) {
  if (t.shape() != s) {
    throw Error(std::string(what) + ": expected shape " + shape_string(s) +
                ", got " + shape_string(t.shape()));
  }
}

template <typename T>
void fill_uniform(Tensor<T>& t, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-double(bound), double(bound));
  for (auto& v : t.values()) v = T(dist(rng));
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// y[rows, out] (+)= x[rows, in] * w[out, in]^T (+ bias)
template <typename T>
void affine(const T* x, std::size_t rows, std::size_t in, const T* w,
            const T* bias, std::size_t out, T* y, bool accumulate = false) {
  ConstMatMap<T> X(x, rows, in);
  ConstMatMap<T> W(w, out, in);
  MatMap<T> Y(y, rows, out);
  if (accumulate) {
    Y.noalias() += X * W.transpose();
  } else {
    Y.noalias() = X * W.transpose();
  }
  if (bias) {
    for (std::size_t r = 0; r < rows; ++r) {
      T* yr = y + r * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += bias[o];
    }
  }
}

// Gradients of affine(): dw += dy^T x, dbias += colsum(dy), dx (+)= dy w.
template <typename T>
void affine_backward(const T* x, const T* dy, std::size_t rows, std::size_t in,
                     const T* w, std::size_t out, T* dw, T* dbias, T* dx,
                     bool accumulate_dx = true) {
  ConstMatMap<T> X(x, rows, in);
  ConstMatMap<T> DY(dy, rows, out);
  if (dw) {
    MatMap<T> DW(dw, out, in);
    DW.noalias() += DY.transpose() * X;
  }
  if (dbias) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dr = dy + r * out;
      for (std::size_t o = 0; o < out; ++o) dbias[o] += dr[o];
    }
  }
  if (dx) {
    ConstMatMap<T> W(w, out, in);
    MatMap<T> DX(dx, rows, in);
    if (accumulate_dx) {
      DX.noalias() += DY * W;
    } else {
      DX.noalias() = DY * W;
    }
  }
}

// Records which side of each non-smooth point (|x|, PReLU, floors) a
// forward pass took, or replays a recorded pass so that the evaluated
// function stays on one smooth piece. Installed only by gradient checks.
struct BranchTape {
  std::vector<std::uint8_t> taken;
  std::size_t cursor = 0;
  bool replay = false;
};

inline BranchTape*& active_branch_tape() {
  thread_local BranchTape* tape = nullptr;
  return tape;
}

inline bool branch(bool natural) {
  BranchTape* t = active_branch_tape();
  if (!t) return natural;
  if (t->replay) {
    if (t->cursor >= t->taken.size()) throw Error("branch tape exhausted");
    return t->taken[t->cursor++] != 0;
  }
  t->taken.push_back(natural ? 1 : 0);
  return natural;
}

class BranchTapeScope {
 public:
  explicit BranchTapeScope(BranchTape* t) : prev_(active_branch_tape()) {
    active_branch_tape() = t;
  }
  ~BranchTapeScope() { active_branch_tape() = prev_; }
  BranchTapeScope(const BranchTapeScope&) = delete;
  BranchTapeScope& operator=(const BranchTapeScope&) = delete;

 private:
  BranchTape* prev_;
};

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

template <typename T>
T softplus(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}

template <typename T>
T prelu(T x, T slope) {
  return branch(x >= T(0)) ? x : slope * x;
}

// Normalization over the trailing `width` features of each row followed by
// an elementwise gain and bias. Caches the normalized values and 1/std.
template <typename T>
void feature_norm(const T* x, std::size_t rows, std::size_t width,
                  const T* gain, const T* bias, T eps, T* y, T* xhat,
                  T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * width;
    T mean = 0;
    for (std::size_t i = 0; i < width; ++i) mean += xr[i];
    mean /= T(width);
    T var = 0;
    for (std::size_t i = 0; i < width; ++i) {
      const T d = xr[i] - mean;
      var += d * d;
    }
    var /= T(width);
    const T rs = T(1) / std::sqrt(var + eps);
    if (rstd) rstd[r] = rs;
    T* yr = y + r * width;
    for (std::size_t i = 0; i < width; ++i) {
      const T h = (xr[i] - mean) * rs;
      if (xhat) xhat[r * width + i] = h;
      yr[i] = h * gain[i] + bias[i];
    }
  }
}

template <typename T>
void feature_norm_backward(const T* xhat, const T* rstd, const T* dy,
                           std::size_t rows, std::size_t width, const T* gain,
                           T* dgain, T* dbias, T* dx) {
  std::vector<T> dh(width);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* hr = xhat + r * width;
    const T* dr = dy + r * width;
    T mean_dh = 0, mean_dh_h = 0;
    for (std::size_t i = 0; i < width; ++i) {
      dgain[i] += dr[i] * hr[i];
      dbias[i] += dr[i];
      dh[i] = dr[i] * gain[i];
      mean_dh += dh[i];
      mean_dh_h += dh[i] * hr[i];
    }
    if (!dx) continue;
    mean_dh /= T(width);
    mean_dh_h /= T(width);
    T* xr = dx + r * width;
    for (std::size_t i = 0; i < width; ++i) {
      xr[i] += rstd[r] * (dh[i] - mean_dh - hr[i] * mean_dh_h);
    }
  }
}

}  // namespace detail
}  // namespace tsbm
