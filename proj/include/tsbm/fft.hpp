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

#include <complex>
#include <numbers>
#include <vector>

#include "tsbm/tensor.hpp"

namespace tsbm {

/// Complex DFT of a fixed size. Radix-2 for powers of two, direct
/// summation otherwise. Twiddles are always computed in double.
template <typename T>
class Fft {
 public:
  using Complex = std::complex<T>;

  explicit Fft(std::size_t n) : n_(n) {
    if (n == 0) throw Error("fft: size must be positive");
    pow2_ = (n & (n - 1)) == 0;
    twiddle_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double a = -2.0 * std::numbers::pi * double(k) / double(n);
      twiddle_[k] = Complex(T(std::cos(a)), T(std::sin(a)));
    }
    if (pow2_) {
      bitrev_.resize(n);
      std::size_t bits = 0;
      while ((std::size_t{1} << bits) < n) ++bits;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = 0;
        for (std::size_t b = 0; b < bits; ++b) {
          if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
        }
        bitrev_[i] = r;
      }
    }
  }

  std::size_t size() const { return n_; }

  // In place. forward: e^{-i...}; inverse: e^{+i...}, unnormalized.
  void transform(std::vector<Complex>& a, bool inverse) const {
    if (pow2_) {
      radix2(a, inverse);
    } else {
      direct(a, inverse);
    }
  }

  // out has n/2+1 entries.
  void rfft(const T* in, Complex* out) const {
    std::vector<Complex> buf(n_);
    for (std::size_t i = 0; i < n_; ++i) buf[i] = Complex(in[i], 0);
    transform(buf, false);
    for (std::size_t k = 0; k <= n_ / 2; ++k) out[k] = buf[k];
  }

  // Inverse of rfft for a Hermitian spectrum given by its n/2+1 lower bins.
  // The imaginary parts of the DC and Nyquist bins do not contribute.
  void irfft(const Complex* in, T* out) const {
    std::vector<Complex> buf(n_);
    const std::size_t half = n_ / 2;
    for (std::size_t k = 0; k <= half; ++k) buf[k] = in[k];
    for (std::size_t k = half + 1; k < n_; ++k) buf[k] = std::conj(in[n_ - k]);
    transform(buf, true);
    const T scale = T(1) / T(n_);
    for (std::size_t i = 0; i < n_; ++i) out[i] = buf[i].real() * scale;
  }

 private:
  void radix2(std::vector<Complex>& a, bool inverse) const {
    for (std::size_t i = 0; i < n_; ++i) {
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    }
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t step = n_ / len;
      const std::size_t half = len / 2;
      for (std::size_t i = 0; i < n_; i += len) {
        for (std::size_t j = 0; j < half; ++j) {
          Complex w = twiddle_[j * step];
          if (inverse) w = std::conj(w);
          const Complex u = a[i + j];
          const Complex v = a[i + j + half] * w;
          a[i + j] = u + v;
          a[i + j + half] = u - v;
        }
      }
    }
  }

  void direct(std::vector<Complex>& a, bool inverse) const {
    std::vector<Complex> out(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      Complex acc(0, 0);
      for (std::size_t j = 0; j < n_; ++j) {
        Complex w = twiddle_[(k * j) % n_];
        if (inverse) w = std::conj(w);
        acc += a[j] * w;
      }
      out[k] = acc;
    }
    a.swap(out);
  }

  std::size_t n_;
  bool pow2_ = false;
  std::vector<Complex> twiddle_;
  std::vector<std::size_t> bitrev_;
};

}  // namespace tsbm
