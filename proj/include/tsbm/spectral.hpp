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
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "tsbm/fft.hpp"
#include "tsbm/tensor.hpp"

namespace tsbm {

struct StftConfig {
  std::size_t n_fft = 2048;
  std::size_t hop = 512;
  double sample_rate = 44100.0;
  bool center = true;

  std::size_t bins() const { return n_fft / 2 + 1; }

  // Frames produced for a signal of `length` samples.
  std::size_t frames(std::size_t length) const {
    if (center) return length / hop + 1;
    return length < n_fft ? 0 : (length - n_fft) / hop + 1;
  }

  void validate() const {
    if (n_fft == 0 || n_fft % 2 != 0) throw Error("stft: n_fft must be even and positive");
    if (hop == 0 || hop > n_fft) throw Error("stft: hop must satisfy 0 < hop <= n_fft");
    if (!(sample_rate > 0)) throw Error("stft: sample_rate must be positive");
  }

  friend bool operator==(const StftConfig&, const StftConfig&) = default;
};

/// Complex spectrogram of a multi-channel signal. Indexed (channel, bin,
/// frame); stored frame-major so each frame's bins are contiguous.
template <typename T>
class ComplexSpectrogram {
 public:
  using Complex = std::complex<T>;

  ComplexSpectrogram() = default;
  ComplexSpectrogram(std::size_t channels, std::size_t bins,
                     std::size_t frames, StftConfig cfg = {})
      : cfg_(cfg), channels_(channels), bins_(bins), frames_(frames),
        data_(channels * bins * frames) {}

  static ComplexSpectrogram like(const ComplexSpectrogram& o) {
    return ComplexSpectrogram(o.channels_, o.bins_, o.frames_, o.cfg_);
  }

  const StftConfig& config() const { return cfg_; }
  std::size_t channels() const { return channels_; }
  std::size_t bins() const { return bins_; }
  std::size_t frames() const { return frames_; }
  std::size_t size() const { return data_.size(); }

  Complex& at(std::size_t c, std::size_t f, std::size_t t) {
    return data_[(c * frames_ + t) * bins_ + f];
  }
  const Complex& at(std::size_t c, std::size_t f, std::size_t t) const {
    return data_[(c * frames_ + t) * bins_ + f];
  }
  Complex* frame(std::size_t c, std::size_t t) {
    return data_.data() + (c * frames_ + t) * bins_;
  }
  const Complex* frame(std::size_t c, std::size_t t) const {
    return data_.data() + (c * frames_ + t) * bins_;
  }

  std::vector<Complex>& values() { return data_; }
  const std::vector<Complex>& values() const { return data_; }

  bool same_shape(const ComplexSpectrogram& o) const {
    return channels_ == o.channels_ && bins_ == o.bins_ && frames_ == o.frames_;
  }

  bool all_finite() const {
    for (const auto& v : data_) {
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
    }
    return true;
  }

  ComplexSpectrogram& operator+=(const ComplexSpectrogram& o) {
    if (!same_shape(o)) throw Error("spectrogram: shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  StftConfig cfg_;
  std::size_t channels_ = 0;
  std::size_t bins_ = 0;
  std::size_t frames_ = 0;
  std::vector<Complex> data_;
};

/// Periodic Hann window.
template <typename T>
std::vector<T> hann_window(std::size_t n) {
  std::vector<T> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = T(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n)));
  }
  return w;
}

namespace detail {

// Reflection about the end samples (no edge repeat), periodic for long pads.
inline std::size_t reflect_index(std::ptrdiff_t j, std::size_t length) {
  if (length == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (length - 1));
  j %= period;
  if (j < 0) j += period;
  if (j >= static_cast<std::ptrdiff_t>(length)) j = period - j;
  return static_cast<std::size_t>(j);
}

inline std::size_t padded_length(const StftConfig& cfg, std::size_t frames) {
  return cfg.n_fft + cfg.hop * (frames - 1);
}

inline std::size_t center_offset(const StftConfig& cfg) {
  return cfg.center ? cfg.n_fft / 2 : 0;
}

}  // namespace detail

/// Overlap-added squared synthesis window over the padded signal domain.
template <typename T>
std::vector<T> window_square_sum(const StftConfig& cfg, std::size_t frames) {
  const auto w = hann_window<T>(cfg.n_fft);
  std::vector<T> sum(detail::padded_length(cfg, frames), T(0));
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < cfg.n_fft; ++j) sum[t * cfg.hop + j] += w[j] * w[j];
  }
  return sum;
}

/// Short-time Fourier transform of wave [C, L].
template <typename T>
ComplexSpectrogram<T> stft(const Tensor<T>& wave, const StftConfig& cfg) {
  cfg.validate();
  if (wave.rank() != 2 || wave.dim(0) == 0) throw Error("stft: expected wave of shape [C, L]");
  const std::size_t channels = wave.dim(0);
  const std::size_t length = wave.dim(1);
  if (length == 0) throw Error("stft: empty input");
  if (!wave.all_finite()) throw Error("stft: non-finite samples");
  const std::size_t frames = cfg.frames(length);
  if (frames == 0) throw Error("stft: input shorter than one frame");

  const auto w = hann_window<T>(cfg.n_fft);
  const Fft<T> fft(cfg.n_fft);
  const auto pad = static_cast<std::ptrdiff_t>(detail::center_offset(cfg));
  ComplexSpectrogram<T> out(channels, cfg.bins(), frames, cfg);
  std::vector<T> buf(cfg.n_fft);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* x = wave.data() + c * length;
    for (std::size_t t = 0; t < frames; ++t) {
      const auto start = static_cast<std::ptrdiff_t>(t * cfg.hop) - pad;
      for (std::size_t j = 0; j < cfg.n_fft; ++j) {
        buf[j] = w[j] * x[detail::reflect_index(start + std::ptrdiff_t(j), length)];
      }
      fft.rfft(buf.data(), out.frame(c, t));
    }
  }
  return out;
}

/// Inverse STFT by weighted overlap-add with window-square normalization.
/// The output is trimmed or zero-padded to `length` samples.
template <typename T>
Tensor<T> istft(const ComplexSpectrogram<T>& spec, std::size_t length) {
  const StftConfig& cfg = spec.config();
  cfg.validate();
  if (spec.frames() == 0 || spec.channels() == 0) throw Error("istft: zero-length spectrogram");
  if (spec.bins() != cfg.bins()) throw Error("istft: bin count does not match n_fft");

  const std::size_t frames = spec.frames();
  const auto w = hann_window<T>(cfg.n_fft);
  const auto wsum = window_square_sum<T>(cfg, frames);
  const std::size_t full = wsum.size();
  const std::size_t off = detail::center_offset(cfg);
  const Fft<T> fft(cfg.n_fft);
  const T floor = T(1e-11);

  Tensor<T> out({spec.channels(), length});
  std::vector<T> ola(full), buf(cfg.n_fft);
  for (std::size_t c = 0; c < spec.channels(); ++c) {
    std::fill(ola.begin(), ola.end(), T(0));
    for (std::size_t t = 0; t < frames; ++t) {
      fft.irfft(spec.frame(c, t), buf.data());
      T* dst = ola.data() + t * cfg.hop;
      for (std::size_t j = 0; j < cfg.n_fft; ++j) dst[j] += buf[j] * w[j];
    }
    T* y = out.data() + c * length;
    for (std::size_t n = 0; n < length; ++n) {
      const std::size_t p = n + off;
      y[n] = (p < full && wsum[p] > floor) ? ola[p] / wsum[p] : T(0);
    }
  }
  return out;
}

/// Adjoint of istft(., length) with respect to the real and imaginary parts
/// of every bin: returns G with Re G = d<g, istft(X)>/d Re X and likewise
/// for the imaginary part.
template <typename T>
ComplexSpectrogram<T> istft_adjoint(const Tensor<T>& grad_wave,
                                    const StftConfig& cfg,
                                    std::size_t frames) {
  cfg.validate();
  if (grad_wave.rank() != 2) throw Error("istft_adjoint: expected [C, L]");
  const std::size_t channels = grad_wave.dim(0);
  const std::size_t length = grad_wave.dim(1);
  const auto w = hann_window<T>(cfg.n_fft);
  const auto wsum = window_square_sum<T>(cfg, frames);
  const std::size_t full = wsum.size();
  const std::size_t off = detail::center_offset(cfg);
  const Fft<T> fft(cfg.n_fft);
  const T floor = T(1e-11);
  const std::size_t n = cfg.n_fft;
  const std::size_t half = n / 2;

  ComplexSpectrogram<T> out(channels, cfg.bins(), frames, cfg);
  std::vector<T> padded(full), seg(n);
  for (std::size_t c = 0; c < channels; ++c) {
    std::fill(padded.begin(), padded.end(), T(0));
    const T* g = grad_wave.data() + c * length;
    for (std::size_t i = 0; i < length; ++i) {
      const std::size_t p = i + off;
      if (p < full && wsum[p] > floor) padded[p] = g[i] / wsum[p];
    }
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t j = 0; j < n; ++j) seg[j] = padded[t * cfg.hop + j] * w[j];
      auto* dst = out.frame(c, t);
      fft.rfft(seg.data(), dst);
      for (std::size_t k = 0; k <= half; ++k) {
        const T scale = (k == 0 || k == half) ? T(1) / T(n) : T(2) / T(n);
        // d/dIm of Re(X e^{+i theta}) is -sin, and Im(rfft) carries -sin.
        dst[k] = {dst[k].real() * scale, (k == 0 || k == half) ? T(0) : dst[k].imag() * scale};
      }
    }
  }
  return out;
}

/// Writes |X| for one channel as CSV: one row per bin, one column per frame.
template <typename T>
void write_magnitude_csv(const ComplexSpectrogram<T>& spec, std::size_t channel,
                         const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.precision(8);
  for (std::size_t f = 0; f < spec.bins(); ++f) {
    for (std::size_t t = 0; t < spec.frames(); ++t) {
      if (t) os << ',';
      os << std::abs(spec.at(channel, f, t));
    }
    os << '\n';
  }
}

}  // namespace tsbm
