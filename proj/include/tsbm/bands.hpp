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

#include <algorithm>
#include <string>
#include <vector>

#include "tsbm/layers.hpp"
#include "tsbm/spectral.hpp"

namespace tsbm {

/// Contiguous partition of the frequency axis into bands of given widths.
struct BandScheme {
  std::vector<std::size_t> widths;

  std::size_t bands() const { return widths.size(); }
  std::size_t total() const {
    return std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  }

  // Exclusive prefix sums of the widths.
  std::vector<std::size_t> offsets() const {
    std::vector<std::size_t> off(widths.size());
    std::exclusive_scan(widths.begin(), widths.end(), off.begin(), std::size_t{0});
    return off;
  }

  void validate(std::size_t bins) const {
    if (widths.empty()) throw Error("band scheme: no bands");
    for (auto w : widths) {
      if (w == 0) throw Error("band scheme: zero-width band");
    }
    if (total() != bins) {
      throw Error("band scheme: widths sum to " + std::to_string(total()) +
                  " but the spectrogram has " + std::to_string(bins) + " bins");
    }
  }

  friend bool operator==(const BandScheme&, const BandScheme&) = default;
};

/// `bands` bands as equal as possible, wider ones last.
inline BandScheme uniform_band_scheme(std::size_t bins, std::size_t bands) {
  if (bands == 0 || bins < bands) throw Error("band scheme: need at least one bin per band");
  BandScheme s;
  s.widths.assign(bands, bins / bands);
  for (std::size_t i = 0; i < bins % bands; ++i) s.widths[bands - 1 - i] += 1;
  return s;
}

/// Frequency-ladder scheme: 100 Hz bands to 1 kHz, 250 Hz to 4 kHz, 500 Hz
/// to 8 kHz, 1 kHz to 16 kHz, 2 kHz to 20 kHz, remainder as one band. The
/// widest bands are then halved (or the narrowest neighbours merged) until
/// exactly `bands` remain, and widths are ordered non-decreasing.
inline BandScheme default_band_scheme(std::size_t bins, double sample_rate = 44100.0,
                                      std::size_t bands = 57) {
  if (bins < bands) {
    throw Error("band scheme: " + std::to_string(bins) + " bins cannot hold " +
                std::to_string(bands) + " bands");
  }
  const double bin_hz = sample_rate / double(2 * (bins - 1));
  std::vector<double> edges_hz;
  auto ladder = [&](double lo, double hi, double step) {
    for (double f = lo; f < hi - 1e-9; f += step) edges_hz.push_back(f);
  };
  ladder(0, 1000, 100);
  ladder(1000, 4000, 250);
  ladder(4000, 8000, 500);
  ladder(8000, 16000, 1000);
  ladder(16000, 20000, 2000);
  edges_hz.push_back(20000);

  std::vector<std::size_t> edges;
  for (double hz : edges_hz) {
    const auto b = std::min<std::size_t>(bins, std::size_t(std::lround(hz / bin_hz)));
    if (edges.empty() || b > edges.back()) edges.push_back(b);
  }
  if (edges.back() < bins) edges.push_back(bins);

  std::vector<std::size_t> w;
  for (std::size_t i = 1; i < edges.size(); ++i) w.push_back(edges[i] - edges[i - 1]);
  std::sort(w.begin(), w.end());

  while (w.size() < bands) {
    const std::size_t widest = w.back();
    w.pop_back();
    w.push_back(widest / 2);
    w.push_back(widest - widest / 2);
    std::sort(w.begin(), w.end());
  }
  while (w.size() > bands) {
    std::size_t best = 0;
    for (std::size_t i = 1; i + 1 < w.size(); ++i) {
      if (w[i] + w[i + 1] < w[best] + w[best + 1]) best = i;
    }
    w[best] += w[best + 1];
    w.erase(w.begin() + std::ptrdiff_t(best) + 1);
    std::sort(w.begin(), w.end());
  }
  return BandScheme{w};
}

/// Real feature tensor indexed (channel, feature, band, frame). Stored with
/// features innermost so each (channel, band) time sequence is a contiguous
/// [frames, features] matrix.
template <typename T>
class FeatureTensor {
 public:
  FeatureTensor() = default;
  FeatureTensor(std::size_t channels, std::size_t features, std::size_t bands,
                std::size_t frames)
      : c_(channels), n_(features), k_(bands), t_(frames),
        data_(channels * features * bands * frames) {}

  std::size_t channels() const { return c_; }
  std::size_t features() const { return n_; }
  std::size_t bands() const { return k_; }
  std::size_t frames() const { return t_; }
  std::size_t size() const { return data_.size(); }

  T& at(std::size_t c, std::size_t n, std::size_t k, std::size_t t) {
    return data_[((c * k_ + k) * t_ + t) * n_ + n];
  }
  const T& at(std::size_t c, std::size_t n, std::size_t k, std::size_t t) const {
    return data_[((c * k_ + k) * t_ + t) * n_ + n];
  }
  T* row(std::size_t c, std::size_t k, std::size_t t) {
    return data_.data() + ((c * k_ + k) * t_ + t) * n_;
  }
  const T* row(std::size_t c, std::size_t k, std::size_t t) const {
    return data_.data() + ((c * k_ + k) * t_ + t) * n_;
  }
  // Rows of one channel: [bands * frames, features].
  T* channel(std::size_t c) { return data_.data() + c * k_ * t_ * n_; }
  const T* channel(std::size_t c) const { return data_.data() + c * k_ * t_ * n_; }

  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  bool same_shape(const FeatureTensor& o) const {
    return c_ == o.c_ && n_ == o.n_ && k_ == o.k_ && t_ == o.t_;
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const FeatureTensor&, const FeatureTensor&) = default;

 private:
  std::size_t c_ = 0, n_ = 0, k_ = 0, t_ = 0;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Band split encoder

template <typename T>
struct BandSplitParams {
  struct Band {
    FeatureNorm<T> norm;  // over 2*G_k
    Linear<T> proj;       // 2*G_k -> N
  };
  std::vector<Band> bands;

  static BandSplitParams make(const BandScheme& scheme, std::size_t features) {
    BandSplitParams p;
    for (auto g : scheme.widths) {
      p.bands.push_back({FeatureNorm<T>::make(2 * g), Linear<T>::make(features, 2 * g)});
    }
    return p;
  }

  void init(Rng& rng) {
    for (auto& b : bands) b.proj.init(rng);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t k = 0; k < bands.size(); ++k) {
      const std::string p = prefix + ".band" + std::to_string(k);
      bands[k].norm.visit(p + ".norm", f);
      bands[k].proj.visit(p + ".proj", f);
    }
  }
};

template <typename T>
struct BandSplitCache {
  // Per (channel, band): normalization cache and normalized features.
  std::vector<NormCache<T>> norm;
  std::vector<std::vector<T>> normed;
};

namespace detail {

template <typename T>
void check_scheme_params(const BandScheme& scheme, std::size_t bins,
                         std::size_t param_bands, const char* what) {
  scheme.validate(bins);
  if (param_bands != scheme.bands()) {
    throw Error(std::string(what) + ": parameters cover " + std::to_string(param_bands) +
                " bands, scheme has " + std::to_string(scheme.bands()));
  }
}

}  // namespace detail

/// Per channel and band: interleaved (re, im) bins -> normalization ->
/// affine map to N features.
template <typename T>
FeatureTensor<T> band_split(const ComplexSpectrogram<T>& x, const BandScheme& scheme,
                            const BandSplitParams<T>& params,
                            BandSplitCache<T>* cache = nullptr) {
  detail::check_scheme_params<T>(scheme, x.bins(), params.bands.size(), "band_split");
  const std::size_t n = params.bands.front().proj.out();
  const std::size_t channels = x.channels(), bands = scheme.bands(), frames = x.frames();
  const auto off = scheme.offsets();
  FeatureTensor<T> z(channels, n, bands, frames);
  if (cache) {
    cache->norm.assign(channels * bands, {});
    cache->normed.assign(channels * bands, {});
  }
  std::vector<T> in, normed;
  NormCache<T> local;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t k = 0; k < bands; ++k) {
      const std::size_t g = scheme.widths[k], width = 2 * g;
      const auto& bp = params.bands[k];
      if (bp.norm.width() != width || bp.proj.in() != width || bp.proj.out() != n) {
        throw Error("band_split: band " + std::to_string(k) + " parameter shape mismatch");
      }
      in.resize(frames * width);
      for (std::size_t t = 0; t < frames; ++t) {
        const auto* src = x.frame(c, t) + off[k];
        for (std::size_t j = 0; j < g; ++j) {
          in[t * width + 2 * j] = src[j].real();
          in[t * width + 2 * j + 1] = src[j].imag();
        }
      }
      NormCache<T>& nc = cache ? cache->norm[c * bands + k] : local;
      std::vector<T>& nb = cache ? cache->normed[c * bands + k] : normed;
      nc.resize(frames, width);
      nb.resize(frames * width);
      bp.norm.forward(in.data(), frames, nb.data(), nc.xhat.data(), nc.rstd.data());
      bp.proj.forward(nb.data(), frames, z.row(c, k, 0));
    }
  }
  return z;
}

/// Accumulates parameter gradients; if dx is non-null also accumulates the
/// gradient with respect to the input spectrogram.
template <typename T>
void band_split_backward(const BandScheme& scheme, const BandSplitParams<T>& params,
                         const BandSplitCache<T>& cache, const FeatureTensor<T>& dz,
                         BandSplitParams<T>& grads, ComplexSpectrogram<T>* dx) {
  const std::size_t channels = dz.channels(), bands = scheme.bands(), frames = dz.frames();
  const auto off = scheme.offsets();
  std::vector<T> dnormed, din;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t k = 0; k < bands; ++k) {
      const std::size_t g = scheme.widths[k], width = 2 * g;
      const auto& bp = params.bands[k];
      auto& bg = grads.bands[k];
      const auto& nc = cache.norm[c * bands + k];
      dnormed.assign(frames * width, T(0));
      bp.proj.backward(cache.normed[c * bands + k].data(), dz.row(c, k, 0), frames, bg.proj,
                       dnormed.data());
      T* dxp = nullptr;
      if (dx) {
        din.assign(frames * width, T(0));
        dxp = din.data();
      }
      bp.norm.backward(nc.xhat.data(), nc.rstd.data(), dnormed.data(), frames, bg.norm, dxp);
      if (dx) {
        for (std::size_t t = 0; t < frames; ++t) {
          auto* dst = dx->frame(c, t) + off[k];
          for (std::size_t j = 0; j < g; ++j) {
            dst[j] += std::complex<T>(din[t * width + 2 * j], din[t * width + 2 * j + 1]);
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Band merge heads

/// One source's band merge head. For every (channel, band, frame) the N
/// features go through normalization, a tanh hidden layer and an output
/// layer of width 8*G_k feeding a GLU. The 4*G_k GLU outputs hold an
/// own-channel block and a cross-channel block of 2*G_k interleaved (re, im)
/// values; channel c's estimate is the mean of its own block and the other
/// channel's cross block.
template <typename T>
struct MergeHeadParams {
  struct Band {
    FeatureNorm<T> norm;  // over N
    Linear<T> hidden;     // N -> H
    Linear<T> out;        // H -> 8*G_k
  };
  std::vector<Band> bands;

  static MergeHeadParams make(const BandScheme& scheme, std::size_t features,
                              std::size_t hidden) {
    MergeHeadParams p;
    for (auto g : scheme.widths) {
      p.bands.push_back({FeatureNorm<T>::make(features), Linear<T>::make(hidden, features),
                         Linear<T>::make(8 * g, hidden)});
    }
    return p;
  }

  void init(Rng& rng) {
    for (auto& b : bands) {
      b.hidden.init(rng);
      b.out.init(rng);
    }
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t k = 0; k < bands.size(); ++k) {
      const std::string p = prefix + ".band" + std::to_string(k);
      bands[k].norm.visit(p + ".norm", f);
      bands[k].hidden.visit(p + ".hidden", f);
      bands[k].out.visit(p + ".out", f);
    }
  }
};

template <typename T>
struct MergeHeadCache {
  // Per (channel, band).
  std::vector<NormCache<T>> norm;
  std::vector<std::vector<T>> normed;  // [T, N]
  std::vector<std::vector<T>> hidden;  // tanh output [T, H]
  std::vector<std::vector<T>> pre;     // pre-GLU [T, 8G]
};

template <typename T>
T glu(T value, T gate) {
  return value * detail::sigmoid(gate);
}

template <typename T>
ComplexSpectrogram<T> band_merge_head(const FeatureTensor<T>& q, const BandScheme& scheme,
                                      const MergeHeadParams<T>& params,
                                      const StftConfig& stft_cfg,
                                      MergeHeadCache<T>* cache = nullptr) {
  const std::size_t bins = scheme.total();
  detail::check_scheme_params<T>(scheme, bins, params.bands.size(), "band_merge_head");
  if (q.channels() != 2) throw Error("band_merge_head: expected 2 channels");
  if (q.bands() != scheme.bands()) throw Error("band_merge_head: band count mismatch");
  const std::size_t n = q.features(), bands = scheme.bands(), frames = q.frames();
  const auto off = scheme.offsets();
  ComplexSpectrogram<T> m(2, bins, frames, stft_cfg);
  if (cache) {
    cache->norm.assign(2 * bands, {});
    cache->normed.assign(2 * bands, {});
    cache->hidden.assign(2 * bands, {});
    cache->pre.assign(2 * bands, {});
  }
  NormCache<T> lnorm;
  std::vector<T> lnormed, lhidden, lpre;
  std::vector<T> glu_out[2];
  for (std::size_t k = 0; k < bands; ++k) {
    const std::size_t g = scheme.widths[k];
    const auto& bp = params.bands[k];
    const std::size_t h = bp.hidden.out();
    if (bp.norm.width() != n || bp.hidden.in() != n || bp.out.in() != h || bp.out.out() != 8 * g) {
      throw Error("band_merge_head: band " + std::to_string(k) + " parameter shape mismatch");
    }
    for (std::size_t c = 0; c < 2; ++c) {
      const std::size_t idx = c * bands + k;
      NormCache<T>& nc = cache ? cache->norm[idx] : lnorm;
      auto& nb = cache ? cache->normed[idx] : lnormed;
      auto& hb = cache ? cache->hidden[idx] : lhidden;
      auto& pb = cache ? cache->pre[idx] : lpre;
      nc.resize(frames, n);
      nb.resize(frames * n);
      hb.resize(frames * h);
      pb.resize(frames * 8 * g);
      bp.norm.forward(q.row(c, k, 0), frames, nb.data(), nc.xhat.data(), nc.rstd.data());
      bp.hidden.forward(nb.data(), frames, hb.data());
      for (auto& v : hb) v = std::tanh(v);
      bp.out.forward(hb.data(), frames, pb.data());
      auto& go = glu_out[c];
      go.resize(frames * 4 * g);
      for (std::size_t t = 0; t < frames; ++t) {
        const T* pr = pb.data() + t * 8 * g;
        for (std::size_t j = 0; j < 4 * g; ++j) go[t * 4 * g + j] = glu(pr[j], pr[4 * g + j]);
      }
    }
    for (std::size_t c = 0; c < 2; ++c) {
      const auto& own = glu_out[c];
      const auto& other = glu_out[1 - c];
      for (std::size_t t = 0; t < frames; ++t) {
        auto* dst = m.frame(c, t) + off[k];
        const T* o = own.data() + t * 4 * g;
        const T* x = other.data() + t * 4 * g + 2 * g;
        for (std::size_t j = 0; j < g; ++j) {
          dst[j] = {T(0.5) * (o[2 * j] + x[2 * j]), T(0.5) * (o[2 * j + 1] + x[2 * j + 1])};
        }
      }
    }
  }
  return m;
}

/// dm holds d/dRe and d/dIm of the head output. Accumulates into grads and dq.
template <typename T>
void band_merge_head_backward(const BandScheme& scheme, const MergeHeadParams<T>& params,
                              const MergeHeadCache<T>& cache, const ComplexSpectrogram<T>& dm,
                              MergeHeadParams<T>& grads, FeatureTensor<T>& dq) {
  const std::size_t n = dq.features(), bands = scheme.bands(), frames = dq.frames();
  const auto off = scheme.offsets();
  std::vector<T> dpre, dhidden, dnormed;
  for (std::size_t k = 0; k < bands; ++k) {
    const std::size_t g = scheme.widths[k];
    const auto& bp = params.bands[k];
    auto& bg = grads.bands[k];
    const std::size_t h = bp.hidden.out();
    for (std::size_t c = 0; c < 2; ++c) {
      const std::size_t idx = c * bands + k;
      const auto& pb = cache.pre[idx];
      dpre.assign(frames * 8 * g, T(0));
      for (std::size_t t = 0; t < frames; ++t) {
        const auto* own = dm.frame(c, t) + off[k];
        const auto* cross = dm.frame(1 - c, t) + off[k];
        const T* pr = pb.data() + t * 8 * g;
        T* dp = dpre.data() + t * 8 * g;
        for (std::size_t j = 0; j < 4 * g; ++j) {
          const std::size_t bin = (j % (2 * g)) / 2;
          const auto& src = j < 2 * g ? own[bin] : cross[bin];
          const T dv = T(0.5) * ((j % 2 == 0) ? src.real() : src.imag());
          const T s = detail::sigmoid(pr[4 * g + j]);
          dp[j] = dv * s;
          dp[4 * g + j] = dv * pr[j] * s * (T(1) - s);
        }
      }
      dhidden.assign(frames * h, T(0));
      bp.out.backward(cache.hidden[idx].data(), dpre.data(), frames, bg.out, dhidden.data());
      const auto& hb = cache.hidden[idx];
      for (std::size_t i = 0; i < dhidden.size(); ++i) dhidden[i] *= T(1) - hb[i] * hb[i];
      dnormed.assign(frames * n, T(0));
      bp.hidden.backward(cache.normed[idx].data(), dhidden.data(), frames, bg.hidden,
                         dnormed.data());
      const auto& nc = cache.norm[idx];
      bp.norm.backward(nc.xhat.data(), nc.rstd.data(), dnormed.data(), frames, bg.norm,
                       dq.row(c, k, 0));
    }
  }
}

}  // namespace tsbm
