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

#include <array>
#include <string>
#include <vector>

#include "tsbm/bands.hpp"
#include "tsbm/dualnet.hpp"
#include "tsbm/spectral.hpp"
#include "tsbm/ssd.hpp"

namespace tsbm {

inline const std::array<std::string, 4> kSourceNames = {"vocals", "bass", "drums", "other"};

enum class Stage2Input { mixture, stage1_sum };

inline std::string to_string(Stage2Input s) {
  return s == Stage2Input::mixture ? "mixture" : "stage1_sum";
}

inline Stage2Input parse_stage2_input(const std::string& s) {
  if (s == "mixture") return Stage2Input::mixture;
  if (s == "stage1_sum") return Stage2Input::stage1_sum;
  throw Error("unknown stage2_input '" + s + "' (expected mixture or stage1_sum)");
}

struct ModelConfig {
  std::size_t features = 128;
  BandScheme scheme;
  std::size_t layers_stage1 = 8;
  std::size_t layers_stage2 = 4;
  SsdDims ssd;
  std::size_t n_sources = 4;
  std::size_t head_hidden = 128;
  StftConfig stft;
  Discretization discretization = Discretization::zoh;
  Stage2Input stage2_input = Stage2Input::mixture;

  std::size_t bins() const { return stft.bins(); }

  void validate() const {
    stft.validate();
    ssd.validate();
    scheme.validate(stft.bins());
    if (ssd.d_model != features) throw Error("config: ssd.d_model must equal features");
    if (layers_stage1 == 0 || layers_stage2 == 0) throw Error("config: layer counts must be >= 1");
    if (n_sources == 0 || n_sources > kSourceNames.size()) {
      throw Error("config: n_sources must be in [1, 4]");
    }
    if (features == 0 || head_hidden == 0) throw Error("config: widths must be positive");
  }

  const std::string& source_name(std::size_t i) const { return kSourceNames.at(i); }

  /// 57 bands, 8 + 4 layers.
  static ModelConfig full() {
    ModelConfig c;
    c.scheme = default_band_scheme(c.stft.bins(), c.stft.sample_rate, 57);
    return c;
  }

  /// 4 + 2 layers.
  static ModelConfig lightweight() {
    ModelConfig c = full();
    c.layers_stage1 = 4;
    c.layers_stage2 = 2;
    return c;
  }

  /// Tiny model used by gradient checks: N=8, K=4, 1+1 layers, d_state=4, P=4.
  static ModelConfig toy() {
    ModelConfig c;
    c.features = 8;
    c.stft = {32, 8, 2048.0, true};
    c.scheme = uniform_band_scheme(c.stft.bins(), 4);
    c.layers_stage1 = 1;
    c.layers_stage2 = 1;
    c.ssd = {8, 4, 4, 2, 4};
    c.head_hidden = 8;
    return c;
  }

  /// Small two-source model for CPU training runs: N=32, K=8, 2+1 layers.
  static ModelConfig desk() {
    ModelConfig c;
    c.features = 32;
    c.stft = {256, 64, 8000.0, true};
    c.scheme = default_band_scheme(c.stft.bins(), c.stft.sample_rate, 8);
    c.layers_stage1 = 2;
    c.layers_stage2 = 1;
    c.ssd = {32, 16, 4, 2, 16};
    c.n_sources = 2;
    c.head_hidden = 32;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct StageParams {
  BandSplitParams<T> split;
  std::vector<DualLayerParams<T>> layers;
  std::vector<MergeHeadParams<T>> heads;

  static StageParams make(const ModelConfig& cfg, std::size_t n_layers) {
    StageParams s;
    s.split = BandSplitParams<T>::make(cfg.scheme, cfg.features);
    for (std::size_t l = 0; l < n_layers; ++l) {
      s.layers.push_back(DualLayerParams<T>::make(cfg.features, cfg.ssd));
    }
    for (std::size_t i = 0; i < cfg.n_sources; ++i) {
      s.heads.push_back(MergeHeadParams<T>::make(cfg.scheme, cfg.features, cfg.head_hidden));
    }
    return s;
  }

  void init(const ModelConfig& cfg, Rng& rng) {
    split.init(rng);
    for (auto& l : layers) l.init(cfg.ssd, rng);
    for (auto& h : heads) h.init(rng);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    split.visit(prefix + ".split", f);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].visit(prefix + ".layer" + std::to_string(l), f);
    }
    for (std::size_t i = 0; i < heads.size(); ++i) {
      heads[i].visit(prefix + ".head" + std::to_string(i), f);
    }
  }
};

template <typename T>
struct ModelParams {
  StageParams<T> stage1;
  Linear<T> fusion;  // 2N -> N
  StageParams<T> stage2;

  static ModelParams make(const ModelConfig& cfg) {
    cfg.validate();
    return {StageParams<T>::make(cfg, cfg.layers_stage1),
            Linear<T>::make(cfg.features, 2 * cfg.features),
            StageParams<T>::make(cfg, cfg.layers_stage2)};
  }

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p = make(cfg);
    Rng rng(seed);
    p.stage1.init(cfg, rng);
    p.fusion.init(rng);
    p.stage2.init(cfg, rng);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    const std::string base = prefix.empty() ? "" : prefix + ".";
    stage1.visit(base + "stage1", f);
    fusion.visit(base + "fusion", f);
    stage2.visit(base + "stage2", f);
  }
};

/// Forces every stage-1 head to the constant mask `mask` and every stage-2
/// head to the constant residual `residual` by zeroing the output weights
/// and setting the GLU biases (value 2v, gate 0 gives v).
template <typename T>
void set_constant_heads(ModelParams<T>& p, std::complex<T> mask, std::complex<T> residual) {
  auto force = [](MergeHeadParams<T>& head, std::complex<T> v) {
    for (auto& band : head.bands) {
      band.out.weight.zero();
      const std::size_t half = band.out.out() / 2;
      for (std::size_t j = 0; j < half; ++j) {
        band.out.bias[j] = T(2) * (j % 2 == 0 ? v.real() : v.imag());
        band.out.bias[half + j] = T(0);
      }
    }
  };
  for (auto& h : p.stage1.heads) force(h, mask);
  for (auto& h : p.stage2.heads) force(h, residual);
}

/// Stage-1 masks of 1+0j and zero stage-2 residuals: both stages return
/// the mixture for every source.
template <typename T>
void make_identity(ModelParams<T>& p) {
  set_constant_heads(p, std::complex<T>(1, 0), std::complex<T>(0, 0));
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct SeparationResult {
  std::vector<ComplexSpectrogram<T>> stage1_specs;
  std::vector<ComplexSpectrogram<T>> stage2_specs;
  std::vector<Tensor<T>> stage1_waves;
  std::vector<Tensor<T>> stage2_waves;
};

template <typename T>
struct StageCache {
  BandSplitCache<T> split;
  std::vector<DualLayerCache<T>> dual;
  std::vector<MergeHeadCache<T>> heads;
};

template <typename T>
struct ForwardCache {
  ComplexSpectrogram<T> mixture;
  ComplexSpectrogram<T> stage2_input;
  std::vector<ComplexSpectrogram<T>> masks;
  StageCache<T> stage1;
  StageCache<T> stage2;
  FusionCache<T> fusion;
  FeatureTensor<T> z2;
};

namespace detail {

template <typename F>
auto with_context(const std::string& where, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(where + ": " + e.what());
  }
}

template <typename T>
void complex_multiply_into(const ComplexSpectrogram<T>& a, const ComplexSpectrogram<T>& b,
                           ComplexSpectrogram<T>& out) {
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
}

}  // namespace detail

/// Two-stage forward pass on a stereo mixture spectrogram. Stage 1 masks
/// the mixture; stage 2 adds residuals to the stage-1 estimates.
template <typename T>
SeparationResult<T> forward(const ComplexSpectrogram<T>& x, const ModelParams<T>& params,
                            const ModelConfig& cfg, ForwardCache<T>* cache = nullptr) {
  if (x.channels() != 2) throw Error("forward: expected a stereo spectrogram");
  if (x.bins() != cfg.bins()) throw Error("forward: spectrogram bins do not match config");
  if (x.frames() == 0) throw Error("forward: no frames");
  const std::size_t ns = cfg.n_sources;
  SeparationResult<T> res;

  if (cache) {
    cache->mixture = x;
    cache->masks.clear();
    cache->stage1.heads.assign(ns, {});
    cache->stage2.heads.assign(ns, {});
  }

  const FeatureTensor<T> z1 = detail::with_context("stage1 band split", [&] {
    return band_split(x, cfg.scheme, params.stage1.split, cache ? &cache->stage1.split : nullptr);
  });
  const FeatureTensor<T> d1 = detail::with_context("stage1", [&] {
    return dualnet_forward(z1, params.stage1.layers, cfg.ssd, cfg.discretization,
                           cache ? &cache->stage1.dual : nullptr);
  });
  for (std::size_t i = 0; i < ns; ++i) {
    auto m = detail::with_context("stage1 head " + cfg.source_name(i), [&] {
      return band_merge_head(d1, cfg.scheme, params.stage1.heads[i], cfg.stft,
                             cache ? &cache->stage1.heads[i] : nullptr);
    });
    ComplexSpectrogram<T> s = ComplexSpectrogram<T>::like(x);
    detail::complex_multiply_into(m, x, s);
    res.stage1_specs.push_back(std::move(s));
    if (cache) cache->masks.push_back(std::move(m));
  }

  ComplexSpectrogram<T> stage2_in = x;
  if (cfg.stage2_input == Stage2Input::stage1_sum) {
    stage2_in = ComplexSpectrogram<T>::like(x);
    for (const auto& s : res.stage1_specs) stage2_in += s;
  }
  FeatureTensor<T> z2 = detail::with_context("stage2 band split", [&] {
    return band_split(stage2_in, cfg.scheme, params.stage2.split,
                      cache ? &cache->stage2.split : nullptr);
  });
  const FeatureTensor<T> fused = fusion(d1, z2, params.fusion, cache ? &cache->fusion : nullptr);
  const FeatureTensor<T> q2 = detail::with_context("stage2", [&] {
    return dualnet_forward(fused, params.stage2.layers, cfg.ssd, cfg.discretization,
                           cache ? &cache->stage2.dual : nullptr);
  });
  for (std::size_t i = 0; i < ns; ++i) {
    auto r = detail::with_context("stage2 head " + cfg.source_name(i), [&] {
      return band_merge_head(q2, cfg.scheme, params.stage2.heads[i], cfg.stft,
                             cache ? &cache->stage2.heads[i] : nullptr);
    });
    r += res.stage1_specs[i];
    res.stage2_specs.push_back(std::move(r));
  }
  if (cache) {
    cache->stage2_input = std::move(stage2_in);
    cache->z2 = std::move(z2);
  }
  return res;
}

/// Accumulates into grads the gradient of a scalar loss given its gradients
/// with respect to the stage-1 and stage-2 spectrograms (real part holds
/// d/dRe, imaginary part d/dIm).
template <typename T>
void backward(const ForwardCache<T>& cache, const std::vector<ComplexSpectrogram<T>>& d_stage1,
              const std::vector<ComplexSpectrogram<T>>& d_stage2, const ModelParams<T>& params,
              const ModelConfig& cfg, ModelParams<T>& grads) {
  const std::size_t ns = cfg.n_sources;
  const auto& x = cache.mixture;
  const std::size_t n = cfg.features, bands = cfg.scheme.bands(), frames = x.frames();

  std::vector<ComplexSpectrogram<T>> ds1 = d_stage1;
  FeatureTensor<T> dq2(2, n, bands, frames);
  for (std::size_t i = 0; i < ns; ++i) {
    ds1[i] += d_stage2[i];
    band_merge_head_backward(cfg.scheme, params.stage2.heads[i], cache.stage2.heads[i],
                             d_stage2[i], grads.stage2.heads[i], dq2);
  }
  const FeatureTensor<T> dfused = dualnet_backward(cache.stage2.dual, dq2, params.stage2.layers,
                                                   cfg.ssd, cfg.discretization,
                                                   grads.stage2.layers);
  FeatureTensor<T> dd1(2, n, bands, frames), dz2(2, n, bands, frames);
  fusion_backward(cache.fusion, dfused, params.fusion, grads.fusion, dd1, dz2);
  if (cfg.stage2_input == Stage2Input::stage1_sum) {
    ComplexSpectrogram<T> din = ComplexSpectrogram<T>::like(x);
    band_split_backward(cfg.scheme, params.stage2.split, cache.stage2.split, dz2,
                        grads.stage2.split, &din);
    for (auto& d : ds1) d += din;
  } else {
    band_split_backward(cfg.scheme, params.stage2.split, cache.stage2.split, dz2,
                        grads.stage2.split, static_cast<ComplexSpectrogram<T>*>(nullptr));
  }

  for (std::size_t i = 0; i < ns; ++i) {
    // S = M X  =>  dM = dS conj(X) in the (d/dRe, d/dIm) convention.
    ComplexSpectrogram<T> dm = ComplexSpectrogram<T>::like(x);
    for (std::size_t j = 0; j < x.size(); ++j) {
      dm.values()[j] = ds1[i].values()[j] * std::conj(x.values()[j]);
    }
    band_merge_head_backward(cfg.scheme, params.stage1.heads[i], cache.stage1.heads[i], dm,
                             grads.stage1.heads[i], dd1);
  }
  const FeatureTensor<T> dz1 = dualnet_backward(cache.stage1.dual, dd1, params.stage1.layers,
                                                cfg.ssd, cfg.discretization, grads.stage1.layers);
  band_split_backward(cfg.scheme, params.stage1.split, cache.stage1.split, dz1,
                      grads.stage1.split, static_cast<ComplexSpectrogram<T>*>(nullptr));
}

/// Waveform in, per-source waveforms (both stages) out, trimmed to the
/// input length.
template <typename T>
SeparationResult<T> separate(const Tensor<T>& wave, const ModelParams<T>& params,
                             const ModelConfig& cfg) {
  if (wave.rank() != 2 || wave.dim(0) != 2) throw Error("separate: expected stereo [2, L]");
  const std::size_t length = wave.dim(1);
  if (length < cfg.stft.n_fft) throw Error("separate: input shorter than n_fft");
  const auto x = stft(wave, cfg.stft);
  auto res = forward(x, params, cfg);
  for (const auto& s : res.stage1_specs) res.stage1_waves.push_back(istft(s, length));
  for (const auto& s : res.stage2_specs) res.stage2_waves.push_back(istft(s, length));
  return res;
}

// ---------------------------------------------------------------------------
// Accounting

/// Learnable scalars, by closed-form summation over the parameter groups.
inline std::size_t count_params(const ModelConfig& cfg) {
  const SsdDims& d = cfg.ssd;
  const std::size_t n = cfg.features, h = cfg.head_hidden, f = cfg.bins(),
                    k = cfg.scheme.bands();
  const std::size_t mamba = d.in_proj_width() * d.d_model + d.conv_dim() * (d.d_conv + 1) +
                            3 * d.n_heads() + d.d_inner() + d.d_model * d.d_inner();
  const std::size_t residual = 2 * n + 2 * mamba + (2 * n * n + n);
  const std::size_t tac = (3 * n * n + 3 * n) + (9 * n * n + 3 * n) + (6 * n * n + n) + 3;
  const std::size_t dual = 2 * residual + tac;
  const std::size_t split = 4 * f + 2 * f * n + k * n;
  const std::size_t head = k * (2 * n + n * h + h) + 8 * f * (h + 1);
  auto stage = [&](std::size_t layers) { return split + layers * dual + cfg.n_sources * head; };
  return stage(cfg.layers_stage1) + (2 * n * n + n) + stage(cfg.layers_stage2);
}

struct MacBreakdown {
  double band_split = 0;
  double dualnet = 0;
  double fusion = 0;
  double heads = 0;
  double total() const { return band_split + dualnet + fusion + heads; }
};

/// Multiply-accumulates of all affine maps, convolutions and SSD scans for
/// `seconds` of stereo audio. STFT/ISTFT and elementwise ops are excluded.
/// The scan is counted as one MAC per state element for the state update
/// and one for the readout.
inline MacBreakdown estimate_macs(const ModelConfig& cfg, double seconds) {
  const SsdDims& d = cfg.ssd;
  const double n = double(cfg.features), h = double(cfg.head_hidden), f = double(cfg.bins()),
               k = double(cfg.scheme.bands());
  const auto samples = std::size_t(std::llround(seconds * cfg.stft.sample_rate));
  const double frames = double(cfg.stft.frames(samples));
  const double mamba_token = double(d.in_proj_width() * d.d_model) +
                             double(d.conv_dim() * d.d_conv) +
                             2.0 * double(d.d_inner() * d.d_state) +
                             double(d.d_inner() * d.d_model);
  const double residual_token = 2 * mamba_token + 2 * n * n;
  const double tokens = 2 * k * frames;  // per residual layer, either axis
  const double tac_pair = 2 * (3 * n * n) + 9 * n * n + 2 * (6 * n * n);
  const double dual_layer = 2 * tokens * residual_token + k * frames * tac_pair;
  const double layers = double(cfg.layers_stage1 + cfg.layers_stage2);
  const double head = 2 * frames * (k * n * h + 8 * f * h);

  MacBreakdown m;
  m.band_split = 2 * (2 * frames * 2 * f * n);
  m.dualnet = layers * dual_layer;
  m.fusion = tokens * 2 * n * n;
  m.heads = 2 * double(cfg.n_sources) * head;
  return m;
}

}  // namespace tsbm
