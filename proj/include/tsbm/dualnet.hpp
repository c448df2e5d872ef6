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
#include <vector>

#include "tsbm/bands.hpp"
#include "tsbm/ssd.hpp"

namespace tsbm {

// ---------------------------------------------------------------------------
// Residual bidirectional layer: out = x + W * bmamba2(norm(x)) + b

template <typename T>
struct ResidualLayerParams {
  FeatureNorm<T> norm;
  BMamba2Params<T> mamba;
  Linear<T> proj;  // 2N -> N

  static ResidualLayerParams make(std::size_t n, const SsdDims& d) {
    if (d.d_model != n) throw Error("residual layer: d_model must equal the feature size");
    return {FeatureNorm<T>::make(n), BMamba2Params<T>::make(d), Linear<T>::make(n, 2 * n)};
  }
  void init(const SsdDims& d, Rng& rng) {
    mamba.init(d, rng);
    proj.init(rng);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + ".norm", f);
    mamba.visit(prefix + ".mamba", f);
    proj.visit(prefix + ".proj", f);
  }
};

template <typename T>
struct ResidualCache {
  NormCache<T> norm;
  std::vector<T> normed;  // [L, N]
  BMamba2Cache<T> mamba;
  std::vector<T> branch;  // bmamba2 output [L, 2N]
};

template <typename T>
void residual_forward(const T* in, std::size_t len, const ResidualLayerParams<T>& p,
                      const SsdDims& d, Discretization disc, T* out,
                      ResidualCache<T>* cache = nullptr) {
  const std::size_t n = p.norm.width();
  ResidualCache<T> local;
  ResidualCache<T>& c = cache ? *cache : local;
  c.norm.resize(len, n);
  c.normed.resize(len * n);
  c.branch.resize(len * 2 * n);
  p.norm.forward(in, len, c.normed.data(), c.norm.xhat.data(), c.norm.rstd.data());
  bmamba2_forward(c.normed.data(), len, p.mamba, d, disc, c.branch.data(),
                  cache ? &c.mamba : nullptr);
  p.proj.forward(c.branch.data(), len, out);
  for (std::size_t i = 0; i < len * n; ++i) out[i] += in[i];
}

/// din receives dout plus the branch gradient (overwritten).
template <typename T>
void residual_backward(const ResidualCache<T>& c, const T* dout, std::size_t len,
                       const ResidualLayerParams<T>& p, const SsdDims& d, Discretization disc,
                       ResidualLayerParams<T>& g, T* din) {
  const std::size_t n = p.norm.width();
  std::vector<T> dbranch(len * 2 * n, T(0)), dnormed(len * n, T(0));
  p.proj.backward(c.branch.data(), dout, len, g.proj, dbranch.data());
  bmamba2_backward(c.mamba, dbranch.data(), p.mamba, d, disc, g.mamba, dnormed.data());
  std::copy(dout, dout + len * n, din);
  p.norm.backward(c.norm.xhat.data(), c.norm.rstd.data(), dnormed.data(), len, g.norm, din);
}

template <typename T>
Tensor<T> residual_layer(const Tensor<T>& seq, const ResidualLayerParams<T>& p, const SsdDims& d,
                         Discretization disc = Discretization::zoh) {
  if (seq.rank() != 2 || seq.dim(1) != p.norm.width()) {
    throw Error("residual_layer: expected [L, N] with N = " + std::to_string(p.norm.width()));
  }
  if (seq.dim(0) == 0) throw Error("residual_layer: empty sequence");
  Tensor<T> out(seq.shape());
  residual_forward(seq.data(), seq.dim(0), p, d, disc, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Transform-average-concatenate across the two audio channels

template <typename T>
struct TacParams {
  Linear<T> transform;  // N -> 3N
  Tensor<T> transform_slope;
  Linear<T> average;    // 3N -> 3N
  Tensor<T> average_slope;
  Linear<T> concat;     // 6N -> N
  Tensor<T> concat_slope;

  static TacParams make(std::size_t n) {
    const std::size_t h = 3 * n;
    return {Linear<T>::make(h, n),     Tensor<T>({1}, T(0.25)),
            Linear<T>::make(h, h),     Tensor<T>({1}, T(0.25)),
            Linear<T>::make(n, 2 * h), Tensor<T>({1}, T(0.25))};
  }
  void init(Rng& rng) {
    transform.init(rng);
    average.init(rng);
    concat.init(rng);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    transform.visit(prefix + ".transform", f);
    f(prefix + ".transform.slope", transform_slope);
    average.visit(prefix + ".average", f);
    f(prefix + ".average.slope", average_slope);
    concat.visit(prefix + ".concat", f);
    f(prefix + ".concat.slope", concat_slope);
  }
};

template <typename T>
struct TacCache {
  std::size_t rows = 0;
  std::vector<T> input[2];   // [rows, N]
  std::vector<T> pre1[2];    // [rows, 3N]
  std::vector<T> mean;       // [rows, 3N]
  std::vector<T> pre2;       // [rows, 3N]
  std::vector<T> cat[2];     // [rows, 6N]
  std::vector<T> pre3[2];    // [rows, N]
};

namespace detail {

template <typename T>
void prelu_inplace(std::vector<T>& v, T slope) {
  for (auto& x : v) x = prelu(x, slope);
}

// d/dpre of prelu, in place on grad, accumulating the slope gradient.
template <typename T>
void prelu_backward(const std::vector<T>& pre, std::vector<T>& grad, T slope, T& dslope) {
  for (std::size_t i = 0; i < pre.size(); ++i) {
    if (pre[i] < T(0)) {
      dslope += grad[i] * pre[i];
      grad[i] *= slope;
    }
  }
}

}  // namespace detail

/// x0, x1: [rows, N] (one row per band/frame). Writes out0, out1.
template <typename T>
void tac_forward(const T* x0, const T* x1, std::size_t rows, const TacParams<T>& p, T* out0,
                 T* out1, TacCache<T>* cache = nullptr) {
  const std::size_t n = p.transform.in(), h = p.transform.out();
  TacCache<T> local;
  TacCache<T>& c = cache ? *cache : local;
  c.rows = rows;
  const T* xs[2] = {x0, x1};
  T* outs[2] = {out0, out1};
  std::vector<T> hid[2];
  for (int ch = 0; ch < 2; ++ch) {
    if (cache) c.input[ch].assign(xs[ch], xs[ch] + rows * n);
    c.pre1[ch].resize(rows * h);
    p.transform.forward(xs[ch], rows, c.pre1[ch].data());
    hid[ch] = c.pre1[ch];
    detail::prelu_inplace(hid[ch], p.transform_slope[0]);
  }
  c.mean.resize(rows * h);
  for (std::size_t i = 0; i < rows * h; ++i) c.mean[i] = T(0.5) * (hid[0][i] + hid[1][i]);
  c.pre2.resize(rows * h);
  p.average.forward(c.mean.data(), rows, c.pre2.data());
  std::vector<T> g = c.pre2;
  detail::prelu_inplace(g, p.average_slope[0]);
  for (int ch = 0; ch < 2; ++ch) {
    c.cat[ch].resize(rows * 2 * h);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(hid[ch].begin() + r * h, hid[ch].begin() + (r + 1) * h,
                c.cat[ch].begin() + r * 2 * h);
      std::copy(g.begin() + r * h, g.begin() + (r + 1) * h, c.cat[ch].begin() + r * 2 * h + h);
    }
    c.pre3[ch].resize(rows * n);
    p.concat.forward(c.cat[ch].data(), rows, c.pre3[ch].data());
    for (std::size_t i = 0; i < rows * n; ++i) {
      outs[ch][i] = xs[ch][i] + detail::prelu(c.pre3[ch][i], p.concat_slope[0]);
    }
  }
}

/// Overwrites dx0/dx1 with the input gradients.
template <typename T>
void tac_backward(const TacCache<T>& c, const T* dout0, const T* dout1, const TacParams<T>& p,
                  TacParams<T>& g, T* dx0, T* dx1) {
  const std::size_t rows = c.rows, n = p.transform.in(), h = p.transform.out();
  const T* douts[2] = {dout0, dout1};
  T* dxs[2] = {dx0, dx1};
  std::vector<T> dhid[2];
  std::vector<T> dg(rows * h, T(0));
  for (int ch = 0; ch < 2; ++ch) {
    std::vector<T> dpre3(douts[ch], douts[ch] + rows * n);
    detail::prelu_backward(c.pre3[ch], dpre3, p.concat_slope[0], g.concat_slope[0]);
    std::vector<T> dcat(rows * 2 * h, T(0));
    p.concat.backward(c.cat[ch].data(), dpre3.data(), rows, g.concat, dcat.data());
    dhid[ch].resize(rows * h);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < h; ++i) {
        dhid[ch][r * h + i] = dcat[r * 2 * h + i];
        dg[r * h + i] += dcat[r * 2 * h + h + i];
      }
    }
  }
  detail::prelu_backward(c.pre2, dg, p.average_slope[0], g.average_slope[0]);
  std::vector<T> dmean(rows * h, T(0));
  p.average.backward(c.mean.data(), dg.data(), rows, g.average, dmean.data());
  for (int ch = 0; ch < 2; ++ch) {
    for (std::size_t i = 0; i < rows * h; ++i) dhid[ch][i] += T(0.5) * dmean[i];
    detail::prelu_backward(c.pre1[ch], dhid[ch], p.transform_slope[0], g.transform_slope[0]);
    std::copy(douts[ch], douts[ch] + rows * n, dxs[ch]);
    p.transform.backward(c.input[ch].data(), dhid[ch].data(), rows, g.transform, dxs[ch]);
  }
}

/// channels [2, N] -> [2, N].
template <typename T>
Tensor<T> tac(const Tensor<T>& channels, const TacParams<T>& p) {
  if (channels.rank() != 2 || channels.dim(0) != 2) {
    throw Error("tac: expected exactly 2 channels");
  }
  const std::size_t n = channels.dim(1);
  if (n != p.transform.in()) throw Error("tac: feature size mismatch");
  Tensor<T> out(channels.shape());
  tac_forward(channels.data(), channels.data() + n, 1, p, out.data(), out.data() + n);
  return out;
}

// ---------------------------------------------------------------------------
// Dual-path stack

template <typename T>
struct DualLayerParams {
  ResidualLayerParams<T> time;
  ResidualLayerParams<T> band;
  TacParams<T> tac;

  static DualLayerParams make(std::size_t n, const SsdDims& d) {
    return {ResidualLayerParams<T>::make(n, d), ResidualLayerParams<T>::make(n, d),
            TacParams<T>::make(n)};
  }
  void init(const SsdDims& d, Rng& rng) {
    time.init(d, rng);
    band.init(d, rng);
    tac.init(rng);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    time.visit(prefix + ".time", f);
    band.visit(prefix + ".band", f);
    tac.visit(prefix + ".tac", f);
  }
};

template <typename T>
struct DualLayerCache {
  std::vector<ResidualCache<T>> time;  // per (channel, band)
  std::vector<ResidualCache<T>> band;  // per (channel, frame)
  TacCache<T> tac;
};

namespace detail {

template <typename T>
void gather_band_sequence(const FeatureTensor<T>& z, std::size_t c, std::size_t t,
                          std::vector<T>& seq) {
  const std::size_t n = z.features(), k_count = z.bands();
  seq.resize(k_count * n);
  for (std::size_t k = 0; k < k_count; ++k) {
    const T* r = z.row(c, k, t);
    std::copy(r, r + n, seq.data() + k * n);
  }
}

template <typename T>
void scatter_band_sequence(const std::vector<T>& seq, std::size_t c, std::size_t t,
                           FeatureTensor<T>& z) {
  const std::size_t n = z.features();
  for (std::size_t k = 0; k < z.bands(); ++k) {
    std::copy(seq.data() + k * n, seq.data() + (k + 1) * n, z.row(c, k, t));
  }
}

template <typename T>
void check_features(const FeatureTensor<T>& z, std::size_t n, const char* what) {
  if (z.channels() != 2) throw Error(std::string(what) + ": expected 2 channels");
  if (z.features() != n) throw Error(std::string(what) + ": feature size mismatch");
  if (z.frames() == 0 || z.bands() == 0) throw Error(std::string(what) + ": empty input");
}

}  // namespace detail

/// One dual-path layer: residual layer across frames for every (channel,
/// band), then across bands for every (channel, frame), then TAC.
template <typename T>
FeatureTensor<T> dual_layer_forward(const FeatureTensor<T>& in, const DualLayerParams<T>& p,
                                    const SsdDims& d, Discretization disc,
                                    DualLayerCache<T>* cache = nullptr) {
  const std::size_t bands = in.bands(), frames = in.frames();
  FeatureTensor<T> a(in.channels(), in.features(), bands, frames);
  if (cache) {
    cache->time.assign(2 * bands, {});
    cache->band.assign(2 * frames, {});
  }
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t k = 0; k < bands; ++k) {
      residual_forward(in.row(c, k, 0), frames, p.time, d, disc, a.row(c, k, 0),
                       cache ? &cache->time[c * bands + k] : nullptr);
    }
  }
  FeatureTensor<T> b = a;
  std::vector<T> seq, out;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      detail::gather_band_sequence(a, c, t, seq);
      out.resize(seq.size());
      residual_forward(seq.data(), bands, p.band, d, disc, out.data(),
                       cache ? &cache->band[c * frames + t] : nullptr);
      detail::scatter_band_sequence(out, c, t, b);
    }
  }
  FeatureTensor<T> q(in.channels(), in.features(), bands, frames);
  tac_forward(b.channel(0), b.channel(1), bands * frames, p.tac, q.channel(0), q.channel(1),
              cache ? &cache->tac : nullptr);
  return q;
}

template <typename T>
FeatureTensor<T> dual_layer_backward(const DualLayerCache<T>& c, const FeatureTensor<T>& dq,
                                     const DualLayerParams<T>& p, const SsdDims& d,
                                     Discretization disc, DualLayerParams<T>& g) {
  const std::size_t bands = dq.bands(), frames = dq.frames();
  FeatureTensor<T> db(2, dq.features(), bands, frames);
  tac_backward(c.tac, dq.channel(0), dq.channel(1), p.tac, g.tac, db.channel(0), db.channel(1));
  FeatureTensor<T> da = db;
  std::vector<T> dseq, din;
  for (std::size_t ch = 0; ch < 2; ++ch) {
    for (std::size_t t = 0; t < frames; ++t) {
      detail::gather_band_sequence(db, ch, t, dseq);
      din.resize(dseq.size());
      residual_backward(c.band[ch * frames + t], dseq.data(), bands, p.band, d, disc, g.band,
                        din.data());
      detail::scatter_band_sequence(din, ch, t, da);
    }
  }
  FeatureTensor<T> dz(2, dq.features(), bands, frames);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    for (std::size_t k = 0; k < bands; ++k) {
      residual_backward(c.time[ch * bands + k], da.row(ch, k, 0), frames, p.time, d, disc,
                        g.time, dz.row(ch, k, 0));
    }
  }
  return dz;
}

template <typename T>
FeatureTensor<T> dualnet_forward(const FeatureTensor<T>& z,
                                 const std::vector<DualLayerParams<T>>& layers,
                                 const SsdDims& d, Discretization disc,
                                 std::vector<DualLayerCache<T>>* caches = nullptr) {
  detail::check_features(z, d.d_model, "dualnet");
  if (!z.all_finite()) throw Error("dualnet: non-finite input");
  if (caches) caches->assign(layers.size(), {});
  FeatureTensor<T> cur = z;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    try {
      cur = dual_layer_forward(cur, layers[l], d, disc, caches ? &(*caches)[l] : nullptr);
    } catch (const Error& e) {
      throw Error("dualnet layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return cur;
}

template <typename T>
FeatureTensor<T> dualnet_backward(const std::vector<DualLayerCache<T>>& caches,
                                  const FeatureTensor<T>& dq,
                                  const std::vector<DualLayerParams<T>>& layers,
                                  const SsdDims& d, Discretization disc,
                                  std::vector<DualLayerParams<T>>& grads) {
  FeatureTensor<T> cur = dq;
  for (std::size_t l = layers.size(); l-- > 0;) {
    cur = dual_layer_backward(caches[l], cur, layers[l], d, disc, grads[l]);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Stage fusion: tanh(W [D1 ; D2] + b)

template <typename T>
struct FusionCache {
  std::vector<T> cat;  // [rows, 2N]
  std::vector<T> out;  // tanh output [rows, N]
};

template <typename T>
FeatureTensor<T> fusion(const FeatureTensor<T>& d1, const FeatureTensor<T>& d2,
                        const Linear<T>& p, FusionCache<T>* cache = nullptr) {
  if (!d1.same_shape(d2)) throw Error("fusion: inputs differ in shape");
  const std::size_t n = d1.features();
  if (p.in() != 2 * n || p.out() != n) throw Error("fusion: parameter shape mismatch");
  const std::size_t rows = d1.size() / n;
  FusionCache<T> local;
  FusionCache<T>& c = cache ? *cache : local;
  c.cat.resize(rows * 2 * n);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(d1.values().begin() + r * n, d1.values().begin() + (r + 1) * n,
              c.cat.begin() + r * 2 * n);
    std::copy(d2.values().begin() + r * n, d2.values().begin() + (r + 1) * n,
              c.cat.begin() + r * 2 * n + n);
  }
  FeatureTensor<T> out(d1.channels(), n, d1.bands(), d1.frames());
  p.forward(c.cat.data(), rows, out.values().data());
  for (auto& v : out.values()) v = std::tanh(v);
  if (cache) c.out = out.values();
  return out;
}

/// Accumulates into dd1 and dd2.
template <typename T>
void fusion_backward(const FusionCache<T>& c, const FeatureTensor<T>& dout, const Linear<T>& p,
                     Linear<T>& g, FeatureTensor<T>& dd1, FeatureTensor<T>& dd2) {
  const std::size_t n = dout.features(), rows = dout.size() / n;
  std::vector<T> dpre(dout.values());
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= T(1) - c.out[i] * c.out[i];
  std::vector<T> dcat(rows * 2 * n, T(0));
  p.backward(c.cat.data(), dpre.data(), rows, g, dcat.data());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      dd1.values()[r * n + i] += dcat[r * 2 * n + i];
      dd2.values()[r * n + i] += dcat[r * 2 * n + n + i];
    }
  }
}

}  // namespace tsbm
