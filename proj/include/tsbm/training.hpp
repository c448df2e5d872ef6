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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tsbm/io.hpp"
#include "tsbm/model.hpp"

namespace tsbm {

// ---------------------------------------------------------------------------
// Loss

struct LossTerms {
  double re = 0;
  double im = 0;
  double time = 0;
  double sum() const { return re + im + time; }
};

struct LossReport {
  double stage1 = 0;
  double stage2 = 0;
  double total = 0;
  std::vector<std::array<LossTerms, 2>> per_source;  // [source][stage]
};

namespace detail {

// |d| and its derivative; the side of the kink goes through the branch tape.
template <typename T>
std::pair<double, T> abs_with_grad(T d) {
  const bool pos = branch(d >= T(0));
  const T s = d == T(0) ? T(0) : (pos ? T(1) : T(-1));
  return {double(pos ? d : -d), s};
}

}  // namespace detail

/// Per-source l1 loss of one stage: mean |dRe| + mean |dIm| over the 2*F*T
/// cells plus mean |istft(est) - istft(ref)| over the 2*L samples. When
/// `grads` is non-null it receives dLoss/dest scaled by `grad_scale`.
template <typename T>
std::vector<LossTerms> stage_loss_terms(const std::vector<ComplexSpectrogram<T>>& est,
                                        const std::vector<ComplexSpectrogram<T>>& ref,
                                        std::size_t length,
                                        std::vector<ComplexSpectrogram<T>>* grads = nullptr,
                                        T grad_scale = T(1)) {
  if (est.size() != ref.size() || est.empty()) throw Error("stage_loss: source count mismatch");
  std::vector<LossTerms> out(est.size());
  if (grads) grads->clear();
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (!est[i].same_shape(ref[i])) {
      throw Error("stage_loss: shape mismatch for source " + std::to_string(i));
    }
    const std::size_t cells = est[i].size();
    ComplexSpectrogram<T> g = ComplexSpectrogram<T>::like(est[i]);
    long double re = 0, im = 0;
    for (std::size_t j = 0; j < cells; ++j) {
      const auto d = est[i].values()[j] - ref[i].values()[j];
      const auto [ar, sr] = detail::abs_with_grad(d.real());
      const auto [ai, si] = detail::abs_with_grad(d.imag());
      re += ar;
      im += ai;
      g.values()[j] = {sr * grad_scale / T(cells), si * grad_scale / T(cells)};
    }
    const Tensor<T> we = istft(est[i], length);
    const Tensor<T> wr = istft(ref[i], length);
    Tensor<T> gw(we.shape());
    long double tm = 0;
    for (std::size_t j = 0; j < we.size(); ++j) {
      const auto [a, s] = detail::abs_with_grad(we[j] - wr[j]);
      tm += a;
      gw[j] = s * grad_scale / T(we.size());
    }
    out[i] = {double(re / cells), double(im / cells), double(tm / we.size())};
    if (grads) {
      g += istft_adjoint(gw, est[i].config(), est[i].frames());
      grads->push_back(std::move(g));
    }
  }
  return out;
}

template <typename T>
double stage_loss(const std::vector<ComplexSpectrogram<T>>& est,
                  const std::vector<ComplexSpectrogram<T>>& ref, std::size_t length) {
  double s = 0;
  for (const auto& t : stage_loss_terms(est, ref, length)) s += t.sum();
  return s;
}

/// Default signal length implied by a centered STFT frame count.
template <typename T>
std::size_t implied_length(const ComplexSpectrogram<T>& s) {
  return (s.frames() - 1) * s.config().hop;
}

template <typename T>
LossReport total_loss(const SeparationResult<T>& res, const std::vector<ComplexSpectrogram<T>>& refs,
                      std::size_t length, std::vector<ComplexSpectrogram<T>>* d1 = nullptr,
                      std::vector<ComplexSpectrogram<T>>* d2 = nullptr, T grad_scale = T(1)) {
  const auto t1 = stage_loss_terms(res.stage1_specs, refs, length, d1, grad_scale);
  const auto t2 = stage_loss_terms(res.stage2_specs, refs, length, d2, grad_scale);
  LossReport r;
  for (std::size_t i = 0; i < t1.size(); ++i) {
    r.per_source.push_back({t1[i], t2[i]});
    r.stage1 += t1[i].sum();
    r.stage2 += t2[i].sum();
  }
  r.total = r.stage1 + r.stage2;
  return r;
}

/// Forward, loss and backward for one mixture. Gradients accumulate into
/// `grads` scaled by `scale`; the report is unscaled.
template <typename T>
LossReport loss_and_grad(const ModelParams<T>& params, const ModelConfig& cfg,
                         const Tensor<T>& mixture, const std::vector<Tensor<T>>& stems,
                         ModelParams<T>* grads, T scale = T(1)) {
  if (stems.size() != cfg.n_sources) throw Error("loss: expected one reference per source");
  const std::size_t length = mixture.dim(1);
  const auto x = stft(mixture, cfg.stft);
  std::vector<ComplexSpectrogram<T>> refs;
  for (const auto& s : stems) refs.push_back(stft(s, cfg.stft));
  ForwardCache<T> cache;
  const auto res = forward(x, params, cfg, grads ? &cache : nullptr);
  std::vector<ComplexSpectrogram<T>> d1, d2;
  LossReport r = total_loss(res, refs, length, grads ? &d1 : nullptr, grads ? &d2 : nullptr,
                            scale);
  if (grads) backward(cache, d1, d2, params, cfg, *grads);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimState {
  std::size_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;
  double decay = 0.8;
  std::size_t patience = 2;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  std::size_t skipped = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  Json to_json() const {
    return Json{{"step", step},     {"lr", lr},           {"beta1", beta1},
                {"beta2", beta2},   {"eps", eps},         {"clip_norm", clip_norm},
                {"decay", decay},   {"patience", patience}, {"best_val", best_val},
                {"bad_epochs", bad_epochs}, {"skipped", skipped}};
  }
};

struct StepReport {
  double grad_norm = 0;  // before clipping
  double applied_norm = 0;
  bool skipped = false;
};

/// Clips the global l2 norm of `grads` to state.clip_norm, then applies one
/// bias-corrected Adam update. Non-finite gradients skip the update.
template <typename T>
StepReport clip_and_step(const NamedTensors<T>& params, const NamedTensors<T>& grads,
                         OptimState& st) {
  if (params.size() != grads.size()) throw Error("clip_and_step: parameter/gradient mismatch");
  if (st.m.empty()) {
    for (const auto& [name, t] : params) {
      st.m.emplace_back(t->size(), 0.0);
      st.v.emplace_back(t->size(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw Error("clip_and_step: optimizer state mismatch");
  StepReport r;
  double sq = 0;
  bool finite = true;
  for (const auto& [name, g] : grads) {
    for (std::size_t j = 0; j < g->size(); ++j) {
      const double x = double((*g)[j]);
      finite = finite && std::isfinite(x);
      sq += x * x;
    }
  }
  r.grad_norm = std::sqrt(sq);
  if (!finite || !std::isfinite(r.grad_norm)) {
    r.skipped = true;
    ++st.skipped;
    return r;
  }
  const double scale = r.grad_norm > st.clip_norm ? st.clip_norm / r.grad_norm : 1.0;
  r.applied_norm = r.grad_norm * scale;
  ++st.step;
  const double bc1 = 1 - std::pow(st.beta1, double(st.step));
  const double bc2 = 1 - std::pow(st.beta2, double(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    const Tensor<T>& g = *grads[i].second;
    if (p.size() != g.size() || st.m[i].size() != p.size()) {
      throw Error("clip_and_step: size mismatch for " + params[i].first);
    }
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = double(g[j]) * scale;
      m[j] = st.beta1 * m[j] + (1 - st.beta1) * gj;
      v[j] = st.beta2 * v[j] + (1 - st.beta2) * gj * gj;
      const double mh = m[j] / bc1, vh = v[j] / bc2;
      p[j] = T(double(p[j]) - st.lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
  return r;
}

/// Records one epoch's validation loss; decays lr after `patience` epochs
/// without improving the best value, then restarts the patience window.
/// Returns true when the lr was decayed.
inline bool lr_schedule(OptimState& st, double val_loss) {
  if (val_loss < st.best_val) {
    st.best_val = val_loss;
    st.bad_epochs = 0;
    return false;
  }
  if (++st.bad_epochs >= st.patience) {
    st.lr *= st.decay;
    st.bad_epochs = 0;
    return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t max_per_tensor = 4;  // 0 checks every scalar
  // Relative-error denominator floor. Central differences of an O(1) loss
  // at step 1e-5 carry ~1e-10 of roundoff, so gradients below the floor are
  // held to an absolute error of max_rel * floor.
  double floor = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t kink_adjusted = 0;
  std::vector<GradCheckEntry> entries;
};

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central differences of `f` against `analytic` for sampled scalars of
/// every tensor. If either probe crosses a non-smooth point (a different
/// branch tape than at the base point), both probes are re-evaluated with
/// the base branches replayed, i.e. on the smooth piece containing the base
/// point, whose derivative the analytic gradient is.
inline GradCheckReport check_gradients(const NamedTensors<double>& params,
                                       const NamedTensors<double>& analytic,
                                       const std::function<double()>& f,
                                       const GradCheckOptions& opt) {
  if (params.size() != analytic.size()) throw Error("grad_check: tensor lists differ");
  detail::BranchTape base;
  {
    detail::BranchTapeScope scope(&base);
    f();
  }
  auto eval = [&](detail::BranchTape& tape) {
    detail::BranchTapeScope scope(&tape);
    tape.cursor = 0;
    return f();
  };
  Rng rng(opt.seed);
  GradCheckReport rep;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<double>& p = *params[i].second;
    const Tensor<double>& g = *analytic[i].second;
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_per_tensor && idx.size() > opt.max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_per_tensor);
    }
    for (std::size_t j : idx) {
      const double keep = p[j];
      detail::BranchTape tp, tm;
      p[j] = keep + opt.step;
      double fp = eval(tp);
      p[j] = keep - opt.step;
      double fm = eval(tm);
      if (tp.taken != base.taken || tm.taken != base.taken) {
        ++rep.kink_adjusted;
        base.replay = true;
        p[j] = keep + opt.step;
        fp = eval(base);
        p[j] = keep - opt.step;
        fm = eval(base);
        base.replay = false;
      }
      p[j] = keep;
      const double num = (fp - fm) / (2 * opt.step);
      GradCheckEntry e{params[i].first, j, g[j], num, relative_error(g[j], num, opt.floor)};
      if (rep.checked == 0 || !(e.rel_error <= rep.max_rel_error)) {
        rep.max_rel_error = std::isfinite(e.rel_error) ? e.rel_error
                                                       : std::numeric_limits<double>::infinity();
        rep.worst = e.name + "[" + std::to_string(j) + "]";
      }
      rep.entries.push_back(e);
      ++rep.checked;
    }
  }
  return rep;
}

/// Gradient check of total_loss on a toy model with a random 0.25 s stereo
/// mixture and independently drawn references (never equal to the
/// estimates, so the l1 terms sit away from their kinks).
inline GradCheckReport grad_check(const ModelConfig& cfg, std::uint64_t seed,
                                  GradCheckOptions opt = {}) {
  ModelParams<double> params = ModelParams<double>::init(cfg, seed);
  Rng rng(seed + 1);
  const std::size_t length =
      std::max<std::size_t>(cfg.stft.n_fft, std::size_t(0.25 * cfg.stft.sample_rate));
  Tensor<double> mix({2, length});
  fill_uniform(mix, 0.5, rng);
  std::vector<Tensor<double>> stems;
  for (std::size_t i = 0; i < cfg.n_sources; ++i) {
    stems.emplace_back(std::vector<std::size_t>{2, length});
    fill_uniform(stems.back(), 0.5, rng);
  }
  ModelParams<double> grads = zeros_like(params);
  loss_and_grad(params, cfg, mix, stems, &grads);
  auto objective = [&] { return loss_and_grad<double>(params, cfg, mix, stems, nullptr).total; };
  opt.seed = seed;
  return check_gradients(named_tensors<double>(params), named_tensors<double>(grads), objective,
                         opt);
}

// ---------------------------------------------------------------------------
// Data pipeline

struct SadConfig {
  std::size_t window = 44100;
  std::size_t hop = 22050;
  double threshold = 0.1;  // relative to the track RMS

  void validate() const {
    if (hop == 0 || window < hop) throw Error("sad: require window >= hop > 0");
    if (!(threshold > 0 && threshold <= 1)) throw Error("sad: threshold must be in (0, 1]");
  }
};

/// Offsets of windows whose RMS (channels pooled) reaches threshold times
/// the track RMS.
template <typename T>
std::vector<std::size_t> sad_filter(const Tensor<T>& track, const SadConfig& cfg) {
  cfg.validate();
  if (track.rank() != 2) throw Error("sad: expected [C, L]");
  const std::size_t ch = track.dim(0), len = track.dim(1);
  if (len < cfg.window) throw Error("sad: track shorter than the window");
  double total = 0;
  for (std::size_t i = 0; i < track.size(); ++i) total += double(track[i]) * double(track[i]);
  const double track_ms = total / double(track.size());
  std::vector<std::size_t> kept;
  if (track_ms == 0) return kept;
  const double limit = cfg.threshold * cfg.threshold * track_ms;
  for (std::size_t off = 0; off + cfg.window <= len; off += cfg.hop) {
    double e = 0;
    for (std::size_t c = 0; c < ch; ++c) {
      const T* x = track.data() + c * len + off;
      for (std::size_t j = 0; j < cfg.window; ++j) e += double(x[j]) * double(x[j]);
    }
    if (e / double(ch * cfg.window) >= limit) kept.push_back(off);
  }
  return kept;
}

template <typename T>
Tensor<T> slice_samples(const Tensor<T>& track, std::size_t offset, std::size_t length) {
  const std::size_t ch = track.dim(0), len = track.dim(1);
  if (offset + length > len) throw Error("slice: out of range");
  Tensor<T> out({ch, length});
  for (std::size_t c = 0; c < ch; ++c) {
    std::copy_n(track.data() + c * len + offset, length, out.data() + c * length);
  }
  return out;
}

/// One pool of equal-length stereo segments per source.
template <typename T>
using StemPools = std::vector<std::vector<Tensor<T>>>;

template <typename T>
struct Batch {
  std::vector<Tensor<T>> mixtures;
  std::vector<std::vector<Tensor<T>>> stems;  // [item][source]
};

struct MixConfig {
  std::size_t batch = 4;
  double gain_db_min = -3.0;
  double gain_db_max = 3.0;
};

inline Rng item_rng(std::uint64_t seed, std::uint64_t item) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(item),
                    std::uint32_t(item >> 32)};
  return Rng(seq);
}

/// Draws one segment per source independently for each item, scales it by
/// a random gain and sums to the mixture. Each item has its own RNG stream.
template <typename T>
Batch<T> mix_batch(const StemPools<T>& pools, const MixConfig& cfg, std::uint64_t seed) {
  if (pools.empty()) throw Error("mix_batch: no sources");
  for (std::size_t s = 0; s < pools.size(); ++s) {
    if (pools[s].empty()) throw Error("mix_batch: empty pool for source " + std::to_string(s));
  }
  const auto shape = pools[0][0].shape();
  Batch<T> b;
  for (std::size_t item = 0; item < cfg.batch; ++item) {
    Rng rng = item_rng(seed, item);
    Tensor<T> mix(shape);
    std::vector<Tensor<T>> stems;
    for (const auto& pool : pools) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
      const double db =
          cfg.gain_db_min == cfg.gain_db_max
              ? cfg.gain_db_min
              : std::uniform_real_distribution<double>(cfg.gain_db_min, cfg.gain_db_max)(rng);
      const T gain = T(std::pow(10.0, db / 20.0));
      if (pool[k].shape() != shape) throw Error("mix_batch: segment shapes differ");
      Tensor<T> s = pool[k];
      for (auto& v : s.values()) v *= gain;
      for (std::size_t j = 0; j < s.size(); ++j) mix[j] += s[j];
      stems.push_back(std::move(s));
    }
    b.mixtures.push_back(std::move(mix));
    b.stems.push_back(std::move(stems));
  }
  return b;
}

/// Deterministic stereo stems, `songs` per source:
///   vocals: 6-harmonic stack, f0 in [300, 600] Hz, 5 Hz vibrato, 0.5 s notes
///   bass:   f0 in [40, 130] Hz plus a weak 2nd harmonic, 0.5 s notes
///   drums:  exponentially decaying noise bursts on a 0.25 s grid
///   other:  40 random sinusoids in [800, 3000] Hz with slow tremolo
/// Notes use raised-cosine fades so energy stays in band.
inline StemPools<double> make_synthetic_tracks(std::uint64_t seed, double seconds,
                                               double sample_rate = 44100.0,
                                               std::size_t songs = 4) {
  if (seconds < 3) throw Error("synthetic tracks: need at least 3 s");
  const std::size_t len = std::size_t(seconds * sample_rate);
  const double two_pi = 2 * std::numbers::pi;
  StemPools<double> pools(4);
  for (std::size_t song = 0; song < songs; ++song) {
    for (std::size_t src = 0; src < 4; ++src) {
      Rng rng = item_rng(seed, song * 4 + src);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      Tensor<double> w({2, len});
      const double pan = 0.3 + 0.4 * u(rng);
      const double gains[2] = {std::sqrt(1 - pan), std::sqrt(pan)};
      std::vector<double> mono(len, 0.0);
      const std::size_t note = std::size_t(0.5 * sample_rate);
      auto fade = [&](std::size_t j, std::size_t n) {
        const std::size_t ramp = std::min<std::size_t>(n / 4, std::size_t(0.02 * sample_rate));
        if (j < ramp) return 0.5 - 0.5 * std::cos(std::numbers::pi * double(j) / double(ramp));
        if (j + ramp >= n) {
          return 0.5 - 0.5 * std::cos(std::numbers::pi * double(n - j) / double(ramp));
        }
        return 1.0;
      };
      if (src == 0 || src == 1) {
        for (std::size_t start = 0; start < len; start += note) {
          const std::size_t n = std::min(note, len - start);
          const double f0 = src == 0 ? 300 + 300 * u(rng) : 40 + 90 * u(rng);
          const double amp = 0.5 + 0.5 * u(rng);
          const double vib_phase = two_pi * u(rng);
          double phase = two_pi * u(rng);
          for (std::size_t j = 0; j < n; ++j) {
            const double t = double(j) / sample_rate;
            const double f = src == 0 ? f0 * (1 + 0.02 * std::sin(two_pi * 5 * t + vib_phase)) : f0;
            phase += two_pi * f / sample_rate;
            double v = 0;
            if (src == 0) {
              for (int h = 1; h <= 6; ++h) v += std::sin(h * phase) / h;
              v *= 0.3;
            } else {
              v = 0.6 * std::sin(phase) + 0.1 * std::sin(2 * phase);
            }
            mono[start + j] = amp * fade(j, n) * v;
          }
        }
      } else if (src == 2) {
        std::normal_distribution<double> g(0.0, 1.0);
        const std::size_t grid = std::size_t(0.25 * sample_rate);
        for (std::size_t start = 0; start < len; start += grid) {
          if (u(rng) < 0.25) continue;
          const double decay = 0.03 + 0.05 * u(rng);
          const double amp = 0.3 + 0.4 * u(rng);
          for (std::size_t j = 0; j < grid && start + j < len; ++j) {
            const double t = double(j) / sample_rate;
            mono[start + j] = amp * std::exp(-t / decay) * g(rng) * fade(j, grid);
          }
        }
      } else {
        std::vector<double> freq(40), ph(40);
        for (std::size_t k = 0; k < 40; ++k) {
          freq[k] = 800 + 2200 * u(rng);
          ph[k] = two_pi * u(rng);
        }
        const double trem = 0.2 + 0.5 * u(rng);
        for (std::size_t j = 0; j < len; ++j) {
          const double t = double(j) / sample_rate;
          double v = 0;
          for (std::size_t k = 0; k < 40; ++k) v += std::sin(two_pi * freq[k] * t + ph[k]);
          mono[j] = 0.05 * (0.7 + 0.3 * std::sin(two_pi * trem * t)) * v;
        }
      }
      for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t j = 0; j < len; ++j) w[c * len + j] = gains[c] * mono[j];
      }
      pools[src].push_back(std::move(w));
    }
  }
  return pools;
}

/// Cuts SAD-approved windows out of every track into per-source pools.
inline StemPools<double> segment_pools(const StemPools<double>& tracks, const SadConfig& sad) {
  StemPools<double> out(tracks.size());
  for (std::size_t s = 0; s < tracks.size(); ++s) {
    for (const auto& t : tracks[s]) {
      for (std::size_t off : sad_filter(t, sad)) out[s].push_back(slice_samples(t, off, sad.window));
    }
  }
  return out;
}

template <typename T>
StemPools<T> cast_pools(const StemPools<double>& in) {
  StemPools<T> out(in.size());
  for (std::size_t s = 0; s < in.size(); ++s) {
    for (const auto& t : in[s]) {
      Tensor<T> c(t.shape());
      for (std::size_t j = 0; j < t.size(); ++j) c[j] = T(t[j]);
      out[s].push_back(std::move(c));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

struct TrainConfig {
  std::size_t epochs = 2;
  std::size_t steps_per_epoch = 100;
  std::size_t batch = 4;
  double segment_seconds = 0.5;
  double lr = 1e-3;
  double clip_norm = 5.0;
  double gain_db = 3.0;
  std::uint64_t seed = 0;
  std::size_t songs = 4;  // per source; the last one is held out
  double song_seconds = 6.0;
  std::size_t val_items = 4;
  double sad_threshold = 0.1;
};

inline TrainConfig train_config_from(const KeyValues& kv) {
  TrainConfig t;
  t.epochs = kv.num<std::size_t>("train.epochs", t.epochs);
  t.steps_per_epoch = kv.num<std::size_t>("train.steps_per_epoch", t.steps_per_epoch);
  t.batch = kv.num<std::size_t>("train.batch", t.batch);
  t.segment_seconds = kv.num<double>("train.segment_seconds", t.segment_seconds);
  t.lr = kv.num<double>("train.lr", t.lr);
  t.clip_norm = kv.num<double>("train.clip_norm", t.clip_norm);
  t.gain_db = kv.num<double>("train.gain_db", t.gain_db);
  t.seed = kv.num<std::uint64_t>("train.seed", t.seed);
  t.songs = kv.num<std::size_t>("train.songs", t.songs);
  t.song_seconds = kv.num<double>("train.song_seconds", t.song_seconds);
  t.val_items = kv.num<std::size_t>("train.val_items", t.val_items);
  t.sad_threshold = kv.num<double>("train.sad_threshold", t.sad_threshold);
  if (t.songs < 2) throw Error("train: need at least 2 songs per source");
  if (t.batch == 0 || t.steps_per_epoch == 0) throw Error("train: batch and steps must be positive");
  return t;
}

struct TrainData {
  StemPools<double> train;
  StemPools<double> val;
};

/// Synthetic songs cut into SAD-filtered segments; the last song of each
/// source goes to validation. Only the first n_sources stems are kept.
inline TrainData make_train_data(const ModelConfig& cfg, const TrainConfig& tc) {
  auto tracks = make_synthetic_tracks(tc.seed, tc.song_seconds, cfg.stft.sample_rate, tc.songs);
  tracks.resize(cfg.n_sources);
  SadConfig sad;
  sad.window = std::size_t(tc.segment_seconds * cfg.stft.sample_rate);
  sad.hop = std::max<std::size_t>(1, sad.window / 2);
  sad.threshold = tc.sad_threshold;
  if (sad.window < cfg.stft.n_fft) throw Error("train: segment shorter than n_fft");
  StemPools<double> train_tracks(tracks.size()), val_tracks(tracks.size());
  for (std::size_t s = 0; s < tracks.size(); ++s) {
    for (std::size_t k = 0; k < tracks[s].size(); ++k) {
      (k + 1 == tracks[s].size() ? val_tracks : train_tracks)[s].push_back(tracks[s][k]);
    }
  }
  return {segment_pools(train_tracks, sad), segment_pools(val_tracks, sad)};
}

struct TrainLogRow {
  std::size_t step;
  double lr, stage1, stage2, total, grad_norm;
};

template <typename T>
LossReport batch_loss(const ModelParams<T>& params, const ModelConfig& cfg, const Batch<T>& b,
                      ModelParams<T>* grads) {
  LossReport avg;
  avg.per_source.assign(cfg.n_sources, {});
  const T scale = T(1) / T(b.mixtures.size());
  for (std::size_t i = 0; i < b.mixtures.size(); ++i) {
    const LossReport r = loss_and_grad(params, cfg, b.mixtures[i], b.stems[i], grads, scale);
    avg.stage1 += r.stage1 / double(b.mixtures.size());
    avg.stage2 += r.stage2 / double(b.mixtures.size());
    for (std::size_t s = 0; s < cfg.n_sources; ++s) {
      for (std::size_t k = 0; k < 2; ++k) {
        auto& a = avg.per_source[s][k];
        const auto& x = r.per_source[s][k];
        const double w = 1.0 / double(b.mixtures.size());
        a.re += w * x.re;
        a.im += w * x.im;
        a.time += w * x.time;
      }
    }
  }
  avg.total = avg.stage1 + avg.stage2;
  return avg;
}

template <typename T>
void save_checkpoint(const std::string& path, ModelParams<T>& params, const ModelConfig& cfg,
                     const OptimState& st, const Json& extra = Json::object()) {
  NamedTensors<T> all = named_tensors<T>(params);
  std::vector<Tensor<T>> moments;
  moments.reserve(2 * st.m.size());
  const auto names = all;
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    for (const auto* src : {&st.m[i], &st.v[i]}) {
      Tensor<T> t(names[i].second->shape());
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = T((*src)[j]);
      moments.push_back(std::move(t));
    }
  }
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    all.emplace_back("adam.m." + names[i].first, &moments[2 * i]);
    all.emplace_back("adam.v." + names[i].first, &moments[2 * i + 1]);
  }
  Json e = extra;
  e["optimizer"] = st.to_json();
  write_container(path, all, Json{{"config", to_json(cfg)}, {"extra", e}});
}

/// Runs epochs of on-the-fly mixing with the two-stage loss, clipping, the
/// plateau schedule and a checkpoint per epoch. A non-finite loss aborts
/// the run; the previous checkpoint is left in place.
template <typename T>
class Trainer {
 public:
  Trainer(ModelConfig cfg, TrainConfig tc)
      : cfg_(std::move(cfg)), tc_(tc), params_(ModelParams<T>::init(cfg_, tc.seed)) {
    state_.lr = tc.lr;
    state_.clip_norm = tc.clip_norm;
    const TrainData data = make_train_data(cfg_, tc_);
    train_ = cast_pools<T>(data.train);
    val_ = cast_pools<T>(data.val);
    for (std::size_t s = 0; s < cfg_.n_sources; ++s) {
      if (train_[s].empty() || val_[s].empty()) {
        throw Error("train: SAD left no segments for source " + cfg_.source_name(s));
      }
    }
    MixConfig vm{tc_.val_items, 0.0, 0.0};
    val_batch_ = mix_batch(val_, vm, tc_.seed ^ 0x5eedULL);
  }

  ModelParams<T>& params() { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const OptimState& state() const { return state_; }
  const std::vector<TrainLogRow>& log() const { return log_; }
  const Batch<T>& validation_batch() const { return val_batch_; }

  /// One optimizer step on the batch for global step `step`.
  TrainLogRow step(std::size_t step) {
    const MixConfig mc{tc_.batch, -tc_.gain_db, tc_.gain_db};
    const Batch<T> b = mix_batch(train_, mc, tc_.seed * 1000003ULL + step);
    ModelParams<T> grads = zeros_like(params_);
    const LossReport r = batch_loss(params_, cfg_, b, &grads);
    if (!std::isfinite(r.total)) {
      throw Error("train: non-finite loss at step " + std::to_string(step));
    }
    last_report_ = r;
    const StepReport s = clip_and_step(named_tensors<T>(params_), named_tensors<T>(grads), state_);
    TrainLogRow row{step, state_.lr, r.stage1, r.stage2, r.total, s.grad_norm};
    log_.push_back(row);
    return row;
  }

  const LossReport& last_report() const { return last_report_; }

  double validate() { return batch_loss<T>(params_, cfg_, val_batch_, nullptr).total; }

  /// Full run. Writes `<out>/train_log.csv` and `<out>/checkpoint.bin`
  /// after every epoch when `out` is non-empty.
  void run(const std::string& out, const std::function<void(const TrainLogRow&)>& on_step = {}) {
    namespace fs = std::filesystem;
    if (!out.empty()) fs::create_directories(out);
    std::size_t global = 0;
    for (std::size_t epoch = 0; epoch < tc_.epochs; ++epoch) {
      for (std::size_t k = 0; k < tc_.steps_per_epoch; ++k) {
        const TrainLogRow row = step(++global);
        if (on_step) on_step(row);
      }
      const double val = validate();
      if (!std::isfinite(val)) throw Error("train: non-finite validation loss");
      lr_schedule(state_, val);
      if (!out.empty()) {
        write_log(out + "/train_log.csv");
        const std::string tmp = out + "/checkpoint.bin.tmp";
        save_checkpoint(tmp, params_, cfg_, state_,
                        Json{{"epoch", epoch + 1}, {"val_loss", val}, {"seed", tc_.seed}});
        fs::rename(tmp, out + "/checkpoint.bin");
      }
    }
  }

  void write_log(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path);
    os << "step,lr,stage1,stage2,total,grad_norm\n";
    os.precision(10);
    for (const auto& r : log_) {
      os << r.step << ',' << r.lr << ',' << r.stage1 << ',' << r.stage2 << ',' << r.total << ','
         << r.grad_norm << '\n';
    }
  }

 private:
  ModelConfig cfg_;
  TrainConfig tc_;
  ModelParams<T> params_;
  OptimState state_;
  StemPools<T> train_, val_;
  Batch<T> val_batch_;
  std::vector<TrainLogRow> log_;
  LossReport last_report_;
};

}  // namespace tsbm
