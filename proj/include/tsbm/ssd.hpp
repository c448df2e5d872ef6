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

#include "tsbm/layers.hpp"

namespace tsbm {

struct SsdDims {
  std::size_t d_model = 128;
  std::size_t d_state = 128;
  std::size_t d_conv = 4;
  std::size_t expand = 4;
  std::size_t headdim = 64;

  std::size_t d_inner() const { return d_model * expand; }
  std::size_t n_heads() const { return d_inner() / headdim; }
  // Channels passing through the depthwise conv: x, B, C.
  std::size_t conv_dim() const { return d_inner() + 2 * d_state; }
  // z, x, B, C, dt
  std::size_t in_proj_width() const { return 2 * d_inner() + 2 * d_state + n_heads(); }

  void validate() const {
    if (!d_model || !d_state || !d_conv || !expand || !headdim) {
      throw Error("ssd: all dimensions must be positive");
    }
    if (d_inner() % headdim != 0) throw Error("ssd: d_model * expand must be divisible by headdim");
  }

  friend bool operator==(const SsdDims&, const SsdDims&) = default;
};

enum class Discretization { zoh, euler_b };

inline std::string to_string(Discretization d) {
  return d == Discretization::zoh ? "zoh" : "euler-b";
}

inline Discretization parse_discretization(const std::string& s) {
  if (s == "zoh") return Discretization::zoh;
  if (s == "euler-b" || s == "euler_b") return Discretization::euler_b;
  throw Error("unknown discretization '" + s + "' (expected zoh or euler-b)");
}

// Lower bound applied to the step size after softplus.
inline constexpr double kDeltaFloor = 1e-4;

namespace detail {

// Coefficient c with Bbar = c * B for a scalar negative A.
template <typename T>
T bbar_coefficient(T a, T delta, Discretization disc) {
  if (disc == Discretization::euler_b) return delta;
  return std::expm1(delta * a) / a;
}

// y[t, h, p] = sum_s h_t[h, p, s] C[t, s] with
// h_t[h] = abar[t, h] h_{t-1}[h] + x[t, h, :] (outer) bbar[t, h, :].
// x rows and C rows may be strided; y is contiguous [len, nh * hp].
template <typename T>
void scan_forward(std::size_t len, std::size_t nh, std::size_t hp, std::size_t ds,
                  const T* x, std::size_t x_stride, const T* abar, const T* bbar,
                  const T* c, std::size_t c_stride, T* y, T* states) {
  std::vector<T> h(nh * hp * ds, T(0));
  for (std::size_t t = 0; t < len; ++t) {
    const T* xt = x + t * x_stride;
    const T* ct = c + t * c_stride;
    for (std::size_t hd = 0; hd < nh; ++hd) {
      const T a = abar[t * nh + hd];
      const T* b = bbar + (t * nh + hd) * ds;
      for (std::size_t p = 0; p < hp; ++p) {
        const T xv = xt[hd * hp + p];
        T* hs = h.data() + (hd * hp + p) * ds;
        T acc = 0;
        for (std::size_t s = 0; s < ds; ++s) {
          hs[s] = a * hs[s] + xv * b[s];
          acc += hs[s] * ct[s];
        }
        y[t * nh * hp + hd * hp + p] = acc;
      }
    }
    if (states) std::copy(h.begin(), h.end(), states + t * h.size());
  }
}

// Adjoint of scan_forward. dx and dc accumulate (strided like x and c);
// dabar [len, nh] and dbbar [len, nh, ds] are overwritten.
template <typename T>
void scan_backward(std::size_t len, std::size_t nh, std::size_t hp, std::size_t ds,
                   const T* x, std::size_t x_stride, const T* abar, const T* bbar,
                   const T* c, std::size_t c_stride, const T* states, const T* dy,
                   T* dx, T* dabar, T* dbbar, T* dc) {
  const std::size_t state_size = nh * hp * ds;
  std::vector<T> lam(state_size, T(0));
  for (std::size_t tt = len; tt-- > 0;) {
    const T* xt = x + tt * x_stride;
    const T* ct = c + tt * c_stride;
    const T* ht = states + tt * state_size;
    const T* hprev = tt ? states + (tt - 1) * state_size : nullptr;
    const T* dyt = dy + tt * nh * hp;
    T* dxt = dx + tt * x_stride;
    T* dct = dc + tt * c_stride;
    for (std::size_t hd = 0; hd < nh; ++hd) {
      const T a_next = tt + 1 < len ? abar[(tt + 1) * nh + hd] : T(0);
      const T* b = bbar + (tt * nh + hd) * ds;
      T* db = dbbar + (tt * nh + hd) * ds;
      std::fill(db, db + ds, T(0));
      T da = 0;
      for (std::size_t p = 0; p < hp; ++p) {
        const T g = dyt[hd * hp + p];
        const T xv = xt[hd * hp + p];
        T* l = lam.data() + (hd * hp + p) * ds;
        const T* hs = ht + (hd * hp + p) * ds;
        T dxv = 0;
        for (std::size_t s = 0; s < ds; ++s) {
          l[s] = a_next * l[s] + g * ct[s];
          dct[s] += g * hs[s];
          dxv += l[s] * b[s];
          db[s] += l[s] * xv;
        }
        if (hprev) {
          const T* hp_ = hprev + (hd * hp + p) * ds;
          for (std::size_t s = 0; s < ds; ++s) da += l[s] * hp_[s];
        }
        dxt[hd * hp + p] += dxv;
      }
      dabar[tt * nh + hd] = da;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor-level SSD primitives

template <typename T>
struct Discretized {
  Tensor<T> abar;  // [T]
  Tensor<T> bbar;  // [T, d_state]
};

/// Zero-order hold (or Euler on B) discretization for one head with scalar
/// A < 0, per-step delta > 0 and B [T, d_state].
template <typename T>
Discretized<T> discretize(T a, const Tensor<T>& b, const Tensor<T>& delta,
                          Discretization disc = Discretization::zoh) {
  if (!(a < T(0))) throw Error("discretize: A must be negative");
  if (b.rank() != 2 || delta.rank() != 1 || b.dim(0) != delta.dim(0)) {
    throw Error("discretize: expected B [T, d_state] and delta [T]");
  }
  const std::size_t len = b.dim(0), ds = b.dim(1);
  Discretized<T> out{Tensor<T>({len}), Tensor<T>({len, ds})};
  for (std::size_t t = 0; t < len; ++t) {
    const T d = delta[t];
    if (!(d > T(0))) throw Error("discretize: delta must be positive");
    out.abar[t] = std::exp(d * a);
    const T coef = detail::bbar_coefficient(a, d, disc);
    for (std::size_t s = 0; s < ds; ++s) out.bbar[t * ds + s] = coef * b[t * ds + s];
  }
  return out;
}

namespace detail {

template <typename T>
void check_ssd_shapes(const Tensor<T>& x, const Tensor<T>& abar, const Tensor<T>& bbar,
                      const Tensor<T>& c, const char* what) {
  if (x.rank() != 3) throw Error(std::string(what) + ": x must be [T, heads, P]");
  const std::size_t len = x.dim(0), nh = x.dim(1);
  if (c.rank() != 2 || c.dim(0) != len) throw Error(std::string(what) + ": C must be [T, d_state]");
  const std::size_t ds = c.dim(1);
  if (abar.shape() != std::vector<std::size_t>{len, nh}) {
    throw Error(std::string(what) + ": Abar must be [T, heads]");
  }
  if (bbar.shape() != std::vector<std::size_t>{len, nh, ds}) {
    throw Error(std::string(what) + ": Bbar must be [T, heads, d_state]");
  }
}

}  // namespace detail

/// Linear-time recurrence form. x [T, H, P], abar [T, H], bbar [T, H, N],
/// c [T, N] -> y [T, H, P], zero initial state.
template <typename T>
Tensor<T> ssd_scan(const Tensor<T>& x, const Tensor<T>& abar, const Tensor<T>& bbar,
                   const Tensor<T>& c) {
  detail::check_ssd_shapes(x, abar, bbar, c, "ssd_scan");
  const std::size_t len = x.dim(0), nh = x.dim(1), hp = x.dim(2), ds = c.dim(1);
  Tensor<T> y(x.shape());
  detail::scan_forward(len, nh, hp, ds, x.data(), nh * hp, abar.data(), bbar.data(), c.data(),
                       ds, y.data(), static_cast<T*>(nullptr));
  return y;
}

/// Lower-triangular semiseparable matrix of one head:
/// M[t, s] = C_t . Bbar_s * prod_{s < r <= t} Abar_r for s <= t.
template <typename T>
Tensor<T> semiseparable_matrix(const Tensor<T>& abar, const Tensor<T>& bbar,
                               const Tensor<T>& c, std::size_t head) {
  const std::size_t len = c.dim(0), ds = c.dim(1), nh = abar.dim(1);
  if (head >= nh) throw Error("semiseparable_matrix: head out of range");
  Tensor<T> m({len, len});
  for (std::size_t t = 0; t < len; ++t) {
    const T* ct = c.data() + t * ds;
    T decay = 1;
    for (std::size_t s = t + 1; s-- > 0;) {
      if (s < t) decay *= abar[(s + 1) * nh + head];
      const T* bs = bbar.data() + (s * nh + head) * ds;
      T dot = 0;
      for (std::size_t i = 0; i < ds; ++i) dot += ct[i] * bs[i];
      m[t * len + s] = dot * decay;
    }
  }
  return m;
}

/// Quadratic dual form: y_t = sum_{s <= t} M[t, s] x_s with M the
/// semiseparable matrix of each head, built one row at a time. Same
/// contract as ssd_scan.
template <typename T>
Tensor<T> ssd_dual(const Tensor<T>& x, const Tensor<T>& abar, const Tensor<T>& bbar,
                   const Tensor<T>& c) {
  detail::check_ssd_shapes(x, abar, bbar, c, "ssd_dual");
  const std::size_t len = x.dim(0), nh = x.dim(1), hp = x.dim(2), ds = c.dim(1);
  Tensor<T> y(x.shape());
  std::vector<T> row(len);
  for (std::size_t hd = 0; hd < nh; ++hd) {
    for (std::size_t t = 0; t < len; ++t) {
      const T* ct = c.data() + t * ds;
      T decay = 1;
      for (std::size_t s = t + 1; s-- > 0;) {
        if (s < t) decay *= abar[(s + 1) * nh + hd];
        const T* bs = bbar.data() + (s * nh + hd) * ds;
        T dot = 0;
        for (std::size_t i = 0; i < ds; ++i) dot += ct[i] * bs[i];
        row[s] = dot * decay;
      }
      T* yt = y.data() + (t * nh + hd) * hp;
      for (std::size_t s = 0; s <= t; ++s) {
        const T w = row[s];
        const T* xs = x.data() + (s * nh + hd) * hp;
        for (std::size_t p = 0; p < hp; ++p) yt[p] += w * xs[p];
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Mamba-2 block

template <typename T>
struct Mamba2Params {
  Tensor<T> in_proj;      // [in_proj_width, d_model]
  Tensor<T> conv_weight;  // [conv_dim, d_conv]
  Tensor<T> conv_bias;    // [conv_dim]
  Tensor<T> a_log;        // [n_heads], A = -exp(a_log)
  Tensor<T> dt_bias;      // [n_heads]
  Tensor<T> d_skip;       // [n_heads]
  Tensor<T> norm_gain;    // [d_inner]
  Tensor<T> out_proj;     // [d_model, d_inner]

  static Mamba2Params make(const SsdDims& d) {
    d.validate();
    Mamba2Params p;
    p.in_proj = Tensor<T>({d.in_proj_width(), d.d_model});
    p.conv_weight = Tensor<T>({d.conv_dim(), d.d_conv});
    p.conv_bias = Tensor<T>({d.conv_dim()});
    p.a_log = Tensor<T>({d.n_heads()});
    p.dt_bias = Tensor<T>({d.n_heads()});
    p.d_skip = Tensor<T>({d.n_heads()}, T(1));
    p.norm_gain = Tensor<T>({d.d_inner()}, T(1));
    p.out_proj = Tensor<T>({d.d_model, d.d_inner()});
    return p;
  }

  void init(const SsdDims& d, Rng& rng) {
    fill_uniform(in_proj, T(1 / std::sqrt(double(d.d_model))), rng);
    fill_uniform(conv_weight, T(1 / std::sqrt(double(d.d_conv))), rng);
    fill_uniform(conv_bias, T(1 / std::sqrt(double(d.d_conv))), rng);
    fill_uniform(out_proj, T(1 / std::sqrt(double(d.d_inner()))), rng);
    std::uniform_real_distribution<double> a_dist(1.0, 16.0);
    std::uniform_real_distribution<double> dt_dist(std::log(1e-3), std::log(1e-1));
    for (std::size_t h = 0; h < d.n_heads(); ++h) {
      a_log[h] = T(std::log(a_dist(rng)));
      const double dt = std::exp(dt_dist(rng));
      dt_bias[h] = T(dt + std::log(-std::expm1(-dt)));  // softplus^-1
    }
    d_skip.fill(T(1));
    norm_gain.fill(T(1));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".in_proj", in_proj);
    f(prefix + ".conv_weight", conv_weight);
    f(prefix + ".conv_bias", conv_bias);
    f(prefix + ".a_log", a_log);
    f(prefix + ".dt_bias", dt_bias);
    f(prefix + ".d_skip", d_skip);
    f(prefix + ".norm_gain", norm_gain);
    f(prefix + ".out_proj", out_proj);
  }
};

template <typename T>
struct Mamba2Cache {
  std::size_t len = 0;
  std::vector<T> input;     // [L, d_model]
  std::vector<T> proj;      // [L, in_proj_width]
  std::vector<T> conv_pre;  // [L, conv_dim]
  std::vector<T> xbc;       // SiLU(conv_pre)
  std::vector<T> dt_pre;    // [L, n_heads]
  std::vector<T> delta;     // [L, n_heads]
  std::vector<T> abar;      // [L, n_heads]
  std::vector<T> bcoef;     // [L, n_heads]
  std::vector<T> bbar;      // [L, n_heads, d_state]
  std::vector<T> states;    // [L, n_heads, headdim, d_state]
  std::vector<T> y;         // scan output plus skip [L, d_inner]
  std::vector<T> gated;     // y * SiLU(z)
  std::vector<T> rstd;      // [L]
  std::vector<T> normed;    // [L, d_inner]
};

inline constexpr double kRmsEps = 1e-5;

/// u [L, d_model] -> out [L, d_model]. Strictly causal. When `cache` is
/// non-null it receives everything mamba2_backward needs.
template <typename T>
void mamba2_forward(const T* u, std::size_t len, const Mamba2Params<T>& p, const SsdDims& d,
                    Discretization disc, T* out, Mamba2Cache<T>* cache = nullptr) {
  if (len == 0) throw Error("mamba2: empty sequence");
  const std::size_t dm = d.d_model, di = d.d_inner(), ds = d.d_state, nh = d.n_heads(),
                    hp = d.headdim, cd = d.conv_dim(), pw = d.in_proj_width(), dc = d.d_conv;
  Mamba2Cache<T> local;
  Mamba2Cache<T>& c = cache ? *cache : local;
  c.len = len;
  if (cache) c.input.assign(u, u + len * dm);
  c.proj.resize(len * pw);
  detail::affine(u, len, dm, p.in_proj.data(), static_cast<const T*>(nullptr), pw, c.proj.data());

  c.conv_pre.resize(len * cd);
  c.xbc.resize(len * cd);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t ch = 0; ch < cd; ++ch) {
      T acc = p.conv_bias[ch];
      const T* w = p.conv_weight.data() + ch * dc;
      for (std::size_t j = 0; j < dc; ++j) {
        if (t + j + 1 < dc) continue;
        const std::size_t src = t + j + 1 - dc;
        acc += w[j] * c.proj[src * pw + di + ch];
      }
      c.conv_pre[t * cd + ch] = acc;
      c.xbc[t * cd + ch] = detail::silu(acc);
    }
  }

  c.dt_pre.resize(len * nh);
  c.delta.resize(len * nh);
  c.abar.resize(len * nh);
  c.bcoef.resize(len * nh);
  c.bbar.resize(len * nh * ds);
  for (std::size_t t = 0; t < len; ++t) {
    const T* bt = c.xbc.data() + t * cd + di;
    for (std::size_t h = 0; h < nh; ++h) {
      const T a = -std::exp(p.a_log[h]);
      const T v = c.proj[t * pw + di + cd + h] + p.dt_bias[h];
      const T sp = detail::softplus(v);
      const T delta = detail::branch(sp > T(kDeltaFloor)) ? sp : T(kDeltaFloor);
      c.dt_pre[t * nh + h] = v;
      c.delta[t * nh + h] = delta;
      c.abar[t * nh + h] = std::exp(delta * a);
      const T coef = detail::bbar_coefficient(a, delta, disc);
      c.bcoef[t * nh + h] = coef;
      T* bb = c.bbar.data() + (t * nh + h) * ds;
      for (std::size_t s = 0; s < ds; ++s) bb[s] = coef * bt[s];
    }
  }

  c.y.resize(len * di);
  if (cache) c.states.resize(len * nh * hp * ds);
  detail::scan_forward(len, nh, hp, ds, c.xbc.data(), cd, c.abar.data(), c.bbar.data(),
                       c.xbc.data() + di + ds, cd, c.y.data(),
                       cache ? c.states.data() : static_cast<T*>(nullptr));
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < di; ++i) {
      c.y[t * di + i] += p.d_skip[i / hp] * c.xbc[t * cd + i];
    }
  }
  if (!std::all_of(c.y.begin(), c.y.end(), [](T v) { return std::isfinite(v); })) {
    throw Error("mamba2: non-finite value after the SSD scan");
  }

  c.gated.resize(len * di);
  c.rstd.resize(len);
  c.normed.resize(len * di);
  for (std::size_t t = 0; t < len; ++t) {
    T ms = 0;
    for (std::size_t i = 0; i < di; ++i) {
      const T g = c.y[t * di + i] * detail::silu(c.proj[t * pw + i]);
      c.gated[t * di + i] = g;
      ms += g * g;
    }
    const T rs = T(1) / std::sqrt(ms / T(di) + T(kRmsEps));
    c.rstd[t] = rs;
    for (std::size_t i = 0; i < di; ++i) {
      c.normed[t * di + i] = c.gated[t * di + i] * rs * p.norm_gain[i];
    }
  }
  detail::affine(c.normed.data(), len, di, p.out_proj.data(), static_cast<const T*>(nullptr),
                 dm, out);
  for (std::size_t i = 0; i < len * dm; ++i) {
    if (!std::isfinite(out[i])) throw Error("mamba2: non-finite value after out_proj");
  }
}

/// Accumulates parameter gradients into g and the input gradient into du.
template <typename T>
void mamba2_backward(const Mamba2Cache<T>& c, const T* dout, const Mamba2Params<T>& p,
                     const SsdDims& d, Discretization disc, Mamba2Params<T>& g, T* du) {
  const std::size_t len = c.len;
  const std::size_t dm = d.d_model, di = d.d_inner(), ds = d.d_state, nh = d.n_heads(),
                    hp = d.headdim, cd = d.conv_dim(), pw = d.in_proj_width(), dc = d.d_conv;

  std::vector<T> dnormed(len * di, T(0));
  detail::affine_backward(c.normed.data(), dout, len, di, p.out_proj.data(), dm,
                          g.out_proj.data(), static_cast<T*>(nullptr), dnormed.data());

  std::vector<T> dproj(len * pw, T(0));
  std::vector<T> dy(len * di);
  std::vector<T> dgated(di);
  for (std::size_t t = 0; t < len; ++t) {
    const T rs = c.rstd[t];
    T dot = 0;
    for (std::size_t i = 0; i < di; ++i) {
      const T gv = c.gated[t * di + i];
      const T dn = dnormed[t * di + i];
      g.norm_gain[i] += dn * gv * rs;
      dgated[i] = dn * p.norm_gain[i];
      dot += dgated[i] * gv;
    }
    for (std::size_t i = 0; i < di; ++i) {
      const T gv = c.gated[t * di + i];
      const T dgv = rs * dgated[i] - rs * rs * rs * gv * dot / T(di);
      const T z = c.proj[t * pw + i];
      dy[t * di + i] = dgv * detail::silu(z);
      dproj[t * pw + i] = dgv * c.y[t * di + i] * detail::silu_grad(z);
    }
  }

  std::vector<T> dxbc(len * cd, T(0));
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < di; ++i) {
      const T dyv = dy[t * di + i];
      g.d_skip[i / hp] += dyv * c.xbc[t * cd + i];
      dxbc[t * cd + i] += p.d_skip[i / hp] * dyv;
    }
  }

  std::vector<T> dabar(len * nh), dbbar(len * nh * ds);
  detail::scan_backward(len, nh, hp, ds, c.xbc.data(), cd, c.abar.data(), c.bbar.data(),
                        c.xbc.data() + di + ds, cd, c.states.data(), dy.data(), dxbc.data(),
                        dabar.data(), dbbar.data(), dxbc.data() + di + ds);

  for (std::size_t h = 0; h < nh; ++h) {
    const T a = -std::exp(p.a_log[h]);
    T da = 0;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t th = t * nh + h;
      const T delta = c.delta[th], abar = c.abar[th], coef = c.bcoef[th];
      const T* bt = c.xbc.data() + t * cd + di;
      const T* dbb = dbbar.data() + th * ds;
      T* dbt = dxbc.data() + t * cd + di;
      T dcoef = 0;
      for (std::size_t s = 0; s < ds; ++s) {
        dcoef += dbb[s] * bt[s];
        dbt[s] += coef * dbb[s];
      }
      T ddelta = dabar[th] * abar * a;
      da += dabar[th] * abar * delta;
      if (disc == Discretization::zoh) {
        ddelta += dcoef * abar;
        da += dcoef * (delta * abar - coef) / a;
      } else {
        ddelta += dcoef;
      }
      const T v = c.dt_pre[th];
      const T dv = delta > T(kDeltaFloor) ? ddelta * detail::sigmoid(v) : T(0);
      g.dt_bias[h] += dv;
      dproj[t * pw + di + cd + h] = dv;
    }
    g.a_log[h] += da * a;
  }

  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t ch = 0; ch < cd; ++ch) {
      const T dpre = dxbc[t * cd + ch] * detail::silu_grad(c.conv_pre[t * cd + ch]);
      g.conv_bias[ch] += dpre;
      const T* w = p.conv_weight.data() + ch * dc;
      T* dw = g.conv_weight.data() + ch * dc;
      for (std::size_t j = 0; j < dc; ++j) {
        if (t + j + 1 < dc) continue;
        const std::size_t src = t + j + 1 - dc;
        dw[j] += dpre * c.proj[src * pw + di + ch];
        dproj[src * pw + di + ch] += dpre * w[j];
      }
    }
  }

  detail::affine_backward(c.input.data(), dproj.data(), len, dm, p.in_proj.data(), pw,
                          g.in_proj.data(), static_cast<T*>(nullptr), du);
}

template <typename T>
Tensor<T> mamba2_forward(const Tensor<T>& u, const Mamba2Params<T>& p, const SsdDims& d,
                         Discretization disc = Discretization::zoh) {
  if (u.rank() != 2 || u.dim(1) != d.d_model) throw Error("mamba2: expected input [T, d_model]");
  Tensor<T> out(u.shape());
  mamba2_forward(u.data(), u.dim(0), p, d, disc, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Bidirectional block

template <typename T>
struct BMamba2Params {
  Mamba2Params<T> forward;
  Mamba2Params<T> backward;

  static BMamba2Params make(const SsdDims& d) {
    return {Mamba2Params<T>::make(d), Mamba2Params<T>::make(d)};
  }
  void init(const SsdDims& d, Rng& rng) {
    forward.init(d, rng);
    backward.init(d, rng);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    forward.visit(prefix + ".fwd", f);
    backward.visit(prefix + ".bwd", f);
  }
};

template <typename T>
struct BMamba2Cache {
  Mamba2Cache<T> forward;
  Mamba2Cache<T> backward;
};

/// u [L, d_model] -> out [L, 2 * d_model]: forward-direction output in the
/// first half, re-reversed backward-direction output in the second.
template <typename T>
void bmamba2_forward(const T* u, std::size_t len, const BMamba2Params<T>& p, const SsdDims& d,
                     Discretization disc, T* out, BMamba2Cache<T>* cache = nullptr) {
  const std::size_t dm = d.d_model;
  std::vector<T> fwd(len * dm), rev(len * dm), bwd(len * dm);
  mamba2_forward(u, len, p.forward, d, disc, fwd.data(), cache ? &cache->forward : nullptr);
  for (std::size_t t = 0; t < len; ++t) {
    std::copy(u + (len - 1 - t) * dm, u + (len - t) * dm, rev.data() + t * dm);
  }
  mamba2_forward(rev.data(), len, p.backward, d, disc, bwd.data(),
                 cache ? &cache->backward : nullptr);
  for (std::size_t t = 0; t < len; ++t) {
    std::copy(fwd.data() + t * dm, fwd.data() + (t + 1) * dm, out + t * 2 * dm);
    const T* b = bwd.data() + (len - 1 - t) * dm;
    std::copy(b, b + dm, out + t * 2 * dm + dm);
  }
}

template <typename T>
void bmamba2_backward(const BMamba2Cache<T>& c, const T* dout, const BMamba2Params<T>& p,
                      const SsdDims& d, Discretization disc, BMamba2Params<T>& g, T* du) {
  const std::size_t len = c.forward.len, dm = d.d_model;
  std::vector<T> dfwd(len * dm), dbwd(len * dm), drev(len * dm, T(0));
  for (std::size_t t = 0; t < len; ++t) {
    std::copy(dout + t * 2 * dm, dout + t * 2 * dm + dm, dfwd.data() + t * dm);
    std::copy(dout + t * 2 * dm + dm, dout + (t + 1) * 2 * dm, dbwd.data() + (len - 1 - t) * dm);
  }
  mamba2_backward(c.forward, dfwd.data(), p.forward, d, disc, g.forward, du);
  mamba2_backward(c.backward, dbwd.data(), p.backward, d, disc, g.backward, drev.data());
  for (std::size_t t = 0; t < len; ++t) {
    const T* r = drev.data() + (len - 1 - t) * dm;
    for (std::size_t i = 0; i < dm; ++i) du[t * dm + i] += r[i];
  }
}

template <typename T>
Tensor<T> bmamba2_forward(const Tensor<T>& u, const BMamba2Params<T>& p, const SsdDims& d,
                          Discretization disc = Discretization::zoh) {
  if (u.rank() != 2 || u.dim(1) != d.d_model) throw Error("bmamba2: expected input [T, d_model]");
  Tensor<T> out({u.dim(0), 2 * d.d_model});
  bmamba2_forward(u.data(), u.dim(0), p, d, disc, out.data());
  return out;
}

}  // namespace tsbm
