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

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "tsbm/ssd.hpp"

namespace tsbm {

template <typename T>
struct SsdInstance {
  Tensor<T> x;     // [T, H, P]
  Tensor<T> abar;  // [T, H], in (0, 1)
  Tensor<T> bbar;  // [T, H, N]
  Tensor<T> c;     // [T, N]
};

/// Random SSD problem with decays drawn through a zoh discretization of
/// A = -exp(a_log), a_log ~ U[0, 2.77], delta ~ U[1e-3, 0.5].
template <typename T>
SsdInstance<T> random_ssd_instance(Rng& rng, std::size_t len, std::size_t nh, std::size_t hp,
                                   std::size_t ds) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), alog(0.0, 2.77), dt(1e-3, 0.5);
  SsdInstance<T> s{Tensor<T>({len, nh, hp}), Tensor<T>({len, nh}), Tensor<T>({len, nh, ds}),
                   Tensor<T>({len, ds})};
  for (auto& v : s.x.values()) v = T(u(rng));
  for (auto& v : s.c.values()) v = T(u(rng));
  std::vector<double> a(nh);
  for (auto& v : a) v = -std::exp(alog(rng));
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t h = 0; h < nh; ++h) {
      const double d = dt(rng);
      s.abar[t * nh + h] = T(std::exp(d * a[h]));
      const double coef = std::expm1(d * a[h]) / a[h];
      for (std::size_t k = 0; k < ds; ++k) s.bbar[(t * nh + h) * ds + k] = T(coef * u(rng));
    }
  }
  return s;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw Error("max_abs_diff: shape mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  }
  return m;
}

struct BenchRow {
  std::size_t length = 0;
  double scan_seconds = 0;
  double dual_seconds = 0;
  double max_diff = 0;
  double ratio() const { return dual_seconds / scan_seconds; }
};

/// Times both SSD forms (minimum over repeats; each repeat loops until at
/// least `min_seconds` elapse). The forms are compared before timing and a
/// disagreement above `tolerance` is an error.
inline std::vector<BenchRow> bench_ssd_forms(const std::vector<std::size_t>& lengths,
                                             std::size_t repeats = 3, std::size_t nh = 2,
                                             std::size_t hp = 16, std::size_t ds = 16,
                                             double tolerance = 1e-8, double min_seconds = 0.05,
                                             std::uint64_t seed = 0) {
  using Clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  Rng rng(seed);
  for (std::size_t len : lengths) {
    const auto s = random_ssd_instance<double>(rng, len, nh, hp, ds);
    BenchRow r;
    r.length = len;
    r.max_diff = max_abs_diff(ssd_scan(s.x, s.abar, s.bbar, s.c), ssd_dual(s.x, s.abar, s.bbar, s.c));
    if (!(r.max_diff <= tolerance)) {
      throw Error("bench: scan and dual forms disagree at T=" + std::to_string(len) + " (" +
                  std::to_string(r.max_diff) + ")");
    }
    auto time = [&](auto&& fn) {
      double best = 1e300;
      for (std::size_t k = 0; k < std::max<std::size_t>(1, repeats); ++k) {
        std::size_t iters = 0;
        const auto t0 = Clock::now();
        double el = 0;
        do {
          fn();
          ++iters;
          el = std::chrono::duration<double>(Clock::now() - t0).count();
        } while (el < min_seconds);
        best = std::min(best, el / double(iters));
      }
      return best;
    };
    volatile double sink = 0;
    r.scan_seconds = time([&] { sink = sink + ssd_scan(s.x, s.abar, s.bbar, s.c)[0]; });
    r.dual_seconds = time([&] { sink = sink + ssd_dual(s.x, s.abar, s.bbar, s.c)[0]; });
    rows.push_back(r);
  }
  return rows;
}

}  // namespace tsbm
