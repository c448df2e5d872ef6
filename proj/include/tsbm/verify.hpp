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

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "tsbm/bench.hpp"
#include "tsbm/evaluation.hpp"
#include "tsbm/io.hpp"
#include "tsbm/training.hpp"

namespace tsbm {

/// Small model on the default 2048/512 STFT and 57-band layout, cheap
/// enough for end-to-end identity runs on long inputs.
inline ModelConfig identity_probe_config() {
  ModelConfig c = ModelConfig::full();
  c.features = 16;
  c.layers_stage1 = 1;
  c.layers_stage2 = 1;
  c.ssd = {16, 8, 4, 2, 8};
  c.head_hidden = 16;
  return c;
}

template <typename T>
double peak_relative_error(const Tensor<T>& ref, const Tensor<T>& est) {
  double peak = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) peak = std::max(peak, std::abs(double(ref[i])));
  return max_abs_diff(ref, est) / peak;
}

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  bool f64 = true;
  bool inject_dual_fault = false;
  std::uint64_t seed = 0;
};

namespace detail {

template <typename T>
SuiteResult verify_dual_form(const VerifyOptions& o) {
  const double tol = std::is_same_v<T, double> ? 1e-10 : 1e-4;
  Rng rng(o.seed);
  std::uniform_int_distribution<std::size_t> len(1, 64), heads(1, 4), state(1, 16), hp(1, 8);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const auto s = random_ssd_instance<T>(rng, len(rng), heads(rng), hp(rng), state(rng));
    Tensor<T> dual = ssd_dual(s.x, s.abar, s.bbar, s.c);
    if (o.inject_dual_fault) dual[dual.size() / 2] += T(1e-6);
    worst = std::max(worst, max_abs_diff(ssd_scan(s.x, s.abar, s.bbar, s.c), dual));
  }
  std::ostringstream os;
  os << "max |scan - dual| = " << worst << " over 200 instances (tol " << tol << ")";
  return {"dual-form equivalence", worst <= tol, os.str()};
}

inline SuiteResult verify_grad_check(const VerifyOptions& o) {
  const auto rep = grad_check(ModelConfig::toy(), o.seed);
  std::ostringstream os;
  os << "max relative error " << rep.max_rel_error << " at " << rep.worst << " (" << rep.checked
     << " scalars, " << rep.kink_adjusted << " kink-adjusted)";
  return {"gradient check", rep.max_rel_error <= 1e-4, os.str()};
}

template <typename T>
SuiteResult verify_round_trip(const VerifyOptions& o) {
  const double tol = std::is_same_v<T, double> ? 1e-6 : 1e-4;
  Rng rng(o.seed);
  StftConfig cfg;
  Tensor<T> w({2, 44100});
  fill_uniform(w, T(1), rng);
  const double err = peak_relative_error(w, istft(stft(w, cfg), w.dim(1)));

  const ModelConfig mc = ModelConfig::toy();
  ModelParams<T> p = ModelParams<T>::init(mc, o.seed);
  const auto path = (std::filesystem::temp_directory_path() /
                     ("tsbm_verify_" + std::to_string(o.seed) + ".bin")).string();
  save_model(path, p, mc);
  LoadedModel<T> back = load_model<T>(path);
  std::filesystem::remove(path);
  bool exact = back.config.scheme == mc.scheme;
  auto a = named_tensors<T>(p);
  auto b = named_tensors<T>(back.params);
  exact = exact && a.size() == b.size();
  for (std::size_t i = 0; exact && i < a.size(); ++i) {
    exact = a[i].first == b[i].first &&
            std::memcmp(a[i].second->data(), b[i].second->data(), a[i].second->size() * sizeof(T)) == 0;
  }
  std::ostringstream os;
  os << "stft/istft peak-relative error " << err << " (tol " << tol << "); parameter file "
     << (exact ? "bit-exact" : "MISMATCH");
  return {"round trip", err <= tol && exact, os.str()};
}

template <typename T>
SuiteResult verify_identity(const VerifyOptions& o) {
  const double tol = std::is_same_v<T, double> ? 1e-4 : 1e-3;
  const ModelConfig cfg = identity_probe_config();
  ModelParams<T> p = ModelParams<T>::init(cfg, o.seed);
  make_identity(p);
  Rng rng(o.seed);
  Tensor<T> w({2, std::size_t(4.2 * cfg.stft.sample_rate)});
  fill_uniform(w, T(0.5), rng);
  const auto out = segment_and_separate(w, p, cfg);
  double worst = 0;
  for (std::size_t i = 0; i < cfg.n_sources; ++i) {
    worst = std::max({worst, peak_relative_error(w, out.stage1[i]),
                      peak_relative_error(w, out.stage2[i])});
  }
  std::ostringstream os;
  os << "identity model on 4.2 s: peak-relative error " << worst << " (tol " << tol << ")";
  return {"identity model", worst <= tol, os.str()};
}

template <typename T>
SuiteResult verify_loss_additivity(const VerifyOptions& o) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.n_sources = 2;
  TrainConfig tc;
  tc.seed = o.seed;
  tc.batch = 2;
  tc.segment_seconds = 0.25;
  tc.song_seconds = 3;
  tc.songs = 2;
  Trainer<T> tr(cfg, tc);
  double worst = 0;
  for (std::size_t s = 1; s <= 5; ++s) {
    const auto row = tr.step(s);
    const LossReport& r = tr.last_report();
    double terms = 0;
    for (const auto& src : r.per_source) terms += src[0].sum() + src[1].sum();
    worst = std::max({worst, std::abs(r.total - (r.stage1 + r.stage2)) / std::abs(r.total),
                      std::abs(r.total - terms) / std::abs(r.total),
                      std::abs(row.total - r.total) / std::abs(r.total)});
  }
  std::ostringstream os;
  os << "max relative |total - (stage1 + stage2)| " << worst << " over 5 steps";
  return {"loss additivity", worst <= 1e-12, os.str()};
}

template <typename T>
std::vector<SuiteResult> run_verify_impl(const VerifyOptions& o) {
  std::vector<SuiteResult> out;
  auto run = [&](auto&& fn, const char* name) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("error: ") + e.what()});
    }
  };
  run([&] { return verify_dual_form<T>(o); }, "dual-form equivalence");
  run([&] { return verify_grad_check(o); }, "gradient check");
  run([&] { return verify_round_trip<T>(o); }, "round trip");
  run([&] { return verify_identity<T>(o); }, "identity model");
  run([&] { return verify_loss_additivity<T>(o); }, "loss additivity");
  return out;
}

}  // namespace detail

/// Release-gate suites. The gradient check always runs in 64-bit.
inline std::vector<SuiteResult> run_verify(const VerifyOptions& o) {
  return o.f64 ? detail::run_verify_impl<double>(o) : detail::run_verify_impl<float>(o);
}

}  // namespace tsbm
