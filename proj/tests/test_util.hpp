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

#include <cmath>
#include <complex>
#include <unistd.h>
#include <filesystem>
#include <string>
#include <vector>

#include "tsbm/tsbm.hpp"

namespace tsbm::test {

inline Tensor<double> random_tensor(std::vector<std::size_t> shape, double bound,
                                    std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  fill_uniform(t, bound, rng);
  return t;
}

inline ComplexSpectrogram<double> random_spec(std::size_t c, std::size_t f, std::size_t t,
                                              std::uint64_t seed, StftConfig cfg = {}) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ComplexSpectrogram<double> s(c, f, t, cfg);
  for (auto& v : s.values()) v = {u(rng), u(rng)};
  return s;
}

inline FeatureTensor<double> random_features(std::size_t c, std::size_t n, std::size_t k,
                                             std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  FeatureTensor<double> z(c, n, k, t);
  for (auto& v : z.values()) v = u(rng);
  return z;
}

template <typename A>
double max_abs_values(const A& a, const A& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    m = std::max(m, double(std::abs(a.values()[i] - b.values()[i])));
  }
  return m;
}

// Sum of w . values for a real container; the weight vector is the output
// gradient used by module-level gradient checks.
template <typename V>
double weighted_sum(const V& values, const std::vector<double>& w) {
  long double s = 0;
  for (std::size_t i = 0; i < values.size(); ++i) s += (long double)w[i] * values[i];
  return double(s);
}

inline double weighted_sum(const std::vector<std::complex<double>>& values,
                           const std::vector<double>& w) {
  long double s = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    s += (long double)w[2 * i] * values[i].real() + (long double)w[2 * i + 1] * values[i].imag();
  }
  return double(s);
}

inline std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(n);
  for (auto& v : w) v = u(rng);
  return w;
}

inline GradCheckOptions all_scalars() {
  GradCheckOptions o;
  o.max_per_tensor = 0;
  return o;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("tsbm_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace tsbm::test
