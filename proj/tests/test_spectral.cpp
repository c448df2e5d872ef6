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

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>

#include "test_util.hpp"

namespace tsbm {
namespace {

using test::random_tensor;

// Direct O(n^2) DFT in long double, independent of the library FFT.
std::vector<std::complex<long double>> direct_dft(const std::vector<long double>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<long double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<long double> acc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const long double a = -2.0L * std::numbers::pi_v<long double> * (long double)((k * j) % n) /
                            (long double)n;
      acc += x[j] * std::complex<long double>(std::cos(a), std::sin(a));
    }
    out[k] = acc;
  }
  return out;
}

long double hann(std::size_t j, std::size_t n) {
  return 0.5L - 0.5L * std::cos(2.0L * std::numbers::pi_v<long double> * j / n);
}

double peak(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

TEST(Fft, MatchesDirectDftForPowerOfTwoAndOtherSizes) {
  for (std::size_t n : {8u, 30u, 64u, 2048u}) {
    const auto x = random_tensor({n}, 1.0, n);
    std::vector<long double> xl(x.values().begin(), x.values().end());
    const auto ref = direct_dft(xl);
    Fft<double> fft(n);
    std::vector<std::complex<double>> out(n / 2 + 1);
    fft.rfft(x.data(), out.data());
    double err = 0;
    for (std::size_t k = 0; k <= n / 2; ++k) {
      err = std::max(err, double(std::abs(std::complex<long double>(out[k]) - ref[k])));
    }
    EXPECT_LT(err, 1e-10 * double(n)) << "n=" << n;
    std::vector<double> back(n);
    fft.irfft(out.data(), back.data());
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(back[j], x[j], 1e-12);
  }
}

TEST(Stft, OneSecondAtDefaultsHasShape2x1025x87) {
  const auto spec = stft(Tensor<double>({2, 44100}), StftConfig{});
  EXPECT_EQ(spec.channels(), 2u);
  EXPECT_EQ(spec.bins(), 1025u);
  EXPECT_EQ(spec.frames(), 87u);
}

TEST(Stft, ZeroWaveGivesZeroSpectrogram) {
  const auto spec = stft(Tensor<double>({2, 5000}), StftConfig{});
  for (const auto& v : spec.values()) EXPECT_EQ(v, std::complex<double>(0, 0));
}

TEST(Stft, InteriorFrameMatchesDirectDftOfWindowedFrame) {
  const StftConfig cfg;
  const auto w = random_tensor({2, 8000}, 1.0, 7);
  const auto spec = stft(w, cfg);
  for (std::size_t t : {4u, 9u}) {
    for (std::size_t c = 0; c < 2; ++c) {
      std::vector<long double> frame(cfg.n_fft);
      const std::size_t start = t * cfg.hop - cfg.n_fft / 2;
      for (std::size_t j = 0; j < cfg.n_fft; ++j) {
        frame[j] = hann(j, cfg.n_fft) * w[c * 8000 + start + j];
      }
      const auto ref = direct_dft(frame);
      double err = 0;
      for (std::size_t f = 0; f < cfg.bins(); ++f) {
        err = std::max(err, double(std::abs(std::complex<long double>(spec.at(c, f, t)) - ref[f])));
      }
      EXPECT_LT(err, 1e-9);
    }
  }
}

TEST(Stft, Bin16CosinePeaksAtBin16InInteriorFrames) {
  const StftConfig cfg;
  const std::size_t len = 44100;
  Tensor<double> w({2, len});
  const double hz = 16.0 * cfg.sample_rate / double(cfg.n_fft);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t j = 0; j < len; ++j) {
      w[c * len + j] = std::cos(2 * std::numbers::pi * hz * double(j) / cfg.sample_rate);
    }
  }
  const auto spec = stft(w, cfg);
  for (std::size_t t = 4; t + 4 < spec.frames(); ++t) {
    std::size_t best = 0;
    for (std::size_t f = 1; f < spec.bins(); ++f) {
      if (std::abs(spec.at(0, f, t)) > std::abs(spec.at(0, best, t))) best = f;
    }
    EXPECT_EQ(best, 16u) << "frame " << t;
  }
}

TEST(Stft, RoundTripOneSecondStereoWithinOneMicroOfPeak) {
  const auto w = random_tensor({2, 44100}, 1.0, 3);
  const auto back = istft(stft(w, StftConfig{}), 44100);
  EXPECT_LE(max_abs_diff(w, back), 1e-6 * peak(w));
}

TEST(Stft, RoundTripHoldsForNonDefaultConfigs) {
  for (const StftConfig cfg : {StftConfig{32, 8, 2048.0, true}, StftConfig{256, 64, 8000.0, true},
                               StftConfig{30, 10, 1000.0, true}}) {
    const auto w = random_tensor({2, 777}, 1.0, cfg.n_fft);
    const auto back = istft(stft(w, cfg), 777);
    EXPECT_LE(max_abs_diff(w, back), 1e-10 * peak(w)) << "n_fft " << cfg.n_fft;
  }
}

TEST(Stft, ZeroSpectrogramInvertsToSilence) {
  ComplexSpectrogram<double> spec(2, 1025, 10, StftConfig{});
  const auto w = istft(spec, 4000);
  for (double v : w.values()) EXPECT_EQ(v, 0.0);
}

TEST(Stft, HannSquaredOverlapIsConstantAtQuarterHop) {
  const StftConfig cfg;
  const std::size_t frames = 20;
  const auto lib = window_square_sum<double>(cfg, frames);
  // Direct summation of shifted squared windows.
  std::vector<long double> direct(cfg.n_fft + cfg.hop * (frames - 1), 0.0L);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < cfg.n_fft; ++j) direct[t * cfg.hop + j] += hann(j, cfg.n_fft) * hann(j, cfg.n_fft);
  }
  ASSERT_EQ(lib.size(), direct.size());
  for (std::size_t i = cfg.n_fft; i + cfg.n_fft < direct.size(); ++i) {
    EXPECT_NEAR(double(direct[i]), 1.5, 1e-12);
    EXPECT_NEAR(lib[i], double(direct[i]), 1e-12);
  }
}

TEST(Stft, IsLinear) {
  const StftConfig cfg;
  const auto x = random_tensor({2, 6000}, 1.0, 1);
  const auto y = random_tensor({2, 6000}, 1.0, 2);
  Tensor<double> mix({2, 6000});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.5 * x[i] - 0.75 * y[i];
  const auto sx = stft(x, cfg), sy = stft(y, cfg), sm = stft(mix, cfg);
  double err = 0;
  for (std::size_t i = 0; i < sm.size(); ++i) {
    err = std::max(err, std::abs(sm.values()[i] - (2.5 * sx.values()[i] - 0.75 * sy.values()[i])));
  }
  EXPECT_LT(err, 1e-10);
}

TEST(Stft, WhiteNoiseEnergyMatchesWindowedTimeEnergyWithinOnePercent) {
  const StftConfig cfg;
  const std::size_t len = 44100;
  const auto w = random_tensor({2, len}, 1.0, 11);
  const auto spec = stft(w, cfg);
  long double wsq = 0;
  for (std::size_t j = 0; j < cfg.n_fft; ++j) wsq += hann(j, cfg.n_fft) * hann(j, cfg.n_fft);
  long double var = 0;
  for (double v : w.values()) var += (long double)v * v;
  var /= (long double)w.size();
  long double freq = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t t = 4; t + 4 < spec.frames(); ++t, ++used) {
      for (std::size_t f = 0; f < spec.bins(); ++f) {
        const long double m = std::norm(std::complex<long double>(spec.at(c, f, t)));
        freq += (f == 0 || f + 1 == spec.bins()) ? m : 2 * m;
      }
    }
  }
  // Parseval per frame: sum_k |X_k|^2 = n * sum_j (w_j x_j)^2.
  const long double expected = (long double)used * cfg.n_fft * wsq * var;
  EXPECT_NEAR(double(freq / expected), 1.0, 0.01);
}

TEST(Stft, IstftAdjointPassesDotProductTest) {
  for (const StftConfig cfg : {StftConfig{}, StftConfig{32, 8, 2048.0, true}}) {
    const std::size_t len = 3 * cfg.n_fft + 5;
    const std::size_t frames = cfg.frames(len);
    const auto x = test::random_spec(2, cfg.bins(), frames, 5, cfg);
    const auto g = random_tensor({2, len}, 1.0, 6);
    const auto y = istft(x, len);
    long double lhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += (long double)g[i] * y[i];
    const auto a = istft_adjoint(g, cfg, frames);
    long double rhs = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      rhs += (long double)a.values()[i].real() * x.values()[i].real() +
             (long double)a.values()[i].imag() * x.values()[i].imag();
    }
    EXPECT_NEAR(double(lhs), double(rhs), 1e-10 * std::max(1.0, double(std::abs(lhs))));
  }
}

TEST(Stft, RejectsEmptyNonFiniteAndBadConfigs) {
  EXPECT_THROW(stft(Tensor<double>({2, 0}), StftConfig{}), Error);
  Tensor<double> nan({2, 4096});
  nan[100] = std::nan("");
  EXPECT_THROW(stft(nan, StftConfig{}), Error);
  EXPECT_THROW(stft(Tensor<double>({2, 100}), StftConfig{2047, 512, 44100.0, true}), Error);
  EXPECT_THROW(stft(Tensor<double>({2, 100}), StftConfig{2048, 4096, 44100.0, true}), Error);
  EXPECT_THROW(istft(ComplexSpectrogram<double>(2, 1025, 0, StftConfig{}), 100), Error);
}

TEST(Wav, RoundTripsEveryEncoding) {
  test::TempDir dir("wav");
  const auto w = random_tensor({2, 1000}, 0.9, 4);
  struct Case {
    WavFormat fmt;
    double tol;
  };
  for (const Case c : {Case{WavFormat::pcm16, 1.0 / 32768}, Case{WavFormat::pcm24, 1.0 / 8388608},
                       Case{WavFormat::float32, 0.0}}) {
    const auto path = dir.file("x.wav");
    write_wav(path, w, 22050, c.fmt);
    const WavData back = read_wav(path);
    EXPECT_EQ(back.sample_rate, 22050u);
    ASSERT_EQ(back.samples.shape(), w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (c.fmt == WavFormat::float32) {
        EXPECT_EQ(back.samples[i], double(float(w[i])));
      } else {
        EXPECT_NEAR(back.samples[i], w[i], c.tol);
      }
    }
  }
}

TEST(Wav, ReadsMonoAndRejectsGarbage) {
  test::TempDir dir("wavmono");
  write_wav(dir.file("m.wav"), random_tensor({1, 50}, 0.5, 1), 8000, WavFormat::pcm16);
  EXPECT_EQ(read_wav(dir.file("m.wav")).samples.dim(0), 1u);
  std::ofstream(dir.file("bad.wav")) << "not a wav file at all";
  EXPECT_THROW(read_wav(dir.file("bad.wav")), Error);
  EXPECT_THROW(read_wav(dir.file("missing.wav")), Error);
}

TEST(Spectrogram, MagnitudeCsvHasBinRowsAndFrameColumns) {
  test::TempDir dir("csv");
  const StftConfig cfg{32, 8, 2048.0, true};
  const auto spec = stft(random_tensor({2, 100}, 1.0, 2), cfg);
  write_magnitude_csv(spec, 1, dir.file("m.csv"));
  std::ifstream is(dir.file("m.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(std::size_t(std::count(line.begin(), line.end(), ',')) + 1, spec.frames());
  }
  EXPECT_EQ(rows, spec.bins());
}

}  // namespace
}  // namespace tsbm
