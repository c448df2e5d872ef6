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

#include "test_util.hpp"

namespace tsbm {
namespace {

using test::random_features;
using test::random_spec;

// Normalize over the row with eps 1e-5, then gain/bias.
std::vector<double> norm_ref(const std::vector<double>& x, const Tensor<double>& gain,
                             const Tensor<double>& bias) {
  long double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = double((x[i] - mean) / std::sqrt(var + 1e-5L)) * gain[i] + bias[i];
  }
  return y;
}

std::vector<double> affine_ref(const std::vector<double>& x, const Linear<double>& l) {
  std::vector<double> y(l.out());
  for (std::size_t o = 0; o < l.out(); ++o) {
    long double s = l.bias.empty() ? 0 : l.bias[o];
    for (std::size_t i = 0; i < l.in(); ++i) s += (long double)l.weight[o * l.in() + i] * x[i];
    y[o] = double(s);
  }
  return y;
}

BandSplitParams<double> random_split(const BandScheme& s, std::size_t n, std::uint64_t seed) {
  auto p = BandSplitParams<double>::make(s, n);
  Rng rng(seed);
  p.init(rng);
  for (auto& b : p.bands) {
    fill_uniform(b.norm.bias, 0.3, rng);
    for (auto& g : b.norm.gain.values()) g = 1.0 + 0.2 * std::uniform_real_distribution<>(-1, 1)(rng);
  }
  return p;
}

MergeHeadParams<double> random_head(const BandScheme& s, std::size_t n, std::size_t h,
                                    std::uint64_t seed) {
  auto p = MergeHeadParams<double>::make(s, n, h);
  Rng rng(seed);
  p.init(rng);
  for (auto& b : p.bands) fill_uniform(b.norm.bias, 0.3, rng);
  return p;
}

TEST(BandScheme, DefaultHas57BandsCovering1025Bins) {
  const auto s = default_band_scheme(1025);
  EXPECT_EQ(s.bands(), 57u);
  EXPECT_EQ(s.total(), 1025u);
  EXPECT_NO_THROW(s.validate(1025));
  for (std::size_t k = 0; k < s.bands(); ++k) {
    EXPECT_GE(s.widths[k], 1u);
    if (k) {
      EXPECT_LE(s.widths[k - 1], s.widths[k]);
    }
  }
}

TEST(BandScheme, UniformOver57BinsIsAllOnes) {
  const auto s = uniform_band_scheme(57, 57);
  EXPECT_EQ(s.widths, std::vector<std::size_t>(57, 1));
}

TEST(BandScheme, OffsetsAreExclusivePrefixSums) {
  const BandScheme s{{3, 1, 4, 1, 5}};
  EXPECT_EQ(s.offsets(), (std::vector<std::size_t>{0, 3, 4, 8, 9}));
}

TEST(BandScheme, RejectsTooFewBinsAndBadPartitions) {
  EXPECT_THROW(default_band_scheme(56), Error);
  EXPECT_THROW((BandScheme{{1, 0, 2}}).validate(3), Error);
  EXPECT_THROW((BandScheme{{1, 2}}).validate(4), Error);
  EXPECT_THROW(BandScheme{}.validate(0), Error);
}

TEST(BandScheme, CustomBinCountsStillPartition) {
  for (std::size_t bins : {57u, 129u, 513u, 2049u}) {
    const auto s = default_band_scheme(bins, 44100.0, 57);
    EXPECT_EQ(s.bands(), 57u);
    EXPECT_EQ(s.total(), bins);
  }
}

TEST(BandSplit, FullSizeShape) {
  const auto s = default_band_scheme(1025);
  const auto x = random_spec(2, 1025, 87, 1);
  const auto z = band_split(x, s, random_split(s, 128, 2));
  EXPECT_EQ(z.channels(), 2u);
  EXPECT_EQ(z.features(), 128u);
  EXPECT_EQ(z.bands(), 57u);
  EXPECT_EQ(z.frames(), 87u);
  EXPECT_TRUE(z.all_finite());
}

TEST(BandSplit, ZeroAffineGivesZeroFeatures) {
  const auto s = uniform_band_scheme(17, 4);
  auto p = BandSplitParams<double>::make(s, 6);
  const auto z = band_split(random_spec(2, 17, 5, 3), s, p);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(BandSplit, InvariantToPositiveScaling) {
  const auto s = uniform_band_scheme(17, 4);
  const auto p = random_split(s, 6, 4);
  auto x = random_spec(2, 17, 5, 5);
  // Loud enough that the normalization epsilon is negligible.
  for (auto& v : x.values()) v *= 10.0;
  const auto z1 = band_split(x, s, p);
  for (auto& v : x.values()) v *= 37.0;
  const auto z2 = band_split(x, s, p);
  EXPECT_LT(test::max_abs_values(z1, z2), 1e-5);
}

TEST(BandSplit, EachBandDependsOnlyOnItsOwnBins) {
  const BandScheme s{{2, 3, 5, 7}};
  const std::size_t n = 5;
  const auto p = random_split(s, n, 6);
  const auto x = random_spec(2, 17, 4, 7);
  const auto z = band_split(x, s, p);
  const auto off = s.offsets();
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t k = 0; k < s.bands(); ++k) {
      for (std::size_t t = 0; t < 4; ++t) {
        std::vector<double> in;
        for (std::size_t f = off[k]; f < off[k] + s.widths[k]; ++f) {
          in.push_back(x.at(c, f, t).real());
          in.push_back(x.at(c, f, t).imag());
        }
        const auto y = affine_ref(norm_ref(in, p.bands[k].norm.gain, p.bands[k].norm.bias),
                                  p.bands[k].proj);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(z.at(c, i, k, t), y[i], 1e-12);
      }
    }
  }
}

TEST(BandSplit, RejectsSchemeMismatch) {
  const auto s = uniform_band_scheme(17, 4);
  const auto p = random_split(s, 4, 1);
  EXPECT_THROW(band_split(random_spec(2, 16, 3, 1), s, p), Error);
  EXPECT_THROW(band_split(random_spec(2, 17, 3, 1), uniform_band_scheme(17, 5), p), Error);
}

TEST(MergeHead, FullSizeShape) {
  const auto s = default_band_scheme(1025);
  const auto q = random_features(2, 128, 57, 87, 1);
  const auto m = band_merge_head(q, s, random_head(s, 128, 128, 2), StftConfig{});
  EXPECT_EQ(m.channels(), 2u);
  EXPECT_EQ(m.bins(), 1025u);
  EXPECT_EQ(m.frames(), 87u);
  EXPECT_TRUE(m.all_finite());
}

TEST(MergeHead, GluOfOneAndZeroIsHalf) {
  EXPECT_DOUBLE_EQ(glu(1.0, 0.0), 0.5);
  for (double a : {-3.0, 0.2, 5.0}) {
    for (double b : {-20.0, 0.0, 20.0}) EXPECT_LE(std::abs(glu(a, b)), std::abs(a));
  }
}

TEST(MergeHead, ZeroOutputAffineGivesZero) {
  const auto s = uniform_band_scheme(17, 4);
  auto p = random_head(s, 6, 5, 3);
  for (auto& b : p.bands) {
    b.out.weight.zero();
    b.out.bias.zero();
  }
  const auto m = band_merge_head(random_features(2, 6, 4, 5, 4), s, p, StftConfig{32, 8, 2048.0, true});
  for (const auto& v : m.values()) EXPECT_EQ(v, std::complex<double>(0, 0));
}

TEST(MergeHead, MatchesPerBandReference) {
  const BandScheme s{{2, 3, 5, 7}};
  const std::size_t n = 5, h = 4;
  const auto p = random_head(s, n, h, 8);
  const auto q = random_features(2, n, 4, 3, 9);
  const auto m = band_merge_head(q, s, p, StftConfig{32, 8, 2048.0, true});
  const auto off = s.offsets();
  for (std::size_t k = 0; k < s.bands(); ++k) {
    const std::size_t g = s.widths[k];
    for (std::size_t t = 0; t < 3; ++t) {
      std::vector<double> glu_out[2];
      for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> row(q.row(c, k, t), q.row(c, k, t) + n);
        auto hid = affine_ref(norm_ref(row, p.bands[k].norm.gain, p.bands[k].norm.bias),
                              p.bands[k].hidden);
        for (auto& v : hid) v = std::tanh(v);
        const auto pre = affine_ref(hid, p.bands[k].out);
        for (std::size_t j = 0; j < 4 * g; ++j) {
          glu_out[c].push_back(pre[j] / (1.0 + std::exp(-pre[4 * g + j])));
        }
      }
      // Channel c averages its own first half with the other channel's second half.
      for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t j = 0; j < g; ++j) {
          const double re = 0.5 * (glu_out[c][2 * j] + glu_out[1 - c][2 * g + 2 * j]);
          const double im = 0.5 * (glu_out[c][2 * j + 1] + glu_out[1 - c][2 * g + 2 * j + 1]);
          EXPECT_NEAR(m.at(c, off[k] + j, t).real(), re, 1e-12);
          EXPECT_NEAR(m.at(c, off[k] + j, t).imag(), im, 1e-12);
        }
      }
    }
  }
}

TEST(MergeHead, RejectsDimensionMismatch) {
  const auto s = uniform_band_scheme(17, 4);
  const auto p = random_head(s, 6, 5, 3);
  EXPECT_THROW(band_merge_head(random_features(2, 6, 3, 5, 1), s, p, StftConfig{}), Error);
  EXPECT_THROW(band_merge_head(random_features(1, 6, 4, 5, 1), s, p, StftConfig{}), Error);
}

TEST(BandSplit, BackwardMatchesFiniteDifferences) {
  const BandScheme s{{2, 3, 4}};
  auto p = random_split(s, 4, 10);
  auto x = random_spec(2, 9, 3, 11);
  Tensor<double> xin({x.size() * 2});
  for (std::size_t i = 0; i < x.size(); ++i) {
    xin[2 * i] = x.values()[i].real();
    xin[2 * i + 1] = x.values()[i].imag();
  }
  const auto w = test::random_weights(2 * 4 * 3 * 3, 12);
  auto rebuild = [&] {
    for (std::size_t i = 0; i < x.size(); ++i) x.values()[i] = {xin[2 * i], xin[2 * i + 1]};
  };
  auto grads = zeros_like(p);
  BandSplitCache<double> cache;
  const auto z = band_split(x, s, p, &cache);
  FeatureTensor<double> dz(2, 4, 3, 3);
  dz.values() = w;
  ComplexSpectrogram<double> dx = ComplexSpectrogram<double>::like(x);
  band_split_backward(s, p, cache, dz, grads, &dx);
  Tensor<double> dxin(xin.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) {
    dxin[2 * i] = dx.values()[i].real();
    dxin[2 * i + 1] = dx.values()[i].imag();
  }
  auto params = named_tensors<double>(p);
  auto analytic = named_tensors<double>(grads);
  params.emplace_back("input", &xin);
  analytic.emplace_back("input", &dxin);
  const auto rep = check_gradients(params, analytic, [&] {
    rebuild();
    return test::weighted_sum(band_split(x, s, p).values(), w);
  }, test::all_scalars());
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

TEST(MergeHead, BackwardMatchesFiniteDifferences) {
  const BandScheme s{{2, 3}};
  const std::size_t n = 4, h = 3, frames = 3;
  auto p = random_head(s, n, h, 13);
  Tensor<double> qin({2 * n * 2 * frames});
  Rng rng(14);
  fill_uniform(qin, 1.0, rng);
  FeatureTensor<double> q(2, n, 2, frames);
  auto rebuild = [&] { q.values() = qin.values(); };
  rebuild();
  const StftConfig cfg{8, 2, 1000.0, true};
  const auto w = test::random_weights(2 * 5 * frames * 2, 15);
  auto grads = zeros_like(p);
  MergeHeadCache<double> cache;
  band_merge_head(q, s, p, cfg, &cache);
  ComplexSpectrogram<double> dm(2, 5, frames, cfg);
  for (std::size_t i = 0; i < dm.size(); ++i) dm.values()[i] = {w[2 * i], w[2 * i + 1]};
  FeatureTensor<double> dq(2, n, 2, frames);
  band_merge_head_backward(s, p, cache, dm, grads, dq);
  Tensor<double> dqin(qin.shape());
  dqin.values() = dq.values();
  auto params = named_tensors<double>(p);
  auto analytic = named_tensors<double>(grads);
  params.emplace_back("input", &qin);
  analytic.emplace_back("input", &dqin);
  const auto rep = check_gradients(params, analytic, [&] {
    rebuild();
    return test::weighted_sum(band_merge_head(q, s, p, cfg).values(), w);
  }, test::all_scalars());
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

}  // namespace
}  // namespace tsbm
