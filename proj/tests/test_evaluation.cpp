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

#include "test_util.hpp"

namespace tsbm {
namespace {

using test::random_tensor;

// Estimate whose error energy is 10^(-db/10) of the reference energy.
Tensor<double> at_sdr(const Tensor<double>& ref, double db) {
  Tensor<double> e = ref;
  const double a = std::pow(10.0, -db / 20.0);
  for (auto& v : e.values()) v *= 1.0 - a;
  return e;
}

TEST(Sdr, HalfAmplitudeEstimateIsSixDecibels) {
  const auto ref = random_tensor({2, 1000}, 1.0, 1);
  Tensor<double> est = ref;
  for (auto& v : est.values()) v *= 0.5;
  EXPECT_NEAR(sdr(ref, est), 20 * std::log10(2.0), 1e-9);
  EXPECT_NEAR(sdr(ref, est), 6.0206, 1e-4);
}

TEST(Sdr, PerfectEstimateClampsAtHundred) {
  const auto ref = random_tensor({2, 1000}, 1.0, 2);
  EXPECT_NEAR(sdr(ref, ref), 100.0, 1e-9);
}

TEST(Sdr, SilentEstimateIsZeroDecibels) {
  const auto ref = random_tensor({2, 1000}, 1.0, 3);
  EXPECT_NEAR(sdr(ref, Tensor<double>({2, 1000})), 0.0, 1e-12);
}

TEST(Sdr, InvariantToJointScaling) {
  const auto ref = random_tensor({2, 500}, 1.0, 4), est = random_tensor({2, 500}, 1.0, 5);
  Tensor<double> r3 = ref, e3 = est;
  for (auto& v : r3.values()) v *= 3.0;
  for (auto& v : e3.values()) v *= 3.0;
  EXPECT_NEAR(sdr(ref, est), sdr(r3, e3), 1e-10);
}

TEST(Sdr, Errors) {
  EXPECT_THROW(sdr(Tensor<double>({2, 4}), Tensor<double>({2, 4})), Error);
  EXPECT_THROW(sdr(Tensor<double>({2, 4}, 1.0), Tensor<double>({2, 5})), Error);
}

TEST(Usdr, MeanOverSongs) {
  const auto ref = random_tensor({2, 800}, 1.0, 6);
  std::vector<SongPair<double>> songs{{{ref}, {at_sdr(ref, 4.0)}}, {{ref}, {at_sdr(ref, 8.0)}}};
  const auto u = usdr(songs);
  ASSERT_EQ(u.size(), 1u);
  EXPECT_NEAR(u[0], 6.0, 1e-9);
}

TEST(Csdr, MedianOfPooledChunks) {
  const std::size_t sr = 100;
  auto ref = random_tensor({2, 3 * sr + 40}, 1.0, 7);
  Tensor<double> est = ref;
  const double dbs[3] = {50.0, 2.0, 10.0};
  for (std::size_t k = 0; k < 3; ++k) {
    const double a = std::pow(10.0, -dbs[k] / 20.0);
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t j = 0; j < sr; ++j) est[c * ref.dim(1) + k * sr + j] *= 1.0 - a;
    }
  }
  std::vector<ChunkRecord> audit;
  const auto v = csdr(std::vector<SongPair<double>>{{{ref}, {est}}}, sr, &audit);
  EXPECT_NEAR(v[0], 10.0, 1e-9);
  ASSERT_EQ(audit.size(), 3u);  // partial tail dropped
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(audit[k].sdr, dbs[k], 1e-9);
}

TEST(Csdr, SilentReferenceChunksAreSkipped) {
  const std::size_t sr = 50;
  auto ref = random_tensor({2, 4 * sr}, 1.0, 8);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t j = sr; j < 2 * sr; ++j) ref[c * 4 * sr + j] = 0.0;
  }
  Tensor<double> est = ref;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t j = 0; j < 4 * sr; ++j) est[c * 4 * sr + j] *= j < 3 * sr ? 0.5 : 0.9;
  }
  std::vector<ChunkRecord> audit;
  const auto v = csdr(std::vector<SongPair<double>>{{{ref}, {est}}}, sr, &audit);
  ASSERT_EQ(audit.size(), 4u);
  EXPECT_TRUE(audit[1].skipped);
  EXPECT_EQ(std::count_if(audit.begin(), audit.end(), [](auto& c) { return c.skipped; }), 1);
  // Remaining chunks: 6.02, 6.02, 20 dB.
  EXPECT_NEAR(v[0], 20 * std::log10(2.0), 1e-9);
  Tensor<double> silent({2, 4 * sr});
  EXPECT_THROW(csdr(std::vector<SongPair<double>>{{{silent}, {silent}}}, sr), Error);
}

TEST(Report, WritesOneRowPerSourceAndChunk) {
  const auto ref = random_tensor({2, 300}, 1.0, 9), ref2 = random_tensor({2, 300}, 1.0, 10);
  std::vector<SongPair<double>> songs{{{ref, ref2}, {at_sdr(ref, 3.0), at_sdr(ref2, 9.0)}}};
  const auto r = evaluate(songs, 100, {"vocals", "bass"});
  EXPECT_NEAR(r.usdr_overall, 6.0, 1e-9);
  EXPECT_NEAR(r.csdr_overall, 6.0, 1e-9);
  test::TempDir dir("report");
  write_report_csv(r, dir.file("r.csv"));
  write_chunk_csv(r, dir.file("c.csv"));
  std::ifstream a(dir.file("r.csv")), b(dir.file("c.csv"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(a, line)) ++rows;
  EXPECT_EQ(rows, 3u);
  rows = 0;
  while (std::getline(b, line)) ++rows;
  EXPECT_EQ(rows, 7u);
  EXPECT_THROW(evaluate(songs, 100, {"vocals"}), Error);
}

TEST(Segmentation, TenSecondsAtHalfSecondHop) {
  const std::size_t sr = 44100;
  const auto off = segment_offsets(10 * sr, 3 * sr, sr / 2);
  ASSERT_EQ(off.size(), 15u);
  EXPECT_EQ(off.back() + 3 * sr, 10 * sr);
  const auto tail = segment_offsets(10 * sr + 1000, 3 * sr, sr / 2);
  EXPECT_EQ(tail.size(), 16u);
  EXPECT_GE(tail.back() + 3 * sr, 10 * sr + 1000);
  EXPECT_EQ(segment_offsets(100, 3 * sr, sr / 2), (std::vector<std::size_t>{0}));
  EXPECT_THROW(segment_offsets(100, 10, 20), Error);
}

TEST(Segmentation, TriangularWeightsAreAPartitionOfUnityUpToScale) {
  const std::size_t window = 600, hop = 100, len = 3000;
  const auto w = triangular_weights<double>(window);
  for (double v : w) EXPECT_GT(v, 0.0);
  for (std::size_t j = 0; j < window; ++j) EXPECT_NEAR(w[j], w[window - 1 - j], 1e-12);
  std::vector<double> sum(len, 0.0);
  for (std::size_t off : segment_offsets(len, window, hop)) {
    for (std::size_t j = 0; j < window && off + j < len; ++j) sum[off + j] += w[j];
  }
  // Away from the ends the overlapped triangles sum to window / (2 hop).
  for (std::size_t j = window; j + window < len; ++j) EXPECT_NEAR(sum[j], 3.0, 1e-12);
}

TEST(Segmentation, IdentityModelReturnsTheInput) {
  ModelConfig cfg = ModelConfig::toy();
  auto p = ModelParams<double>::init(cfg, 11);
  make_identity(p);
  const std::size_t len = std::size_t(4.3 * cfg.stft.sample_rate);
  const auto wave = random_tensor({2, len}, 0.5, 12);
  const auto r = segment_and_separate(wave, p, cfg, 1.0, 0.25);
  ASSERT_EQ(r.stage2.size(), cfg.n_sources);
  for (std::size_t i = 0; i < cfg.n_sources; ++i) {
    EXPECT_EQ(r.stage1[i].shape(), wave.shape());
    EXPECT_EQ(r.stage2[i].shape(), wave.shape());
    EXPECT_LE(max_abs_diff(r.stage2[i], wave), 1e-6);
  }
  EXPECT_THROW(segment_and_separate(random_tensor({1, len}, 0.5, 1), p, cfg), Error);
}

}  // namespace
}  // namespace tsbm
