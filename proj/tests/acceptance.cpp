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

// Release acceptance criteria. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Arguments select a subset by number.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "test_util.hpp"

namespace tsbm {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TSBM_CLI) + " " + args + " > /dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// 1. Scan and dual SSD forms agree on random instances.
Outcome dual_form() {
  Rng rng(101);
  std::uniform_int_distribution<std::size_t> len(1, 64), heads(1, 4), state(1, 16), hp(1, 8);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const auto s = random_ssd_instance<double>(rng, len(rng), heads(rng), hp(rng), state(rng));
    worst = std::max(worst, max_abs_diff(ssd_scan(s.x, s.abar, s.bbar, s.c),
                                         ssd_dual(s.x, s.abar, s.bbar, s.c)));
  }
  return {worst <= 1e-10, fmt("max |scan - dual| %.3g over 200 instances", worst)};
}

// 2. Analytic gradients of the two-stage loss on the toy model.
Outcome gradient_check() {
  const ModelConfig cfg = ModelConfig::toy();
  const auto rep = grad_check(cfg, 7);
  return {rep.max_rel_error <= 1e-4,
          fmt("max relative error %.3g", rep.max_rel_error) + " at " + rep.worst + ", " +
              std::to_string(rep.checked) + " scalars"};
}

// 3. STFT round trip on one second of stereo noise.
Outcome round_trip() {
  const auto w = test::random_tensor({2, 44100}, 1.0, 3);
  const double err = peak_relative_error(w, istft(stft(w, StftConfig{}), w.dim(1)));
  return {err <= 1e-6, fmt("peak-relative error %.3g", err)};
}

// 4. Identity heads through segmented inference on 10 s.
Outcome identity() {
  const ModelConfig cfg = identity_probe_config();
  auto p = ModelParams<double>::init(cfg, 4);
  make_identity(p);
  const auto w = test::random_tensor({2, std::size_t(10 * cfg.stft.sample_rate)}, 0.5, 4);
  const auto out = segment_and_separate(w, p, cfg);
  double worst = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    worst = std::max({worst, peak_relative_error(w, out.stage1[i]),
                      peak_relative_error(w, out.stage2[i])});
  }
  return {out.stage2.size() == 4 && worst <= 1e-4,
          fmt("peak-relative error %.3g over 4 sources", worst)};
}

// 5. Reported total equals stage1 + stage2 on every step of a toy run.
Outcome loss_additivity() {
  TrainConfig tc;
  tc.seed = 5;
  tc.batch = 2;
  tc.steps_per_epoch = 50;
  Trainer<double> tr(ModelConfig::toy(), tc);
  double worst = 0;
  for (std::size_t s = 1; s <= 50; ++s) {
    const auto row = tr.step(s);
    const LossReport& r = tr.last_report();
    double terms = 0;
    for (const auto& src : r.per_source) terms += src[0].sum() + src[1].sum();
    worst = std::max({worst, std::abs(r.total - (r.stage1 + r.stage2)) / std::abs(r.total),
                      std::abs(row.total - (row.stage1 + row.stage2)) / std::abs(row.total),
                      std::abs(r.total - terms) / std::abs(r.total)});
  }
  return {worst <= 1e-12, fmt("max relative deviation %.3g over 50 steps", worst)};
}

// 6. Metric oracles against brute-force recomputation.
double brute_sdr(const std::vector<double>& r, const std::vector<double>& e) {
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    num += (long double)r[i] * r[i];
    den += ((long double)r[i] - e[i]) * ((long double)r[i] - e[i]);
  }
  return double(10 * std::log10(num / std::max(den, (long double)1e-10 * num)));
}

Outcome metrics() {
  const auto ref = test::random_tensor({2, 1000}, 1.0, 6);
  Tensor<double> half = ref;
  for (auto& v : half.values()) v *= 0.5;
  const double six = sdr(ref, half);

  const std::size_t sr = 1000, songs = 3;
  const auto tracks = make_synthetic_tracks(6, 3.5, double(sr), songs);
  Rng rng(66);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<SongPair<double>> pairs(songs);
  for (std::size_t s = 0; s < songs; ++s) {
    for (std::size_t i = 0; i < 4; ++i) {
      Tensor<double> est = tracks[i][s];
      const double level = 0.02 * double(1 + (s * 4 + i) % 7);
      for (auto& v : est.values()) v += level * noise(rng);
      pairs[s].refs.push_back(tracks[i][s]);
      pairs[s].ests.push_back(est);
    }
  }
  const SdrReport rep = evaluate(pairs, sr, {"vocals", "bass", "drums", "other"});

  bool exact = true;
  for (std::size_t i = 0; i < 4; ++i) {
    double mean = 0;
    std::vector<double> chunks;
    for (std::size_t s = 0; s < songs; ++s) {
      const auto& r = pairs[s].refs[i];
      const auto& e = pairs[s].ests[i];
      mean += brute_sdr(r.values(), e.values());
      const std::size_t len = r.dim(1);
      for (std::size_t k = 0; (k + 1) * sr <= len; ++k) {
        std::vector<double> rc, ec;
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t j = k * sr; j < (k + 1) * sr; ++j) {
            rc.push_back(r[c * len + j]);
            ec.push_back(e[c * len + j]);
          }
        }
        double energy = 0;
        for (double v : rc) energy += v * v;
        if (energy > 0) chunks.push_back(brute_sdr(rc, ec));
      }
    }
    mean /= double(songs);
    std::sort(chunks.begin(), chunks.end());
    const std::size_t n = chunks.size();
    const double med = n % 2 ? chunks[n / 2] : 0.5 * (chunks[n / 2 - 1] + chunks[n / 2]);
    exact = exact && mean == rep.usdr[i] && med == rep.csdr[i];
  }
  return {std::abs(six - 6.0206) <= 1e-3 && exact,
          fmt("sdr(ref, ref/2) = %.6f dB; ", six) +
              (exact ? "uSDR/cSDR match brute force exactly" : "uSDR/cSDR MISMATCH")};
}

// 7. The desk model learns to separate two synthetic sources.
Outcome desk_learning() {
  const ModelConfig cfg = ModelConfig::desk();
  TrainConfig tc;
  tc.seed = 7;
  tc.epochs = 4;
  tc.steps_per_epoch = 500;
  tc.batch = 2;
  tc.val_items = 8;
  Trainer<double> tr(cfg, tc);
  tr.run("");
  const Batch<double>& val = tr.validation_batch();
  double model = 0, baseline = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < val.mixtures.size(); ++b) {
    const auto res = separate(val.mixtures[b], tr.params(), cfg);
    for (std::size_t i = 0; i < cfg.n_sources; ++i) {
      model += sdr(val.stems[b][i], res.stage2_waves[i]);
      baseline += sdr(val.stems[b][i], val.mixtures[b]);
      ++count;
    }
  }
  model /= double(count);
  baseline /= double(count);
  const double gain = model - baseline;
  return {gain >= 10.0, fmt("stage-2 SDR %.2f dB", model) + fmt(" vs mixture %.2f dB", baseline) +
                            fmt(" (+%.2f dB) after 2000 steps", gain)};
}

// 8. Parameter and MAC accounting near the reference table.
Outcome accounting() {
  const double pf = double(count_params(ModelConfig::full())) / 1e6;
  const double pl = double(count_params(ModelConfig::lightweight())) / 1e6;
  const double mf = estimate_macs(ModelConfig::full(), 1.0).total() / 1e9;
  const double ml = estimate_macs(ModelConfig::lightweight(), 1.0).total() / 1e9;
  const bool ok = std::abs(pf / 35.52 - 1) <= 0.20 && std::abs(pl / 27.71 - 1) <= 0.20 &&
                  std::abs(mf / 212.11 - 1) <= 0.25 && std::abs(ml / 107.95 - 1) <= 0.25;
  return {ok, fmt("full %.2f M", pf) + fmt(" / %.2f G MACs/s; ", mf) +
                  fmt("lightweight %.2f M", pl) + fmt(" / %.2f G MACs/s", ml)};
}

// 9. Training and batch mixing replay bit-identically.
Outcome determinism() {
  test::TempDir dir("accept_det");
  const std::string args = "train --config toy --epochs 1 --steps 5 --batch 2 --seed 9 --out ";
  const bool ran = run_cli(args + dir.file("a")) == 0 && run_cli(args + dir.file("b")) == 0;
  const std::string a = slurp(dir.file("a/checkpoint.bin"));
  const bool same_ckpt = ran && !a.empty() && a == slurp(dir.file("b/checkpoint.bin"));

  const auto pools = make_synthetic_tracks(9, 3.0, 2048.0, 2);
  const auto x = mix_batch(pools, MixConfig{4, -3.0, 3.0}, 99);
  const auto y = mix_batch(pools, MixConfig{4, -3.0, 3.0}, 99);
  bool same_batch = true;
  for (std::size_t i = 0; i < 4; ++i) {
    same_batch = same_batch && x.mixtures[i].values() == y.mixtures[i].values();
    for (std::size_t s = 0; s < 4; ++s) {
      same_batch = same_batch && x.stems[i][s].values() == y.stems[i][s].values();
    }
  }
  return {same_ckpt && same_batch,
          std::string("checkpoints ") + (same_ckpt ? "bit-identical" : "DIFFER") +
              ", mix_batch replay " + (same_batch ? "bit-identical" : "DIFFERS")};
}

// 10. Dual/scan runtime ratio grows with sequence length.
Outcome bench_ratio() {
  test::TempDir dir("accept_bench");
  const std::string csv = dir.file("bench.csv");
  if (run_cli("bench --lengths 256,512,1024,2048 --repeats 3 --out " + csv) != 0) {
    return {false, "bench command failed"};
  }
  std::ifstream is(csv);
  std::string line;
  std::getline(is, line);
  std::vector<double> ratios;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string f;
    for (int k = 0; k < 4; ++k) std::getline(ss, f, ',');
    ratios.push_back(std::stod(f));
  }
  bool monotone = ratios.size() == 4;
  std::string detail = "dual/scan ratios";
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (i) monotone = monotone && ratios[i] > ratios[i - 1];
    detail += fmt(" %.2f", ratios[i]);
  }
  return {monotone, detail + " at T = 256, 512, 1024, 2048"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  // 0: no runtime bound
  std::function<Outcome()> fn;
};

}  // namespace
}  // namespace tsbm

int main(int argc, char** argv) {
  using namespace tsbm;
  const std::vector<Criterion> all{
      {1, "dual-form equivalence", 10, dual_form},
      {2, "gradient check", 60, gradient_check},
      {3, "stft round trip", 1, round_trip},
      {4, "two-stage identity", 30, identity},
      {5, "loss additivity", 0, loss_additivity},
      {6, "metric oracles", 0, metrics},
      {7, "desk-scale learning", 1800, desk_learning},
      {8, "parameter and MAC accounting", 1, accounting},
      {9, "determinism", 0, determinism},
      {10, "benchmark sanity", 0, bench_ratio},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double t = seconds_since(t0);
    const bool in_time = c.budget_seconds == 0 || t < c.budget_seconds;
    if (!in_time) o.detail += fmt("; over the %.0f s budget", c.budget_seconds);
    const bool pass = o.passed && in_time;
    failures += !pass;
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), t);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
