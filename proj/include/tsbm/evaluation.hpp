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

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "tsbm/model.hpp"

namespace tsbm {

inline constexpr double kSdrEps = 1e-10;  // caps SDR at 100 dB

/// Energy-ratio SDR with channels pooled; nullopt for a silent reference.
template <typename T>
std::optional<double> try_sdr(const T* ref, const T* est, std::size_t n) {
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const long double r = ref[i], e = r - (long double)est[i];
    num += r * r;
    den += e * e;
  }
  if (num == 0) return std::nullopt;
  return double(10 * std::log10(num / std::max(den, (long double)kSdrEps * num)));
}

template <typename T>
double sdr(const Tensor<T>& ref, const Tensor<T>& est) {
  if (ref.shape() != est.shape()) throw Error("sdr: shape mismatch");
  const auto v = try_sdr(ref.data(), est.data(), ref.size());
  if (!v) throw Error("sdr: silent reference");
  return *v;
}

/// References and estimates of one song, one [C, L] tensor per source.
template <typename T>
struct SongPair {
  std::vector<Tensor<T>> refs;
  std::vector<Tensor<T>> ests;
};

struct ChunkRecord {
  std::size_t song = 0;
  std::size_t source = 0;
  std::size_t chunk = 0;
  std::size_t start = 0;  // samples
  double sdr = 0;
  bool skipped = false;   // silent reference
};

struct SdrReport {
  std::vector<std::string> sources;
  std::vector<double> usdr;  // per source, mean over songs
  std::vector<double> csdr;  // per source, median over pooled chunks
  double usdr_overall = 0;   // mean of the per-source values
  double csdr_overall = 0;
  std::vector<ChunkRecord> chunks;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

template <typename T>
void check_songs(const std::vector<SongPair<T>>& songs) {
  if (songs.empty()) throw Error("sdr: no songs");
  const std::size_t ns = songs[0].refs.size();
  for (const auto& s : songs) {
    if (s.refs.size() != ns || s.ests.size() != ns) throw Error("sdr: source count mismatch");
    for (std::size_t i = 0; i < ns; ++i) {
      if (s.refs[i].shape() != s.ests[i].shape() || s.refs[i].rank() != 2) {
        throw Error("sdr: reference/estimate shapes differ");
      }
    }
  }
}

}  // namespace detail

/// Per-source whole-song SDR averaged over songs.
template <typename T>
std::vector<double> usdr(const std::vector<SongPair<T>>& songs) {
  detail::check_songs(songs);
  const std::size_t ns = songs[0].refs.size();
  std::vector<double> out(ns, 0.0);
  for (std::size_t i = 0; i < ns; ++i) {
    for (const auto& s : songs) out[i] += sdr(s.refs[i], s.ests[i]);
    out[i] /= double(songs.size());
  }
  return out;
}

/// Non-overlapping chunks of `chunk` samples (channels pooled); the partial
/// tail chunk is dropped. Silent-reference chunks are recorded as skipped.
template <typename T>
std::vector<ChunkRecord> chunk_sdrs(const std::vector<SongPair<T>>& songs, std::size_t chunk) {
  detail::check_songs(songs);
  if (chunk == 0) throw Error("csdr: zero chunk length");
  std::vector<ChunkRecord> out;
  for (std::size_t si = 0; si < songs.size(); ++si) {
    const auto& s = songs[si];
    for (std::size_t i = 0; i < s.refs.size(); ++i) {
      const std::size_t ch = s.refs[i].dim(0), len = s.refs[i].dim(1);
      std::vector<T> r(ch * chunk), e(ch * chunk);
      for (std::size_t k = 0; (k + 1) * chunk <= len; ++k) {
        for (std::size_t c = 0; c < ch; ++c) {
          std::copy_n(s.refs[i].data() + c * len + k * chunk, chunk, r.data() + c * chunk);
          std::copy_n(s.ests[i].data() + c * len + k * chunk, chunk, e.data() + c * chunk);
        }
        const auto v = try_sdr(r.data(), e.data(), r.size());
        out.push_back({si, i, k, k * chunk, v.value_or(0.0), !v.has_value()});
      }
    }
  }
  return out;
}

/// Per-source median of 1 s chunk SDRs pooled across songs.
template <typename T>
std::vector<double> csdr(const std::vector<SongPair<T>>& songs, std::size_t sample_rate,
                         std::vector<ChunkRecord>* audit = nullptr) {
  const auto chunks = chunk_sdrs(songs, sample_rate);
  const std::size_t ns = songs[0].refs.size();
  std::vector<double> out(ns);
  for (std::size_t i = 0; i < ns; ++i) {
    std::vector<double> v;
    for (const auto& c : chunks) {
      if (c.source == i && !c.skipped) v.push_back(c.sdr);
    }
    if (v.empty()) throw Error("csdr: no valid chunks for source " + std::to_string(i));
    out[i] = median(v);
  }
  if (audit) *audit = chunks;
  return out;
}

template <typename T>
SdrReport evaluate(const std::vector<SongPair<T>>& songs, std::size_t sample_rate,
                   std::vector<std::string> names) {
  SdrReport r;
  r.usdr = usdr(songs);
  r.csdr = csdr(songs, sample_rate, &r.chunks);
  if (names.size() != r.usdr.size()) throw Error("evaluate: name count mismatch");
  r.sources = std::move(names);
  for (std::size_t i = 0; i < r.usdr.size(); ++i) {
    r.usdr_overall += r.usdr[i] / double(r.usdr.size());
    r.csdr_overall += r.csdr[i] / double(r.csdr.size());
  }
  return r;
}

inline void write_report_csv(const SdrReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os.precision(10);
  os << "source,usdr_db,csdr_db\n";
  for (std::size_t i = 0; i < r.sources.size(); ++i) {
    os << r.sources[i] << ',' << r.usdr[i] << ',' << r.csdr[i] << '\n';
  }
}

inline void write_chunk_csv(const SdrReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os.precision(10);
  os << "song,source,chunk,start_sample,sdr_db,skipped\n";
  for (const auto& c : r.chunks) {
    os << c.song << ',' << r.sources.at(c.source) << ',' << c.chunk << ',' << c.start << ','
       << c.sdr << ',' << (c.skipped ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Segmented inference

/// Segment start offsets: full windows every `hop` samples, plus one
/// zero-padded tail window when the last full window stops short of the
/// end. Inputs shorter than a window give one padded segment.
inline std::vector<std::size_t> segment_offsets(std::size_t length, std::size_t window,
                                                std::size_t hop) {
  if (window == 0 || hop == 0 || hop > window) throw Error("segments: require 0 < hop <= window");
  if (length == 0) throw Error("segments: empty input");
  std::vector<std::size_t> out{0};
  while (out.back() + window < length) out.push_back(out.back() + hop);
  return out;
}

/// Triangular weight, symmetric and strictly positive on [0, window).
template <typename T>
std::vector<T> triangular_weights(std::size_t window) {
  std::vector<T> w(window);
  for (std::size_t j = 0; j < window; ++j) {
    w[j] = T(1) - std::abs(T(2) * (T(j) + T(0.5)) / T(window) - T(1));
  }
  return w;
}

template <typename T>
struct StitchedResult {
  std::vector<Tensor<T>> stage1;
  std::vector<Tensor<T>> stage2;
};

/// Separates overlapping windows independently and recombines them by
/// triangular-weighted overlap-add normalized by the weight sum.
template <typename T>
StitchedResult<T> segment_and_separate(const Tensor<T>& wave, const ModelParams<T>& params,
                                       const ModelConfig& cfg, double window_seconds = 3.0,
                                       double hop_seconds = 0.5) {
  if (wave.rank() != 2 || wave.dim(0) != 2) throw Error("segment_and_separate: expected [2, L]");
  const std::size_t len = wave.dim(1);
  const auto window = std::size_t(std::llround(window_seconds * cfg.stft.sample_rate));
  const auto hop = std::size_t(std::llround(hop_seconds * cfg.stft.sample_rate));
  const auto offsets = segment_offsets(len, window, hop);
  const auto w = triangular_weights<T>(window);

  StitchedResult<T> out;
  for (std::size_t i = 0; i < cfg.n_sources; ++i) {
    out.stage1.emplace_back(std::vector<std::size_t>{2, len});
    out.stage2.emplace_back(std::vector<std::size_t>{2, len});
  }
  std::vector<T> wsum(len, T(0));
  Tensor<T> seg({2, window});
  for (std::size_t s = 0; s < offsets.size(); ++s) {
    const std::size_t off = offsets[s];
    const std::size_t n = std::min(window, len - off);
    seg.zero();
    for (std::size_t c = 0; c < 2; ++c) {
      std::copy_n(wave.data() + c * len + off, n, seg.data() + c * window);
    }
    SeparationResult<T> r;
    try {
      r = separate(seg, params, cfg);
    } catch (const Error& e) {
      throw Error("segment " + std::to_string(s) + ": " + e.what());
    }
    for (std::size_t j = 0; j < n; ++j) wsum[off + j] += w[j];
    for (std::size_t i = 0; i < cfg.n_sources; ++i) {
      for (std::size_t c = 0; c < 2; ++c) {
        const T* a = r.stage1_waves[i].data() + c * window;
        const T* b = r.stage2_waves[i].data() + c * window;
        T* ya = out.stage1[i].data() + c * len + off;
        T* yb = out.stage2[i].data() + c * len + off;
        for (std::size_t j = 0; j < n; ++j) {
          ya[j] += w[j] * a[j];
          yb[j] += w[j] * b[j];
        }
      }
    }
  }
  for (std::size_t i = 0; i < cfg.n_sources; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t j = 0; j < len; ++j) {
        out.stage1[i][c * len + j] /= wsum[j];
        out.stage2[i][c * len + j] /= wsum[j];
      }
    }
  }
  return out;
}

}  // namespace tsbm
