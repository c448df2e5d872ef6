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

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tsbm/tensor.hpp"

namespace tsbm {

enum class WavFormat { pcm16, pcm24, float32 };

struct WavData {
  std::size_t sample_rate = 0;
  Tensor<double> samples;  // [channels, length], nominal range [-1, 1]
};

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char(v >> 8));
}

}  // namespace detail

inline WavData read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error(path + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::size_t size = detail::read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw Error(path + ": truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw Error(path + ": malformed fmt chunk");
      format = detail::read_u16(bytes.data() + body);
      channels = detail::read_u16(bytes.data() + body + 2);
      rate = detail::read_u32(bytes.data() + body + 4);
      bits = detail::read_u16(bytes.data() + body + 14);
      if (format == 0xFFFE && size >= 26) format = detail::read_u16(bytes.data() + body + 24);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = size;
    }
    pos = body + size + (size & 1);
  }
  if (!data || channels == 0) throw Error(path + ": missing fmt or data chunk");

  const bool pcm = format == 1 && (bits == 16 || bits == 24);
  const bool flt = format == 3 && bits == 32;
  if (!pcm && !flt) {
    throw Error(path + ": unsupported WAV encoding (16/24-bit PCM or 32-bit float only)");
  }
  const std::size_t width = bits / 8;
  const std::size_t length = data_size / (width * channels);
  WavData out;
  out.sample_rate = rate;
  out.samples = Tensor<double>({channels, length});
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * channels + c) * width;
      double v = 0;
      if (flt) {
        float f;
        std::uint32_t u = detail::read_u32(p);
        std::memcpy(&f, &u, 4);
        v = f;
      } else if (bits == 16) {
        v = double(std::int16_t(detail::read_u16(p))) / 32768.0;
      } else {
        std::int32_t s = std::int32_t(p[0]) | (std::int32_t(p[1]) << 8) |
                         (std::int32_t(p[2]) << 16);
        if (s & 0x800000) s -= 0x1000000;
        v = double(s) / 8388608.0;
      }
      out.samples[c * length + i] = v;
    }
  }
  return out;
}

template <typename T>
void write_wav(const std::string& path, const Tensor<T>& samples,
               std::size_t sample_rate, WavFormat fmt = WavFormat::float32) {
  if (samples.rank() != 2) throw Error("write_wav: expected [channels, length]");
  const std::size_t channels = samples.dim(0);
  const std::size_t length = samples.dim(1);
  const std::uint16_t bits = fmt == WavFormat::pcm16 ? 16 : fmt == WavFormat::pcm24 ? 24 : 32;
  const std::size_t width = bits / 8;
  const std::size_t data_size = length * channels * width;

  std::string s;
  s.reserve(44 + data_size);
  s += "RIFF";
  detail::put_u32(s, std::uint32_t(36 + data_size));
  s += "WAVEfmt ";
  detail::put_u32(s, 16);
  detail::put_u16(s, fmt == WavFormat::float32 ? 3 : 1);
  detail::put_u16(s, std::uint16_t(channels));
  detail::put_u32(s, std::uint32_t(sample_rate));
  detail::put_u32(s, std::uint32_t(sample_rate * channels * width));
  detail::put_u16(s, std::uint16_t(channels * width));
  detail::put_u16(s, bits);
  s += "data";
  detail::put_u32(s, std::uint32_t(data_size));
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = double(samples[c * length + i]);
      if (fmt == WavFormat::float32) {
        const float f = float(v);
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        detail::put_u32(s, u);
      } else {
        const double scale = fmt == WavFormat::pcm16 ? 32768.0 : 8388608.0;
        const double hi = scale - 1;
        const auto q = static_cast<std::int32_t>(std::lround(std::clamp(v * scale, -scale, hi)));
        s.push_back(char(q & 0xff));
        s.push_back(char((q >> 8) & 0xff));
        if (fmt == WavFormat::pcm24) s.push_back(char((q >> 16) & 0xff));
      }
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.write(s.data(), std::streamsize(s.size()));
}

}  // namespace tsbm
