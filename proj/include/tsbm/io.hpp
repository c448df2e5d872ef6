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

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "tsbm/model.hpp"

namespace tsbm {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Key-value config files
//
//   # comment
//   key = value
//   [section]
//   key = "quoted string"
//   list = [1, 2, 3]
//
// Keys inside a section are stored as "section.key".

class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<string>") {
    KeyValues kv;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      line = strip(strip_comment(line));
      if (line.empty()) continue;
      if (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos) {
        section = strip(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw Error(origin + ":" + std::to_string(lineno) + ": expected key = value");
      }
      std::string key = strip(line.substr(0, eq));
      std::string value = unquote(strip(line.substr(eq + 1)));
      if (key.empty()) throw Error(origin + ":" + std::to_string(lineno) + ": empty key");
      kv.values_[section.empty() ? key : section + "." + key] = value;
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  template <typename N>
  N num(const std::string& key, N fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::istringstream is(it->second);
    N v{};
    if constexpr (std::is_same_v<N, bool>) {
      if (it->second == "true") return true;
      if (it->second == "false") return false;
      throw Error("config key '" + key + "': expected true or false");
    } else {
      is >> v;
      if (!is || !(is >> std::ws).eof()) {
        throw Error("config key '" + key + "': cannot parse '" + it->second + "'");
      }
      if constexpr (std::is_unsigned_v<N>) {
        if (it->second.find('-') != std::string::npos) {
          throw Error("config key '" + key + "': must be non-negative");
        }
      }
    }
    return v;
  }

  std::vector<std::size_t> size_list(const std::string& key) const {
    std::string s = str(key, "");
    if (s.size() < 2 || s.front() != '[' || s.back() != ']') {
      throw Error("config key '" + key + "': expected [a, b, ...]");
    }
    std::vector<std::size_t> out;
    std::istringstream is(s.substr(1, s.size() - 2));
    std::string item;
    while (std::getline(is, item, ',')) {
      item = strip(item);
      if (item.empty()) continue;
      out.push_back(std::stoul(item));
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

 private:
  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }
  static std::string unquote(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
    return s;
  }

  std::map<std::string, std::string> values_;
};

/// Preset by name: full, lightweight, toy, desk.
inline ModelConfig preset_config(const std::string& name) {
  if (name == "full") return ModelConfig::full();
  if (name == "lightweight") return ModelConfig::lightweight();
  if (name == "toy") return ModelConfig::toy();
  if (name == "desk") return ModelConfig::desk();
  throw Error("unknown preset '" + name + "' (full, lightweight, toy, desk)");
}

/// Applies keys under [model] (or top level `preset`) on top of a preset.
/// The band scheme is rebuilt whenever the STFT or band keys change.
inline ModelConfig model_config_from(const KeyValues& kv) {
  ModelConfig c = preset_config(kv.str("model.preset", kv.str("preset", "full")));
  const std::size_t old_bands = c.scheme.bands();
  auto get = [&](const char* k, std::size_t v) { return kv.num<std::size_t>(std::string("model.") + k, v); };
  c.features = get("features", c.features);
  c.layers_stage1 = get("layers_stage1", c.layers_stage1);
  c.layers_stage2 = get("layers_stage2", c.layers_stage2);
  c.n_sources = get("n_sources", c.n_sources);
  c.head_hidden = get("head_hidden", c.head_hidden);
  c.ssd.d_model = c.features;
  c.ssd.d_state = get("d_state", c.ssd.d_state);
  c.ssd.d_conv = get("d_conv", c.ssd.d_conv);
  c.ssd.expand = get("expand", c.ssd.expand);
  c.ssd.headdim = get("headdim", c.ssd.headdim);
  const StftConfig old_stft = c.stft;
  c.stft.n_fft = get("n_fft", c.stft.n_fft);
  c.stft.hop = get("hop", c.stft.hop);
  c.stft.sample_rate = kv.num<double>("model.sample_rate", c.stft.sample_rate);
  c.stft.validate();
  if (kv.has("model.discretization")) {
    c.discretization = parse_discretization(kv.str("model.discretization", ""));
  }
  if (kv.has("model.stage2_input")) {
    c.stage2_input = parse_stage2_input(kv.str("model.stage2_input", ""));
  }
  const std::size_t bands = get("bands", old_bands);
  const std::string layout = kv.str("model.band_layout", "default");
  if (kv.has("model.band_widths")) {
    c.scheme.widths = kv.size_list("model.band_widths");
  } else if (layout == "uniform") {
    c.scheme = uniform_band_scheme(c.stft.bins(), bands);
  } else if (layout != "default") {
    throw Error("unknown band_layout '" + layout + "' (default or uniform)");
  } else if (bands != old_bands || !(c.stft == old_stft)) {
    c.scheme = default_band_scheme(c.stft.bins(), c.stft.sample_rate, bands);
  }
  c.validate();
  return c;
}

inline Json to_json(const ModelConfig& c) {
  return Json{{"features", c.features},
              {"band_widths", c.scheme.widths},
              {"layers_stage1", c.layers_stage1},
              {"layers_stage2", c.layers_stage2},
              {"d_state", c.ssd.d_state},
              {"d_conv", c.ssd.d_conv},
              {"expand", c.ssd.expand},
              {"headdim", c.ssd.headdim},
              {"n_sources", c.n_sources},
              {"head_hidden", c.head_hidden},
              {"n_fft", c.stft.n_fft},
              {"hop", c.stft.hop},
              {"sample_rate", c.stft.sample_rate},
              {"center", c.stft.center},
              {"discretization", to_string(c.discretization)},
              {"stage2_input", to_string(c.stage2_input)}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  try {
    ModelConfig c;
    c.features = j.at("features").get<std::size_t>();
    c.scheme.widths = j.at("band_widths").get<std::vector<std::size_t>>();
    c.layers_stage1 = j.at("layers_stage1").get<std::size_t>();
    c.layers_stage2 = j.at("layers_stage2").get<std::size_t>();
    c.ssd = {c.features, j.at("d_state").get<std::size_t>(), j.at("d_conv").get<std::size_t>(),
             j.at("expand").get<std::size_t>(), j.at("headdim").get<std::size_t>()};
    c.n_sources = j.at("n_sources").get<std::size_t>();
    c.head_hidden = j.at("head_hidden").get<std::size_t>();
    c.stft = {j.at("n_fft").get<std::size_t>(), j.at("hop").get<std::size_t>(),
              j.at("sample_rate").get<double>(), j.at("center").get<bool>()};
    c.discretization = parse_discretization(j.at("discretization").get<std::string>());
    c.stage2_input = parse_stage2_input(j.at("stage2_input").get<std::string>());
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw Error(std::string("model config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Binary tensor container
//
//   "TSBMPRM1" | u64 LE header length | JSON header | raw LE tensor data
//
// The header lists each tensor's name, shape, dtype and byte offset into the
// data block, plus a free-form "meta" object.

inline constexpr char kContainerMagic[] = "TSBMPRM1";

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

static_assert(std::endian::native == std::endian::little, "container I/O assumes little-endian");

template <typename T>
void write_container(const std::string& path, const NamedTensors<T>& tensors, const Json& meta) {
  Json entries = Json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t->shape()}, {"dtype", dtype_name<T>()},
                       {"offset", offset}});
    offset += t->size() * sizeof(T);
  }
  const std::string header = Json{{"tensors", entries}, {"meta", meta}}.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.write(kContainerMagic, 8);
  const std::uint64_t len = header.size();
  os.write(reinterpret_cast<const char*>(&len), 8);
  os.write(header.data(), std::streamsize(header.size()));
  for (const auto& [name, t] : tensors) {
    os.write(reinterpret_cast<const char*>(t->data()), std::streamsize(t->size() * sizeof(T)));
  }
  if (!os) throw Error("write failed: " + path);
}

struct Container {
  Json meta;
  std::vector<std::string> names;
  std::map<std::string, Tensor<double>> f64;
  std::map<std::string, Tensor<float>> f32;
  std::map<std::string, std::string> dtype;

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = dtype.find(name);
    if (it == dtype.end()) throw Error("container: missing tensor '" + name + "'");
    auto convert = [](const auto& src) {
      Tensor<T> out(src.shape());
      for (std::size_t i = 0; i < src.size(); ++i) out[i] = T(src[i]);
      return out;
    };
    if (it->second == "f64") {
      if constexpr (std::is_same_v<T, double>) return f64.at(name);
      return convert(f64.at(name));
    }
    if constexpr (std::is_same_v<T, float>) return f32.at(name);
    return convert(f32.at(name));
  }
  bool has(const std::string& name) const { return dtype.count(name) != 0; }
};

inline Container read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  char magic[8];
  std::uint64_t len = 0;
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(&len), 8);
  if (!is || std::memcmp(magic, kContainerMagic, 8) != 0) {
    throw Error(path + ": not a tsbm parameter container");
  }
  std::string header(len, '\0');
  is.read(header.data(), std::streamsize(len));
  if (!is) throw Error(path + ": truncated header");
  const std::streamoff data_start = is.tellg();
  Container c;
  Json h;
  try {
    h = Json::parse(header);
  } catch (const Json::exception& e) {
    throw Error(path + ": bad header: " + e.what());
  }
  c.meta = h.value("meta", Json::object());
  for (const auto& e : h.at("tensors")) {
    const std::string name = e.at("name");
    const std::string dt = e.at("dtype");
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    is.seekg(data_start + std::streamoff(e.at("offset").get<std::size_t>()));
    auto read_into = [&](auto& t) {
      is.read(reinterpret_cast<char*>(t.data()),
              std::streamsize(t.size() * sizeof(typename std::decay_t<decltype(t)>::value_type)));
      if (!is) throw Error(path + ": truncated data for '" + name + "'");
    };
    if (dt == "f64") {
      Tensor<double> t(shape);
      read_into(t);
      c.f64.emplace(name, std::move(t));
    } else if (dt == "f32") {
      Tensor<float> t(shape);
      read_into(t);
      c.f32.emplace(name, std::move(t));
    } else {
      throw Error(path + ": unknown dtype '" + dt + "'");
    }
    c.names.push_back(name);
    c.dtype[name] = dt;
  }
  return c;
}

/// Copies container tensors into `params` by name; shapes must match.
template <typename T, typename P>
void assign_from(const Container& c, P& params, const std::string& prefix = "") {
  params.visit(prefix, [&](const std::string& name, Tensor<T>& t) {
    Tensor<T> src = c.get<T>(name);
    if (src.shape() != t.shape()) {
      throw Error("container: tensor '" + name + "' has shape " + shape_string(src.shape()) +
                  ", expected " + shape_string(t.shape()));
    }
    t = std::move(src);
  });
}

template <typename T>
void save_model(const std::string& path, ModelParams<T>& params, const ModelConfig& cfg,
                const Json& extra = Json::object()) {
  write_container(path, named_tensors<T>(params), Json{{"config", to_json(cfg)}, {"extra", extra}});
}

template <typename T>
struct LoadedModel {
  ModelConfig config;
  ModelParams<T> params;
  Json extra;
};

template <typename T>
LoadedModel<T> load_model(const std::string& path) {
  const Container c = read_container(path);
  if (!c.meta.contains("config")) throw Error(path + ": no model config in header");
  LoadedModel<T> m;
  m.config = model_config_from_json(c.meta.at("config"));
  m.params = ModelParams<T>::make(m.config);
  assign_from<T>(c, m.params);
  m.extra = c.meta.value("extra", Json::object());
  bool finite = true;
  m.params.visit("", [&](const std::string&, Tensor<T>& t) { finite = finite && t.all_finite(); });
  if (!finite) throw Error(path + ": non-finite parameters");
  return m;
}

}  // namespace tsbm
