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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tsbm/tsbm.hpp"

namespace fs = std::filesystem;
using namespace tsbm;

namespace {

struct Common {
  std::string config = "";
  std::uint64_t seed = 0;
  std::string precision;  // f32 unless given; verify defaults to f64
  std::string out = ".";
};

bool is_preset(const std::string& s) {
  return s == "full" || s == "lightweight" || s == "toy" || s == "desk";
}

KeyValues load_config(const std::string& arg, const std::string& fallback_preset) {
  if (arg.empty()) {
    KeyValues kv;
    kv.set("preset", fallback_preset);
    return kv;
  }
  if (is_preset(arg)) {
    KeyValues kv;
    kv.set("preset", arg);
    return kv;
  }
  return KeyValues::load(arg);
}

template <typename T>
Tensor<T> cast(const Tensor<double>& in) {
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = T(in[i]);
  return out;
}

template <typename T>
Tensor<double> to_double(const Tensor<T>& in) {
  Tensor<double> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = double(in[i]);
  return out;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoul(item));
  }
  if (out.empty()) throw Error("empty list '" + s + "'");
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
int cmd_init(const Common& c, bool identity) {
  const ModelConfig cfg = model_config_from(load_config(c.config, "full"));
  ModelParams<T> p = ModelParams<T>::init(cfg, c.seed);
  if (identity) make_identity(p);
  save_model(c.out, p, cfg, Json{{"seed", c.seed}, {"identity", identity}});
  std::cout << "wrote " << c.out << " (" << count_params(cfg) << " parameters, "
            << dtype_name<T>() << ")\n";
  return 0;
}

template <typename T>
int cmd_train(const Common& c, std::size_t epochs, std::size_t steps, std::size_t batch) {
  const KeyValues kv = load_config(c.config, "desk");
  const ModelConfig cfg = model_config_from(kv);
  TrainConfig tc = train_config_from(kv);
  tc.seed = c.seed;
  if (epochs) tc.epochs = epochs;
  if (steps) tc.steps_per_epoch = steps;
  if (batch) tc.batch = batch;
  Trainer<T> tr(cfg, tc);
  std::cout << "training " << count_params(cfg) << " parameters, " << tc.epochs << " x "
            << tc.steps_per_epoch << " steps, batch " << tc.batch << "\n";
  const std::size_t every = std::max<std::size_t>(1, tc.steps_per_epoch / 10);
  tr.run(c.out, [&](const TrainLogRow& r) {
    if (r.step % every == 0 || r.step == 1) {
      std::printf("step %6zu  lr %.3g  stage1 %.5f  stage2 %.5f  total %.5f  |g| %.3f\n", r.step,
                  r.lr, r.stage1, r.stage2, r.total, r.grad_norm);
    }
  });
  std::cout << "checkpoint: " << (fs::path(c.out) / "checkpoint.bin").string() << "\n";
  return 0;
}

template <typename T>
int cmd_separate(const Common& c, const std::string& checkpoint, const std::string& input,
                 bool export_stage1, bool spectrogram_csv) {
  const LoadedModel<T> m = load_model<T>(checkpoint);
  const WavData wav = read_wav(input);
  if (wav.samples.dim(0) != 2) {
    throw Error(input + ": stereo input required (got " + std::to_string(wav.samples.dim(0)) +
                " channels)");
  }
  if (double(wav.sample_rate) != m.config.stft.sample_rate) {
    throw Error(input + ": sample rate " + std::to_string(wav.sample_rate) +
                " Hz does not match the model (" + std::to_string(m.config.stft.sample_rate) +
                " Hz); resample first");
  }
  const auto res = segment_and_separate(cast<T>(wav.samples), m.params, m.config);
  fs::create_directories(c.out);
  const std::string stem = fs::path(input).stem().string();
  auto emit = [&](const Tensor<T>& w, const std::string& name) {
    const auto path = (fs::path(c.out) / (stem + "." + name + ".wav")).string();
    write_wav(path, w, wav.sample_rate);
    std::cout << path << "\n";
    if (spectrogram_csv) {
      const auto csv = (fs::path(c.out) / (stem + "." + name + ".csv")).string();
      write_magnitude_csv(stft(w, m.config.stft), 0, csv);
    }
  };
  for (std::size_t i = 0; i < m.config.n_sources; ++i) {
    emit(res.stage2[i], m.config.source_name(i));
    if (export_stage1) emit(res.stage1[i], m.config.source_name(i) + ".stage1");
  }
  return 0;
}

std::vector<std::string> song_dirs(const std::string& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error(root + ": no song directories");
  return out;
}

template <typename T>
int cmd_eval(const Common& c, const std::string& references, const std::string& estimates,
             const std::string& checkpoint) {
  if (estimates.empty() == checkpoint.empty()) {
    throw Error("eval: give exactly one of --estimates or --checkpoint");
  }
  std::optional<LoadedModel<T>> model;
  if (!checkpoint.empty()) model = load_model<T>(checkpoint);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < (model ? model->config.n_sources : kSourceNames.size()); ++i) {
    const std::string& n = kSourceNames[i];
    if (model || fs::exists(fs::path(references) / song_dirs(references)[0] / (n + ".wav"))) {
      names.push_back(n);
    }
  }
  if (names.empty()) throw Error("eval: no <source>.wav references found");
  std::vector<SongPair<double>> songs;
  std::size_t rate = 0;
  for (const auto& song : song_dirs(references)) {
    SongPair<double> sp;
    std::vector<Tensor<T>> separated;
    if (model) {
      const WavData mix = read_wav((fs::path(references) / song / "mixture.wav").string());
      if (double(mix.sample_rate) != model->config.stft.sample_rate) {
        throw Error(song + ": sample rate does not match the model");
      }
      if (mix.samples.dim(0) != 2) throw Error(song + ": stereo mixture required");
      separated = segment_and_separate(cast<T>(mix.samples), model->params, model->config).stage2;
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      const WavData ref = read_wav((fs::path(references) / song / (names[i] + ".wav")).string());
      if (rate && ref.sample_rate != rate) throw Error("eval: mixed sample rates");
      rate = ref.sample_rate;
      sp.refs.push_back(ref.samples);
      if (model) {
        sp.ests.push_back(to_double(separated[i]));
      } else {
        const WavData est = read_wav((fs::path(estimates) / song / (names[i] + ".wav")).string());
        if (est.sample_rate != rate) throw Error(song + ": estimate sample rate differs");
        sp.ests.push_back(est.samples);
      }
    }
    songs.push_back(std::move(sp));
  }
  const SdrReport r = evaluate(songs, rate, names);
  fs::create_directories(c.out);
  write_report_csv(r, (fs::path(c.out) / "sdr_report.csv").string());
  write_chunk_csv(r, (fs::path(c.out) / "sdr_chunks.csv").string());
  std::printf("%-8s %10s %10s\n", "source", "uSDR(dB)", "cSDR(dB)");
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::printf("%-8s %10.4f %10.4f\n", names[i].c_str(), r.usdr[i], r.csdr[i]);
  }
  std::printf("%-8s %10.4f %10.4f\n", "mean", r.usdr_overall, r.csdr_overall);
  return 0;
}

int cmd_verify(const Common& c, bool inject) {
  VerifyOptions o;
  o.f64 = c.precision != "f32";
  o.inject_dual_fault = inject;
  o.seed = c.seed;
  if (!o.f64) {
    std::cerr << "warning: verify expects f64; running f32 with looser tolerances "
                 "(the gradient check always runs in f64)\n";
  }
  bool all = true;
  for (const auto& s : run_verify(o)) {
    std::printf("[%s] %s: %s\n", s.passed ? "PASS" : "FAIL", s.name.c_str(), s.detail.c_str());
    all = all && s.passed;
  }
  std::printf("%s\n", all ? "all suites passed" : "verification FAILED");
  return all ? 0 : 1;
}

int cmd_bench(const Common& c, const std::string& lengths, std::size_t repeats) {
  const auto rows = bench_ssd_forms(parse_list(lengths), repeats, 2, 16, 16, 1e-8, 0.05, c.seed);
  std::ostringstream csv;
  csv.precision(9);
  csv << "length,scan_seconds,dual_seconds,dual_over_scan,max_abs_diff\n";
  for (const auto& r : rows) {
    csv << r.length << ',' << r.scan_seconds << ',' << r.dual_seconds << ',' << r.ratio() << ','
        << r.max_diff << '\n';
  }
  std::cout << csv.str();
  if (c.out != ".") {
    std::ofstream os(c.out);
    if (!os) throw Error("cannot write " + c.out);
    os << csv.str();
  }
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::printf("# T %zu -> %zu: scan x%.2f, dual x%.2f\n", rows[i - 1].length, rows[i].length,
                rows[i].scan_seconds / rows[i - 1].scan_seconds,
                rows[i].dual_seconds / rows[i - 1].dual_seconds);
  }
  return 0;
}

int cmd_info(const Common& c) {
  const std::string arg = c.config.empty() ? "full" : c.config;
  const ModelConfig cfg = model_config_from(load_config(arg, "full"));
  const std::size_t n = count_params(cfg);
  const MacBreakdown m = estimate_macs(cfg, 1.0);
  std::printf("config            %s\n", arg.c_str());
  std::printf("bands             %zu (F = %zu)\n", cfg.scheme.bands(), cfg.bins());
  std::printf("layers            %zu + %zu\n", cfg.layers_stage1, cfg.layers_stage2);
  std::printf("parameters        %zu (%.2f M)\n", n, double(n) / 1e6);
  std::printf("MACs per second   %.2f G\n", m.total() / 1e9);
  std::printf("  band split      %.2f G\n", m.band_split / 1e9);
  std::printf("  dual-path       %.2f G\n", m.dualnet / 1e9);
  std::printf("  fusion          %.2f G\n", m.fusion / 1e9);
  std::printf("  heads           %.2f G\n", m.heads / 1e9);
  auto compare = [](const char* what, double v, double ref) {
    std::printf("%-17s %.2f vs reference %.2f (%+.1f%%)\n", what, v, ref, 100 * (v / ref - 1));
  };
  if (arg == "full") {
    compare("params (M)", double(n) / 1e6, 35.52);
    compare("MACs (G/s)", m.total() / 1e9, 212.11);
  } else if (arg == "lightweight") {
    compare("params (M)", double(n) / 1e6, 27.71);
    compare("MACs (G/s)", m.total() / 1e9, 107.95);
  }
  ModelParams<double> p = ModelParams<double>::make(cfg);
  std::printf("serialized walk   %zu scalars\n", scalar_count<double>(p));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tsbm: two-stage band-split Mamba-2 music source separation"};
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* sub, const std::string& out_help) {
    sub->add_option("--config", c.config, "preset (full, lightweight, toy, desk) or config file");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--precision", c.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--out", c.out, out_help);
  };

  bool identity = false;
  auto* init = app.add_subcommand("init", "write freshly initialized parameters");
  common(init, "output parameter file");
  init->add_flag("--identity", identity, "mask 1+0j in stage 1, zero residual in stage 2");

  std::size_t epochs = 0, steps = 0, batch = 0;
  auto* train = app.add_subcommand("train", "train on synthetic stems");
  common(train, "output directory (checkpoint.bin, train_log.csv)");
  train->add_option("--epochs", epochs, "override train.epochs");
  train->add_option("--steps", steps, "override train.steps_per_epoch");
  train->add_option("--batch", batch, "override train.batch");

  std::string checkpoint, input, references, estimates;
  bool export_stage1 = false, spectrogram_csv = false;
  auto* sep = app.add_subcommand("separate", "separate a stereo WAV file");
  common(sep, "output directory");
  sep->add_option("--checkpoint", checkpoint, "parameter file or checkpoint")->required();
  sep->add_option("--input", input, "stereo WAV input")->required();
  sep->add_flag("--export-stage1", export_stage1, "also write stage-1 estimates");
  sep->add_flag("--spectrogram-csv", spectrogram_csv, "write magnitude spectrogram CSVs");

  auto* ev = app.add_subcommand("eval", "uSDR/cSDR report over a directory of songs");
  common(ev, "output directory for sdr_report.csv and sdr_chunks.csv");
  ev->add_option("--references", references, "DIR/<song>/<source>.wav (+ mixture.wav)")
      ->required();
  ev->add_option("--estimates", estimates, "DIR/<song>/<source>.wav");
  ev->add_option("--checkpoint", checkpoint, "separate DIR/<song>/mixture.wav with this model");

  bool inject = false;
  auto* ver = app.add_subcommand("verify", "run the verification suites");
  common(ver, "unused");
  ver->add_flag("--inject-fault", inject, "perturb the dual form (harness self-test)");

  std::string lengths = "256,512,1024,2048";
  std::size_t repeats = 3;
  auto* bench = app.add_subcommand("bench", "time scan vs dual SSD forms");
  common(bench, "CSV output file");
  bench->add_option("--lengths", lengths, "comma-separated sequence lengths");
  bench->add_option("--repeats", repeats, "timing repeats (minimum is reported)");

  auto* info = app.add_subcommand("info", "parameter and MAC counts");
  common(info, "unused");

  CLI11_PARSE(app, argc, argv);
  const bool f64 = c.precision == "f64";
  try {
    if (*init) return f64 ? cmd_init<double>(c, identity) : cmd_init<float>(c, identity);
    if (*train) {
      return f64 ? cmd_train<double>(c, epochs, steps, batch)
                 : cmd_train<float>(c, epochs, steps, batch);
    }
    if (*sep) {
      return f64 ? cmd_separate<double>(c, checkpoint, input, export_stage1, spectrogram_csv)
                 : cmd_separate<float>(c, checkpoint, input, export_stage1, spectrogram_csv);
    }
    if (*ev) {
      return f64 ? cmd_eval<double>(c, references, estimates, checkpoint)
                 : cmd_eval<float>(c, references, estimates, checkpoint);
    }
    if (*ver) return cmd_verify(c, inject);
    if (*bench) return cmd_bench(c, lengths, repeats);
    if (*info) return cmd_info(c);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
