#pragma once

// Synthetic labelled sound corpus. Time-independent (TID) classes are
// stationary textures; time-dependent (TD) classes are events localized in
// time. Every item is rendered as a waveform and then featurized.

#include <cmath>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include "frami/audio.hpp"
#include "frami/rng.hpp"

namespace frami {

enum class AudioMode { TD, TID };

inline std::string to_string(AudioMode m) { return m == AudioMode::TD ? "TD" : "TID"; }

inline AudioMode parse_mode(const std::string& s) {
  if (s == "TD" || s == "td") return AudioMode::TD;
  if (s == "TID" || s == "tid") return AudioMode::TID;
  throw ConfigError("unknown audio mode '" + s + "' (expected TD or TID)");
}

struct CorpusSpec {
  std::size_t class_count = 4;
  std::size_t items_per_class = 50;
  double duration_s = 2.0;
  AudioMode mode = AudioMode::TID;
  double noise_level = 0.01;     // background white-noise amplitude
  double freq_jitter = 0.06;     // relative per-item frequency jitter
};

struct LabelledCorpus {
  std::vector<Spectrogram> items;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;
  AudioMode mode = AudioMode::TID;

  std::size_t size() const { return items.size(); }
};

namespace detail {

inline void add_tone(std::vector<double>& x, double sr, double f, double amp, double phase, std::size_t begin,
                     std::size_t end) {
  const double w = 2.0 * std::numbers::pi * f / sr;
  for (std::size_t i = begin; i < std::min(end, x.size()); ++i) x[i] += amp * std::sin(w * static_cast<double>(i) + phase);
}

// White noise band-passed to [lo, hi] Hz by zeroing FFT bins, unit RMS.
inline std::vector<double> band_noise(std::size_t n, double sr, double lo, double hi, Rng& rng) {
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal();
  RealFft fft(n);
  std::vector<double> re, im, y;
  fft.forward(x, re, im);
  for (std::size_t k = 0; k < re.size(); ++k) {
    const double f = static_cast<double>(k) * sr / static_cast<double>(n);
    if (f < lo || f > hi) re[k] = im[k] = 0.0;
  }
  fft.inverse(re, im, y);
  double rms = 0.0;
  for (double v : y) rms += v * v;
  rms = std::sqrt(rms / static_cast<double>(n));
  if (rms > 0.0)
    for (auto& v : y) v /= rms;
  return y;
}

inline void render_tid(std::vector<double>& x, double sr, std::size_t cls, const CorpusSpec& spec, Rng& rng) {
  const std::size_t n = x.size();
  const double j = 1.0 + spec.freq_jitter * rng.uniform(-1.0, 1.0);
  const double amp = rng.uniform(0.2, 0.5);
  const std::size_t variant = cls / 3;
  switch (cls % 3) {
    case 0: {  // band-limited noise, class-specific band
      const double center = (900.0 + 1700.0 * static_cast<double>(variant)) * j;
      const auto noise = band_noise(n, sr, center * 0.75, center * 1.25, rng);
      for (std::size_t i = 0; i < n; ++i) x[i] += 0.5 * amp * noise[i];
      break;
    }
    case 1: {  // amplitude-modulated tone
      const double carrier = (600.0 + 1300.0 * static_cast<double>(variant)) * j;
      const double rate = rng.uniform(6.0, 12.0);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double env = 1.0 + 0.7 * std::sin(2.0 * std::numbers::pi * rate * t);
        x[i] += amp * env * std::sin(2.0 * std::numbers::pi * carrier * t + phase);
      }
      break;
    }
    default: {  // harmonic stack
      const double f0 = (180.0 + 110.0 * static_cast<double>(variant)) * j;
      for (int h = 1; h <= 8; ++h)
        add_tone(x, sr, f0 * h, amp / h, rng.uniform(0.0, 2.0 * std::numbers::pi), 0, n);
      break;
    }
  }
}

inline void render_td(std::vector<double>& x, double sr, std::size_t cls, const CorpusSpec& spec, Rng& rng) {
  const std::size_t n = x.size();
  const double j = 1.0 + spec.freq_jitter * rng.uniform(-1.0, 1.0);
  const double amp = rng.uniform(0.2, 0.5);
  const std::size_t variant = cls / 3;
  const double onset = rng.uniform(0.0, 0.1);
  switch (cls % 3) {
    case 0: {  // rising chirp over the first half, then silence
      const double f0 = (300.0 + 700.0 * static_cast<double>(variant)) * j, f1 = f0 * 3.0;
      const auto begin = static_cast<std::size_t>(onset * static_cast<double>(n));
      const std::size_t len = n / 2;
      double phase = 0.0;
      for (std::size_t i = 0; i < len && begin + i < n; ++i) {
        const double f = f0 + (f1 - f0) * static_cast<double>(i) / static_cast<double>(len);
        phase += 2.0 * std::numbers::pi * f / sr;
        x[begin + i] += amp * std::sin(phase);
      }
      break;
    }
    case 1: {  // tone-burst pattern: 2 + variant bursts
      const double f = (1000.0 + 900.0 * static_cast<double>(variant)) * j;
      const std::size_t bursts = 2 + variant;
      const std::size_t slot = n / (bursts * 2);
      for (std::size_t b = 0; b < bursts; ++b) {
        const auto begin = static_cast<std::size_t>(onset * static_cast<double>(slot)) + 2 * b * slot;
        add_tone(x, sr, f, amp, 0.0, begin, begin + slot);
      }
      break;
    }
    default: {  // falling chirp in the second half
      const double f0 = (2400.0 + 900.0 * static_cast<double>(variant)) * j, f1 = f0 / 3.0;
      const std::size_t begin = n / 2 + static_cast<std::size_t>(onset * static_cast<double>(n) * 0.5);
      const std::size_t len = n / 3;
      double phase = 0.0;
      for (std::size_t i = 0; i < len && begin + i < n; ++i) {
        const double f = f0 + (f1 - f0) * static_cast<double>(i) / static_cast<double>(len);
        phase += 2.0 * std::numbers::pi * f / sr;
        x[begin + i] += amp * std::sin(phase);
      }
      break;
    }
  }
}

}  // namespace detail

inline Waveform synth_waveform(std::size_t cls, const CorpusSpec& spec, Rng& rng, double sr = 16000.0) {
  const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * sr));
  Waveform w{std::vector<double>(n, 0.0), sr};
  if (spec.mode == AudioMode::TID)
    detail::render_tid(w.samples, sr, cls, spec, rng);
  else
    detail::render_td(w.samples, sr, cls, spec, rng);
  const double noise = spec.noise_level * rng.uniform(0.5, 1.5);
  for (auto& v : w.samples) v = std::clamp(v + noise * rng.normal(), -1.0, 1.0);
  return w;
}

inline void validate(const CorpusSpec& spec, const MelConfig& mel = {}) {
  if (spec.class_count < 2 || spec.class_count > 10)
    throw ConfigError("class_count must be in [2, 10], got " + std::to_string(spec.class_count));
  if (spec.items_per_class == 0) throw ConfigError("items_per_class must be positive");
  if (!(spec.duration_s > 0.0) ||
      mel.frames_for(static_cast<std::size_t>(spec.duration_s * mel.sample_rate)) < 8)
    throw ConfigError("duration " + std::to_string(spec.duration_s) + " s yields fewer than 8 frames");
  if (spec.noise_level < 0.0 || spec.freq_jitter < 0.0 || spec.freq_jitter >= 0.5)
    throw ConfigError("noise_level must be >= 0 and freq_jitter in [0, 0.5)");
}

// Balanced corpus, class-major order. Deterministic per seed.
inline LabelledCorpus synth_corpus(Rng& rng, const CorpusSpec& spec, const MelConfig& mel = {}) {
  validate(spec, mel);
  LabelledCorpus corpus;
  corpus.class_count = spec.class_count;
  corpus.mode = spec.mode;
  for (std::size_t c = 0; c < spec.class_count; ++c)
    for (std::size_t i = 0; i < spec.items_per_class; ++i) {
      corpus.items.push_back(mel_spectrogram(synth_waveform(c, spec, rng, mel.sample_rate), mel));
      corpus.labels.push_back(c);
    }
  return corpus;
}

// ---------------------------------------------------------------- positive-pair augmentation

// Source frame index for every output frame of an augmented copy.
// TID: circular roll by an offset in [1, T-1], then with probability 1/2 a
// contiguous cut to a length in [ceil(T/2), T]. TD: the cut only.
inline std::vector<std::size_t> positive_index_map(std::size_t frames, AudioMode mode, Rng& rng,
                                                   std::size_t cut_length = 0) {
  std::vector<std::size_t> idx(frames);
  for (std::size_t t = 0; t < frames; ++t) idx[t] = t;
  if (frames < 8) {
    std::cerr << "warning: augmentation skipped for " << frames << "-frame spectrogram\n";
    return idx;
  }
  if (mode == AudioMode::TID) {
    const auto offset = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(frames) - 1));
    for (std::size_t t = 0; t < frames; ++t) idx[t] = (t + offset) % frames;
  }
  const std::size_t min_len = (frames + 1) / 2;
  std::size_t len = cut_length;
  if (len == 0) {
    const bool cut = mode == AudioMode::TD || rng.bernoulli(0.5);
    len = cut ? static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(min_len),
                                                         static_cast<std::int64_t>(frames)))
              : frames;
  }
  len = std::clamp(len, min_len, frames);
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(frames - len)));
  return {idx.begin() + static_cast<std::ptrdiff_t>(start), idx.begin() + static_cast<std::ptrdiff_t>(start + len)};
}

inline Spectrogram apply_index_map(const Spectrogram& x, const std::vector<std::size_t>& idx) {
  Spectrogram out = x;
  out.frames = idx.size();
  out.data.resize(x.mel_bins * idx.size());
  for (std::size_t f = 0; f < x.mel_bins; ++f)
    for (std::size_t t = 0; t < idx.size(); ++t) out.data[f * idx.size() + t] = x.at(f, idx[t]);
  return out;
}

// Circular shift along time: out[t] = x[(t + offset) mod T].
inline Spectrogram roll_time(const Spectrogram& x, std::size_t offset) {
  std::vector<std::size_t> idx(x.frames);
  for (std::size_t t = 0; t < x.frames; ++t) idx[t] = (t + offset) % x.frames;
  return apply_index_map(x, idx);
}

inline Spectrogram augment_positive(const Spectrogram& x, AudioMode mode, Rng& rng) {
  return apply_index_map(x, positive_index_map(x.frames, mode, rng));
}

// Index maps for a whole batch sharing one output length (so the batch
// stays rectangular); roll offsets and cut positions differ per item.
inline std::vector<std::vector<std::size_t>> batch_index_maps(std::size_t batch, std::size_t frames, AudioMode mode,
                                                              Rng& rng) {
  std::size_t len = frames;
  if (frames >= 8 && (mode == AudioMode::TD || rng.bernoulli(0.5)))
    len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>((frames + 1) / 2), static_cast<std::int64_t>(frames)));
  std::vector<std::vector<std::size_t>> maps;
  for (std::size_t b = 0; b < batch; ++b) maps.push_back(positive_index_map(frames, mode, rng, len));
  return maps;
}

}  // namespace frami
