#pragma once

// Waveform ingestion and log-mel feature extraction: 25 ms Hann window,
// 10 ms hop, 512-point FFT, 40 triangular HTK-mel filters over 0-8 kHz.

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "frami/error.hpp"

namespace frami {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 16000.0;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct Spectrogram {
  std::vector<double> data;  // row-major [mel_bins, frames]
  std::size_t mel_bins = 0;
  std::size_t frames = 0;
  double hop_ms = 10.0;
  double win_ms = 25.0;
  bool log_scaled = true;

  double at(std::size_t f, std::size_t t) const { return data[f * frames + t]; }
  double& at(std::size_t f, std::size_t t) { return data[f * frames + t]; }
};

struct MelConfig {
  double sample_rate = 16000.0;
  std::size_t mel_bins = 40;
  std::size_t win_length = 400;
  std::size_t hop_length = 160;
  std::size_t n_fft = 512;
  double f_min = 0.0;
  double f_max = 8000.0;
  double log_floor = 1e-10;

  std::size_t frames_for(std::size_t samples) const {
    return samples < win_length ? 0 : 1 + (samples - win_length) / hop_length;
  }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// ---------------------------------------------------------------- FFT

// Real-input FFT of fixed size backed by FFTW. Plans are built with
// FFTW_ESTIMATE so results do not depend on timing measurements.
class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        in_(static_cast<double*>(fftw_malloc(sizeof(double) * n)), fftw_free),
        out_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1))), fftw_free) {
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_.get(), out_.get(), FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), out_.get(), in_.get(), FFTW_ESTIMATE);
  }
  ~RealFft() {
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // `frame` is zero-padded to n.
  void forward(std::span<const double> frame, std::vector<double>& re, std::vector<double>& im) {
    std::fill_n(in_.get(), n_, 0.0);
    std::copy_n(frame.begin(), std::min(frame.size(), n_), in_.get());
    fftw_execute(forward_);
    re.resize(bins());
    im.resize(bins());
    for (std::size_t k = 0; k < bins(); ++k) {
      re[k] = out_.get()[k][0];
      im[k] = out_.get()[k][1];
    }
  }

  // Unnormalized inverse (FFTW convention); divide by n for the true inverse.
  void inverse(std::span<const double> re, std::span<const double> im, std::vector<double>& frame) {
    for (std::size_t k = 0; k < bins(); ++k) {
      out_.get()[k][0] = re[k];
      out_.get()[k][1] = im[k];
    }
    fftw_execute(inverse_);
    frame.assign(in_.get(), in_.get() + n_);
  }

 private:
  std::size_t n_;
  std::unique_ptr<double, decltype(&fftw_free)> in_;
  std::unique_ptr<fftw_complex, decltype(&fftw_free)> out_;
  fftw_plan forward_{};
  fftw_plan inverse_{};
};

// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

// ---------------------------------------------------------------- mel filterbank

struct MelFilterbank {
  std::size_t mel_bins = 0;
  std::size_t fft_bins = 0;
  std::vector<double> weights;         // [mel_bins, fft_bins]
  std::vector<double> center_hz;       // filter peaks
  std::vector<double> edge_hz;         // mel_bins + 2 edges

  double weight(std::size_t m, std::size_t k) const { return weights[m * fft_bins + k]; }
};

inline MelFilterbank mel_filterbank(const MelConfig& cfg) {
  MelFilterbank fb;
  fb.mel_bins = cfg.mel_bins;
  fb.fft_bins = cfg.n_fft / 2 + 1;
  fb.weights.assign(fb.mel_bins * fb.fft_bins, 0.0);
  const double lo = hz_to_mel(cfg.f_min), hi = hz_to_mel(cfg.f_max);
  for (std::size_t i = 0; i < cfg.mel_bins + 2; ++i)
    fb.edge_hz.push_back(mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.mel_bins + 1)));
  for (std::size_t m = 0; m < cfg.mel_bins; ++m) {
    const double l = fb.edge_hz[m], c = fb.edge_hz[m + 1], r = fb.edge_hz[m + 2];
    fb.center_hz.push_back(c);
    for (std::size_t k = 0; k < fb.fft_bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.n_fft);
      double w = 0.0;
      if (f > l && f < c)
        w = (f - l) / (c - l);
      else if (f >= c && f < r)
        w = (r - f) / (r - c);
      fb.weights[m * fb.fft_bins + k] = w;
    }
  }
  return fb;
}

// |STFT|^2 frames, row-major [frames, fft_bins]. No centering: every frame
// lies fully inside the signal.
inline std::vector<double> power_frames(const Waveform& w, const MelConfig& cfg, std::size_t& frames) {
  frames = cfg.frames_for(w.samples.size());
  if (frames == 0)
    throw IngestionError("waveform of " + std::to_string(w.samples.size()) + " samples shorter than the " +
                         std::to_string(cfg.win_length) + "-sample window");
  RealFft fft(cfg.n_fft);
  const auto window = hann_window(cfg.win_length);
  const std::size_t bins = fft.bins();
  std::vector<double> power(frames * bins), frame(cfg.win_length), re, im;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < cfg.win_length; ++i) frame[i] = w.samples[t * cfg.hop_length + i] * window[i];
    fft.forward(frame, re, im);
    for (std::size_t k = 0; k < bins; ++k) power[t * bins + k] = re[k] * re[k] + im[k] * im[k];
  }
  return power;
}

// Mel-band power before the log (log_scaled = false).
inline Spectrogram mel_power(const Waveform& w, const MelConfig& cfg = {}) {
  if (std::abs(w.sample_rate - cfg.sample_rate) > 1e-9)
    throw IngestionError("waveform sample rate " + std::to_string(w.sample_rate) + " differs from feature rate " +
                         std::to_string(cfg.sample_rate));
  std::size_t frames = 0;
  const auto power = power_frames(w, cfg, frames);
  const auto fb = mel_filterbank(cfg);
  Spectrogram s;
  s.mel_bins = cfg.mel_bins;
  s.frames = frames;
  s.hop_ms = 1000.0 * static_cast<double>(cfg.hop_length) / cfg.sample_rate;
  s.win_ms = 1000.0 * static_cast<double>(cfg.win_length) / cfg.sample_rate;
  s.log_scaled = false;
  s.data.assign(s.mel_bins * frames, 0.0);
  for (std::size_t m = 0; m < s.mel_bins; ++m)
    for (std::size_t t = 0; t < frames; ++t) {
      double acc = 0.0;
      for (std::size_t k = 0; k < fb.fft_bins; ++k) acc += fb.weight(m, k) * power[t * fb.fft_bins + k];
      s.at(m, t) = acc;
    }
  return s;
}

inline Spectrogram mel_spectrogram(const Waveform& w, const MelConfig& cfg = {}) {
  Spectrogram s = mel_power(w, cfg);
  for (auto& v : s.data) v = std::log(v + cfg.log_floor);
  s.log_scaled = true;
  return s;
}

// ---------------------------------------------------------------- WAV

// Linear-interpolation resampling to `target_rate`.
inline Waveform resample_linear(const Waveform& w, double target_rate) {
  if (std::abs(w.sample_rate - target_rate) < 1e-9) return w;
  const std::size_t n = w.samples.size();
  const auto out_n = static_cast<std::size_t>(std::llround(static_cast<double>(n) * target_rate / w.sample_rate));
  Waveform out{std::vector<double>(out_n), target_rate};
  const double step = w.sample_rate / target_rate;
  for (std::size_t i = 0; i < out_n; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto j = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(j);
    const double a = w.samples[std::min(j, n - 1)];
    const double b = w.samples[std::min(j + 1, n - 1)];
    out.samples[i] = a + frac * (b - a);
  }
  return out;
}

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

// Parses RIFF/WAVE PCM 16-bit mono and resamples to `target_rate`.
inline Waveform parse_wav(const std::string& bytes, double target_rate = 16000.0) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw IngestionError("malformed header: missing RIFF/WAVE signature");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  while (pos + 8 <= n) {
    const std::uint32_t len = detail::read_u32(p + pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > n) throw IngestionError("malformed header: chunk overruns file");
    if (std::memcmp(p + pos, "fmt ", 4) == 0) {
      if (len < 16) throw IngestionError("malformed header: fmt chunk too short");
      const std::uint16_t format = detail::read_u16(p + body);
      const std::uint16_t channels = detail::read_u16(p + body + 2);
      rate = detail::read_u32(p + body + 4);
      const std::uint16_t bits = detail::read_u16(p + body + 14);
      if (format != 1) throw IngestionError("unsupported encoding: format tag " + std::to_string(format) + " is not PCM");
      if (channels != 1) throw IngestionError("unsupported encoding: " + std::to_string(channels) + " channels, need mono");
      if (bits != 16) throw IngestionError("unsupported encoding: " + std::to_string(bits) + "-bit samples, need 16");
      if (rate == 0) throw IngestionError("malformed header: zero sample rate");
      have_fmt = true;
    } else if (std::memcmp(p + pos, "data", 4) == 0) {
      data = p + body;
      data_len = len;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw IngestionError("malformed header: no fmt chunk");
  if (!data || data_len < 2) throw IngestionError("empty payload");
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(data_len / 2);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = static_cast<double>(static_cast<std::int16_t>(detail::read_u16(data + 2 * i))) / 32768.0;
  return resample_linear(w, target_rate);
}

inline Waveform load_wav(const std::filesystem::path& path, double target_rate = 16000.0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes, target_rate);
}

inline std::string encode_wav(const Waveform& w) {
  std::string s;
  const auto data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  const auto rate = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  s += "RIFF";
  detail::put_u32(s, 36 + data_len);
  s += "WAVEfmt ";
  detail::put_u32(s, 16);
  detail::put_u16(s, 1);
  detail::put_u16(s, 1);
  detail::put_u32(s, rate);
  detail::put_u32(s, rate * 2);
  detail::put_u16(s, 2);
  detail::put_u16(s, 16);
  s += "data";
  detail::put_u32(s, data_len);
  for (double v : w.samples) {
    const auto q = static_cast<std::int16_t>(std::clamp(std::lround(v * 32768.0), -32768L, 32767L));
    detail::put_u16(s, static_cast<std::uint16_t>(q));
  }
  return s;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  const std::string bytes = encode_wav(w);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace frami
