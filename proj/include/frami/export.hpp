#pragma once

// Rendering of spectrograms as PNG images and as audio via Griffin-Lim.

#include <png.h>

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "frami/audio.hpp"
#include "frami/inversion.hpp"
#include "frami/io.hpp"
#include "frami/nets.hpp"
#include "frami/rng.hpp"

namespace frami {

// ---------------------------------------------------------------- PNG

namespace detail {

// Perceptually ordered dark-blue to yellow ramp; luminance rises monotonically.
inline std::array<unsigned char, 3> viridis(double v) {
  static constexpr std::array<std::array<double, 3>, 9> stops{{{68, 1, 84},
                                                               {71, 44, 122},
                                                               {59, 81, 139},
                                                               {44, 113, 142},
                                                               {33, 144, 141},
                                                               {39, 173, 129},
                                                               {92, 200, 99},
                                                               {170, 220, 50},
                                                               {253, 231, 37}}};
  v = std::clamp(v, 0.0, 1.0) * static_cast<double>(stops.size() - 1);
  const auto i = std::min(static_cast<std::size_t>(v), stops.size() - 2);
  const double f = v - static_cast<double>(i);
  std::array<unsigned char, 3> rgb{};
  for (int c = 0; c < 3; ++c)
    rgb[c] = static_cast<unsigned char>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
  return rgb;
}

inline void append_bytes(png_structp png, png_bytep data, png_size_t n) {
  static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), n);
}

inline void png_noop_flush(png_structp) {}

[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) { throw Error(std::string("PNG encoding: ") + msg, 1); }

}  // namespace detail

// Time on x, mel bin on y with the lowest bin at the bottom, per-image
// min/max normalization, each cell drawn as a scale x scale block.
inline std::string encode_png(const Spectrogram& s, std::size_t scale = 4) {
  if (s.mel_bins == 0 || s.frames == 0 || s.data.size() != s.mel_bins * s.frames)
    throw ShapeError("cannot render an empty or inconsistent spectrogram");
  if (scale == 0) throw ConfigError("PNG scale must be positive");
  const auto [lo_it, hi_it] = std::minmax_element(s.data.begin(), s.data.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  const std::size_t width = s.frames * scale, height = s.mel_bins * scale;

  std::vector<unsigned char> rows;
  rows.reserve(height * 3 * width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t bin = s.mel_bins - 1 - y / scale;
    for (std::size_t x = 0; x < width; ++x) {
      const double v = range > 0.0 ? (s.at(bin, x / scale) - lo) / range : 0.0;
      for (auto c : detail::viridis(v)) rows.push_back(c);
    }
  }
  std::string png;
  png_structp writer = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_fail, nullptr);
  png_infop info = writer ? png_create_info_struct(writer) : nullptr;
  if (!info) {
    png_destroy_write_struct(&writer, nullptr);
    throw Error("PNG encoder allocation failed", 1);
  }
  try {
    png_set_write_fn(writer, &png, detail::append_bytes, detail::png_noop_flush);
    png_set_compression_level(writer, 6);
    png_set_IHDR(writer, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(writer, info);
    for (std::size_t y = 0; y < height; ++y)
      png_write_row(writer, reinterpret_cast<png_const_bytep>(rows.data() + y * 3 * width));
    png_write_end(writer, nullptr);
  } catch (...) {
    png_destroy_write_struct(&writer, &info);
    throw;
  }
  png_destroy_write_struct(&writer, &info);
  return png;
}

inline void write_png(const std::filesystem::path& path, const Spectrogram& s, std::size_t scale = 4) {
  write_file_atomic(path, encode_png(s, scale));
}

// ---------------------------------------------------------------- Griffin-Lim

struct GriffinLimOptions {
  std::size_t iterations = 64;
  double peak = 0.9;
  std::uint64_t seed = 0;
};

// Mel spectrogram (log or power) back to a waveform: mel power is mapped to
// linear-frequency magnitude through the filterbank pseudo-inverse, then
// phase is recovered iteratively.
inline Waveform griffin_lim(const Spectrogram& s, const MelConfig& mel = {}, const GriffinLimOptions& opt = {}) {
  if (s.mel_bins != mel.mel_bins) throw ShapeError("spectrogram has " + std::to_string(s.mel_bins) + " bins, expected " +
                                                   std::to_string(mel.mel_bins));
  const auto fb = mel_filterbank(mel);
  const std::size_t bins = fb.fft_bins, frames = s.frames;
  Eigen::MatrixXd m(fb.mel_bins, bins);
  for (std::size_t r = 0; r < fb.mel_bins; ++r)
    for (std::size_t k = 0; k < bins; ++k) m(r, k) = fb.weight(r, k);
  const Eigen::MatrixXd pinv = m.completeOrthogonalDecomposition().pseudoInverse();

  Eigen::MatrixXd mel_pow(fb.mel_bins, frames);
  for (std::size_t r = 0; r < fb.mel_bins; ++r)
    for (std::size_t t = 0; t < frames; ++t)
      mel_pow(r, t) = s.log_scaled ? std::max(0.0, std::exp(s.at(r, t)) - mel.log_floor) : std::max(0.0, s.at(r, t));
  const Eigen::MatrixXd mag = (pinv * mel_pow).cwiseMax(0.0).cwiseSqrt();  // [bins, frames]

  const std::size_t win = mel.win_length, hop = mel.hop_length;
  const std::size_t length = (frames - 1) * hop + win;
  const auto window = hann_window(win);
  std::vector<double> norm(length, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < win; ++i) norm[t * hop + i] += window[i] * window[i];

  RealFft fft(mel.n_fft);
  Rng rng(opt.seed);
  std::vector<double> re(bins * frames), im(bins * frames);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < bins; ++k) {
      const double phase = 2.0 * std::numbers::pi * rng.uniform();
      re[t * bins + k] = mag(k, t) * std::cos(phase);
      im[t * bins + k] = mag(k, t) * std::sin(phase);
    }

  std::vector<double> signal(length), frame(win), fr, fi, out;
  const auto synthesize = [&] {
    std::fill(signal.begin(), signal.end(), 0.0);
    for (std::size_t t = 0; t < frames; ++t) {
      fft.inverse(std::span(re).subspan(t * bins, bins), std::span(im).subspan(t * bins, bins), out);
      for (std::size_t i = 0; i < win; ++i)
        signal[t * hop + i] += out[i] / static_cast<double>(mel.n_fft) * window[i];
    }
    for (std::size_t i = 0; i < length; ++i)
      if (norm[i] > 1e-8) signal[i] /= norm[i];
  };
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    synthesize();
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t i = 0; i < win; ++i) frame[i] = signal[t * hop + i] * window[i];
      fft.forward(frame, fr, fi);
      for (std::size_t k = 0; k < bins; ++k) {
        const double a = std::hypot(fr[k], fi[k]);
        const double c = a > 1e-12 ? fr[k] / a : 1.0, sn = a > 1e-12 ? fi[k] / a : 0.0;
        re[t * bins + k] = mag(k, t) * c;
        im[t * bins + k] = mag(k, t) * sn;
      }
    }
  }
  synthesize();

  double peak = 0.0;
  for (double v : signal) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (auto& v : signal) v *= opt.peak / peak;
  return {std::move(signal), mel.sample_rate};
}

// ---------------------------------------------------------------- bank and file export

// Every item of every bank entry, as `entry_EEEE_item_II.<format>`.
// Returns the files written.
inline std::vector<std::filesystem::path> export_bank(const std::filesystem::path& bank_dir,
                                                      const std::filesystem::path& out, const std::string& format,
                                                      const MelConfig& mel = {}) {
  const auto bank = MemoryBank::load(bank_dir);
  std::vector<std::filesystem::path> written;
  std::filesystem::create_directories(out);
  for (std::size_t e = 0; e < bank.size(); ++e) {
    const auto items = unstack(bank.entries()[e].batch, mel);
    for (std::size_t i = 0; i < items.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "entry_%04zu_item_%02zu.%s", e, i, format.c_str());
      const auto path = out / name;
      if (format == "png")
        write_png(path, items[i]);
      else
        write_wav(path, griffin_lim(items[i], mel));
      written.push_back(path);
    }
  }
  return written;
}

// `input` is a bank directory (holding manifest.json) or a spectrogram stem.
inline std::vector<std::filesystem::path> export_artifacts(const std::filesystem::path& input,
                                                           const std::filesystem::path& out, const std::string& format) {
  if (format != "png" && format != "wav") throw ConfigError("export format must be png or wav, got '" + format + "'");
  if (std::filesystem::is_directory(input)) return export_bank(input, out, format);
  std::filesystem::path stem = input;
  if (stem.extension() == ".json" || stem.extension() == ".f32") stem.replace_extension();
  if (!std::filesystem::exists(stem.string() + ".json")) throw ConfigError("no bank or spectrogram at " + input.string());
  const auto s = load_spectrogram(stem);
  std::filesystem::create_directories(out);
  const auto path = out / (stem.filename().string() + "." + format);
  if (format == "png")
    write_png(path, s);
  else
    write_wav(path, griffin_lim(s));
  return {path};
}

}  // namespace frami
