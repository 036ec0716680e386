#pragma once

// Binary payloads (32-bit little-endian floats), SHA-256 digests and
// atomic file writes shared by the spectrogram, bank and checkpoint formats.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "frami/audio.hpp"
#include "frami/error.hpp"

namespace frami {

using json = nlohmann::json;

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw IntegrityError("sha256 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

// Values rounded to float32 and serialized little-endian.
inline std::string encode_f32(std::span<const double> values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  return out;
}

inline std::vector<double> decode_f32(std::string_view bytes) {
  if (bytes.size() % 4 != 0) throw IntegrityError("payload length " + std::to_string(bytes.size()) + " not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[i * 4 + b]) << (8 * b);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

inline void round_to_f32(std::span<double> values) {
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Writes to a sibling temporary and renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestionError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw IngestionError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------- spectrogram files

// `<stem>.f32` holds the [F, T] payload; `<stem>.json` the sidecar record.
inline void save_spectrogram(const std::filesystem::path& stem, const Spectrogram& s) {
  const std::string payload = encode_f32(s.data);
  const json sidecar = {{"mel_bins", s.mel_bins}, {"frames", s.frames},       {"hop_ms", s.hop_ms},
                        {"win_ms", s.win_ms},     {"log_scaled", s.log_scaled}, {"sha256", sha256_hex(payload)}};
  write_file_atomic(stem.string() + ".f32", payload);
  write_json(stem.string() + ".json", sidecar);
}

inline Spectrogram load_spectrogram(const std::filesystem::path& stem) {
  const json sidecar = read_json(stem.string() + ".json");
  const std::string payload = read_file(stem.string() + ".f32");
  if (sha256_hex(payload) != sidecar.at("sha256").get<std::string>())
    throw IntegrityError("payload hash mismatch for " + stem.string());
  Spectrogram s;
  s.mel_bins = sidecar.at("mel_bins");
  s.frames = sidecar.at("frames");
  s.hop_ms = sidecar.at("hop_ms");
  s.win_ms = sidecar.at("win_ms");
  s.log_scaled = sidecar.at("log_scaled");
  s.data = decode_f32(payload);
  if (s.data.size() != s.mel_bins * s.frames)
    throw IntegrityError("payload holds " + std::to_string(s.data.size()) + " values, sidecar says " +
                         std::to_string(s.mel_bins) + "x" + std::to_string(s.frames));
  return s;
}

}  // namespace frami
