#include "pnp/audio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pnp {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
         std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::uint16_t get_u16(const unsigned char* p) {
  return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
}

}  // namespace

double AudioBuffer::peak() const {
  double p = 0.0;
  for (double s : samples) p = std::max(p, std::abs(s));
  return p;
}

bool AudioBuffer::all_finite() const {
  for (double s : samples) {
    if (!std::isfinite(s)) return false;
  }
  return true;
}

void write_wav(const AudioBuffer& audio, const std::string& path) {
  const double peak = audio.peak();
  const double target = std::pow(10.0, -1.0 / 20.0);  // -1 dBFS
  const double scale = peak > 0.0 ? target / peak : 0.0;

  const std::uint32_t n = std::uint32_t(audio.samples.size());
  const std::uint32_t rate = std::uint32_t(std::lround(audio.sample_rate));
  const std::uint32_t data_bytes = n * 2;

  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, rate);
  put_u32(out, rate * 2);  // byte rate
  put_u16(out, 2);         // block align
  put_u16(out, 16);        // bits per sample
  out += "data";
  put_u32(out, data_bytes);
  for (std::uint32_t i = 0; i < n; ++i) {
    double v = audio.samples[i] * scale;
    v = std::max(-1.0, std::min(1.0, v));
    const auto q = std::int16_t(std::lround(v * 32767.0));
    put_u16(out, std::uint16_t(q));
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_wav: cannot open " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw std::runtime_error("write_wav: write failed for " + path);
}

AudioBuffer read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || bytes.compare(0, 4, "RIFF") != 0 ||
      bytes.compare(8, 4, "WAVE") != 0) {
    throw std::runtime_error("read_wav: not a RIFF/WAVE file: " + path);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = 12;
  double rate = 0.0;
  int channels = 0, bits = 0;
  AudioBuffer audio;
  bool got_fmt = false, got_data = false;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const std::uint32_t sz = get_u32(p + pos + 4);
    pos += 8;
    if (pos + sz > bytes.size()) break;
    if (id == "fmt ") {
      if (sz < 16) throw std::runtime_error("read_wav: short fmt chunk");
      const int format = get_u16(p + pos);
      channels = get_u16(p + pos + 2);
      rate = double(get_u32(p + pos + 4));
      bits = get_u16(p + pos + 14);
      if (format != 1 || channels != 1 || bits != 16) {
        throw std::runtime_error("read_wav: expected mono 16-bit PCM: " + path);
      }
      got_fmt = true;
    } else if (id == "data") {
      const std::size_t n = sz / 2;
      audio.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto q = std::int16_t(get_u16(p + pos + 2 * i));
        audio.samples[i] = double(q) / 32767.0;
      }
      got_data = true;
    }
    pos += sz + (sz & 1);
  }
  if (!got_fmt || !got_data) {
    throw std::runtime_error("read_wav: missing fmt or data chunk: " + path);
  }
  audio.sample_rate = rate;
  return audio;
}

}  // namespace pnp
