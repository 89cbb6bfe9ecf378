#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pnp {

constexpr double kDefaultSampleRate = 22050.0;

/// Mono sample sequence at a fixed rate. length == round(duration * rate).
struct AudioBuffer {
  std::vector<double> samples;
  double sample_rate = kDefaultSampleRate;

  double duration() const {
    return sample_rate > 0.0 ? double(samples.size()) / sample_rate : 0.0;
  }
  double peak() const;
  bool all_finite() const;
};

/// Writes mono 16-bit PCM little-endian WAV, peak-scaled to -1 dBFS.
/// Export scaling is applied to the file only; the buffer is untouched.
void write_wav(const AudioBuffer& audio, const std::string& path);

/// Reads a mono 16-bit PCM WAV written by write_wav (or compatible).
AudioBuffer read_wav(const std::string& path);

}  // namespace pnp
